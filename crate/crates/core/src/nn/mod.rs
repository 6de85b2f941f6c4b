//! A small differentiable CPU network: conv encoder with projection head,
//! linear heads, SGD, gradient checking and checkpoints.

pub mod checkpoint;
pub mod encoder;
pub mod gradcheck;
pub mod head;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use encoder::{batch_from_images, Encoder, EncoderConfig, EncoderOutput, ForwardCache, Mode, NormKind};
pub use gradcheck::{grad_check, GradCheckReport};
pub use head::LinearHead;
pub use optim::{Sgd, SgdConfig};
pub use params::{Grads, Param, ParamSet};
pub use tensor::{Scalar, Tensor};
