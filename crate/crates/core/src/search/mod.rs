//! Augmentation policy search: the fold-based TPE search and the RandAugment
//! grid search.

pub mod loss;
pub mod randaugment;
pub mod selfaugment;
pub mod tpe;

pub use loss::{policy_loss, FoldModel, LossKind, LossNormalizer, RawLosses};
pub use randaugment::{run_selfrandaugment, GridResult, RandSearchOutcome};
pub use selfaugment::{
    prepare, run_selfaugment, search, select_base_policy, BasePolicyMode, Prepared, SearchConfig, SearchOutcome,
    SelfAugmentRun, Trial,
};
pub use tpe::{minimize, tpe_suggest, Dim, Observation, Space, TpeConfig};
