pub mod analytics;
pub mod cli;
pub mod config;
pub mod contrastive;
pub mod dataio;
pub mod error;
pub mod imageops;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod search;
pub mod sseval;

pub use error::{Error, Result};
