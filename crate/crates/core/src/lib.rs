pub mod cli;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod finetune;
pub mod model;
pub mod optim;
pub mod pretrain;
pub mod quantizer;
pub mod tensorcore;

pub use error::{Error, Result};
