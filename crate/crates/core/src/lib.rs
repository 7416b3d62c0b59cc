pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod degrade;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod fusion;
pub mod gradsuite;
pub mod models;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::ParamSet;
pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
