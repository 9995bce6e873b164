pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod depth;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod guidance;
pub mod metrics;
mod kernels;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod prefill;
pub mod tdu;
pub mod tensor;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ModelParams, ParamVars};
pub use tensor::{Shape, Tensor};
