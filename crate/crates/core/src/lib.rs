pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod hash;
pub mod lm;
pub mod mixture;
pub mod model;
pub mod nn;
pub mod optim;
pub mod qformer;
pub mod rng;
pub mod stubs;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
