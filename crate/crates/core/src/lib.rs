pub mod adapters;
pub mod checkpoint;
pub mod config;
pub mod cutout;
pub mod dataset;
pub mod error;
pub mod model;
pub mod objective;
pub mod pretrain;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Matrix, Tape, Var};
