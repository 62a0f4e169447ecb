pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod editing;
pub mod entropy;
pub mod error;
pub mod harness;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod quantization;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
