pub mod cetmae;
pub mod checkpoint;
pub mod data;
pub mod e2t;
pub mod error;
pub mod masking;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod tensor;

pub use error::{Error, ErrorKind, Result};
