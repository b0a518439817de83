pub mod cli;
pub mod data;
pub mod error;
pub mod finetune;
pub mod networks;
pub mod scheduler;
pub mod tensor;

pub use error::{Error, Result};
