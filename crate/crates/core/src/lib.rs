pub mod ablation;
pub mod backbone;
pub mod checkpoint;
pub mod compa;
pub mod config;
pub mod data_model;
pub mod error;
pub mod imaging;
pub mod init;
pub mod med_prior;
pub mod model;
pub mod retrieval;
pub mod tensor_ops;
pub mod training;

pub use error::{Error, Result};
