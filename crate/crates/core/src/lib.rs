pub mod cli;
pub mod cmz;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod image;
pub mod jsonl;
pub mod loss;
pub mod msfe;
pub mod nn;
pub mod rng;
pub mod trainer;
pub mod wsll;

pub use error::{Error, Result};
