pub mod cli;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod evalkit;
pub mod neural;
pub mod qcore;
pub mod rewardmodel;
pub mod stacklang;
pub mod tabular;
pub mod trainer;

pub use error::{Error, Result};
