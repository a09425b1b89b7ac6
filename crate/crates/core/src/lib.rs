pub mod alignment;
pub mod anatomy;
pub mod corpus;
pub mod decoder;
pub mod diagnostics;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod model;
pub mod rougeval;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{Ablation, Model};
