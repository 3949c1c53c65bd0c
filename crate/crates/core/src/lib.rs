pub mod adaptation;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod learners;
pub mod memory;
pub mod models;
pub mod optim;
pub mod seeds;
pub mod taskgen;

pub use error::{Error, Result};
