pub mod augment;
pub mod autodiff;
pub mod batch;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod features;
pub mod mdn;
pub mod model;
pub mod multitask;
pub mod numeric;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
