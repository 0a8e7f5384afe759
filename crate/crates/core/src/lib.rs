pub mod autodiff;
pub mod charts;
pub mod data;
pub mod error;
pub mod flow;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
