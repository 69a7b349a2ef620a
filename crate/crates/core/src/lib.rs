pub mod correlation;
pub mod dataset;
pub mod estimator;
pub mod error;
pub mod features;
pub mod geometry;
pub mod imaging;
pub mod metrics;

pub use error::{Error, Result};
