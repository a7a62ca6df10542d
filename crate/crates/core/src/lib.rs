pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod runner;
pub mod trainer;

pub use error::{DinError, Result};
