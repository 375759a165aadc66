pub mod augment;
pub mod autodiff;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod frontend;
pub mod manifest;
pub mod metrics;
pub mod parallel;
pub mod pipeline;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod synthetic;

pub use error::{Error, Result};
