pub mod augmentation;
pub mod config;
pub mod dynamics;
pub mod env;
pub mod learner;
pub mod error;
pub mod nn;
pub mod persist;
pub mod pipeline;
pub mod rng;
pub mod rollout;
pub mod theory;
pub mod truncation;

pub use error::{Error, ErrorCategory, Result};
