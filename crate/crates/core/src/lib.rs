//! Attention-based multiple instance learning with trainable prototypes.

pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod model;
pub mod numerics;
pub mod registry;
pub mod training;

pub use error::{Error, Result};
