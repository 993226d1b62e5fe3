//! Hierarchical attention mining for weakly-supervised localization.

pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
