//! Multi-head incremental person re-identification.

pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod images;
pub mod losses;
pub mod model;
pub mod nn;
pub mod schedule;
pub mod synthetic;
pub mod trainer;

pub use error::{ReidError, Result};
