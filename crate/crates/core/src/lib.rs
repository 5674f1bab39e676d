//! Activity recognition from a wrist-worn ambient light sensor and
//! accelerometer, including two ways of using light during training to
//! improve accelerometer-only inference.

pub mod error;
pub mod evaluation;
pub mod ingest;
pub mod losses;
pub mod models;
pub mod nn;
pub mod study;
pub mod synthetic;
pub mod training;
pub mod windowing;

pub use error::{Error, Result};
