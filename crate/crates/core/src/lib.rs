//! Temporal transformer aggregation with progressive multi-step prediction
//! for online action anticipation, plus the baselines, losses, metrics and
//! synthetic data needed to train and compare them.

pub mod baselines;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod ppm;
pub mod training;
pub mod ttm;

pub use error::{Error, Result};
