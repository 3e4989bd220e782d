//! Numeric core for distribution auto-encoder regression.
//!
//! `no_std` with `alloc`. Everything that touches files, the terminal or
//! threads lives in the `dae` crate.
#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod data;
pub mod distributions;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod training;

pub use autodiff::{Parameter, Tape, Tensor, Var};
pub use distributions::{DistributionFamily, Rng};
pub use error::{Error, Result};
pub use data::{Dataset, FeatureRecord};
pub use metrics::EvalReport;
pub use model::{DaeModel, ModelKind, ReadoutMode};
pub use training::{LossKind, LossWeights, TrainConfig};
