//! Flow-matching generation of multivariate time series.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensorgrad`] dense `f64` tensors with a reverse-mode tape,
//! * [`datapipe`] synthetic sines, CSV ingestion, scaling, splits and masks,
//! * [`velocity_model`] the decomposed encoder velocity field `v(x_t, t)`,
//! * [`flow_train`] linear flow paths, the CFM/SFM losses and the optimizer loop,
//! * [`samplers`] Euler / Euler–Maruyama integration and masked conditional sampling,
//! * [`metrics`] discriminative, predictive, correlational and Context-FID scores.

pub mod datapipe;
pub mod error;
pub mod flow_train;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod samplers;
pub mod tensorgrad;
pub mod velocity_model;

pub use error::{Error, Result};
pub use tensorgrad::{Tape, Tensor, Var};
