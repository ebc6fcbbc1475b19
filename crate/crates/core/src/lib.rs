//! Blind hierarchical deconvolution of 1-D signals.
//!
//! A blurred, noisy signal `g = A_τ f + e` is inverted without knowing the
//! Gaussian blur width `τ`. The signal gets a zero-mean Gaussian prior with a
//! non-stationary Matérn covariance whose log length-scale field carries a
//! Cauchy or total-variation difference prior. Hyperparameters
//! `(log ℓ, log τ)` are fitted by maximising their marginal posterior with a
//! box-constrained quasi-Newton method; the signal is then read off the
//! closed-form Gaussian posterior at those values.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod experiments;
pub mod forward;
pub mod hyperpriors;
pub mod inference;
pub mod numerics;
pub mod optimizer;

pub use covariance::{Grid, LengthScaleField, MaternConfig};
pub use error::{Error, Result};
pub use forward::{Dataset, SignalSpec};
pub use hyperpriors::{PriorConfig, PriorKind};
pub use inference::{HyperParams, Reconstruction};
pub use optimizer::{GradientMode, OptConfig, OptResult};
