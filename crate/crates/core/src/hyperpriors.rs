//! Difference priors on the log length-scale field and the uniform prior on
//! `log τ`.
//!
//! Only the increments `d_i = log ℓ_i - log ℓ_{i-1}` carry prior mass; the
//! first value is left flat and is held in range by the optimizer box.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    CauchyDiff,
    TvDiff,
}

impl PriorKind {
    pub fn label(&self) -> &'static str {
        match self {
            PriorKind::CauchyDiff => "cauchy",
            PriorKind::TvDiff => "tv",
        }
    }
}

impl std::str::FromStr for PriorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cauchy" | "cauchy_diff" => Ok(PriorKind::CauchyDiff),
            "tv" | "tv_diff" => Ok(PriorKind::TvDiff),
            other => Err(Error::Config(format!("unknown prior kind {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    pub kind: PriorKind,
    pub alpha: f64,
    #[serde(default = "default_tv_eps")]
    pub tv_smoothing_eps: f64,
    #[serde(default = "default_log_tau_bounds")]
    pub log_tau_bounds: (f64, f64),
}

fn default_tv_eps() -> f64 {
    1e-6
}

fn default_log_tau_bounds() -> (f64, f64) {
    (-5.0, 0.0)
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: PriorKind::CauchyDiff,
            alpha: 1.0,
            tv_smoothing_eps: default_tv_eps(),
            log_tau_bounds: default_log_tau_bounds(),
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.tv_smoothing_eps >= 0.0) {
            return Err(Error::Config("tv_smoothing_eps must be >= 0".into()));
        }
        if !(self.log_tau_bounds.0 < self.log_tau_bounds.1) {
            return Err(Error::Config("log_tau_bounds must be ordered".into()));
        }
        Ok(())
    }

    /// Log-density of the selected difference prior.
    pub fn field_logpdf(&self, log_ell: &[f64]) -> Result<f64> {
        match self.kind {
            PriorKind::CauchyDiff => cauchy_diff_logpdf(log_ell, self.alpha),
            PriorKind::TvDiff => tv_diff_logpdf(log_ell, self.alpha, self.tv_smoothing_eps),
        }
    }

    /// Gradient of [`Self::field_logpdf`] with respect to `log_ell`.
    pub fn field_gradient(&self, log_ell: &[f64]) -> Result<Vec<f64>> {
        check_len(log_ell)?;
        let alpha = self.alpha;
        let eps = self.tv_smoothing_eps;
        // derivative of the per-increment log-density
        let dterm = |d: f64| match self.kind {
            PriorKind::CauchyDiff => -2.0 * d / (alpha * alpha + d * d),
            PriorKind::TvDiff => {
                let r = (d * d + eps * eps).sqrt();
                if r == 0.0 {
                    0.0
                } else {
                    -d / (r * alpha)
                }
            }
        };
        let mut grad = vec![0.0; log_ell.len()];
        for i in 1..log_ell.len() {
            let g = dterm(log_ell[i] - log_ell[i - 1]);
            grad[i] += g;
            grad[i - 1] -= g;
        }
        Ok(grad)
    }
}

fn check_len(log_ell: &[f64]) -> Result<()> {
    if log_ell.len() < 2 {
        return Err(Error::TooShort(log_ell.len()));
    }
    Ok(())
}

fn increments(log_ell: &[f64]) -> impl Iterator<Item = f64> + '_ {
    log_ell.windows(2).map(|w| w[1] - w[0])
}

/// `Σ_i [-log(πα) - log(1 + (d_i/α)²)]`.
pub fn cauchy_diff_logpdf(log_ell: &[f64], alpha: f64) -> Result<f64> {
    check_len(log_ell)?;
    let norm = -(PI * alpha).ln();
    Ok(increments(log_ell)
        .map(|d| norm - (d / alpha).powi(2).ln_1p())
        .sum())
}

/// `Σ_i [-log(2α) - sqrt(d_i² + eps²)/α]`; `eps = 0` is the exact Laplace
/// density.
pub fn tv_diff_logpdf(log_ell: &[f64], alpha: f64, eps: f64) -> Result<f64> {
    check_len(log_ell)?;
    let norm = -(2.0 * alpha).ln();
    Ok(increments(log_ell)
        .map(|d| norm - (d * d + eps * eps).sqrt() / alpha)
        .sum())
}

/// Uniform log-density on `bounds`, `-∞` outside.
pub fn log_tau_logpdf(log_tau: f64, bounds: (f64, f64)) -> f64 {
    if log_tau >= bounds.0 && log_tau <= bounds.1 {
        -(bounds.1 - bounds.0).ln()
    } else {
        f64::NEG_INFINITY
    }
}
