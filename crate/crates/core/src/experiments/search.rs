use serde::{Deserialize, Serialize};

use super::fit::{fit_nonstationary, fit_nonstationary_from, score};
use crate::covariance::MaternConfig;
use crate::error::{Error, Result};
use crate::forward::Dataset;
use crate::hyperpriors::{PriorConfig, PriorKind};
use crate::inference::{HyperParams, Reconstruction};
use crate::optimizer::OptConfig;

/// Fits one dataset at one prior setting.
pub trait AlphaFitter: Sync {
    fn fit(&self, dataset: &Dataset, prior: &PriorConfig) -> Result<Reconstruction>;
}

/// MAP hyperparameters followed by the conditional posterior.
#[derive(Clone, Debug)]
pub struct MapFitter {
    pub opt: OptConfig,
    pub matern: MaternConfig,
    pub seed: u64,
    /// Optional optimizer start; the configured constant point otherwise.
    pub start: Option<HyperParams>,
}

impl AlphaFitter for MapFitter {
    fn fit(&self, dataset: &Dataset, prior: &PriorConfig) -> Result<Reconstruction> {
        match &self.start {
            Some(hp) => {
                fit_nonstationary_from(dataset, prior, &self.opt, &self.matern, self.seed, hp)
            }
            None => fit_nonstationary(dataset, prior, &self.opt, &self.matern, self.seed),
        }
    }
}

/// Outcome of one grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrial {
    pub alpha: f64,
    pub rel_mse_percent: Option<f64>,
    pub tau_hat: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug)]
pub struct AlphaSearch {
    pub alpha_best: f64,
    pub best: Reconstruction,
    pub trials: Vec<AlphaTrial>,
}

/// Log-spaced grid of `n` values from `lo` to `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..n)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (n - 1) as f64))
        .collect()
}

pub fn default_alpha_grid() -> Vec<f64> {
    log_grid(1e-2, 1e2, 9)
}

pub(crate) fn check_alpha_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("alpha_grid is empty".into()));
    }
    if grid.iter().any(|a| !(*a > 0.0) || !a.is_finite()) {
        return Err(Error::Config("alpha_grid values must be positive".into()));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config(
            "alpha_grid must be strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Picks the grid value whose reconstruction is closest to the known truth.
///
/// Selection uses the ground truth and so only makes sense for simulated
/// data. Failed grid points are kept in `trials` and skipped; ties go to the
/// smaller α. Fails only if every grid point fails.
pub fn grid_search_alpha(
    dataset: &Dataset,
    prior_kind: PriorKind,
    alpha_grid: &[f64],
    opt: &OptConfig,
    matern: &MaternConfig,
) -> Result<AlphaSearch> {
    let fitter = MapFitter {
        opt: *opt,
        matern: *matern,
        seed: 0,
        start: None,
    };
    let base = PriorConfig {
        kind: prior_kind,
        ..PriorConfig::default()
    };
    grid_search_alpha_with(dataset, &base, alpha_grid, &fitter)
}

/// [`grid_search_alpha`] with an explicit fitter; `base` supplies every
/// prior setting except α.
pub fn grid_search_alpha_with(
    dataset: &Dataset,
    base: &PriorConfig,
    alpha_grid: &[f64],
    fitter: &dyn AlphaFitter,
) -> Result<AlphaSearch> {
    check_alpha_grid(alpha_grid)?;
    if !dataset.has_truth() {
        return Err(Error::Config(
            "alpha grid search needs the simulated ground truth".into(),
        ));
    }
    let mut trials = Vec::with_capacity(alpha_grid.len());
    let mut best: Option<(f64, f64, Reconstruction)> = None;
    let mut last_err = None;
    for &alpha in alpha_grid {
        let prior = PriorConfig { alpha, ..*base };
        let outcome = fitter
            .fit(dataset, &prior)
            .and_then(|rec| score(dataset, &rec).map(|m| (m, rec)));
        match outcome {
            Ok((mse, rec)) if mse.is_finite() => {
                trials.push(AlphaTrial {
                    alpha,
                    rel_mse_percent: Some(mse),
                    tau_hat: Some(rec.tau_hat),
                    error: None,
                });
                if best.as_ref().is_none_or(|(_, m, _)| mse < *m) {
                    best = Some((alpha, mse, rec));
                }
            }
            Ok((mse, _)) => {
                log::warn!("alpha {alpha}: non-finite relative MSE {mse}");
                trials.push(AlphaTrial {
                    alpha,
                    rel_mse_percent: None,
                    tau_hat: None,
                    error: Some(format!("non-finite relative MSE {mse}")),
                });
            }
            Err(e) => {
                log::warn!("alpha {alpha}: {e}");
                trials.push(AlphaTrial {
                    alpha,
                    rel_mse_percent: None,
                    tau_hat: None,
                    error: Some(e.to_string()),
                });
                last_err = Some(e);
            }
        }
    }
    match best {
        Some((alpha_best, _, best)) => Ok(AlphaSearch {
            alpha_best,
            best,
            trials,
        }),
        None => Err(last_err
            .unwrap_or_else(|| Error::NonFiniteObjective("no alpha produced a finite fit".into()))),
    }
}
