//! Gaussian marginal likelihood of the hyperparameters and the closed-form
//! conditional posterior of the signal.
//!
//! With `f ~ N(0, C)`, `g = A f + e` and `e ~ N(0, σ² I)`, the data covariance
//! is `S = A C Aᵀ + σ² I`. Every evaluation factors `S` once and reuses the
//! factor for the log-determinant, the quadratic form and, when requested,
//! the gradient
//!
//! ```text
//! ∂L/∂θ = ½ [αᵀ (∂S/∂θ) α - tr(S⁻¹ ∂S/∂θ)],   α = S⁻¹ g.
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{build_with_derivative, Grid, LengthScaleField, MaternConfig};
use crate::error::{Error, Result};
use crate::forward::operator_with_log_tau_derivative;
use crate::hyperpriors::{log_tau_logpdf, PriorConfig};
use crate::numerics::{factor, SpdFactor};

/// Optimisation state: one log length-scale per grid point plus `log τ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub log_ell: LengthScaleField,
    pub log_tau: f64,
}

impl HyperParams {
    pub fn new(log_ell: Vec<f64>, log_tau: f64) -> Self {
        HyperParams {
            log_ell: LengthScaleField(log_ell),
            log_tau,
        }
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.exp()
    }

    /// Flat parameter vector `(log ℓ_1, ..., log ℓ_n, log τ)`.
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.log_ell.0.clone();
        v.push(self.log_tau);
        v
    }

    pub fn from_slice(theta: &[f64]) -> Self {
        let (field, tau) = theta.split_at(theta.len() - 1);
        HyperParams::new(field.to_vec(), tau[0])
    }
}

/// How the length-scale field is parametrised during fitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FieldModel {
    /// One free log length-scale per grid point.
    NonStationary,
    /// A single scalar log length-scale shared by all points.
    Stationary,
}

/// Fitted signal: posterior mean and covariance at the MAP hyperparameters.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub posterior_mean: Vec<f64>,
    pub posterior_cov: DMatrix<f64>,
    pub hp_map: HyperParams,
    pub tau_hat: f64,
    pub alpha_used: Option<f64>,
    pub final_objective: f64,
    pub iterations: usize,
    pub jitter_used: f64,
    /// Optimizer objective after each accepted step; empty when the
    /// hyperparameters were supplied directly.
    pub objective_trace: Vec<f64>,
}

impl Reconstruction {
    pub fn var_diag(&self) -> Vec<f64> {
        self.posterior_cov
            .diagonal()
            .iter()
            .map(|v| v.max(0.0))
            .collect()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.var_diag().iter().map(|v| v.sqrt()).collect()
    }

    pub fn to_file(&self, full_cov: bool) -> ReconstructionFile {
        ReconstructionFile {
            mean: self.posterior_mean.clone(),
            var_diag: self.var_diag(),
            tau_hat: self.tau_hat,
            alpha: self.alpha_used,
            objective: self.final_objective,
            iterations: self.iterations,
            log_ell: self.hp_map.log_ell.0.clone(),
            cov: full_cov.then(|| {
                self.posterior_cov
                    .row_iter()
                    .map(|r| r.iter().copied().collect())
                    .collect()
            }),
        }
    }
}

/// On-disk form of a [`Reconstruction`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReconstructionFile {
    pub mean: Vec<f64>,
    pub var_diag: Vec<f64>,
    pub tau_hat: f64,
    pub alpha: Option<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub log_ell: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Config(format!(
            "noise sigma must be positive, got {sigma}"
        )));
    }
    Ok(())
}

fn check_square(m: &DMatrix<f64>, n: usize) -> Result<()> {
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: if m.nrows() != n { m.nrows() } else { m.ncols() },
        });
    }
    Ok(())
}

/// `S = A C Aᵀ + σ² I`, exactly symmetric.
fn data_covariance(a: &DMatrix<f64>, c: &DMatrix<f64>, sigma2: f64) -> DMatrix<f64> {
    let mut s = a * c * a.transpose();
    let n = s.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (s[(i, j)] + s[(j, i)]);
            s[(i, j)] = v;
            s[(j, i)] = v;
        }
        s[(j, j)] += sigma2;
    }
    s
}

struct Factored {
    factor: SpdFactor,
    alpha: DVector<f64>,
    loglik: f64,
}

fn factor_and_score(
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma2: f64,
) -> Result<Factored> {
    let n = g.len();
    check_square(a, n)?;
    check_square(c, n)?;
    let s = data_covariance(a, c, sigma2);
    let factor = factor(&s)?;
    let alpha = factor.solve(g)?;
    let loglik = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * factor.log_det() - 0.5 * g.dot(&alpha);
    Ok(Factored {
        factor,
        alpha,
        loglik,
    })
}

/// `log N(g; 0, A C Aᵀ + σ² I)` for explicit matrices.
pub fn gaussian_marginal_loglik(
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    Ok(factor_and_score(g, a, c, sigma2)?.loglik)
}

/// Conditional posterior `N(mean, cov)` of `f` for explicit matrices:
/// `mean = C Aᵀ S⁻¹ g`, `cov = C - C Aᵀ S⁻¹ A C`. Returns the jitter used
/// when factoring `S`.
pub fn gaussian_posterior(
    g: &DVector<f64>,
    a: &DMatrix<f64>,
    c: &DMatrix<f64>,
    sigma2: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, f64, f64)> {
    let fac = factor_and_score(g, a, c, sigma2)?;
    let ca_t = c * a.transpose();
    let mean = &ca_t * &fac.alpha;
    let gain = fac.factor.solve_matrix(&ca_t.transpose())?;
    let mut cov = c - &ca_t * gain;
    let n = cov.nrows();
    for j in 0..n {
        for i in 0..j {
            let v = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    Ok((mean, cov, fac.factor.jitter_used(), fac.loglik))
}

/// Everything needed to evaluate the hyperparameter objective for one
/// dataset.
#[derive(Clone, Debug)]
pub struct Problem<'a> {
    pub g: &'a [f64],
    pub grid: &'a Grid,
    pub sigma: f64,
    pub matern: MaternConfig,
    pub normalize_operator: bool,
}

impl<'a> Problem<'a> {
    pub fn new(g: &'a [f64], grid: &'a Grid, sigma: f64, matern: MaternConfig) -> Self {
        Problem {
            g,
            grid,
            sigma,
            matern,
            normalize_operator: true,
        }
    }

    fn validate(&self, hp: &HyperParams) -> Result<()> {
        check_sigma(self.sigma)?;
        let n = self.grid.len();
        if self.g.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: self.g.len(),
            });
        }
        if hp.log_ell.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: hp.log_ell.len(),
            });
        }
        Ok(())
    }

    pub fn marginal_loglik(&self, hp: &HyperParams) -> Result<f64> {
        self.validate(hp)?;
        let (a, _) =
            operator_with_log_tau_derivative(self.grid, hp.tau(), self.normalize_operator)?;
        let (c, _) = build_with_derivative(self.grid, hp.log_ell.as_slice(), &self.matern, false)?;
        let g = DVector::from_column_slice(self.g);
        gaussian_marginal_loglik(&g, &a, &c, self.sigma * self.sigma)
    }

    /// Marginal log-likelihood and its gradient in the flat layout of
    /// [`HyperParams::to_vec`].
    pub fn marginal_loglik_with_gradient(&self, hp: &HyperParams) -> Result<(f64, Vec<f64>)> {
        self.validate(hp)?;
        let n = self.grid.len();
        let (a, da) =
            operator_with_log_tau_derivative(self.grid, hp.tau(), self.normalize_operator)?;
        let (c, d) = build_with_derivative(self.grid, hp.log_ell.as_slice(), &self.matern, true)?;
        let d = d.expect("derivative requested");
        let g = DVector::from_column_slice(self.g);
        let fac = factor_and_score(&g, &a, &c, self.sigma * self.sigma)?;

        let beta = a.transpose() * &fac.alpha;
        let p = fac.factor.solve_matrix(&a)?; // S⁻¹ A
        let w = a.transpose() * &p; // Aᵀ S⁻¹ A

        let mut grad = vec![0.0; n + 1];
        for (k, gk) in grad.iter_mut().take(n).enumerate() {
            let mut quad = 0.0;
            let mut trace = 0.0;
            for j in 0..n {
                let dkj = d[(k, j)];
                quad += dkj * beta[j];
                trace += w[(k, j)] * dkj;
            }
            *gk = beta[k] * quad - trace;
        }

        let c_beta = &c * &beta;
        let da_t_alpha = da.transpose() * &fac.alpha;
        let pc = p * &c;
        grad[n] = da_t_alpha.dot(&c_beta) - da.component_mul(&pc).sum();
        Ok((fac.loglik, grad))
    }

    pub fn hyper_log_posterior(&self, hp: &HyperParams, prior: &PriorConfig) -> Result<f64> {
        let lik = self.marginal_loglik(hp)?;
        Ok(lik
            + prior.field_logpdf(hp.log_ell.as_slice())?
            + log_tau_logpdf(hp.log_tau, prior.log_tau_bounds))
    }

    pub fn conditional_posterior(&self, hp: &HyperParams) -> Result<Reconstruction> {
        self.validate(hp)?;
        let (a, _) =
            operator_with_log_tau_derivative(self.grid, hp.tau(), self.normalize_operator)?;
        let (c, _) = build_with_derivative(self.grid, hp.log_ell.as_slice(), &self.matern, false)?;
        let g = DVector::from_column_slice(self.g);
        let (mean, cov, jitter, loglik) = gaussian_posterior(&g, &a, &c, self.sigma * self.sigma)?;
        Ok(Reconstruction {
            posterior_mean: mean.iter().copied().collect(),
            posterior_cov: cov,
            hp_map: hp.clone(),
            tau_hat: hp.tau(),
            alpha_used: None,
            final_objective: loglik,
            iterations: 0,
            jitter_used: jitter,
            objective_trace: Vec::new(),
        })
    }
}

pub fn marginal_loglik(
    g: &[f64],
    hp: &HyperParams,
    grid: &Grid,
    sigma: f64,
    cfg: &MaternConfig,
) -> Result<f64> {
    Problem::new(g, grid, sigma, *cfg).marginal_loglik(hp)
}

pub fn hyper_log_posterior(
    g: &[f64],
    hp: &HyperParams,
    prior: &PriorConfig,
    grid: &Grid,
    sigma: f64,
    cfg: &MaternConfig,
) -> Result<f64> {
    Problem::new(g, grid, sigma, *cfg).hyper_log_posterior(hp, prior)
}

pub fn conditional_posterior(
    g: &[f64],
    hp_map: &HyperParams,
    grid: &Grid,
    sigma: f64,
    cfg: &MaternConfig,
) -> Result<Reconstruction> {
    Problem::new(g, grid, sigma, *cfg).conditional_posterior(hp_map)
}

/// Hyperparameter log-posterior seen as a function of a flat parameter
/// vector, for either field model. A `None` prior leaves the field flat.
#[derive(Clone, Debug)]
pub struct HyperObjective<'a> {
    pub problem: Problem<'a>,
    pub prior: Option<PriorConfig>,
    pub model: FieldModel,
    pub log_tau_bounds: (f64, f64),
}

impl<'a> HyperObjective<'a> {
    pub fn dim(&self) -> usize {
        match self.model {
            FieldModel::NonStationary => self.problem.grid.len() + 1,
            FieldModel::Stationary => 2,
        }
    }

    /// Expands a flat parameter vector into full hyperparameters.
    pub fn expand(&self, theta: &[f64]) -> HyperParams {
        match self.model {
            FieldModel::NonStationary => HyperParams::from_slice(theta),
            FieldModel::Stationary => {
                HyperParams::new(vec![theta[0]; self.problem.grid.len()], theta[1])
            }
        }
    }

    fn prior_terms(&self, hp: &HyperParams) -> Result<f64> {
        let field = match (&self.prior, self.model) {
            (Some(p), FieldModel::NonStationary) => p.field_logpdf(hp.log_ell.as_slice())?,
            _ => 0.0,
        };
        Ok(field + log_tau_logpdf(hp.log_tau, self.log_tau_bounds))
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let hp = self.expand(theta);
        Ok(self.problem.marginal_loglik(&hp)? + self.prior_terms(&hp)?)
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let hp = self.expand(theta);
        let (lik, mut grad) = self.problem.marginal_loglik_with_gradient(&hp)?;
        let value = lik + self.prior_terms(&hp)?;
        let n = self.problem.grid.len();
        match self.model {
            FieldModel::NonStationary => {
                if let Some(p) = &self.prior {
                    let pg = p.field_gradient(hp.log_ell.as_slice())?;
                    for (g, v) in grad.iter_mut().zip(pg) {
                        *g += v;
                    }
                }
                Ok((value, grad))
            }
            FieldModel::Stationary => {
                let field: f64 = grad[..n].iter().sum();
                Ok((value, vec![field, grad[n]]))
            }
        }
    }
}
