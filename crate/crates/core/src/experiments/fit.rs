use crate::covariance::MaternConfig;
use crate::error::{Error, Result};
use crate::forward::Dataset;
use crate::hyperpriors::PriorConfig;
use crate::inference::{FieldModel, HyperObjective, HyperParams, Problem, Reconstruction};
use crate::optimizer::{maximize, maximize_in_box, OptConfig, OptResult};

/// Builds the hyperparameter objective for a dataset.
pub fn objective<'a>(
    dataset: &'a Dataset,
    prior: Option<PriorConfig>,
    model: FieldModel,
    opt: &OptConfig,
    matern: &MaternConfig,
) -> HyperObjective<'a> {
    HyperObjective {
        problem: Problem::new(
            &dataset.measurements,
            &dataset.coarse_grid,
            dataset.noise_sigma,
            *matern,
        ),
        prior,
        model,
        log_tau_bounds: prior.map(|p| p.log_tau_bounds).unwrap_or(opt.box_log_tau),
    }
}

/// Reconstructs at the optimizer's maximiser and copies its diagnostics.
pub fn reconstruct_at(
    objective: &HyperObjective<'_>,
    result: &OptResult,
    alpha: Option<f64>,
) -> Result<Reconstruction> {
    let hp = objective.expand(&result.theta);
    let mut rec = objective.problem.conditional_posterior(&hp)?;
    rec.alpha_used = alpha;
    rec.final_objective = result.final_objective;
    rec.iterations = result.iterations;
    rec.objective_trace = result.objective_trace.clone();
    Ok(rec)
}

/// Two-step estimate with a per-point length-scale field: MAP
/// hyperparameters, then the conditional posterior at them.
pub fn fit_nonstationary(
    dataset: &Dataset,
    prior: &PriorConfig,
    opt: &OptConfig,
    matern: &MaternConfig,
    seed: u64,
) -> Result<Reconstruction> {
    prior.validate()?;
    matern.validate()?;
    let obj = objective(
        dataset,
        Some(*prior),
        FieldModel::NonStationary,
        opt,
        matern,
    );
    let result = maximize(&obj, opt, seed)?;
    reconstruct_at(&obj, &result, Some(prior.alpha))
}

/// As [`fit_nonstationary`], but starting the optimizer at `start` instead of
/// the configured constant initial point.
pub fn fit_nonstationary_from(
    dataset: &Dataset,
    prior: &PriorConfig,
    opt: &OptConfig,
    matern: &MaternConfig,
    seed: u64,
    start: &HyperParams,
) -> Result<Reconstruction> {
    prior.validate()?;
    matern.validate()?;
    opt.validate()?;
    let obj = objective(
        dataset,
        Some(*prior),
        FieldModel::NonStationary,
        opt,
        matern,
    );
    let x0 = start.to_vec();
    if x0.len() != obj.dim() {
        return Err(Error::DimensionMismatch {
            expected: obj.dim(),
            got: x0.len(),
        });
    }
    let (lo, hi) = opt.bounds(obj.dim());
    let result = maximize_in_box(&obj, &x0, &lo, &hi, opt, seed)?;
    reconstruct_at(&obj, &result, Some(prior.alpha))
}

/// Stationary baseline: only a scalar `log ℓ` and `log τ` are fitted, with no
/// difference prior.
pub fn run_baseline_stationary(
    dataset: &Dataset,
    opt: &OptConfig,
    matern: &MaternConfig,
    seed: u64,
) -> Result<Reconstruction> {
    matern.validate()?;
    let obj = objective(dataset, None, FieldModel::Stationary, opt, matern);
    let result = maximize(&obj, opt, seed)?;
    reconstruct_at(&obj, &result, None)
}

/// Relative MSE of a reconstruction against the dataset's coarse truth.
pub fn score(dataset: &Dataset, rec: &Reconstruction) -> Result<f64> {
    if !dataset.has_truth() {
        return Err(Error::Config("dataset carries no ground truth".into()));
    }
    crate::forward::relative_mse(&rec.posterior_mean, &dataset.coarse_truth)
}
