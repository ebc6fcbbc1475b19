//! Box-constrained limited-memory quasi-Newton ascent.
//!
//! The search direction comes from the usual two-loop recursion restricted to
//! the free variables (those not pinned at a bound by the gradient). Each trial
//! point is projected back onto the box, and steps are accepted by a
//! backtracking Armijo test along the projected path, so every iterate is
//! feasible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::log_ell_cap;
use crate::error::{Error, Result};
use crate::inference::{HyperObjective, HyperParams};

/// A scalar function to maximise.
pub trait Objective: Sync {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> Result<f64>;

    /// Value and analytic gradient, if available.
    fn value_and_gradient(&self, _x: &[f64]) -> Option<Result<(f64, Vec<f64>)>> {
        None
    }
}

impl Objective for HyperObjective<'_> {
    fn dim(&self) -> usize {
        HyperObjective::dim(self)
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        HyperObjective::value(self, x)
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<Result<(f64, Vec<f64>)>> {
        Some(HyperObjective::value_and_gradient(self, x))
    }
}

/// Closure-backed objective, mostly for tests and small problems.
pub struct FnObjective<F, G = fn(&[f64]) -> Vec<f64>> {
    pub dim: usize,
    pub f: F,
    pub grad: Option<G>,
}

impl<F> FnObjective<F>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        FnObjective { dim, f, grad: None }
    }
}

impl<F, G> FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    pub fn with_gradient(dim: usize, f: F, grad: G) -> Self {
        FnObjective {
            dim,
            f,
            grad: Some(grad),
        }
    }
}

impl<F, G> Objective for FnObjective<F, G>
where
    F: Fn(&[f64]) -> f64 + Sync,
    G: Fn(&[f64]) -> Vec<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn value(&self, x: &[f64]) -> Result<f64> {
        Ok((self.f)(x))
    }

    fn value_and_gradient(&self, x: &[f64]) -> Option<Result<(f64, Vec<f64>)>> {
        self.grad.as_ref().map(|g| Ok(((self.f)(x), g(x))))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientMode {
    FiniteDifference,
    Analytic,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptConfig {
    pub max_iterations: usize,
    pub gradient_mode: GradientMode,
    pub fd_step: f64,
    /// Relative objective change below which the run stops.
    pub convergence_tol: f64,
    /// Number of stored curvature pairs.
    pub memory: usize,
    pub box_log_ell: (f64, f64),
    pub box_log_tau: (f64, f64),
    pub init_log_ell: f64,
    pub init_log_tau: f64,
    pub restarts: usize,
    /// Largest accepted analytic-vs-central-difference discrepancy at the
    /// start point; above it the run falls back to finite differences.
    pub gradient_check_tol: f64,
}

impl Default for OptConfig {
    fn default() -> Self {
        let cap = log_ell_cap();
        OptConfig {
            max_iterations: 2000,
            gradient_mode: GradientMode::Analytic,
            fd_step: 1e-5,
            convergence_tol: 1e-9,
            memory: 10,
            box_log_ell: (-cap, cap),
            box_log_tau: (-5.0, 0.0),
            init_log_ell: 0.0,
            init_log_tau: -1.5,
            restarts: 0,
            gradient_check_tol: 1e-4,
        }
    }
}

impl OptConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.fd_step > 0.0) {
            return bad("fd_step must be positive");
        }
        if self.memory == 0 {
            return bad("memory must be at least 1");
        }
        if !(self.convergence_tol > 0.0) {
            return bad("convergence_tol must be positive");
        }
        if !(self.box_log_ell.0 < self.box_log_ell.1) || !(self.box_log_tau.0 < self.box_log_tau.1)
        {
            return bad("box bounds must be ordered");
        }
        Ok(())
    }

    /// Box for the flat layout `(log ℓ_1..log ℓ_{dim-1}, log τ)`.
    pub fn bounds(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let mut lo = vec![self.box_log_ell.0; dim];
        let mut hi = vec![self.box_log_ell.1; dim];
        lo[dim - 1] = self.box_log_tau.0;
        hi[dim - 1] = self.box_log_tau.1;
        (lo, hi)
    }

    pub fn initial_point(&self, dim: usize) -> Vec<f64> {
        let mut x = vec![self.init_log_ell; dim];
        x[dim - 1] = self.init_log_tau;
        x
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptResult {
    /// Maximiser in the objective's flat layout.
    pub theta: Vec<f64>,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted step, starting with the initial point.
    pub objective_trace: Vec<f64>,
    /// True when analytic gradients were requested but failed the start-point
    /// check.
    pub fell_back_to_fd: bool,
}

impl OptResult {
    /// Reads `theta` as `(log ℓ_1..log ℓ_n, log τ)`.
    pub fn hp_map(&self) -> HyperParams {
        HyperParams::from_slice(&self.theta)
    }
}

/// Maximises `objective` over the hyperparameter box, with the layout
/// `(log ℓ_1..log ℓ_{dim-1}, log τ)`.
pub fn maximize(objective: &dyn Objective, cfg: &OptConfig, seed: u64) -> Result<OptResult> {
    cfg.validate()?;
    let dim = objective.dim();
    let (lo, hi) = cfg.bounds(dim);
    maximize_in_box(objective, &cfg.initial_point(dim), &lo, &hi, cfg, seed)
}

/// Maximises `objective` over an arbitrary box from `x0`. With restarts,
/// extra runs start from seeded Gaussian perturbations of `x0` and the best
/// result wins (earliest on ties).
pub fn maximize_in_box(
    objective: &dyn Objective,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &OptConfig,
    seed: u64,
) -> Result<OptResult> {
    cfg.validate()?;
    let dim = objective.dim();
    if x0.len() != dim || lower.len() != dim || upper.len() != dim {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: x0.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.5).expect("valid normal");
    let mut starts = vec![project(x0, lower, upper)];
    for _ in 0..cfg.restarts {
        let x: Vec<f64> = x0.iter().map(|v| v + jitter.sample(&mut rng)).collect();
        starts.push(project(&x, lower, upper));
    }

    let mut best: Option<OptResult> = None;
    let mut first_err = None;
    for start in &starts {
        match run_single(objective, start, lower, upper, cfg) {
            Ok(mut res) => {
                if let Some(b) = &best {
                    // keep the restart trace monotone in best-so-far terms
                    if res.final_objective <= b.final_objective {
                        continue;
                    }
                    res.iterations += b.iterations;
                }
                best = Some(res);
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    best.ok_or_else(|| first_err.expect("at least one start"))
}

fn project(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| v.clamp(*l, *h))
        .collect()
}

/// Central differences, switching to a one-sided stencil at the box edges.
fn fd_gradient(
    objective: &dyn Objective,
    x: &[f64],
    f0: f64,
    step: f64,
    lower: &[f64],
    upper: &[f64],
) -> Result<Vec<f64>> {
    (0..x.len())
        .into_par_iter()
        .map(|k| {
            let eval = |v: f64| {
                let mut p = x.to_vec();
                p[k] = v;
                objective.value(&p)
            };
            let up = x[k] + step;
            let dn = x[k] - step;
            if up <= upper[k] && dn >= lower[k] {
                Ok((eval(up)? - eval(dn)?) / (2.0 * step))
            } else if dn >= lower[k] {
                Ok((f0 - eval(dn)?) / step)
            } else {
                Ok((eval(up)? - f0) / step)
            }
        })
        .collect()
}

/// Maximum discrepancy between the analytic gradient and central differences,
/// each component measured as `|a - fd| / max(|fd|, 1)`. Returns `None` when
/// the objective has no analytic gradient.
pub fn gradient_check(
    objective: &dyn Objective,
    point: &[f64],
    fd_step: f64,
) -> Option<Result<f64>> {
    let analytic = objective.value_and_gradient(point)?;
    Some((|| {
        let (f0, grad) = analytic?;
        let unbounded_lo = vec![f64::NEG_INFINITY; point.len()];
        let unbounded_hi = vec![f64::INFINITY; point.len()];
        let fd = fd_gradient(objective, point, f0, fd_step, &unbounded_lo, &unbounded_hi)?;
        Ok(grad
            .iter()
            .zip(&fd)
            .map(|(a, f)| (a - f).abs() / f.abs().max(1.0))
            .fold(0.0, f64::max))
    })())
}

struct Evaluator<'a> {
    objective: &'a dyn Objective,
    analytic: bool,
    fd_step: f64,
    lower: &'a [f64],
    upper: &'a [f64],
}

impl Evaluator<'_> {
    /// Objective and gradient in maximisation sign; non-finite values are
    /// reported as `None`.
    fn full(&self, x: &[f64]) -> Result<Option<(f64, Vec<f64>)>> {
        let (f, g) = if self.analytic {
            match self
                .objective
                .value_and_gradient(x)
                .expect("analytic gradient")
            {
                Ok(v) => v,
                Err(Error::NotPositiveDefinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            }
        } else {
            let f = match self.objective.value(x) {
                Ok(f) => f,
                Err(Error::NotPositiveDefinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            if !f.is_finite() {
                return Ok(None);
            }
            let g = match fd_gradient(self.objective, x, f, self.fd_step, self.lower, self.upper) {
                Ok(g) => g,
                Err(Error::NotPositiveDefinite(_)) => return Ok(None),
                Err(e) => return Err(e),
            };
            (f, g)
        };
        if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        Ok(Some((f, g)))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn run_single(
    objective: &dyn Objective,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    cfg: &OptConfig,
) -> Result<OptResult> {
    let n = x0.len();
    let mut analytic = cfg.gradient_mode == GradientMode::Analytic;
    let mut fell_back_to_fd = false;
    if analytic {
        match gradient_check(objective, x0, cfg.fd_step) {
            None => {
                analytic = false;
                fell_back_to_fd = true;
            }
            Some(Ok(d)) if d > cfg.gradient_check_tol => {
                log::warn!("analytic gradient discrepancy {d:.3e}; using finite differences");
                analytic = false;
                fell_back_to_fd = true;
            }
            Some(Ok(_)) => {}
            Some(Err(e)) => {
                return Err(Error::NonFiniteObjective(format!(
                    "at the initial point: {e}"
                )))
            }
        }
    }
    let eval = Evaluator {
        objective,
        analytic,
        fd_step: cfg.fd_step,
        lower,
        upper,
    };

    let mut x = x0.to_vec();
    let Some((mut f, mut g)) = eval.full(&x)? else {
        return Err(Error::NonFiniteObjective("at the initial point".into()));
    };
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(cfg.memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(cfg.memory);
    let mut converged = false;
    let mut small_changes = 0;
    let mut iterations = 0;

    // minimise -f internally: descent gradient is -g
    while iterations < cfg.max_iterations {
        // free set: not pinned at a bound by the ascent direction
        let free: Vec<bool> = (0..n)
            .map(|i| !((x[i] <= lower[i] && g[i] < 0.0) || (x[i] >= upper[i] && g[i] > 0.0)))
            .collect();
        let pg_norm = (0..n)
            .filter(|&i| free[i])
            .map(|i| g[i].abs())
            .fold(0.0, f64::max);
        if pg_norm <= 1e-12 * f.abs().max(1.0) {
            converged = true;
            break;
        }

        let mut step_taken = false;
        for attempt in 0..2 {
            let use_memory = attempt == 0 && !s_hist.is_empty();
            let dir = search_direction(&g, &free, &s_hist, &y_hist, use_memory);
            let slope = dot(&g, &dir);
            if !(slope > 0.0) {
                s_hist.clear();
                y_hist.clear();
                continue;
            }
            let mut t = if use_memory {
                1.0
            } else {
                (1.0 / dir.iter().map(|v| v.abs()).fold(0.0, f64::max)).min(1.0)
            };
            for _ in 0..60 {
                let trial: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                let trial = project(&trial, lower, upper);
                let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
                if moved.iter().all(|v| *v == 0.0) {
                    break;
                }
                let fv = match eval.objective.value(&trial) {
                    Ok(v) if v.is_finite() => v,
                    Ok(_) | Err(Error::NotPositiveDefinite(_)) => {
                        t *= 0.5;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                if fv >= f + 1e-4 * dot(&g, &moved) {
                    let Some((f_new, g_new)) = eval.full(&trial)? else {
                        t *= 0.5;
                        continue;
                    };
                    let y: Vec<f64> = g.iter().zip(&g_new).map(|(a, b)| a - b).collect();
                    let sy = dot(&moved, &y);
                    if sy > 1e-10 * dot(&moved, &moved).sqrt() * dot(&y, &y).sqrt() {
                        if s_hist.len() == cfg.memory {
                            s_hist.remove(0);
                            y_hist.remove(0);
                        }
                        s_hist.push(moved);
                        y_hist.push(y);
                    }
                    let rel = (f_new - f).abs() / f.abs().max(f_new.abs()).max(1.0);
                    x = trial;
                    f = f_new;
                    g = g_new;
                    step_taken = true;
                    small_changes = if rel < cfg.convergence_tol {
                        small_changes + 1
                    } else {
                        0
                    };
                    break;
                }
                t *= 0.5;
            }
            if step_taken {
                break;
            }
            s_hist.clear();
            y_hist.clear();
        }
        if !step_taken {
            // no ascent possible along either direction: stationary to roundoff
            converged = true;
            break;
        }
        iterations += 1;
        trace.push(f);
        if small_changes >= 2 {
            converged = true;
            break;
        }
    }

    Ok(OptResult {
        theta: x,
        final_objective: f,
        iterations,
        converged,
        objective_trace: trace,
        fell_back_to_fd,
    })
}

/// Ascent direction `H g` from the two-loop recursion on the free variables.
fn search_direction(
    g: &[f64],
    free: &[bool],
    s_hist: &[Vec<f64>],
    y_hist: &[Vec<f64>],
    use_memory: bool,
) -> Vec<f64> {
    let mask = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .zip(free)
            .map(|(a, f)| if *f { *a } else { 0.0 })
            .collect()
    };
    let mut q = mask(g);
    if !use_memory {
        return q;
    }
    // y is stored as g_old - g_new, the change in the gradient of -f
    let m = s_hist.len();
    let s: Vec<Vec<f64>> = s_hist.iter().map(|v| mask(v)).collect();
    let y: Vec<Vec<f64>> = y_hist.iter().map(|v| mask(v)).collect();
    let mut alpha = vec![0.0; m];
    let mut rho = vec![0.0; m];
    for i in (0..m).rev() {
        let sy = dot(&s[i], &y[i]);
        rho[i] = if sy > 0.0 { 1.0 / sy } else { 0.0 };
        alpha[i] = rho[i] * dot(&s[i], &q);
        for (qk, yk) in q.iter_mut().zip(&y[i]) {
            *qk -= alpha[i] * yk;
        }
    }
    let (sl, yl) = (&s[m - 1], &y[m - 1]);
    let yy = dot(yl, yl);
    let gamma = if yy > 0.0 && dot(sl, yl) > 0.0 {
        dot(sl, yl) / yy
    } else {
        1.0
    };
    for v in q.iter_mut() {
        *v *= gamma;
    }
    for i in 0..m {
        let beta = rho[i] * dot(&y[i], &q);
        for (qk, sk) in q.iter_mut().zip(&s[i]) {
            *qk += (alpha[i] - beta) * sk;
        }
    }
    mask(&q)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_cfg() -> OptConfig {
        OptConfig {
            max_iterations: 500,
            ..OptConfig::default()
        }
    }

    #[test]
    fn separable_quadratic() {
        for n in 1..=5 {
            let obj = FnObjective::new(n, |x: &[f64]| {
                -x.iter().map(|v| (v - 1.0).powi(2)).sum::<f64>()
            });
            for mode in [GradientMode::FiniteDifference, GradientMode::Analytic] {
                let cfg = OptConfig {
                    gradient_mode: mode,
                    ..quad_cfg()
                };
                let res =
                    maximize_in_box(&obj, &vec![-1.5; n], &vec![-2.0; n], &vec![2.0; n], &cfg, 0)
                        .unwrap();
                for v in &res.theta {
                    assert!((v - 1.0).abs() < 1e-4, "{:?}", res.theta);
                }
                // no analytic gradient on this objective
                assert_eq!(res.fell_back_to_fd, mode == GradientMode::Analytic);
            }
        }
    }

    #[test]
    fn active_lower_bound() {
        let obj = FnObjective::with_gradient(
            3,
            |x: &[f64]| -x.iter().map(|v| v * v).sum::<f64>(),
            |x: &[f64]| x.iter().map(|v| -2.0 * v).collect(),
        );
        let res =
            maximize_in_box(&obj, &[1.7, 0.9, 1.2], &[0.5; 3], &[2.0; 3], &quad_cfg(), 0).unwrap();
        for v in &res.theta {
            assert!((v - 0.5).abs() < 1e-4);
        }
        assert!(res.converged);
    }

    fn rosenbrock(x: &[f64]) -> f64 {
        -((1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2))
    }

    #[test]
    fn rosenbrock_bowl() {
        let obj = FnObjective::with_gradient(2, rosenbrock, |x: &[f64]| {
            vec![
                2.0 * (1.0 - x[0]) + 400.0 * x[0] * (x[1] - x[0] * x[0]),
                -200.0 * (x[1] - x[0] * x[0]),
            ]
        });
        let res =
            maximize_in_box(&obj, &[-1.2, 1.0], &[-3.0; 2], &[3.0; 2], &quad_cfg(), 0).unwrap();
        assert!(res.final_objective > -1e-6, "{res:?}");
    }

    #[test]
    fn iterates_stay_feasible_and_trace_is_monotone() {
        use std::sync::Mutex;
        let seen = Mutex::new(Vec::new());
        let obj = FnObjective::new(2, |x: &[f64]| {
            seen.lock().unwrap().push(x.to_vec());
            rosenbrock(x) - 3.0 * x[0]
        });
        let cfg = OptConfig {
            gradient_mode: GradientMode::FiniteDifference,
            ..quad_cfg()
        };
        let res = maximize_in_box(&obj, &[0.0, 0.0], &[-0.5, -0.5], &[0.8, 0.8], &cfg, 0).unwrap();
        for x in seen.lock().unwrap().iter() {
            assert!(x.iter().all(|v| (-0.5..=0.8).contains(v)), "{x:?}");
        }
        for w in res.objective_trace.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
    }

    #[test]
    fn deterministic_with_restarts() {
        let obj = FnObjective::new(2, |x: &[f64]| -(x[0] - 0.3).powi(2) - (x[1] + 0.2).powi(4));
        let cfg = OptConfig {
            restarts: 3,
            gradient_mode: GradientMode::FiniteDifference,
            ..quad_cfg()
        };
        let a = maximize_in_box(&obj, &[1.0, 1.0], &[-2.0; 2], &[2.0; 2], &cfg, 11).unwrap();
        let b = maximize_in_box(&obj, &[1.0, 1.0], &[-2.0; 2], &[2.0; 2], &cfg, 11).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn non_finite_start_is_an_error() {
        let obj = FnObjective::new(1, |_: &[f64]| f64::NAN);
        let cfg = OptConfig {
            gradient_mode: GradientMode::FiniteDifference,
            ..quad_cfg()
        };
        assert!(matches!(
            maximize_in_box(&obj, &[0.0], &[-1.0], &[1.0], &cfg, 0),
            Err(Error::NonFiniteObjective(_))
        ));
    }

    #[test]
    fn gradient_check_on_quadratic() {
        let obj = FnObjective::with_gradient(
            4,
            |x: &[f64]| {
                -x.iter()
                    .enumerate()
                    .map(|(i, v)| (i as f64 + 1.0) * v * v)
                    .sum::<f64>()
            },
            |x: &[f64]| {
                x.iter()
                    .enumerate()
                    .map(|(i, v)| -2.0 * (i as f64 + 1.0) * v)
                    .collect()
            },
        );
        let d = gradient_check(&obj, &[0.3, -1.2, 2.0, 0.7], 1e-5)
            .unwrap()
            .unwrap();
        assert!(d <= 1e-8, "{d}");
        let no_grad = FnObjective::new(1, |x: &[f64]| x[0]);
        assert!(gradient_check(&no_grad, &[0.0], 1e-5).is_none());
    }
}
