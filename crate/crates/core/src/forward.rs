//! Measurement model: piecewise ground-truth signals, the discretised blur
//! operator and the fine-to-coarse simulation protocol.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::covariance::Grid;
use crate::error::{Error, Result};

/// Shape of one segment of a piecewise signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    /// `height · exp(-(x - center)² / (2 width²))`.
    GaussianBump {
        center: f64,
        width: f64,
        height: f64,
    },
    /// Linear interpolation from `start_value` at the segment start to
    /// `end_value` at its end.
    LinearRamp {
        start_value: f64,
        end_value: f64,
    },
    Constant {
        value: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub start: f64,
    pub end: f64,
    pub shape: Shape,
}

impl Segment {
    fn value_at(&self, x: f64) -> f64 {
        match self.shape {
            Shape::GaussianBump {
                center,
                width,
                height,
            } => height * (-(x - center).powi(2) / (2.0 * width * width)).exp(),
            Shape::LinearRamp {
                start_value,
                end_value,
            } => {
                let t = (x - self.start) / (self.end - self.start);
                start_value + t * (end_value - start_value)
            }
            Shape::Constant { value } => value,
        }
    }
}

/// Piecewise signal on `[domain_start, domain_end]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignalSpec {
    pub domain_start: f64,
    pub domain_end: f64,
    pub pieces: Vec<Segment>,
}

impl Default for SignalSpec {
    /// Smooth spike, flat gap, linear ramp and three constant plateaus with
    /// sharp jumps at 3.5 and 4.25, on `[0, 5]`.
    fn default() -> Self {
        let seg = |start, end, shape| Segment { start, end, shape };
        SignalSpec {
            domain_start: 0.0,
            domain_end: 5.0,
            pieces: vec![
                seg(
                    0.0,
                    1.5,
                    Shape::GaussianBump {
                        center: 0.75,
                        width: 0.15,
                        height: 1.0,
                    },
                ),
                seg(1.5, 2.0, Shape::Constant { value: 0.0 }),
                seg(
                    2.0,
                    3.0,
                    Shape::LinearRamp {
                        start_value: 0.0,
                        end_value: 1.0,
                    },
                ),
                seg(3.0, 3.5, Shape::Constant { value: 1.0 }),
                seg(3.5, 4.25, Shape::Constant { value: 0.4 }),
                seg(4.25, 5.0, Shape::Constant { value: 0.0 }),
            ],
        }
    }
}

impl SignalSpec {
    /// Checks that the segments tile the domain in order without gaps.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.domain_end > self.domain_start) {
            return bad("signal domain is empty".into());
        }
        let Some(first) = self.pieces.first() else {
            return bad("signal has no segments".into());
        };
        if first.start != self.domain_start {
            return bad(format!("first segment starts at {}", first.start));
        }
        for w in self.pieces.windows(2) {
            if w[0].end != w[1].start {
                return bad(format!("segments do not tile at {}", w[0].end));
            }
        }
        for p in &self.pieces {
            if !(p.end > p.start) {
                return bad(format!("empty segment [{}, {}]", p.start, p.end));
            }
            if let Shape::GaussianBump { width, .. } = p.shape {
                if !(width > 0.0) {
                    return bad("bump width must be positive".into());
                }
            }
        }
        if self.pieces[self.pieces.len() - 1].end != self.domain_end {
            return bad("last segment does not reach the domain end".into());
        }
        Ok(())
    }

    /// Value at `x`; segments are right-continuous, the last one is closed.
    pub fn value_at(&self, x: f64) -> Result<f64> {
        if x < self.domain_start || x > self.domain_end || !x.is_finite() {
            return Err(Error::OutOfDomain(x));
        }
        let last = self.pieces.len() - 1;
        self.pieces
            .iter()
            .enumerate()
            .find(|(i, p)| x >= p.start && (x < p.end || (*i == last && x <= p.end)))
            .map(|(_, p)| p.value_at(x))
            .ok_or(Error::OutOfDomain(x))
    }
}

pub fn evaluate_signal(spec: &SignalSpec, grid: &Grid) -> Result<Vec<f64>> {
    spec.validate()?;
    grid.points().iter().map(|&x| spec.value_at(x)).collect()
}

/// A blur kernel parametrised by a positive width.
pub trait BlurKernel {
    fn width(&self) -> f64;
    fn eval(&self, x: f64) -> f64;
    /// `∂ eval / ∂ log width` divided by `eval`, where `eval` is nonzero.
    fn log_width_sensitivity(&self, x: f64) -> f64;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianKernel {
    tau: f64,
}

impl GaussianKernel {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTau(tau));
        }
        Ok(GaussianKernel { tau })
    }
}

impl BlurKernel for GaussianKernel {
    fn width(&self) -> f64 {
        self.tau
    }

    fn eval(&self, x: f64) -> f64 {
        let t = self.tau;
        (-x * x / (2.0 * t * t)).exp() / ((2.0 * PI).sqrt() * t)
    }

    fn log_width_sensitivity(&self, x: f64) -> f64 {
        x * x / (self.tau * self.tau) - 1.0
    }
}

/// Gaussian density `φ(x; τ)`.
pub fn gaussian_kernel(x: f64, tau: f64) -> Result<f64> {
    Ok(GaussianKernel::new(tau)?.eval(x))
}

/// Matrix form of the blur on a grid.
#[derive(Clone, Debug)]
pub struct ConvolutionOperator {
    pub matrix: DMatrix<f64>,
    pub tau: f64,
    pub grid: Grid,
    pub normalized: bool,
}

impl ConvolutionOperator {
    pub fn apply(&self, f: &DVector<f64>) -> Result<DVector<f64>> {
        if f.len() != self.matrix.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.matrix.ncols(),
                got: f.len(),
            });
        }
        Ok(&self.matrix * f)
    }
}

/// `A[i][j] = h φ(x_i - x_j; τ)`, optionally row-normalised.
pub fn build_operator(grid: &Grid, tau: f64, normalize: bool) -> Result<ConvolutionOperator> {
    build_operator_with(grid, &GaussianKernel::new(tau)?, normalize)
}

pub fn build_operator_with<K: BlurKernel>(
    grid: &Grid,
    kernel: &K,
    normalize: bool,
) -> Result<ConvolutionOperator> {
    Ok(ConvolutionOperator {
        matrix: operator_matrix(grid, kernel, normalize, false).0,
        tau: kernel.width(),
        grid: grid.clone(),
        normalized: normalize,
    })
}

/// Operator and, on request, its derivative with respect to `log τ`.
pub fn operator_with_log_tau_derivative(
    grid: &Grid,
    tau: f64,
    normalize: bool,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (a, d) = operator_matrix(grid, &GaussianKernel::new(tau)?, normalize, true);
    Ok((a, d.expect("derivative requested")))
}

fn operator_matrix<K: BlurKernel>(
    grid: &Grid,
    kernel: &K,
    normalize: bool,
    want_derivative: bool,
) -> (DMatrix<f64>, Option<DMatrix<f64>>) {
    let n = grid.len();
    let x = grid.points();
    let h = grid.spacing();
    let mut a = DMatrix::from_fn(n, n, |i, j| h * kernel.eval(x[i] - x[j]));
    let mut q = want_derivative
        .then(|| DMatrix::from_fn(n, n, |i, j| kernel.log_width_sensitivity(x[i] - x[j])));
    if normalize {
        for i in 0..n {
            let sum: f64 = a.row(i).sum();
            a.row_mut(i).unscale_mut(sum);
        }
    }
    if let Some(q) = q.as_mut() {
        // d a_ij = a_ij (q_ij - Σ_m a_im q_im) after normalisation, a_ij q_ij before
        for i in 0..n {
            let shift = if normalize {
                (0..n).map(|m| a[(i, m)] * q[(i, m)]).sum::<f64>()
            } else {
                0.0
            };
            for j in 0..n {
                q[(i, j)] = a[(i, j)] * (q[(i, j)] - shift);
            }
        }
    }
    (a, q)
}

/// Simulated measurement with everything needed to score a reconstruction.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub coarse_grid: Grid,
    pub measurements: Vec<f64>,
    pub noise_sigma: f64,
    pub true_tau: f64,
    /// Relative noise level as a fraction (0.01 means 1 %).
    pub noise_percent: f64,
    pub seed: u64,
    pub fine_truth: Vec<f64>,
    pub coarse_truth: Vec<f64>,
}

/// On-disk form of a [`Dataset`].
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub grid: GridFile,
    pub g: Vec<f64>,
    pub sigma: f64,
    pub true_tau: f64,
    pub noise_percent: f64,
    pub seed: u64,
    pub coarse_truth: Vec<f64>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub start: f64,
    pub end: f64,
    pub n: usize,
}

impl Dataset {
    pub fn to_file(&self) -> DatasetFile {
        DatasetFile {
            grid: GridFile {
                start: self.coarse_grid.start(),
                end: self.coarse_grid.end(),
                n: self.coarse_grid.len(),
            },
            g: self.measurements.clone(),
            sigma: self.noise_sigma,
            true_tau: self.true_tau,
            noise_percent: self.noise_percent,
            seed: self.seed,
            coarse_truth: self.coarse_truth.clone(),
        }
    }

    /// Rebuilds a dataset from its file form. The fine-grid truth is not
    /// stored and comes back empty.
    pub fn from_file(file: DatasetFile) -> Result<Self> {
        let grid = Grid::linspace(file.grid.start, file.grid.end, file.grid.n)?;
        for (name, len) in [
            ("g", file.g.len()),
            ("coarse_truth", file.coarse_truth.len()),
        ] {
            if len != grid.len() && !(name == "coarse_truth" && len == 0) {
                return Err(Error::Config(format!(
                    "{name} has {len} entries but the grid has {}",
                    grid.len()
                )));
            }
        }
        if !(file.sigma > 0.0) {
            return Err(Error::Config(format!(
                "sigma must be positive, got {}",
                file.sigma
            )));
        }
        Ok(Dataset {
            coarse_grid: grid,
            measurements: file.g,
            noise_sigma: file.sigma,
            true_tau: file.true_tau,
            noise_percent: file.noise_percent,
            seed: file.seed,
            fine_truth: Vec::new(),
            coarse_truth: file.coarse_truth,
        })
    }

    pub fn has_truth(&self) -> bool {
        self.coarse_truth.len() == self.coarse_grid.len()
    }
}

/// Noise standard deviation assigned to a noise-free simulation, so that
/// downstream likelihoods stay well defined.
pub const NOISELESS_SIGMA_FLOOR: f64 = 1e-6;

/// Simulates blurred, noisy data on a fine grid and subsamples it.
///
/// `σ = noise_percent · max |noiseless coarse measurement|`; a zero noise
/// level adds nothing to `g` but records `σ` as [`NOISELESS_SIGMA_FLOOR`]
/// times the same amplitude.
pub fn simulate(
    spec: &SignalSpec,
    fine_n: usize,
    coarse_n: usize,
    tau: f64,
    noise_percent: f64,
    seed: u64,
) -> Result<Dataset> {
    if coarse_n == 0 || !fine_n.is_multiple_of(coarse_n) {
        return Err(Error::GridMismatch {
            fine: fine_n,
            coarse: coarse_n,
        });
    }
    if !(noise_percent >= 0.0) {
        return Err(Error::Config(format!(
            "noise level must be >= 0, got {noise_percent}"
        )));
    }
    let fine = Grid::linspace(spec.domain_start, spec.domain_end, fine_n)?;
    let step = fine_n / coarse_n;
    let coarse = fine.subsample(step)?;

    let fine_truth = evaluate_signal(spec, &fine)?;
    let op = build_operator(&fine, tau, true)?;
    let blurred = op.apply(&DVector::from_column_slice(&fine_truth))?;

    let noiseless: Vec<f64> = blurred.iter().step_by(step).copied().collect();
    let coarse_truth: Vec<f64> = fine_truth.iter().step_by(step).copied().collect();
    let amplitude = noiseless.iter().fold(0.0_f64, |m, v| m.max(v.abs()));

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = noise_percent * amplitude;
    let measurements: Vec<f64> = if sigma > 0.0 {
        noiseless
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(&mut rng);
                v + sigma * z
            })
            .collect()
    } else {
        noiseless
    };
    let noise_sigma = if sigma > 0.0 {
        sigma
    } else {
        NOISELESS_SIGMA_FLOOR * amplitude.max(1.0)
    };

    Ok(Dataset {
        coarse_grid: coarse,
        measurements,
        noise_sigma,
        true_tau: tau,
        noise_percent,
        seed,
        fine_truth,
        coarse_truth,
    })
}

/// `100 · ‖estimate − truth‖² / ‖truth‖²`, in percent.
pub fn relative_mse(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::DimensionMismatch {
            expected: truth.len(),
            got: estimate.len(),
        });
    }
    let norm2: f64 = truth.iter().map(|v| v * v).sum();
    if norm2 == 0.0 {
        return Err(Error::ZeroTruth);
    }
    let err2: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (e - t).powi(2))
        .sum();
    Ok(100.0 * err2 / norm2)
}
