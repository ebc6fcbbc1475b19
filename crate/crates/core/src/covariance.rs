//! Non-stationary Matérn covariance on an equidistant 1-D grid.
//!
//! The length-scale field `ℓ` is carried in log form and has units of squared
//! length: two points are coupled through `L_ij = sqrt((ℓ_i + ℓ_j) / 2)` and
//!
//! ```text
//! C_ij = γ² (ℓ_i ℓ_j)^{1/4} / L_ij · M_ν(|x_i - x_j| / L_ij)
//! ```
//!
//! where `M_ν(s) = 2^{1-ν}/Γ(ν) s^ν K_ν(s)` is the Matérn correlation. Only
//! half-integer smoothness is supported at runtime, through the closed form
//! `M_{p+1/2}(s) = e^{-s} p!/(2p)! Σ_i (p+i)!/(i!(p-i)!) (2s)^{p-i}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest allowed `|log ℓ|`.
pub fn log_ell_cap() -> f64 {
    1000f64.ln()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    points: Vec<f64>,
    spacing: f64,
}

impl Grid {
    /// `n` equidistant points from `start` to `end` inclusive.
    pub fn linspace(start: f64, end: f64, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!(
                "need at least 2 points, got {n}"
            )));
        }
        if !(end > start) || !start.is_finite() || !end.is_finite() {
            return Err(Error::InvalidGrid(format!("bad interval [{start}, {end}]")));
        }
        let spacing = (end - start) / (n - 1) as f64;
        let mut points: Vec<f64> = (0..n).map(|i| start + i as f64 * spacing).collect();
        points[n - 1] = end;
        Ok(Grid { points, spacing })
    }

    /// Every `step`-th point starting at index 0.
    pub fn subsample(&self, step: usize) -> Result<Self> {
        if step == 0 {
            return Err(Error::InvalidGrid(
                "subsampling step must be positive".into(),
            ));
        }
        let points: Vec<f64> = self.points.iter().step_by(step).copied().collect();
        if points.len() < 2 {
            return Err(Error::InvalidGrid(
                "subsampled grid has fewer than 2 points".into(),
            ));
        }
        Ok(Grid {
            points,
            spacing: self.spacing * step as f64,
        })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaternConfig {
    /// γ², the marginal variance.
    pub magnitude: f64,
    /// ν.
    pub smoothness: f64,
}

impl Default for MaternConfig {
    fn default() -> Self {
        MaternConfig {
            magnitude: 1.0,
            smoothness: 1.5,
        }
    }
}

impl MaternConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.magnitude > 0.0) {
            return Err(Error::Config(format!(
                "Matérn magnitude must be positive, got {}",
                self.magnitude
            )));
        }
        HalfIntegerMatern::new(self.smoothness)?;
        Ok(())
    }
}

/// Log length-scale values, one per grid point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LengthScaleField(pub Vec<f64>);

impl LengthScaleField {
    pub fn constant(n: usize, log_ell: f64) -> Self {
        LengthScaleField(vec![log_ell; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Length scales `ℓ = exp(log ℓ)`.
    pub fn ell(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.exp()).collect()
    }

    pub fn within_cap(&self) -> bool {
        let cap = log_ell_cap();
        self.0.iter().all(|v| v.abs() <= cap)
    }
}

/// Closed-form Matérn correlation for `ν = p + 1/2`.
#[derive(Clone, Debug)]
pub struct HalfIntegerMatern {
    order: usize,
    // coefficients of the polynomial P(s) with M(s) = e^{-s} P(s), lowest degree first
    coeffs: Vec<f64>,
}

impl HalfIntegerMatern {
    pub fn new(nu: f64) -> Result<Self> {
        if !(nu > 0.0) || !nu.is_finite() {
            return Err(Error::InvalidSmoothness(nu));
        }
        let p = nu - 0.5;
        if (p - p.round()).abs() > 1e-12 || p.round() > 20.0 {
            return Err(Error::UnsupportedSmoothness(nu));
        }
        let p = p.round() as usize;
        let fact = |k: usize| (1..=k).fold(1.0_f64, |acc, v| acc * v as f64);
        let scale = fact(p) / fact(2 * p);
        let mut coeffs = vec![0.0; p + 1];
        for i in 0..=p {
            let deg = p - i;
            coeffs[deg] = scale * fact(p + i) / (fact(i) * fact(p - i)) * 2f64.powi(deg as i32);
        }
        Ok(HalfIntegerMatern { order: p, coeffs })
    }

    pub fn nu(&self) -> f64 {
        self.order as f64 + 0.5
    }

    pub fn value(&self, s: f64) -> f64 {
        match self.order {
            0 => (-s).exp(),
            1 => (1.0 + s) * (-s).exp(),
            _ => poly(&self.coeffs, s) * (-s).exp(),
        }
    }

    /// `M'(s)`.
    pub fn derivative(&self, s: f64) -> f64 {
        match self.order {
            0 => -(-s).exp(),
            1 => -s * (-s).exp(),
            _ => {
                let dp: Vec<f64> = self
                    .coeffs
                    .iter()
                    .enumerate()
                    .skip(1)
                    .map(|(k, c)| k as f64 * c)
                    .collect();
                (poly(&dp, s) - poly(&self.coeffs, s)) * (-s).exp()
            }
        }
    }
}

fn poly(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

/// Matérn correlation `2^{1-ν}/Γ(ν) s^ν K_ν(s)`, equal to 1 at `s = 0`.
pub fn matern_correlation(s: f64, nu: f64) -> Result<f64> {
    let shape = HalfIntegerMatern::new(nu)?;
    if s < 0.0 {
        return Err(Error::Config(format!("negative scaled distance {s}")));
    }
    Ok(shape.value(s))
}

/// Pairwise coupling of two grid points: covariance entry and its derivatives
/// with respect to `log ℓ_i` (first) and `log ℓ_j` (second).
#[inline]
fn pair_entry(
    shape: &HalfIntegerMatern,
    gamma2: f64,
    dist: f64,
    ell_i: f64,
    ell_j: f64,
) -> (f64, f64, f64) {
    let sum = ell_i + ell_j;
    let l = (0.5 * sum).sqrt();
    let s = dist / l;
    let pref = gamma2 * (ell_i * ell_j).sqrt().sqrt() / l;
    let m = shape.value(s);
    let c = pref * m;
    // d log L / d log ℓ_i = ℓ_i / (2 (ℓ_i + ℓ_j)); ds = -s dlogL
    let ci = 0.5 * ell_i / sum;
    let cj = 0.5 * ell_j / sum;
    let dm = shape.derivative(s);
    let di = c * (0.25 - ci) - pref * dm * s * ci;
    let dj = c * (0.25 - cj) - pref * dm * s * cj;
    (c, di, dj)
}

fn check_field(grid: &Grid, log_ell: &[f64]) -> Result<()> {
    if grid.len() != log_ell.len() {
        return Err(Error::DimensionMismatch {
            expected: grid.len(),
            got: log_ell.len(),
        });
    }
    Ok(())
}

/// Dense non-stationary Matérn covariance matrix.
pub fn build_nonstationary(
    grid: &Grid,
    field: &LengthScaleField,
    cfg: &MaternConfig,
) -> Result<DMatrix<f64>> {
    Ok(build_with_derivative(grid, field.as_slice(), cfg, false)?.0)
}

/// Covariance plus `D` with `D[(k, j)] = ∂C_kj / ∂log ℓ_k` (zero diagonal).
pub fn build_with_derivative(
    grid: &Grid,
    log_ell: &[f64],
    cfg: &MaternConfig,
    want_derivative: bool,
) -> Result<(DMatrix<f64>, Option<DMatrix<f64>>)> {
    check_field(grid, log_ell)?;
    let shape = HalfIntegerMatern::new(cfg.smoothness)?;
    let n = grid.len();
    let x = grid.points();
    let ell: Vec<f64> = log_ell.iter().map(|v| v.exp()).collect();
    let gamma2 = cfg.magnitude;
    let mut c = DMatrix::zeros(n, n);
    let mut d = want_derivative.then(|| DMatrix::zeros(n, n));
    for j in 0..n {
        c[(j, j)] = gamma2;
        for i in 0..j {
            let (v, di, dj) = pair_entry(&shape, gamma2, (x[i] - x[j]).abs(), ell[i], ell[j]);
            c[(i, j)] = v;
            c[(j, i)] = v;
            if let Some(d) = d.as_mut() {
                d[(i, j)] = di;
                d[(j, i)] = dj;
            }
        }
    }
    Ok((c, d))
}

/// Stationary special case: one scalar log length-scale for every point.
pub fn build_stationary(grid: &Grid, log_ell: f64, cfg: &MaternConfig) -> Result<DMatrix<f64>> {
    build_nonstationary(grid, &LengthScaleField::constant(grid.len(), log_ell), cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn grid2(a: f64, b: f64) -> Grid {
        Grid::linspace(a, b, 2).unwrap()
    }

    #[test]
    fn correlation_values() {
        for nu in [0.5, 1.5, 2.5, 3.5] {
            assert_eq!(matern_correlation(0.0, nu).unwrap(), 1.0);
        }
        assert_relative_eq!(matern_correlation(1.0, 1.5).unwrap(), 2.0 * (-1f64).exp());
        assert_relative_eq!(matern_correlation(2.0, 1.5).unwrap(), 3.0 * (-2f64).exp());
        assert_relative_eq!(
            matern_correlation(1.3, 2.5).unwrap(),
            (1.0 + 1.3 + 1.3 * 1.3 / 3.0) * (-1.3f64).exp(),
            epsilon = 1e-15
        );
        assert!(matches!(
            matern_correlation(1.0, 0.0),
            Err(Error::InvalidSmoothness(_))
        ));
        assert!(matches!(
            matern_correlation(1.0, -1.0),
            Err(Error::InvalidSmoothness(_))
        ));
        assert!(matches!(
            matern_correlation(1.0, 1.0),
            Err(Error::UnsupportedSmoothness(_))
        ));
    }

    #[test]
    fn correlation_derivative_matches_fd() {
        for nu in [0.5, 1.5, 2.5, 4.5] {
            let m = HalfIntegerMatern::new(nu).unwrap();
            for s in [0.1, 0.7, 2.0, 5.0] {
                let h = 1e-6;
                let fd = (m.value(s + h) - m.value(s - h)) / (2.0 * h);
                assert_relative_eq!(m.derivative(s), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn two_point_examples() {
        let cfg = MaternConfig::default();
        let c =
            build_nonstationary(&grid2(0.0, 1.0), &LengthScaleField(vec![0.0, 0.0]), &cfg).unwrap();
        assert_relative_eq!(c[(0, 1)], 2.0 * (-1f64).exp(), epsilon = 1e-15);

        let c = build_nonstationary(
            &grid2(0.0, 1.0),
            &LengthScaleField(vec![0.0, 4f64.ln()]),
            &cfg,
        )
        .unwrap();
        let l = 2.5f64.sqrt();
        let expected = 4f64.powf(0.25) / l * (1.0 + 1.0 / l) * (-1.0 / l).exp();
        assert_relative_eq!(c[(0, 1)], expected, epsilon = 1e-14);
        assert_relative_eq!(c[(0, 1)], 0.775737, epsilon = 1e-6);

        let c = build_stationary(&grid2(0.0, 3.0), 9f64.ln(), &cfg).unwrap();
        assert_relative_eq!(c[(0, 1)], 2.0 * (-1f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn stationary_is_toeplitz() {
        let g = Grid::linspace(0.0, 2.0, 3).unwrap();
        let c = build_stationary(&g, 0.0, &MaternConfig::default()).unwrap();
        assert_eq!(c[(0, 1)], c[(1, 2)]);
        assert_eq!(c[(1, 0)], c[(2, 1)]);
        assert_eq!(c[(0, 0)], c[(2, 2)]);
    }

    #[test]
    fn dimension_mismatch() {
        let g = Grid::linspace(0.0, 1.0, 3).unwrap();
        assert!(matches!(
            build_nonstationary(
                &g,
                &LengthScaleField(vec![0.0; 2]),
                &MaternConfig::default()
            ),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn derivative_matrix_matches_fd() {
        let g = Grid::linspace(0.0, 1.0, 6).unwrap();
        let cfg = MaternConfig {
            magnitude: 1.7,
            smoothness: 1.5,
        };
        let log_ell = vec![-1.0, -0.3, 0.4, -2.0, 0.1, 1.2];
        let (_, d) = build_with_derivative(&g, &log_ell, &cfg, true).unwrap();
        let d = d.unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut up = log_ell.clone();
            up[k] += h;
            let mut dn = log_ell.clone();
            dn[k] -= h;
            let cu = build_with_derivative(&g, &up, &cfg, false).unwrap().0;
            let cd = build_with_derivative(&g, &dn, &cfg, false).unwrap().0;
            for j in 0..6 {
                let fd = (cu[(k, j)] - cd[(k, j)]) / (2.0 * h);
                let an = if j == k { 0.0 } else { d[(k, j)] };
                assert!((fd - an).abs() < 1e-8, "k={k} j={j} fd={fd} an={an}");
            }
        }
    }

    #[test]
    fn grid_subsample_is_subset() {
        let fine = Grid::linspace(0.0, 5.0, 300).unwrap();
        let coarse = fine.subsample(3).unwrap();
        assert_eq!(coarse.len(), 100);
        for (i, p) in coarse.points().iter().enumerate() {
            assert_eq!(*p, fine.points()[3 * i]);
        }
        for w in coarse.points().windows(2) {
            assert!((w[1] - w[0] - coarse.spacing()).abs() <= 1e-12);
        }
        assert!(Grid::linspace(0.0, 1.0, 1).is_err());
    }

    /// `K_ν(s) = ∫_0^∞ exp(-s cosh t) cosh(ν t) dt` by the trapezoid rule,
    /// which converges geometrically for this integrand.
    fn bessel_k(nu: f64, s: f64) -> f64 {
        let upper = (60.0 / s).acosh();
        let n = 20_000;
        let h = upper / n as f64;
        let f = |t: f64| (-s * t.cosh()).exp() * (nu * t).cosh();
        h * (0.5 * f(0.0) + (1..n).map(|k| f(k as f64 * h)).sum::<f64>())
    }

    #[test]
    fn closed_forms_match_bessel_quadrature() {
        use statrs::function::gamma::gamma;
        for nu in [0.5, 1.5, 2.5] {
            for s in [0.1f64, 0.5, 1.0, 2.0, 5.0] {
                let oracle = 2f64.powf(1.0 - nu) / gamma(nu) * s.powf(nu) * bessel_k(nu, s);
                let closed = matern_correlation(s, nu).unwrap();
                assert!(
                    (closed - oracle).abs() <= 1e-10,
                    "nu={nu} s={s}: {closed} vs {oracle}"
                );
            }
        }
    }

    fn random_field() -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-3.0f64..3.0, 30)
    }

    proptest! {
        #[test]
        fn diagonal_is_magnitude_and_symmetric(field in random_field(), gamma2 in 0.1f64..3.0) {
            let g = Grid::linspace(0.0, 5.0, 30).unwrap();
            let cfg = MaternConfig { magnitude: gamma2, smoothness: 1.5 };
            let c = build_nonstationary(&g, &LengthScaleField(field), &cfg).unwrap();
            for i in 0..30 {
                prop_assert!((c[(i, i)] - gamma2).abs() <= 1e-14);
                for j in 0..i {
                    prop_assert_eq!(c[(i, j)], c[(j, i)]);
                }
            }
        }

        #[test]
        fn constant_field_is_stationary(v in -3.0f64..3.0) {
            let g = Grid::linspace(0.0, 5.0, 25).unwrap();
            let cfg = MaternConfig::default();
            let ns = build_nonstationary(&g, &LengthScaleField::constant(25, v), &cfg).unwrap();
            let st = build_stationary(&g, v, &cfg).unwrap();
            for (a, b) in ns.iter().zip(st.iter()) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
        }

        #[test]
        fn coupling_grows_with_length_scale(d in 0.01f64..3.0, v in -4.0f64..4.0, dv in 0.01f64..2.0) {
            let g = Grid::linspace(0.0, d, 2).unwrap();
            let cfg = MaternConfig::default();
            let lo = build_nonstationary(&g, &LengthScaleField(vec![v, v]), &cfg).unwrap();
            let hi = build_nonstationary(&g, &LengthScaleField(vec![v + dv, v + dv]), &cfg).unwrap();
            prop_assert!(hi[(0, 1)] >= lo[(0, 1)]);
        }

        #[test]
        fn random_fields_factor_with_small_jitter(field in random_field()) {
            let g = Grid::linspace(0.0, 5.0, 30).unwrap();
            let c = build_nonstationary(&g, &LengthScaleField(field), &MaternConfig::default()).unwrap();
            let f = crate::numerics::factor(&c).unwrap();
            prop_assert!(f.jitter_used() <= 1e-6);
        }
    }
}
