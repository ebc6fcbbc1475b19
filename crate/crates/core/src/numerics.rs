//! Dense symmetric positive-definite primitives.
//!
//! Every likelihood evaluation goes through [`cholesky_with_jitter`]: the
//! input is symmetrised, then factored with the smallest diagonal jitter from
//! the ladder `{0, j0, 10 j0, ..., 10^k_max j0}` that succeeds.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that an input matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Number of tenfold jitter escalations after the first nonzero rung.
pub const DEFAULT_JITTER_STEPS: u32 = 6;

/// Cholesky factor of `S + jitter_used * I`.
#[derive(Clone, Debug)]
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    jitter_used: f64,
}

impl SpdFactor {
    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    pub fn jitter_used(&self) -> f64 {
        self.jitter_used
    }

    /// Lower-triangular factor `L` with `L Lᵀ = S + jitter I`.
    pub fn lower_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.dim(), b.len())?;
        Ok(self.chol.solve(b))
    }

    /// Solves for every column of `b` at once.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), b.nrows())?;
        Ok(self.chol.solve(b))
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Default first jitter rung: `1e-10` times the mean diagonal of `s`.
pub fn default_jitter(s: &DMatrix<f64>) -> f64 {
    let n = s.nrows().max(1);
    1e-10 * s.diagonal().iter().map(|v| v.abs()).sum::<f64>() / n as f64
}

/// Factors `s` after symmetrisation, escalating diagonal jitter as needed.
pub fn cholesky_with_jitter(s: &DMatrix<f64>, jitter0: f64, k_max: u32) -> Result<SpdFactor> {
    if s.nrows() != s.ncols() {
        return Err(Error::DimensionMismatch {
            expected: s.nrows(),
            got: s.ncols(),
        });
    }
    let asym = relative_asymmetry(s);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric(asym));
    }
    let sym = (s + s.transpose()) * 0.5;

    if let Some(chol) = Cholesky::new(sym.clone()) {
        return Ok(SpdFactor {
            chol,
            jitter_used: 0.0,
        });
    }
    // a zero first rung would make the ladder degenerate
    let jitter0 = if jitter0 > 0.0 { jitter0 } else { f64::EPSILON };
    let mut jitter = jitter0;
    for _ in 0..=k_max {
        let mut shifted = sym.clone();
        for i in 0..shifted.nrows() {
            shifted[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(SpdFactor {
                chol,
                jitter_used: jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::NotPositiveDefinite(jitter / 10.0))
}

/// [`cholesky_with_jitter`] with the default ladder.
pub fn factor(s: &DMatrix<f64>) -> Result<SpdFactor> {
    cholesky_with_jitter(s, default_jitter(s), DEFAULT_JITTER_STEPS)
}

pub fn log_det(f: &SpdFactor) -> f64 {
    f.log_det()
}

pub fn solve_spd(f: &SpdFactor, b: &DVector<f64>) -> Result<DVector<f64>> {
    f.solve(b)
}

/// `max |S - Sᵀ| / max |S|`, zero for the zero matrix.
pub fn relative_asymmetry(s: &DMatrix<f64>) -> f64 {
    let scale = s.amax();
    if scale == 0.0 {
        return 0.0;
    }
    let n = s.nrows();
    let mut worst = 0.0_f64;
    for j in 0..n {
        for i in (j + 1)..n {
            worst = worst.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    worst / scale
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn m2(a: f64, b: f64, c: f64, d: f64) -> DMatrix<f64> {
        DMatrix::from_row_slice(2, 2, &[a, b, c, d])
    }

    #[test]
    fn identity_needs_no_jitter() {
        let f = cholesky_with_jitter(&DMatrix::identity(3, 3), 1e-10, 6).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
        assert_eq!(f.lower_factor(), DMatrix::identity(3, 3));
        assert_eq!(f.log_det(), 0.0);
        let b = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert_eq!(f.solve(&b).unwrap(), b);
    }

    #[test]
    fn hand_factor_2x2() {
        let s = m2(4.0, 2.0, 2.0, 3.0);
        let f = factor(&s).unwrap();
        let l = f.lower_factor();
        assert_relative_eq!(l[(0, 0)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 0)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(l[(1, 1)], 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(l[(0, 1)], 0.0);
        assert_relative_eq!(f.log_det(), 8f64.ln(), epsilon = 1e-14);
        let x = f.solve(&DVector::from_vec(vec![6.0, 5.0])).unwrap();
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn diagonal_cases() {
        let f = factor(&m2(2.0, 0.0, 0.0, 8.0)).unwrap();
        assert_relative_eq!(f.log_det(), 16f64.ln(), epsilon = 1e-14);
        let f = factor(&m2(2.0, 0.0, 0.0, 4.0)).unwrap();
        let x = f.solve(&DVector::from_vec(vec![2.0, 8.0])).unwrap();
        assert_relative_eq!(x[0], 1.0);
        assert_relative_eq!(x[1], 2.0);
    }

    #[test]
    fn rank_one_gets_jitter() {
        let s = m2(1.0, 1.0, 1.0, 1.0);
        let j0 = 1e-10;
        let f = cholesky_with_jitter(&s, j0, 6).unwrap();
        assert!(f.jitter_used() > 0.0);
        let k = (f.jitter_used() / j0).log10();
        assert!((k - k.round()).abs() < 1e-9 && k.round() >= 0.0 && k.round() <= 6.0);
        let l = f.lower_factor();
        let target = &s + DMatrix::identity(2, 2) * f.jitter_used();
        let err = (&l * l.transpose() - &target).norm() / target.norm();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn errors() {
        assert!(matches!(
            factor(&m2(1.0, 0.5, 0.0, 1.0)),
            Err(Error::NotSymmetric(_))
        ));
        assert!(matches!(
            cholesky_with_jitter(&m2(-1.0, 0.0, 0.0, -1.0), 1e-10, 3),
            Err(Error::NotPositiveDefinite(_))
        ));
        let f = factor(&DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(
            f.solve(&DVector::zeros(3)),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tiny_asymmetry_is_averaged_away() {
        let s = m2(4.0, 2.0, 2.0 + 1e-12, 3.0);
        let f = factor(&s).unwrap();
        assert_eq!(f.jitter_used(), 0.0);
    }

    fn random_spd(n: usize, vals: &[f64]) -> DMatrix<f64> {
        let m = DMatrix::from_iterator(n, n, vals.iter().copied().take(n * n));
        m.transpose() * &m + DMatrix::identity(n, n)
    }

    proptest! {
        #[test]
        fn solve_and_logdet_on_random_spd(
            n in 1usize..=20,
            vals in proptest::collection::vec(-1.0f64..1.0, 400),
            rhs in proptest::collection::vec(-5.0f64..5.0, 20),
        ) {
            let s = random_spd(n, &vals);
            let f = factor(&s).unwrap();
            prop_assert_eq!(f.jitter_used(), 0.0);
            let b = DVector::from_iterator(n, rhs.iter().copied().take(n));
            let x = f.solve(&b).unwrap();
            let resid = (&s * &x - &b).norm();
            prop_assert!(resid <= 1e-8 * b.norm().max(1e-300));

            let eig = s.clone().symmetric_eigen();
            let expected: f64 = eig.eigenvalues.iter().map(|v| v.ln()).sum();
            prop_assert!((f.log_det() - expected).abs() <= 1e-8 * expected.abs().max(1.0));

            let again = factor(&s).unwrap();
            prop_assert_eq!(again.jitter_used(), f.jitter_used());
        }
    }
}
