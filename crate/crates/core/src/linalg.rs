//! Dense symmetric positive-definite helpers on top of `faer`.

use faer::linalg::solvers::{DenseSolveCore, Llt, Solve};
use faer::{Mat, Side};

use crate::error::{Error, Result};

/// First diagonal jitter tried when a factorization fails.
pub const JITTER_START: f64 = 1e-10;
/// Largest diagonal jitter before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// Cholesky factor of a symmetric positive-definite matrix together with the
/// diagonal jitter that had to be added to obtain it.
pub struct SpdFactor {
    llt: Llt<f64>,
    jitter: f64,
}

impl SpdFactor {
    /// Factorizes `matrix`, retrying with diagonal jitter 1e-10, 1e-9, ...,
    /// 1e-4 when the plain factorization fails.
    pub fn new(matrix: &Mat<f64>) -> Result<Self> {
        if let Ok(llt) = matrix.llt(Side::Lower) {
            return Ok(Self { llt, jitter: 0.0 });
        }
        let n = matrix.nrows();
        let mut jitter = JITTER_START;
        while jitter <= JITTER_MAX * (1.0 + 1e-9) {
            let mut jittered = matrix.clone();
            for i in 0..n {
                jittered[(i, i)] += jitter;
            }
            if let Ok(llt) = jittered.llt(Side::Lower) {
                log::debug!("factorization needed diagonal jitter {jitter:e}");
                return Ok(Self { llt, jitter });
            }
            jitter *= 10.0;
        }
        let (lo, hi) = diagonal_range(matrix);
        Err(Error::Numerical(format!(
            "matrix of order {n} is not positive definite even with jitter {JITTER_MAX:e} \
             (diagonal range [{lo:e}, {hi:e}])"
        )))
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn solve_vec(&self, rhs: &[f64]) -> Vec<f64> {
        let b = Mat::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = self.llt.solve(&b);
        (0..rhs.len()).map(|i| x[(i, 0)]).collect()
    }

    /// Solves `L w = rhs` for the lower factor only.
    pub fn solve_lower(&self, rhs: &[f64]) -> Vec<f64> {
        let l = self.llt.L();
        let n = rhs.len();
        let mut w = rhs.to_vec();
        for i in 0..n {
            let mut acc = w[i];
            for j in 0..i {
                acc -= l[(i, j)] * w[j];
            }
            w[i] = acc / l[(i, i)];
        }
        w
    }

    /// log |A| from the diagonal of the factor.
    pub fn log_det(&self) -> f64 {
        let l = self.llt.L();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }

    /// Copy of the lower-triangular factor.
    pub fn lower(&self) -> Mat<f64> {
        self.llt.L().to_owned()
    }
}

fn diagonal_range(m: &Mat<f64>) -> (f64, f64) {
    (0..m.nrows()).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), i| (lo.min(m[(i, i)]), hi.max(m[(i, i)])))
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_solves_small_system() {
        let m = Mat::from_fn(2, 2, |i, j| if i == j { 2.0 } else { 1.0 });
        let f = SpdFactor::new(&m).unwrap();
        assert_eq!(f.jitter(), 0.0);
        let x = f.solve_vec(&[3.0, 3.0]);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
        assert!((f.log_det() - 3f64.ln()).abs() < 1e-14);
        let w = f.solve_lower(&[3.0, 3.0]);
        let wtw: f64 = w.iter().map(|v| v * v).sum();
        // 3 1^T A^{-1} 3 1 = 9 * 2/3 = 6
        assert!((wtw - 6.0).abs() < 1e-12);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let m = Mat::from_fn(3, 3, |_, _| 1.0);
        let f = SpdFactor::new(&m).unwrap();
        assert!(f.jitter() > 0.0 && f.jitter() <= JITTER_MAX);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let m = Mat::from_fn(2, 2, |i, j| if i == j { -1.0 } else { 0.0 });
        assert!(matches!(SpdFactor::new(&m), Err(Error::Numerical(_))));
    }
}
