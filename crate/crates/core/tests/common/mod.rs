//! Independent reference implementations used only by tests.
#![allow(dead_code)]

pub mod update_oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gauss-Jordan inverse with partial pivoting plus the determinant's log.
pub fn dense_inverse(a: &[Vec<f64>]) -> (Vec<Vec<f64>>, f64) {
    let n = a.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut inv: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    let mut log_det = 0.0;
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs())).unwrap();
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        // the matrices here are SPD, so the determinant stays positive
        log_det += p.abs().ln();
        for j in 0..n {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for i in 0..n {
            if i != col {
                let f = m[i][col];
                if f != 0.0 {
                    for j in 0..n {
                        m[i][j] -= f * m[col][j];
                        inv[i][j] -= f * inv[col][j];
                    }
                }
            }
        }
    }
    (inv, log_det)
}

pub fn rbf(a: &[f64], b: &[f64], delta: f64, sigma: f64) -> f64 {
    let mut d2 = 0.0;
    for k in 0..a.len() {
        d2 += (a[k] - b[k]).powi(2);
    }
    sigma.powi(2) * (-d2 / (2.0 * delta.powi(2))).exp()
}

/// Double-loop assembly of `Sigma_u + s^2 I`.
pub fn sigma11(inputs: &[Vec<f64>], delta: f64, sigma: f64, s: f64) -> Vec<Vec<f64>> {
    let n = inputs.len();
    let mut k = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            k[i][j] = rbf(&inputs[i], &inputs[j], delta, sigma);
        }
        k[i][i] += s * s;
    }
    k
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter().map(|row| row.iter().zip(x).map(|(p, q)| p * q).sum()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Posterior mean and variance by explicit inversion.
pub fn oracle_posterior(inputs: &[Vec<f64>], targets: &[f64], delta: f64, sigma: f64, s: f64, z: &[f64]) -> (f64, f64) {
    let mu = targets.iter().sum::<f64>() / targets.len() as f64;
    let (inv, _) = dense_inverse(&sigma11(inputs, delta, sigma, s));
    let k: Vec<f64> = inputs.iter().map(|zi| rbf(zi, z, delta, sigma)).collect();
    let r: Vec<f64> = targets.iter().map(|u| u - mu).collect();
    let a = sigma11(inputs, delta, sigma, s);
    // one step of iterative refinement on K^-1 k
    let mut kinv = mat_vec(&inv, &k);
    let resid: Vec<f64> = k.iter().zip(mat_vec(&a, &kinv)).map(|(p, q)| p - q).collect();
    for (x, d) in kinv.iter_mut().zip(mat_vec(&inv, &resid)) {
        *x += d;
    }
    (dot(&kinv, &r) + mu, sigma * sigma - dot(&k, &kinv))
}

/// Log marginal likelihood by explicit inversion and determinant.
pub fn oracle_lml(inputs: &[Vec<f64>], targets: &[f64], delta: f64, sigma: f64, s: f64) -> f64 {
    let n = targets.len() as f64;
    let mu = targets.iter().sum::<f64>() / n;
    let (inv, log_det) = dense_inverse(&sigma11(inputs, delta, sigma, s));
    let r: Vec<f64> = targets.iter().map(|u| u - mu).collect();
    -0.5 * (dot(&r, &mat_vec(&inv, &r)) + log_det + n * (2.0 * std::f64::consts::PI).ln())
}

/// Random normalized dataset of `n` points in `dim` dimensions.
pub fn random_dataset(n: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let targets = inputs
        .iter()
        .map(|z| 0.3 + 0.1 * z[0].sin() + 0.05 * z.iter().sum::<f64>() + rng.random_range(-0.01..0.01))
        .collect();
    (inputs, targets)
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Lower Cholesky factor of an SPD matrix.
pub fn cholesky(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                l[i][j] = (a[i][i] - s).sqrt();
            } else {
                l[i][j] = (a[i][j] - s) / l[j][j];
            }
        }
    }
    l
}
