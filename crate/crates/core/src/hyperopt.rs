//! Empirical-Bayes selection of the kernel hyperparameters.
//!
//! The log marginal likelihood of the normalized references is maximized in
//! log-parameter space from several starting points. Trial 0 starts from the
//! configured initial guesses, every later trial from an independent
//! log-uniform draw over each range. Each trial is a projected quasi-Newton
//! ascent (BFGS direction, Armijo backtracking, clamping to the box). The best
//! trial wins; ties go to the lowest trial index.

use std::f64::consts::PI;

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::gp::Hyperparameters;
use crate::linalg::{squared_distance, SpdFactor};

/// Initial guess and closed search interval for one hyperparameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRange {
    pub initial: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ParamRange {
    pub const fn new(initial: f64, lo: f64, hi: f64) -> Self {
        Self { initial, lo, hi }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if !(self.lo > 0.0 && self.lo < self.hi && self.hi.is_finite()) {
            return invalid(format!("{name}: range [{}, {}] must satisfy 0 < lo < hi", self.lo, self.hi));
        }
        if !(self.initial >= self.lo && self.initial <= self.hi) {
            return invalid(format!("{name}: initial guess {} outside [{}, {}]", self.initial, self.lo, self.hi));
        }
        Ok(())
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub n_trials: usize,
    pub delta: ParamRange,
    pub sigma: ParamRange,
    pub sigma_u_tilde: ParamRange,
    pub rng_seed: u64,
    pub max_iterations: usize,
    /// Stop once the projected gradient norm (log space) falls below this.
    pub gradient_tolerance: f64,
    /// Stop once an accepted step improves the likelihood by less than this
    /// fraction of its magnitude.
    pub relative_tolerance: f64,
    /// Center the references on their mean before evaluating the likelihood.
    pub centered: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            n_trials: 100,
            delta: ParamRange::new(1.0, 1e-5, 1e4),
            sigma: ParamRange::new(1.0, 1e-5, 1e4),
            sigma_u_tilde: ParamRange::new(1e-3, 1e-5, 1e-1),
            rng_seed: 0,
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            relative_tolerance: 1e-10,
            centered: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trials == 0 {
            return invalid("n_trials must be at least 1");
        }
        self.delta.validate("delta")?;
        self.sigma.validate("sigma")?;
        self.sigma_u_tilde.validate("sigma_u_tilde")?;
        Ok(())
    }

    fn ranges(&self) -> [ParamRange; 3] {
        [self.delta, self.sigma, self.sigma_u_tilde]
    }

    pub fn contains(&self, theta: &Hyperparameters) -> bool {
        self.delta.contains(theta.delta)
            && self.sigma.contains(theta.sigma)
            && self.sigma_u_tilde.contains(theta.sigma_u_tilde)
    }
}

/// Outcome of one restart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub start: Hyperparameters,
    pub theta: Hyperparameters,
    /// `-inf` when the trial could not be evaluated at all.
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
    pub status: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub theta: Hyperparameters,
    pub log_likelihood: f64,
    pub best_trial: usize,
    pub trials: Vec<TrialRecord>,
}

/// Log marginal likelihood of normalized data as a function of the
/// hyperparameters. Pairwise squared distances are computed once.
pub struct MarginalLikelihood {
    residual: Vec<f64>,
    sq_dist: Mat<f64>,
}

struct Evaluation {
    value: f64,
    kernel: Mat<f64>,
    factor: SpdFactor,
    alpha: Vec<f64>,
}

impl MarginalLikelihood {
    pub fn new(inputs: &[Vec<f64>], targets: &[f64], centered: bool) -> Result<Self> {
        if inputs.is_empty() || inputs.len() != targets.len() {
            return invalid(format!(
                "likelihood needs matching non-empty inputs/targets ({} vs {})",
                inputs.len(),
                targets.len()
            ));
        }
        let n = inputs.len();
        let mu = if centered { targets.iter().sum::<f64>() / n as f64 } else { 0.0 };
        let residual = targets.iter().map(|u| u - mu).collect();
        let mut sq_dist = Mat::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..i {
                let d = squared_distance(&inputs[i], &inputs[j]);
                sq_dist[(i, j)] = d;
                sq_dist[(j, i)] = d;
            }
        }
        Ok(Self { residual, sq_dist })
    }

    pub fn len(&self) -> usize {
        self.residual.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residual.is_empty()
    }

    fn evaluate(&self, theta: &Hyperparameters) -> Result<Evaluation> {
        let n = self.len();
        let s2 = theta.sigma * theta.sigma;
        let two_d2 = 2.0 * theta.delta * theta.delta;
        let noise = theta.sigma_u_tilde * theta.sigma_u_tilde;
        let kernel =
            Mat::from_fn(n, n, |i, j| if i == j { s2 + noise } else { s2 * (-self.sq_dist[(i, j)] / two_d2).exp() });
        let factor = SpdFactor::new(&kernel)?;
        let alpha = factor.solve_vec(&self.residual);
        let fit: f64 = self.residual.iter().zip(&alpha).map(|(r, a)| r * a).sum();
        let value = -0.5 * (fit + factor.log_det() + n as f64 * (2.0 * PI).ln());
        if !value.is_finite() {
            return Err(Error::Numerical(format!("non-finite log likelihood at {theta:?}")));
        }
        Ok(Evaluation { value, kernel, factor, alpha })
    }

    pub fn value(&self, theta: &Hyperparameters) -> Result<f64> {
        Ok(self.evaluate(theta)?.value)
    }

    /// Gradient with respect to `(ln delta, ln sigma, ln sigma_u_tilde)`.
    pub fn gradient(&self, theta: &Hyperparameters) -> Result<[f64; 3]> {
        let eval = self.evaluate(theta)?;
        Ok(self.gradient_at(theta, &eval))
    }

    pub fn value_and_gradient(&self, theta: &Hyperparameters) -> Result<(f64, [f64; 3])> {
        let eval = self.evaluate(theta)?;
        Ok((eval.value, self.gradient_at(theta, &eval)))
    }

    // dL/dphi_j = 1/2 tr((a a^T - K^-1) dK/dphi_j) with
    //   dK/dln(delta) = Ku o D2 / delta^2
    //   dK/dln(sigma) = 2 Ku
    //   dK/dln(s)     = 2 s^2 I
    fn gradient_at(&self, theta: &Hyperparameters, eval: &Evaluation) -> [f64; 3] {
        let n = self.len();
        let inv = eval.factor.inverse();
        let a = &eval.alpha;
        let s2 = theta.sigma * theta.sigma;
        let inv_d2 = 1.0 / (theta.delta * theta.delta);
        let noise = theta.sigma_u_tilde * theta.sigma_u_tilde;
        let mut g_delta = 0.0;
        let mut g_sigma = 0.0;
        let mut trace_inv = 0.0;
        for j in 0..n {
            // diagonal: Ku = sigma^2, D2 = 0
            let w = a[j] * a[j] - inv[(j, j)];
            g_sigma += w * s2;
            trace_inv += inv[(j, j)];
            for i in (j + 1)..n {
                let w = 2.0 * (a[i] * a[j] - inv[(i, j)]);
                let ku = eval.kernel[(i, j)];
                g_sigma += w * ku;
                g_delta += w * ku * self.sq_dist[(i, j)];
            }
        }
        let alpha_sq: f64 = a.iter().map(|v| v * v).sum();
        [0.5 * g_delta * inv_d2, g_sigma, (alpha_sq - trace_inv) * noise]
    }
}

/// Log marginal likelihood of `targets` (centered on their mean) under the
/// GP prior with hyperparameters `theta`.
pub fn log_marginal_likelihood(inputs: &[Vec<f64>], targets: &[f64], theta: &Hyperparameters) -> Result<f64> {
    MarginalLikelihood::new(inputs, targets, true)?.value(theta)
}

/// Gradient of [`log_marginal_likelihood`] in log-parameter space.
pub fn likelihood_gradient(inputs: &[Vec<f64>], targets: &[f64], theta: &Hyperparameters) -> Result<[f64; 3]> {
    MarginalLikelihood::new(inputs, targets, true)?.gradient(theta)
}

/// Multi-start maximization of the log marginal likelihood.
pub fn fit(inputs: &[Vec<f64>], targets: &[f64], config: &SearchConfig) -> Result<FitResult> {
    config.validate()?;
    let surface = MarginalLikelihood::new(inputs, targets, config.centered)?;
    let ranges = config.ranges();
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);

    // Draw every start up front so the trial log does not depend on how
    // individual trials terminate.
    let starts: Vec<[f64; 3]> = (0..config.n_trials)
        .map(|t| {
            if t == 0 {
                [ranges[0].initial.ln(), ranges[1].initial.ln(), ranges[2].initial.ln()]
            } else {
                let mut s = [0.0; 3];
                for (x, r) in s.iter_mut().zip(&ranges) {
                    *x = rng.random_range(r.lo.ln()..=r.hi.ln());
                }
                s
            }
        })
        .collect();

    let trials: Vec<TrialRecord> =
        starts.iter().enumerate().map(|(t, start)| run_trial(&surface, t, *start, &ranges, config)).collect();

    let mut best: Option<&TrialRecord> = None;
    for rec in &trials {
        if rec.log_likelihood.is_finite() && best.is_none_or(|b| rec.log_likelihood > b.log_likelihood) {
            best = Some(rec);
        }
    }
    let best = best
        .ok_or_else(|| Error::Numerical(format!("all {} hyperparameter trials failed to factorize", trials.len())))?;
    log::info!(
        "best trial {} of {}: theta = {:?}, log likelihood {:.6}",
        best.trial,
        trials.len(),
        best.theta,
        best.log_likelihood
    );
    Ok(FitResult { theta: best.theta, log_likelihood: best.log_likelihood, best_trial: best.trial, trials })
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 40;

fn clamp_box(x: [f64; 3], lo: &[f64; 3], hi: &[f64; 3]) -> [f64; 3] {
    let mut out = x;
    for i in 0..3 {
        out[i] = x[i].clamp(lo[i], hi[i]);
    }
    out
}

fn dot(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn mat_vec(h: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    [dot(&h[0], v), dot(&h[1], v), dot(&h[2], v)]
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Maps a log-space point to hyperparameters inside the box. Clamping again
/// after `exp` keeps round-off from stepping past a bound.
fn theta_at(x: [f64; 3], ranges: &[ParamRange; 3]) -> Hyperparameters {
    let t = Hyperparameters::from_log(x);
    Hyperparameters {
        delta: t.delta.clamp(ranges[0].lo, ranges[0].hi),
        sigma: t.sigma.clamp(ranges[1].lo, ranges[1].hi),
        sigma_u_tilde: t.sigma_u_tilde.clamp(ranges[2].lo, ranges[2].hi),
    }
}

fn run_trial(
    surface: &MarginalLikelihood,
    trial: usize,
    start: [f64; 3],
    ranges: &[ParamRange; 3],
    config: &SearchConfig,
) -> TrialRecord {
    let lo = [ranges[0].lo.ln(), ranges[1].lo.ln(), ranges[2].lo.ln()];
    let hi = [ranges[0].hi.ln(), ranges[1].hi.ln(), ranges[2].hi.ln()];
    let mut x = clamp_box(start, &lo, &hi);
    let start_theta = theta_at(x, ranges);
    let record = |x: [f64; 3], value: f64, iterations, converged, status: &str| TrialRecord {
        trial,
        start: start_theta,
        theta: theta_at(x, ranges),
        log_likelihood: value,
        iterations,
        converged,
        status: status.to_string(),
    };

    let (mut value, mut grad) = match surface.value_and_gradient(&theta_at(x, ranges)) {
        Ok(vg) => vg,
        Err(e) => return record(x, f64::NEG_INFINITY, 0, false, &format!("start failed: {e}")),
    };
    // Inverse Hessian approximation of the negated objective.
    let mut h = IDENTITY;
    let mut scaled = false;

    for iter in 0..config.max_iterations {
        let mut pg = grad;
        for i in 0..3 {
            if (x[i] <= lo[i] && pg[i] < 0.0) || (x[i] >= hi[i] && pg[i] > 0.0) {
                pg[i] = 0.0;
            }
        }
        let pg_norm = dot(&pg, &pg).sqrt();
        if pg_norm < config.gradient_tolerance {
            return record(x, value, iter, true, "gradient tolerance");
        }

        let mut dir = if scaled { mat_vec(&h, &pg) } else { pg.map(|g| g / pg_norm) };
        for i in 0..3 {
            if pg[i] == 0.0 {
                dir[i] = 0.0;
            }
        }
        if dot(&dir, &pg) <= 0.0 {
            h = IDENTITY;
            scaled = false;
            dir = pg.map(|g| g / pg_norm);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let cand = clamp_box([x[0] + step * dir[0], x[1] + step * dir[1], x[2] + step * dir[2]], &lo, &hi);
            let moved = [cand[0] - x[0], cand[1] - x[1], cand[2] - x[2]];
            if dot(&moved, &moved) == 0.0 {
                break;
            }
            let theta = theta_at(cand, ranges);
            if let Ok(eval) = surface.evaluate(&theta) {
                if eval.value >= value + ARMIJO_C1 * dot(&grad, &moved) {
                    let g = surface.gradient_at(&theta, &eval);
                    accepted = Some((cand, eval.value, g, moved));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, new_value, new_grad, s)) = accepted else {
            return record(x, value, iter, false, "line search stalled");
        };

        // BFGS update for the minimization of -L: y = grad_old - grad_new.
        let y = [grad[0] - new_grad[0], grad[1] - new_grad[1], grad[2] - new_grad[2]];
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if !scaled {
                let gamma = sy / dot(&y, &y);
                h = IDENTITY.map(|row| row.map(|v| v * gamma));
                scaled = true;
            }
            bfgs_update(&mut h, &s, &y, sy);
        }

        let improvement = new_value - value;
        x = cand;
        value = new_value;
        grad = new_grad;
        if improvement.abs() <= config.relative_tolerance * value.abs().max(1.0) {
            return record(x, value, iter + 1, true, "relative tolerance");
        }
    }
    record(x, value, config.max_iterations, false, "iteration limit")
}

fn bfgs_update(h: &mut [[f64; 3]; 3], s: &[f64; 3], y: &[f64; 3], sy: f64) {
    let rho = 1.0 / sy;
    let hy = mat_vec(h, y);
    let yhy = dot(y, &hy);
    let mut next = *h;
    for i in 0..3 {
        for j in 0..3 {
            next[i][j] += (1.0 + rho * yhy) * rho * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
    *h = next;
}
