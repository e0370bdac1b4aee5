//! Gaussian-process prior with an isotropic RBF kernel and posterior inference
//! of the sensed value from a measurement window plus elapsed time.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::{squared_distance, SpdFactor};

/// Negative posterior variances down to this value are treated as round-off.
pub const VARIANCE_CLAMP_TOLERANCE: f64 = 1e-8;

/// Raw sensor outputs `y_{k-p} .. y_{k+ell}` followed by the elapsed time `t_k`
/// in seconds since deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub window: Vec<f64>,
    pub elapsed_time: f64,
}

impl FeatureVector {
    pub fn new(window: Vec<f64>, elapsed_time: f64) -> Result<Self> {
        if !(elapsed_time >= 0.0) {
            return invalid(format!("elapsed time must be non-negative, got {elapsed_time}"));
        }
        if window.is_empty() {
            return invalid("measurement window is empty");
        }
        Ok(Self { window, elapsed_time })
    }

    /// Total feature dimension (`window.len() + 1`).
    pub fn dim(&self) -> usize {
        self.window.len() + 1
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.dim());
        v.extend_from_slice(&self.window);
        v.push(self.elapsed_time);
        v
    }
}

/// A feature vector paired with a (possibly noisy) reference value in
/// physical units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    pub features: FeatureVector,
    pub reference: f64,
}

/// Kernel length scale, kernel amplitude and reference-noise standard deviation,
/// all in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub delta: f64,
    pub sigma: f64,
    pub sigma_u_tilde: f64,
}

impl Hyperparameters {
    pub fn new(delta: f64, sigma: f64, sigma_u_tilde: f64) -> Result<Self> {
        let theta = Self { delta, sigma, sigma_u_tilde };
        theta.validate()?;
        Ok(theta)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("delta", self.delta), ("sigma", self.sigma), ("sigma_u_tilde", self.sigma_u_tilde)] {
            if !(v > 0.0 && v.is_finite()) {
                return invalid(format!("hyperparameter {name} must be positive and finite, got {v}"));
            }
        }
        Ok(())
    }

    pub fn to_log(&self) -> [f64; 3] {
        [self.delta.ln(), self.sigma.ln(), self.sigma_u_tilde.ln()]
    }

    pub fn from_log(log: [f64; 3]) -> Self {
        Self { delta: log[0].exp(), sigma: log[1].exp(), sigma_u_tilde: log[2].exp() }
    }
}

/// `sigma^2 * exp(-|a - b|^2 / (2 delta^2))`.
pub fn kernel_eval(a: &[f64], b: &[f64], delta: f64, sigma: f64) -> Result<f64> {
    if a.len() != b.len() {
        return invalid(format!("kernel arguments differ in dimension: {} vs {}", a.len(), b.len()));
    }
    if !(delta > 0.0 && sigma > 0.0) {
        return invalid("kernel delta and sigma must be positive");
    }
    Ok(rbf(squared_distance(a, b), delta, sigma))
}

#[inline]
pub(crate) fn rbf(sq_dist: f64, delta: f64, sigma: f64) -> f64 {
    sigma * sigma * (-sq_dist / (2.0 * delta * delta)).exp()
}

/// Kernel Gram matrix `Sigma_u` without the noise diagonal.
pub fn kernel_matrix(inputs: &[Vec<f64>], delta: f64, sigma: f64) -> Mat<f64> {
    let n = inputs.len();
    let mut k = Mat::<f64>::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = sigma * sigma;
        for j in 0..i {
            let v = rbf(squared_distance(&inputs[i], &inputs[j]), delta, sigma);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// `Sigma_11 = Sigma_u + sigma_u_tilde^2 I`.
pub fn noisy_kernel_matrix(inputs: &[Vec<f64>], theta: &Hyperparameters) -> Mat<f64> {
    let mut k = kernel_matrix(inputs, theta.delta, theta.sigma);
    let noise = theta.sigma_u_tilde * theta.sigma_u_tilde;
    for i in 0..inputs.len() {
        k[(i, i)] += noise;
    }
    k
}

/// GP posterior over data that is already in normalized units.
pub struct GaussianProcess {
    inputs: Vec<Vec<f64>>,
    targets: Vec<f64>,
    theta: Hyperparameters,
    mu: f64,
    factor: SpdFactor,
    alpha: Vec<f64>,
}

impl GaussianProcess {
    pub fn fit(inputs: Vec<Vec<f64>>, targets: Vec<f64>, theta: Hyperparameters) -> Result<Self> {
        theta.validate()?;
        if inputs.is_empty() {
            return invalid("cannot condition a Gaussian process on an empty dataset");
        }
        if inputs.len() != targets.len() {
            return invalid(format!("{} inputs but {} targets", inputs.len(), targets.len()));
        }
        let dim = inputs[0].len();
        if inputs.iter().any(|z| z.len() != dim) {
            return invalid("inputs have inconsistent dimensions");
        }
        let mu = targets.iter().sum::<f64>() / targets.len() as f64;
        let factor = SpdFactor::new(&noisy_kernel_matrix(&inputs, &theta))?;
        let residual: Vec<f64> = targets.iter().map(|u| u - mu).collect();
        let alpha = factor.solve_vec(&residual);
        Ok(Self { inputs, targets, theta, mu, factor, alpha })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn theta(&self) -> &Hyperparameters {
        &self.theta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn factor(&self) -> &SpdFactor {
        &self.factor
    }

    /// `Sigma_12(z)`: covariances between the stored inputs and `z`.
    pub fn cross_covariance(&self, z: &[f64]) -> Vec<f64> {
        self.inputs.iter().map(|zi| rbf(squared_distance(zi, z), self.theta.delta, self.theta.sigma)).collect()
    }

    /// Posterior mean and variance at `z`, both in normalized units.
    ///
    /// The variance is clamped at zero when round-off drives it slightly
    /// negative; anything below `-VARIANCE_CLAMP_TOLERANCE` is an error.
    pub fn posterior(&self, z: &[f64]) -> Result<(f64, f64)> {
        if z.len() != self.dim() {
            return invalid(format!("query has dimension {}, model expects {}", z.len(), self.dim()));
        }
        let k = self.cross_covariance(z);
        let mean = self.mu + k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum::<f64>();
        let w = self.factor.solve_lower(&k);
        let explained: f64 = w.iter().map(|v| v * v).sum();
        let mut variance = self.theta.sigma * self.theta.sigma - explained;
        if variance < 0.0 {
            if variance < -VARIANCE_CLAMP_TOLERANCE {
                return Err(Error::Numerical(format!("posterior variance {variance:e} is negative")));
            }
            log::warn!("clamping posterior variance {variance:e} to zero");
            variance = 0.0;
        }
        Ok((mean, variance))
    }
}

/// How features and targets are scaled before they reach the kernel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NormalizationConfig {
    /// Z-score every feature dimension with training-set statistics.
    pub standardize_features: bool,
    /// Physical reference units per normalized unit (e.g. 400 mg/dL).
    pub target_scale: f64,
    /// Sensor lifespan in seconds; queries beyond it are logged.
    pub lifespan_s: Option<f64>,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        Self { standardize_features: true, target_scale: 400.0, lifespan_s: None }
    }
}

/// Per-dimension affine map applied to raw feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], std: vec![1.0; dim] }
    }

    /// Sample mean and (population) standard deviation of each dimension.
    /// Constant dimensions keep a unit scale.
    pub fn from_samples(samples: &[CalibrationSample]) -> Self {
        let dim = samples[0].features.dim();
        let n = samples.len() as f64;
        let mut mean = vec![0.0; dim];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(s.features.to_vec()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(s.features.to_vec()).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| {
                let sd = (v / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| (v - m) / s).collect()
    }
}

/// Posterior estimate of the sensed value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PosteriorEstimate {
    /// Physical units.
    pub mean: f64,
    /// Physical units squared.
    pub variance: f64,
    /// `1 / sqrt(normalized variance)`.
    pub confidence: f64,
}

/// A trained statistical dynamic calibration map.
///
/// Immutable once built; online updates construct a replacement model.
pub struct SdcmModel {
    samples: Vec<CalibrationSample>,
    window_len: usize,
    feature_stats: FeatureStats,
    target_scale: f64,
    lifespan_s: Option<f64>,
    gp: GaussianProcess,
}

impl SdcmModel {
    /// Computes normalization statistics from `samples` and conditions the GP.
    pub fn build(
        samples: Vec<CalibrationSample>,
        theta: Hyperparameters,
        config: &NormalizationConfig,
    ) -> Result<Self> {
        if samples.len() < 2 {
            return invalid(format!("need at least 2 calibration samples, got {}", samples.len()));
        }
        let window_len = check_samples(&samples)?;
        let stats = if config.standardize_features {
            FeatureStats::from_samples(&samples)
        } else {
            FeatureStats::identity(window_len + 1)
        };
        Self::with_stats(samples, theta, stats, config.target_scale, config.lifespan_s)
    }

    /// Conditions the GP using frozen normalization statistics.
    pub fn with_stats(
        samples: Vec<CalibrationSample>,
        theta: Hyperparameters,
        feature_stats: FeatureStats,
        target_scale: f64,
        lifespan_s: Option<f64>,
    ) -> Result<Self> {
        if samples.is_empty() {
            return invalid("empty calibration dataset");
        }
        if !(target_scale > 0.0 && target_scale.is_finite()) {
            return invalid(format!("target scale must be positive, got {target_scale}"));
        }
        let window_len = check_samples(&samples)?;
        if feature_stats.mean.len() != window_len + 1 || feature_stats.std.len() != window_len + 1 {
            return invalid("feature statistics do not match the sample dimension");
        }
        let inputs = samples.iter().map(|s| feature_stats.apply(&s.features.to_vec())).collect();
        let targets = samples.iter().map(|s| s.reference / target_scale).collect();
        let gp = GaussianProcess::fit(inputs, targets, theta)?;
        Ok(Self { samples, window_len, feature_stats, target_scale, lifespan_s, gp })
    }

    pub fn samples(&self) -> &[CalibrationSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn theta(&self) -> &Hyperparameters {
        self.gp.theta()
    }

    /// Prior mean in normalized units.
    pub fn mu(&self) -> f64 {
        self.gp.mu()
    }

    pub fn feature_stats(&self) -> &FeatureStats {
        &self.feature_stats
    }

    pub fn target_scale(&self) -> f64 {
        self.target_scale
    }

    pub fn lifespan_s(&self) -> Option<f64> {
        self.lifespan_s
    }

    pub fn gp(&self) -> &GaussianProcess {
        &self.gp
    }

    pub fn normalize_features(&self, z: &FeatureVector) -> Result<Vec<f64>> {
        if z.window.len() != self.window_len {
            return invalid(format!("window has {} entries, model expects {}", z.window.len(), self.window_len));
        }
        if let Some(life) = self.lifespan_s {
            if z.elapsed_time > life {
                log::warn!("elapsed time {} s exceeds sensor lifespan {life} s", z.elapsed_time);
            }
        }
        Ok(self.feature_stats.apply(&z.to_vec()))
    }

    /// Augmented vector `[normalized z, normalized reference]`.
    pub fn augmented(&self, sample: &CalibrationSample) -> Result<Vec<f64>> {
        let mut v = self.normalize_features(&sample.features)?;
        v.push(sample.reference / self.target_scale);
        Ok(v)
    }

    /// Posterior mean/variance in normalized units.
    pub fn predict_normalized(&self, z: &FeatureVector) -> Result<(f64, f64)> {
        let zn = self.normalize_features(z)?;
        self.gp.posterior(&zn)
    }

    pub fn predict(&self, z: &FeatureVector) -> Result<PosteriorEstimate> {
        let (mean, variance) = self.predict_normalized(z)?;
        Ok(PosteriorEstimate {
            mean: mean * self.target_scale,
            variance: variance * self.target_scale * self.target_scale,
            confidence: 1.0 / variance.sqrt(),
        })
    }
}

fn check_samples(samples: &[CalibrationSample]) -> Result<usize> {
    let window_len = samples[0].features.window.len();
    if samples.iter().any(|s| s.features.window.len() != window_len) {
        return invalid("calibration samples do not share one window length");
    }
    if samples.iter().any(|s| !s.reference.is_finite()) {
        return invalid("non-finite reference value in calibration data");
    }
    Ok(window_len)
}
