//! Independent re-derivation of the replacement rule, checked event by event.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sdcm::gp::{CalibrationSample, FeatureVector, Hyperparameters};
use sdcm::online::{update_step, Decision, ReplacementBranch, UpdateConfig};
use sdcm::windowing::{extract_samples, TimeSeries, WindowSpec};
use sdcm::SdcmModel;

#[derive(Debug, Default)]
pub struct SuiteOutcome {
    pub events: usize,
    pub replaced: usize,
    pub outliers: usize,
    pub nearest: usize,
    pub redundant: usize,
    pub cardinality_violations: usize,
    pub admitted_outliers: usize,
    pub branch_mismatches: usize,
}

impl SuiteOutcome {
    pub fn ok(&self) -> bool {
        self.cardinality_violations == 0 && self.admitted_outliers == 0 && self.branch_mismatches == 0
    }
}

fn base_series(id: &str, phase: f64) -> TimeSeries {
    let n = 40;
    let t: Vec<f64> = (0..n).map(|k| k as f64 * 540.0).collect();
    let u: Vec<f64> = t.iter().map(|&t| 140.0 + 50.0 * (t / 6000.0 + phase).sin()).collect();
    let y: Vec<f64> = u.iter().zip(&t).map(|(u, t)| 0.002 * u * (1.0 - t / 2e5)).collect();
    TimeSeries::new(id, t, y, Some(u), 540.0).unwrap()
}

pub fn base_model() -> SdcmModel {
    let spec = WindowSpec::new(2, 1);
    let mut samples = extract_samples(&base_series("a", 0.0), &spec).unwrap();
    samples.extend(extract_samples(&base_series("b", 1.7), &spec).unwrap());
    SdcmModel::build(samples, Hyperparameters::new(1.2, 0.5, 0.01).unwrap(), &Default::default()).unwrap()
}

fn augmented(model: &SdcmModel, s: &CalibrationSample) -> Vec<f64> {
    let st = model.feature_stats();
    let mut v: Vec<f64> = s.features.to_vec().iter().enumerate().map(|(i, x)| (x - st.mean[i]) / st.std[i]).collect();
    v.push(s.reference / model.target_scale());
    v
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn expected_index(model: &SdcmModel, v_new: &[f64], gamma: f64, cfg: &UpdateConfig) -> (usize, ReplacementBranch) {
    let vs: Vec<Vec<f64>> = model.samples().iter().map(|s| augmented(model, s)).collect();
    let pick = |scores: Vec<f64>, better: fn(f64, f64) -> bool| {
        let mut best = 0;
        for i in 1..scores.len() {
            if better(scores[i], scores[best]) {
                best = i;
            }
        }
        best
    };
    if gamma >= cfg.eps_gamma {
        let d = vs.iter().map(|v| dist(v, v_new)).collect();
        (pick(d, |a, b| a < b), ReplacementBranch::Nearest)
    } else {
        let sums = vs.iter().map(|vi| vs.iter().map(|vj| (-cfg.c * dist(vi, vj)).exp()).sum()).collect();
        (pick(sums, |a, b| a > b), ReplacementBranch::MostRedundant)
    }
}

fn random_sample(model: &SdcmModel, rng: &mut ChaCha8Rng) -> CalibrationSample {
    let base = &model.samples()[rng.random_range(0..model.len())];
    let spread = if rng.random_bool(0.5) { 0.02 } else { 0.3 };
    let window: Vec<f64> = base.features.window.iter().map(|y| y * (1.0 + rng.random_range(-spread..spread))).collect();
    let t = (base.features.elapsed_time + rng.random_range(-3000.0..3000.0)).max(0.0);
    let features = FeatureVector::new(window, t).unwrap();
    let (mean, _) = model.predict_normalized(&features).unwrap();
    // mostly plausible references, with a fraction of gross errors
    let offset = if rng.random_bool(0.25) { rng.random_range(0.1..0.3) } else { rng.random_range(-0.03..0.03) };
    let reference = (mean + offset).max(0.01) * model.target_scale() + rng.random_range(0.0..1e-6);
    CalibrationSample { features, reference }
}

/// Drives `n_events` random samples through the update rule and checks every
/// event against the rule recomputed from scratch.
pub fn run_suite(n_events: usize, seed: u64) -> SuiteOutcome {
    let cfg = UpdateConfig::new(0.05, 0.6, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = base_model();
    let n0 = model.len();
    let mut rejected: Vec<CalibrationSample> = Vec::new();
    let mut out = SuiteOutcome::default();
    for step in 0..n_events {
        let sample = random_sample(&model, &mut rng);
        let (mean, var) = model.predict_normalized(&sample.features).unwrap();
        let residual = (mean - sample.reference / model.target_scale()).abs();
        let gamma = 1.0 / var.sqrt();
        let (next, event) = update_step(&model, &sample, &cfg, step).unwrap();
        out.events += 1;
        if residual > cfg.eps_u {
            out.outliers += 1;
            if next.is_some() || event.decision != Decision::OutlierAlert {
                out.admitted_outliers += 1;
            }
            rejected.push(sample);
        } else {
            out.replaced += 1;
            let (idx, branch) = expected_index(&model, &augmented(&model, &sample), gamma, &cfg);
            match branch {
                ReplacementBranch::Nearest => out.nearest += 1,
                ReplacementBranch::MostRedundant => out.redundant += 1,
            }
            if event.replaced_index != Some(idx) || event.branch != Some(branch) {
                out.branch_mismatches += 1;
            }
            match next {
                Some(m) => model = m,
                None => out.branch_mismatches += 1,
            }
        }
        if model.len() != n0 {
            out.cardinality_violations += 1;
        }
    }
    for r in &rejected {
        if model.samples().contains(r) {
            out.admitted_outliers += 1;
        }
    }
    out
}
