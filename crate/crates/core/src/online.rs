//! Online maintenance of the calibration dataset.
//!
//! Each new sample is first gated by its prediction residual. Accepted samples
//! replace one stored sample, so the dataset size never changes: the nearest
//! stored sample when the model is confident at the new input, otherwise the
//! most redundant one (largest similarity row sum). The GP is then
//! re-conditioned with the hyperparameters and feature normalization frozen.

use std::io::{BufRead, Write};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::eval::pae;
use crate::gp::{CalibrationSample, SdcmModel};
use crate::linalg::squared_distance;

/// Thresholds of the update rule, in normalized units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpdateConfig {
    /// Outlier threshold on `|predicted mean - reference|`.
    pub eps_u: f64,
    /// Decay rate of the similarity `exp(-c |v_i - v_j|)`.
    pub c: f64,
    /// Confidence threshold selecting the replacement branch.
    pub eps_gamma: f64,
}

impl UpdateConfig {
    pub fn new(eps_u: f64, c: f64, eps_gamma: f64) -> Result<Self> {
        let cfg = Self { eps_u, c, eps_gamma };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("eps_u", self.eps_u), ("c", self.c), ("eps_gamma", self.eps_gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return invalid(format!("update parameter {name} must be finite and non-negative, got {v}"));
            }
        }
        Ok(())
    }
}

/// `|mu(z_new) - u_new| > eps_u`, all in normalized units.
pub fn is_outlier(model: &SdcmModel, sample: &CalibrationSample, eps_u: f64) -> Result<bool> {
    Ok(residual(model, sample)? > eps_u)
}

fn residual(model: &SdcmModel, sample: &CalibrationSample) -> Result<f64> {
    let (mean, _) = model.predict_normalized(&sample.features)?;
    Ok((mean - sample.reference / model.target_scale()).abs())
}

/// `S[i][j] = exp(-c |v_i - v_j|)` over augmented vectors.
pub fn similarity_matrix(augmented: &[Vec<f64>], c: f64) -> Vec<Vec<f64>> {
    let n = augmented.len();
    let mut s = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in 0..i {
            let v = (-c * squared_distance(&augmented[i], &augmented[j]).sqrt()).exp();
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

/// Which side of the confidence threshold selected the replaced sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReplacementBranch {
    Nearest,
    MostRedundant,
}

/// Index to overwrite given augmented vectors, the new augmented vector and
/// the confidence at the new input. Ties go to the lowest index.
pub fn select_replacement(
    augmented: &[Vec<f64>],
    v_new: &[f64],
    gamma: f64,
    config: &UpdateConfig,
) -> Result<(usize, ReplacementBranch)> {
    if augmented.is_empty() {
        return Err(Error::InvalidState("cannot replace a sample in an empty dataset".into()));
    }
    if gamma >= config.eps_gamma {
        let mut best = (0, f64::INFINITY);
        for (i, v) in augmented.iter().enumerate() {
            let d = squared_distance(v, v_new);
            if d < best.1 {
                best = (i, d);
            }
        }
        Ok((best.0, ReplacementBranch::Nearest))
    } else {
        let n = augmented.len();
        let mut sums = vec![1.0; n];
        for i in 0..n {
            for j in 0..i {
                let v = (-config.c * squared_distance(&augmented[i], &augmented[j]).sqrt()).exp();
                sums[i] += v;
                sums[j] += v;
            }
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &s) in sums.iter().enumerate() {
            if s > best.1 {
                best = (i, s);
            }
        }
        Ok((best.0, ReplacementBranch::MostRedundant))
    }
}

/// Chooses the stored sample that `sample` should replace.
pub fn choose_replacement(
    model: &SdcmModel,
    sample: &CalibrationSample,
    config: &UpdateConfig,
) -> Result<(usize, ReplacementBranch)> {
    let (_, variance) = model.predict_normalized(&sample.features)?;
    let augmented = augmented_dataset(model)?;
    select_replacement(&augmented, &model.augmented(sample)?, 1.0 / variance.sqrt(), config)
}

/// `[normalized z, normalized reference]` for every stored sample.
pub fn augmented_dataset(model: &SdcmModel) -> Result<Vec<Vec<f64>>> {
    model.samples().iter().map(|s| model.augmented(s)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Replaced,
    OutlierAlert,
}

/// Audit record of one observed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateEvent {
    pub step: usize,
    /// Elapsed time of the observed sample, seconds.
    pub timestamp: f64,
    pub decision: Decision,
    /// Normalized absolute prediction residual.
    pub residual: f64,
    pub gamma: f64,
    pub branch: Option<ReplacementBranch>,
    pub replaced_index: Option<usize>,
    pub config: UpdateConfig,
    pub sample: CalibrationSample,
}

/// One iteration of the update loop. Returns the replacement model (or `None`
/// when the sample was rejected as an outlier) and the audit record.
pub fn update_step(
    model: &SdcmModel,
    sample: &CalibrationSample,
    config: &UpdateConfig,
    step: usize,
) -> Result<(Option<SdcmModel>, UpdateEvent)> {
    config.validate()?;
    let (mean, variance) = model.predict_normalized(&sample.features)?;
    let res = (mean - sample.reference / model.target_scale()).abs();
    let gamma = 1.0 / variance.sqrt();
    let mut event = UpdateEvent {
        step,
        timestamp: sample.features.elapsed_time,
        decision: Decision::OutlierAlert,
        residual: res,
        gamma,
        branch: None,
        replaced_index: None,
        config: *config,
        sample: sample.clone(),
    };
    if res > config.eps_u {
        log::info!("step {step}: outlier alert (residual {res:.4} > {:.4})", config.eps_u);
        return Ok((None, event));
    }
    let augmented = augmented_dataset(model)?;
    let (index, branch) = select_replacement(&augmented, &model.augmented(sample)?, gamma, config)?;
    let mut samples = model.samples().to_vec();
    samples[index] = sample.clone();
    let next = SdcmModel::with_stats(
        samples,
        *model.theta(),
        model.feature_stats().clone(),
        model.target_scale(),
        model.lifespan_s(),
    )?;
    event.decision = Decision::Replaced;
    event.branch = Some(branch);
    event.replaced_index = Some(index);
    Ok((Some(next), event))
}

/// Single-writer owner of the current model. Readers clone the `Arc` and keep
/// predicting on it while an update builds its replacement.
pub struct OnlineCalibrator {
    model: Arc<SdcmModel>,
    config: UpdateConfig,
    events: Vec<UpdateEvent>,
}

impl OnlineCalibrator {
    pub fn new(model: SdcmModel, config: UpdateConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { model: Arc::new(model), config, events: Vec::new() })
    }

    pub fn model(&self) -> Arc<SdcmModel> {
        Arc::clone(&self.model)
    }

    pub fn events(&self) -> &[UpdateEvent] {
        &self.events
    }

    /// Runs one update. On a numerical failure the current model is kept.
    pub fn observe(&mut self, sample: &CalibrationSample) -> Result<&UpdateEvent> {
        let (next, event) = update_step(&self.model, sample, &self.config, self.events.len())?;
        if let Some(next) = next {
            self.model = Arc::new(next);
        }
        self.events.push(event);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn into_parts(self) -> (Arc<SdcmModel>, Vec<UpdateEvent>) {
        (self.model, self.events)
    }
}

/// Re-applies the samples of an event log with `config`.
pub fn replay(model: SdcmModel, events: &[UpdateEvent], config: UpdateConfig) -> Result<OnlineCalibrator> {
    let mut cal = OnlineCalibrator::new(model, config)?;
    for e in events {
        cal.observe(&e.sample)?;
    }
    Ok(cal)
}

pub fn write_events<W: Write>(events: &[UpdateEvent], mut w: W) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut w, e)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_events<R: BufRead>(r: R) -> Result<Vec<UpdateEvent>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `n_points` stratified samples over `ranges`: each range is cut into
/// `n_points` equal subintervals and every subinterval receives exactly one
/// coordinate.
pub fn latin_hypercube<R: Rng>(n_points: usize, ranges: &[(f64, f64)], rng: &mut R) -> Vec<Vec<f64>> {
    let mut points = vec![vec![0.0; ranges.len()]; n_points];
    for (d, &(lo, hi)) in ranges.iter().enumerate() {
        let mut strata: Vec<usize> = (0..n_points).collect();
        strata.shuffle(rng);
        for (point, stratum) in points.iter_mut().zip(strata) {
            let u: f64 = rng.random();
            point[d] = lo + (hi - lo) * (stratum as f64 + u) / n_points as f64;
        }
    }
    points
}

/// Search box and candidate count for tuning the update parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LhsConfig {
    pub n_candidates: usize,
    pub eps_u: (f64, f64),
    pub c: (f64, f64),
    pub eps_gamma: (f64, f64),
    /// Samples with elapsed time below this drive updates; the rest are scored.
    pub update_until_s: f64,
}

impl Default for LhsConfig {
    fn default() -> Self {
        Self { n_candidates: 6, eps_u: (0.0, 0.1), c: (0.2, 1.0), eps_gamma: (2.0, 7.0), update_until_s: 9.0 * 3600.0 }
    }
}

impl LhsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates == 0 {
            return invalid("need at least one tuning candidate");
        }
        for (name, (lo, hi)) in [("eps_u", self.eps_u), ("c", self.c), ("eps_gamma", self.eps_gamma)] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return invalid(format!("tuning range for {name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})"));
            }
        }
        if !(self.update_until_s > 0.0) {
            return invalid(format!("update segment must be positive, got {} s", self.update_until_s));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub config: UpdateConfig,
    /// Mean PAE on the scoring segment; infinite if the run failed.
    pub mean_pae: f64,
    pub accepted: usize,
    pub rejected: usize,
}

/// Runs the update loop over `updates` starting from `model`, then returns the
/// mean PAE of the final model on `score` (whose references are the truth).
pub fn score_update_config(
    model: &SdcmModel,
    updates: &[CalibrationSample],
    score: &[CalibrationSample],
    config: &UpdateConfig,
) -> Result<CandidateScore> {
    let mut current: Option<SdcmModel> = None;
    let (mut accepted, mut rejected) = (0, 0);
    for (k, s) in updates.iter().enumerate() {
        let (next, _) = update_step(current.as_ref().unwrap_or(model), s, config, k)?;
        match next {
            Some(m) => {
                accepted += 1;
                current = Some(m);
            }
            None => rejected += 1,
        }
    }
    let final_model = current.as_ref().unwrap_or(model);
    Ok(CandidateScore { config: *config, mean_pae: mean_pae(final_model, score)?, accepted, rejected })
}

/// Mean percent absolute error of `model` over samples whose references are
/// the truth.
pub fn mean_pae(model: &SdcmModel, samples: &[CalibrationSample]) -> Result<f64> {
    if samples.is_empty() {
        return invalid("no samples to score");
    }
    let mut total = 0.0;
    for s in samples {
        total += pae(s.reference, model.predict(&s.features)?.mean)?;
    }
    Ok(total / samples.len() as f64)
}

/// Latin-hypercube search for the update parameters on one tuning series.
/// `samples` are the series' calibration samples (noisy references) and
/// `truth` the matching noiseless values used for scoring. Returns the
/// candidate with the least mean PAE (lowest index on ties) and all scores.
pub fn tune_update_params(
    model: &SdcmModel,
    samples: &[CalibrationSample],
    truth: &[f64],
    lhs: &LhsConfig,
    rng_seed: u64,
) -> Result<(UpdateConfig, Vec<CandidateScore>)> {
    if samples.len() != truth.len() {
        return invalid("tuning samples and truth differ in length");
    }
    lhs.validate()?;
    let split = samples.iter().position(|s| s.features.elapsed_time >= lhs.update_until_s).unwrap_or(samples.len());
    if split == 0 || split == samples.len() {
        return invalid(format!(
            "tuning series must have samples both before and after {} s (got {} of {})",
            lhs.update_until_s,
            split,
            samples.len()
        ));
    }
    let score: Vec<CalibrationSample> = samples[split..]
        .iter()
        .zip(&truth[split..])
        .map(|(s, &u)| CalibrationSample { features: s.features.clone(), reference: u })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let points = latin_hypercube(lhs.n_candidates, &[lhs.eps_u, lhs.c, lhs.eps_gamma], &mut rng);
    let mut scores = Vec::with_capacity(points.len());
    for p in points {
        let cfg = UpdateConfig::new(p[0], p[1], p[2])?;
        let sc = match score_update_config(model, &samples[..split], &score, &cfg) {
            Ok(sc) => sc,
            Err(e) => {
                log::warn!("candidate {cfg:?} failed: {e}");
                CandidateScore { config: cfg, mean_pae: f64::INFINITY, accepted: 0, rejected: 0 }
            }
        };
        log::info!("candidate {:?}: mean PAE {:.4}%", sc.config, sc.mean_pae);
        scores.push(sc);
    }
    let mut best = 0;
    for (i, sc) in scores.iter().enumerate() {
        if sc.mean_pae < scores[best].mean_pae {
            best = i;
        }
    }
    if !scores[best].mean_pae.is_finite() {
        return Err(Error::Numerical("every tuning candidate failed".into()));
    }
    Ok((scores[best].config, scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gp::{FeatureStats, FeatureVector, Hyperparameters};

    fn sample(y: f64, t: f64, u: f64) -> CalibrationSample {
        CalibrationSample { features: FeatureVector::new(vec![y], t).unwrap(), reference: u }
    }

    fn model(samples: Vec<CalibrationSample>) -> SdcmModel {
        SdcmModel::with_stats(
            samples,
            Hyperparameters::new(1.0, 0.5, 0.01).unwrap(),
            FeatureStats::identity(2),
            1.0,
            None,
        )
        .unwrap()
    }

    #[test]
    fn zero_threshold_flags_any_residual() {
        let m = model(vec![sample(0.0, 0.0, 0.2), sample(1.0, 0.0, 0.4)]);
        let s = sample(0.5, 0.0, 0.9);
        assert!(is_outlier(&m, &s, 0.0).unwrap());
    }

    #[test]
    fn residual_boundary_is_not_an_outlier() {
        let m = model(vec![sample(0.0, 0.0, 0.2), sample(1.0, 0.0, 0.4)]);
        let probe = sample(0.5, 0.0, 0.0);
        let (mean, _) = m.predict_normalized(&probe.features).unwrap();
        let s = sample(0.5, 0.0, mean + 0.05);
        assert!(!is_outlier(&m, &s, 0.0684).unwrap());
        let r = residual(&m, &s).unwrap();
        assert!(!is_outlier(&m, &s, r).unwrap());
        assert!(is_outlier(&m, &s, r * 0.999).unwrap());
    }

    #[test]
    fn similarity_basics() {
        let v = vec![vec![0.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0]];
        let s = similarity_matrix(&v, 0.7);
        for i in 0..3 {
            assert_eq!(s[i][i], 1.0);
            for j in 0..3 {
                assert_eq!(s[i][j], s[j][i]);
                assert!(s[i][j] > 0.0 && s[i][j] <= 1.0);
            }
        }
        let flat = similarity_matrix(&v, 0.0);
        assert!(flat.iter().flatten().all(|&x| x == 1.0));
    }

    #[test]
    fn zero_confidence_threshold_takes_nearest_branch() {
        let aug = vec![vec![0.0, 0.0], vec![1.0, 1.0]];
        let cfg = UpdateConfig::new(0.1, 0.5, 0.0).unwrap();
        let (i, b) = select_replacement(&aug, &[0.9, 0.9], 1e-9, &cfg).unwrap();
        assert_eq!((i, b), (1, ReplacementBranch::Nearest));
    }

    #[test]
    fn duplicates_are_most_redundant() {
        let aug = vec![vec![0.0, 0.0], vec![5.0, 5.0], vec![2.0, 2.0], vec![2.0, 2.0], vec![-4.0, 1.0]];
        let cfg = UpdateConfig::new(0.1, 0.5, 10.0).unwrap();
        let (i, b) = select_replacement(&aug, &[9.0, 9.0], 1.0, &cfg).unwrap();
        assert_eq!(b, ReplacementBranch::MostRedundant);
        assert_eq!(i, 2);
    }

    #[test]
    fn identical_new_sample_replaces_itself() {
        let aug: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, (i * i) as f64]).collect();
        let cfg = UpdateConfig::new(0.1, 0.5, 2.0).unwrap();
        let (i, b) = select_replacement(&aug, &aug[3], 5.0, &cfg).unwrap();
        assert_eq!((i, b), (3, ReplacementBranch::Nearest));
    }

    #[test]
    fn empty_dataset_is_invalid_state() {
        let cfg = UpdateConfig::new(0.1, 0.5, 2.0).unwrap();
        assert!(matches!(select_replacement(&[], &[0.0], 1.0, &cfg), Err(Error::InvalidState(_))));
    }

    #[test]
    fn outlier_leaves_model_untouched() {
        let m = model(vec![sample(0.0, 0.0, 0.2), sample(1.0, 0.0, 0.4)]);
        let cfg = UpdateConfig::new(0.01, 0.5, 2.0).unwrap();
        let (next, ev) = update_step(&m, &sample(0.5, 0.0, 5.0), &cfg, 0).unwrap();
        assert!(next.is_none());
        assert_eq!(ev.decision, Decision::OutlierAlert);
        assert_eq!(ev.replaced_index, None);
    }

    #[test]
    fn accepted_update_preserves_size() {
        let m = model(vec![sample(0.0, 0.0, 0.2), sample(1.0, 0.0, 0.4), sample(2.0, 0.0, 0.3)]);
        let cfg = UpdateConfig::new(1.0, 0.5, 0.0).unwrap();
        let s = sample(1.1, 0.0, 0.41);
        let (next, ev) = update_step(&m, &s, &cfg, 0).unwrap();
        let next = next.unwrap();
        assert_eq!(next.len(), 3);
        assert_eq!(ev.replaced_index, Some(1));
        assert_eq!(next.samples()[1], s);
        let mean = next.samples().iter().map(|s| s.reference).sum::<f64>() / 3.0;
        assert!((next.mu() - mean).abs() < 1e-15);
    }

    #[test]
    fn events_round_trip_and_replay() {
        let m = model(vec![sample(0.0, 0.0, 0.2), sample(1.0, 0.0, 0.4), sample(2.0, 0.0, 0.3)]);
        let cfg = UpdateConfig::new(0.2, 0.5, 3.0).unwrap();
        let mut cal = OnlineCalibrator::new(model(m.samples().to_vec()), cfg).unwrap();
        for k in 0..10 {
            let y = 0.2 * k as f64;
            cal.observe(&sample(y, 0.0, 0.3 + 0.01 * k as f64)).unwrap();
        }
        let mut buf = Vec::new();
        write_events(cal.events(), &mut buf).unwrap();
        let back = read_events(buf.as_slice()).unwrap();
        assert_eq!(back, cal.events());
        let replayed = replay(m, &back, cfg).unwrap();
        assert_eq!(replayed.model().samples(), cal.model().samples());
    }

    #[test]
    fn lhs_strata_each_hit_once() {
        let ranges = [(0.0, 0.1), (0.2, 1.0), (2.0, 7.0)];
        let pts = latin_hypercube(6, &ranges, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(pts.len(), 6);
        for (d, &(lo, hi)) in ranges.iter().enumerate() {
            let mut hits = [0usize; 6];
            for p in &pts {
                let k = (((p[d] - lo) / (hi - lo)) * 6.0).floor() as usize;
                hits[k.min(5)] += 1;
            }
            assert_eq!(hits, [1; 6]);
        }
    }

    #[test]
    fn reported_triple_lies_in_default_box() {
        let lhs = LhsConfig::default();
        let (e, c, g) = (0.0684, 0.7346, 6.3445);
        assert!(lhs.eps_u.0 <= e && e <= lhs.eps_u.1);
        assert!(lhs.c.0 <= c && c <= lhs.c.1);
        assert!(lhs.eps_gamma.0 <= g && g <= lhs.eps_gamma.1);
    }
}
