//! End-to-end building blocks shared by the command line and the experiment
//! harness: series preparation, training, scoring, and the synthetic
//! reproduction and online-update scenarios.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{invalid, Result};
use crate::eval::{boxplot_stats, iso15197_check, BoxplotStats, ErrorRecord, IsoVerdict};
use crate::gp::{CalibrationSample, FeatureStats, NormalizationConfig, SdcmModel};
use crate::hyperopt::{self, FitResult, SearchConfig};
use crate::online::{self, CandidateScore, LhsConfig, OnlineCalibrator, UpdateConfig, UpdateEvent};
use crate::sim::{simulate_series, PopulationSpec, SensorModel};
use crate::windowing::{add_reference_noise, downsample, extract_samples, split_by_series, TimeSeries, WindowSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseOrder {
    AfterDownsample,
    BeforeDownsample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub window: WindowSpec,
    pub downsample_factor: usize,
    pub noise_order: NoiseOrder,
    pub normalization: NormalizationConfig,
    pub search: SearchConfig,
    /// Training sets larger than this are thinned by even striding.
    pub max_train_samples: Option<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowSpec::new(6, 1),
            downsample_factor: 3,
            noise_order: NoiseOrder::AfterDownsample,
            normalization: NormalizationConfig::default(),
            search: SearchConfig { n_trials: 20, ..SearchConfig::default() },
            max_train_samples: Some(2000),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_factor == 0 {
            return invalid("downsample factor must be at least 1");
        }
        let n = &self.normalization;
        if !(n.target_scale > 0.0 && n.target_scale.is_finite()) {
            return invalid(format!("target scale must be positive, got {}", n.target_scale));
        }
        if let Some(l) = n.lifespan_s {
            if !(l > 0.0) {
                return invalid(format!("lifespan must be positive, got {l}"));
            }
        }
        if let Some(cap) = self.max_train_samples {
            if cap < 2 {
                return invalid(format!("training cap must allow at least 2 samples, got {cap}"));
            }
        }
        self.search.validate()
    }
}

/// A series after downsampling, with its noiseless and noisy references.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSeries {
    pub clean: TimeSeries,
    pub noisy: TimeSeries,
}

pub fn prepare_series(raw: &TimeSeries, snr_db: f64, noise_seed: u64, cfg: &PipelineConfig) -> Result<PreparedSeries> {
    let clean = downsample(raw, cfg.downsample_factor)?;
    let noisy = match cfg.noise_order {
        NoiseOrder::AfterDownsample => add_reference_noise(&clean, snr_db, noise_seed)?,
        NoiseOrder::BeforeDownsample => {
            downsample(&add_reference_noise(raw, snr_db, noise_seed)?, cfg.downsample_factor)?
        }
    };
    Ok(PreparedSeries { clean, noisy })
}

/// A calibration sample (noisy reference) together with its noiseless truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub series_id: String,
    pub k: usize,
    pub sample: CalibrationSample,
    pub truth: f64,
}

pub fn labeled_samples(prepared: &PreparedSeries, window: &WindowSpec) -> Result<Vec<LabeledSample>> {
    let samples = extract_samples(&prepared.noisy, window)?;
    let truth = prepared.clean.u_ref.as_deref().unwrap_or_default();
    Ok(samples
        .into_iter()
        .zip(window.centers(prepared.clean.len()))
        .map(|(sample, k)| LabeledSample { series_id: prepared.clean.series_id.clone(), k, sample, truth: truth[k] })
        .collect())
}

/// Evenly strided subset of at most `cap` items.
pub fn thin<T: Clone>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(cap) if cap > 0 && items.len() > cap => (0..cap).map(|i| items[i * items.len() / cap].clone()).collect(),
        _ => items.to_vec(),
    }
}

pub struct Trained {
    pub model: SdcmModel,
    pub fit: FitResult,
}

/// Normalizes, fits the hyperparameters and conditions the final model.
pub fn train_samples(samples: &[CalibrationSample], cfg: &PipelineConfig) -> Result<Trained> {
    let samples = thin(samples, cfg.max_train_samples);
    if samples.len() < 2 {
        return invalid(format!("need at least 2 training samples, got {}", samples.len()));
    }
    let stats = if cfg.normalization.standardize_features {
        FeatureStats::from_samples(&samples)
    } else {
        FeatureStats::identity(samples[0].features.dim())
    };
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| stats.apply(&s.features.to_vec())).collect();
    let targets: Vec<f64> = samples.iter().map(|s| s.reference / cfg.normalization.target_scale).collect();
    let fit = hyperopt::fit(&inputs, &targets, &cfg.search)?;
    let model = SdcmModel::build(samples, fit.theta, &cfg.normalization)?;
    Ok(Trained { model, fit })
}

pub fn train(samples: &[LabeledSample], cfg: &PipelineConfig) -> Result<Trained> {
    let plain: Vec<CalibrationSample> = samples.iter().map(|s| s.sample.clone()).collect();
    train_samples(&plain, cfg)
}

/// Scores predictions against the noiseless truth.
pub fn score(model: &SdcmModel, test: &[LabeledSample]) -> Result<Vec<ErrorRecord>> {
    test.iter()
        .map(|s| {
            let est = model.predict(&s.sample.features)?;
            ErrorRecord::new(&s.series_id, s.k, s.sample.features.elapsed_time, s.truth, est.mean)
        })
        .collect()
}

/// Simulates the sensor over every profile of a population (3-minute grid by
/// default), returning one raw series per profile.
pub fn simulate_population(
    population: &PopulationSpec,
    sensor: &SensorModel,
    rng_seed: u64,
) -> Result<Vec<TimeSeries>> {
    let dt = population.sample_interval_min * 60.0;
    population.generate(rng_seed)?.into_iter().map(|(id, profile)| simulate_series(sensor, &profile, dt, id)).collect()
}

/// The synthetic reproduction: population, sensor, noise, split and training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticScenario {
    pub population: PopulationSpec,
    pub sensor: SensorModel,
    pub snr_db: f64,
    pub test_fraction: f64,
    pub pipeline: PipelineConfig,
    pub rng_seed: u64,
}

impl Default for SyntheticScenario {
    fn default() -> Self {
        Self {
            population: PopulationSpec::default(),
            sensor: SensorModel::default(),
            snr_db: 55.0,
            test_fraction: 0.2,
            pipeline: PipelineConfig::default(),
            rng_seed: 2023,
        }
    }
}

impl SyntheticScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return invalid(format!("test fraction must lie in (0, 1), got {}", self.test_fraction));
        }
        if self.snr_db.is_nan() {
            return invalid("SNR must be a number");
        }
        self.population.validate()?;
        self.sensor.validate()?;
        self.pipeline.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproductionReport {
    pub train_series: Vec<String>,
    pub test_series: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub fit: FitResult,
    pub pae: BoxplotStats,
    pub iso: IsoVerdict,
    pub records: Vec<ErrorRecord>,
}

/// Prepares every series of `series` at the scenario SNR, keyed by id.
pub fn prepare_all(
    series: &[TimeSeries],
    snr_db: f64,
    cfg: &PipelineConfig,
    rng_seed: u64,
) -> Result<BTreeMap<String, Vec<LabeledSample>>> {
    series
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let prepared = prepare_series(s, snr_db, derive_seed(rng_seed, 1_000 + i as u64), cfg)?;
            Ok((s.series_id.clone(), labeled_samples(&prepared, &cfg.window)?))
        })
        .collect()
}

/// Per-series labeled samples divided into training and test series.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSplit {
    pub train: BTreeMap<String, Vec<LabeledSample>>,
    pub test: BTreeMap<String, Vec<LabeledSample>>,
}

impl ScenarioSplit {
    pub fn train_samples(&self) -> Vec<LabeledSample> {
        self.train.values().flatten().cloned().collect()
    }

    pub fn test_samples(&self) -> Vec<LabeledSample> {
        self.test.values().flatten().cloned().collect()
    }
}

/// Prepares every series at the scenario SNR and assigns a random
/// `test_fraction` of them to the test side.
pub fn split_scenario(series: &[TimeSeries], scenario: &SyntheticScenario) -> Result<ScenarioSplit> {
    let per_series = prepare_all(series, scenario.snr_db, &scenario.pipeline, scenario.rng_seed)?;
    let (train, test) = split_by_series(&per_series, scenario.test_fraction, derive_seed(scenario.rng_seed, 1))?;
    Ok(ScenarioSplit { train, test })
}

/// Fits the training side of `split` with the scenario's search seed.
pub fn train_scenario(split: &ScenarioSplit, scenario: &SyntheticScenario) -> Result<Trained> {
    let mut cfg = scenario.pipeline.clone();
    cfg.search.rng_seed = derive_seed(scenario.rng_seed, 2);
    train(&split.train_samples(), &cfg)
}

/// Scores `model` on the test side of `split`.
pub fn evaluate_split(model: &SdcmModel, fit: FitResult, split: &ScenarioSplit) -> Result<ReproductionReport> {
    let test_samples = split.test_samples();
    if test_samples.is_empty() {
        return invalid("empty test set");
    }
    let records = score(model, &test_samples)?;
    let paes: Vec<f64> = records.iter().map(|r| r.pae).collect();
    Ok(ReproductionReport {
        train_series: split.train.keys().cloned().collect(),
        test_series: split.test.keys().cloned().collect(),
        n_train: model.len(),
        n_test: records.len(),
        fit,
        pae: boxplot_stats(&paes)?,
        iso: iso15197_check(&records)?,
        records,
    })
}

/// Trains on a random 1 - `test_fraction` of the series and scores the rest.
pub fn run_reproduction(
    series: &[TimeSeries],
    scenario: &SyntheticScenario,
) -> Result<(SdcmModel, ReproductionReport)> {
    let split = split_scenario(series, scenario)?;
    if split.test_samples().is_empty() {
        return invalid("empty test set");
    }
    let trained = train_scenario(&split, scenario)?;
    let report = evaluate_split(&trained.model, trained.fit, &split)?;
    Ok((trained.model, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateComparison {
    pub tuning_series: String,
    pub eval_series: String,
    pub tuned: UpdateConfig,
    pub candidates: Vec<CandidateScore>,
    pub accepted: usize,
    pub rejected: usize,
    pub with_update: BoxplotStats,
    pub without_update: BoxplotStats,
    pub records_with: Vec<ErrorRecord>,
    pub records_without: Vec<ErrorRecord>,
    pub events: Vec<UpdateEvent>,
}

/// Tunes the update thresholds on one independent series, then replays the
/// first segment of a second series through the update loop and compares
/// final-segment errors with and without the updates.
pub fn run_update_comparison(
    model: &SdcmModel,
    tuning: &TimeSeries,
    evaluation: &TimeSeries,
    snr_db: f64,
    lhs: &LhsConfig,
    cfg: &PipelineConfig,
    rng_seed: u64,
) -> Result<UpdateComparison> {
    let tuning_samples =
        labeled_samples(&prepare_series(tuning, snr_db, derive_seed(rng_seed, 11), cfg)?, &cfg.window)?;
    let (samples, truth): (Vec<CalibrationSample>, Vec<f64>) =
        tuning_samples.iter().map(|s| (s.sample.clone(), s.truth)).unzip();
    let (tuned, candidates) = online::tune_update_params(model, &samples, &truth, lhs, derive_seed(rng_seed, 12))?;

    let eval_samples =
        labeled_samples(&prepare_series(evaluation, snr_db, derive_seed(rng_seed, 13), cfg)?, &cfg.window)?;
    let split = eval_samples
        .iter()
        .position(|s| s.sample.features.elapsed_time >= lhs.update_until_s)
        .unwrap_or(eval_samples.len());
    if split == 0 || split == eval_samples.len() {
        return invalid("evaluation series does not straddle the update/scoring boundary");
    }
    let mut calibrator = OnlineCalibrator::new(
        SdcmModel::with_stats(
            model.samples().to_vec(),
            *model.theta(),
            model.feature_stats().clone(),
            model.target_scale(),
            model.lifespan_s(),
        )?,
        tuned,
    )?;
    for s in &eval_samples[..split] {
        calibrator.observe(&s.sample)?;
    }
    let (updated, events) = calibrator.into_parts();
    let scored = &eval_samples[split..];
    let records_with = score(&updated, scored)?;
    let records_without = score(model, scored)?;
    let paes = |r: &[ErrorRecord]| r.iter().map(|x| x.pae).collect::<Vec<_>>();
    let accepted = events.iter().filter(|e| e.replaced_index.is_some()).count();
    Ok(UpdateComparison {
        tuning_series: tuning.series_id.clone(),
        eval_series: evaluation.series_id.clone(),
        tuned,
        candidates,
        accepted,
        rejected: events.len() - accepted,
        with_update: boxplot_stats(&paes(&records_with))?,
        without_update: boxplot_stats(&paes(&records_without))?,
        records_with,
        records_without,
        events,
    })
}

/// Two fresh patients observed through a sensor whose sensitivity has moved
/// away from the one the model was trained on. The first patient tunes the
/// update thresholds, the second is scored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftScenario {
    /// Multiplies the sensor output gain.
    pub sensitivity_factor: f64,
    pub snr_db: f64,
    pub lhs: LhsConfig,
    pub rng_seed: u64,
}

impl Default for DriftScenario {
    fn default() -> Self {
        Self { sensitivity_factor: 0.99, snr_db: 55.0, lhs: LhsConfig::default(), rng_seed: 2024 }
    }
}

impl DriftScenario {
    pub fn validate(&self) -> Result<()> {
        if !(self.sensitivity_factor > 0.0 && self.sensitivity_factor.is_finite()) {
            return invalid(format!("sensitivity factor must be positive, got {}", self.sensitivity_factor));
        }
        if self.snr_db.is_nan() {
            return invalid("SNR must be a number");
        }
        self.lhs.validate()
    }
}

/// Simulates the drifted patients for `drift` and runs the update comparison.
pub fn run_drift_scenario(
    model: &SdcmModel,
    population: &PopulationSpec,
    sensor: &SensorModel,
    drift: &DriftScenario,
    cfg: &PipelineConfig,
) -> Result<UpdateComparison> {
    drift.validate()?;
    let population = PopulationSpec { n_profiles: 2, ..population.clone() };
    let mut sensor = sensor.clone();
    sensor.output_gain *= drift.sensitivity_factor;
    let held_out = simulate_population(&population, &sensor, drift.rng_seed)?;
    run_update_comparison(model, &held_out[0], &held_out[1], drift.snr_db, &drift.lhs, cfg, drift.rng_seed)
}
