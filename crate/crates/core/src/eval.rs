//! Accuracy metrics, boxplot statistics, ISO 15197 compliance and
//! cross-validation.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{invalid, Result};
use crate::pipeline::{self, LabeledSample, PipelineConfig};
use crate::windowing::{split_by_series, TimeSeries};

/// Percent absolute error `100 |est - truth| / truth`.
pub fn pae(true_u: f64, est_u: f64) -> Result<f64> {
    if !(true_u > 0.0) {
        return invalid(format!("PAE needs a positive true value, got {true_u}"));
    }
    Ok(100.0 * (est_u - true_u).abs() / true_u)
}

/// One scored estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub series_id: String,
    pub k: usize,
    pub t_s: f64,
    pub true_u: f64,
    pub est_u: f64,
    pub abs_err: f64,
    pub pae: f64,
}

impl ErrorRecord {
    pub fn new(series_id: impl Into<String>, k: usize, t_s: f64, true_u: f64, est_u: f64) -> Result<Self> {
        Ok(Self {
            series_id: series_id.into(),
            k,
            t_s,
            true_u,
            est_u,
            abs_err: (est_u - true_u).abs(),
            pae: pae(true_u, est_u)?,
        })
    }

    /// Within 15% above 100 mg/dL, within 15 mg/dL at or below.
    pub fn iso15197_compliant(&self) -> bool {
        if self.true_u > 100.0 {
            self.pae <= 15.0
        } else {
            self.abs_err <= 15.0
        }
    }
}

pub const ISO15197_REQUIRED_FRACTION: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IsoVerdict {
    pub n: usize,
    pub compliant: usize,
    pub pass_fraction: f64,
    pub pass: bool,
}

pub fn iso15197_check(records: &[ErrorRecord]) -> Result<IsoVerdict> {
    if records.is_empty() {
        return invalid("ISO 15197 check needs at least one record");
    }
    let compliant = records.iter().filter(|r| r.iso15197_compliant()).count();
    // integer comparison keeps the 95% boundary exact
    let pass = compliant * 100 >= records.len() * 95;
    Ok(IsoVerdict { n: records.len(), compliant, pass_fraction: compliant as f64 / records.len() as f64, pass })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub n: usize,
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub iqr: f64,
    /// `median - 2 IQR`
    pub lower_whisker: f64,
    /// `median + 2 IQR`
    pub upper_whisker: f64,
    /// Values beyond the whiskers, ascending.
    pub outliers: Vec<f64>,
}

/// Linear-interpolation quantile of sorted data (`h = q (n - 1)`).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Quartiles by linear interpolation; whiskers at twice the IQR on either
/// side of the median.
pub fn boxplot_stats(values: &[f64]) -> Result<BoxplotStats> {
    if values.is_empty() {
        return invalid("boxplot needs at least one value");
    }
    if values.iter().any(|v| v.is_nan()) {
        return invalid("boxplot values contain NaN");
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let median = quantile_sorted(&sorted, 0.5);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    let lower = median - 2.0 * iqr;
    let upper = median + 2.0 * iqr;
    Ok(BoxplotStats {
        n: sorted.len(),
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        mean: sorted.iter().sum::<f64>() / sorted.len() as f64,
        q1,
        median,
        q3,
        iqr,
        lower_whisker: lower,
        upper_whisker: upper,
        outliers: sorted.iter().copied().filter(|&v| v < lower || v > upper).collect(),
    })
}

/// How folds divide the data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    /// Whole series go to train or test.
    BySeries { test_fraction: f64 },
    /// Samples from all series are pooled and split at random.
    BySample { test_fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldConfig {
    pub n_folds: usize,
    pub split: SplitMode,
}

impl Default for FoldConfig {
    fn default() -> Self {
        Self { n_folds: 10, split: SplitMode::BySeries { test_fraction: 0.2 } }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub snr_db: f64,
    pub fold: usize,
    pub train_series: Vec<String>,
    pub test_series: Vec<String>,
    pub n_train: usize,
    pub n_test: usize,
    pub theta: crate::gp::Hyperparameters,
    pub log_likelihood: f64,
    pub records: Vec<ErrorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnrAggregate {
    pub snr_db: f64,
    pub pae: BoxplotStats,
    pub iso: IsoVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<FoldResult>,
    pub aggregates: Vec<SnrAggregate>,
}

/// Repeated random train/test splits for each SNR level. Fold assignments and
/// reference-noise draws are shared across SNR levels, so levels differ only
/// in the noise amplitude.
pub fn cross_validate(
    series: &[TimeSeries],
    folds: &FoldConfig,
    pipeline_cfg: &PipelineConfig,
    snr_levels: &[f64],
    rng_seed: u64,
) -> Result<CrossValidationReport> {
    if folds.n_folds == 0 {
        return invalid("need at least one fold");
    }
    if snr_levels.is_empty() {
        return invalid("need at least one SNR level");
    }
    let mut ids = BTreeMap::new();
    for s in series {
        if ids.insert(s.series_id.clone(), ()).is_some() {
            return invalid(format!("duplicate series id {}", s.series_id));
        }
    }
    if let SplitMode::BySeries { .. } = folds.split {
        if series.len() < 2 {
            return invalid("series-level splits need at least 2 series");
        }
    }

    let mut fold_results = Vec::new();
    let mut aggregates = Vec::new();
    for &snr in snr_levels {
        let mut per_series: BTreeMap<String, Vec<LabeledSample>> = BTreeMap::new();
        for (i, s) in series.iter().enumerate() {
            let noise_seed = derive_seed(rng_seed, 1_000 + i as u64);
            let prepared = pipeline::prepare_series(s, snr, noise_seed, pipeline_cfg)?;
            per_series.insert(s.series_id.clone(), pipeline::labeled_samples(&prepared, &pipeline_cfg.window)?);
        }
        let mut all_records = Vec::new();
        for fold in 0..folds.n_folds {
            let fold_seed = derive_seed(rng_seed, fold as u64);
            let (train, test, train_ids, test_ids) = split_fold(&per_series, folds.split, fold_seed)?;
            if train.len() < 2 || test.is_empty() {
                return invalid(format!(
                    "fold {fold}: {} train / {} test samples is not enough",
                    train.len(),
                    test.len()
                ));
            }
            let mut search = pipeline_cfg.search.clone();
            search.rng_seed = derive_seed(fold_seed, 7);
            let cfg = PipelineConfig { search, ..pipeline_cfg.clone() };
            let trained = pipeline::train(&train, &cfg)?;
            let records = pipeline::score(&trained.model, &test)?;
            log::info!(
                "snr {snr} dB fold {fold}: N = {}, median PAE {:.3}%",
                trained.model.len(),
                boxplot_stats(&records.iter().map(|r| r.pae).collect::<Vec<_>>())?.median
            );
            all_records.extend(records.iter().cloned());
            fold_results.push(FoldResult {
                snr_db: snr,
                fold,
                train_series: train_ids,
                test_series: test_ids,
                n_train: trained.model.len(),
                n_test: records.len(),
                theta: *trained.model.theta(),
                log_likelihood: trained.fit.log_likelihood,
                records,
            });
        }
        let paes: Vec<f64> = all_records.iter().map(|r| r.pae).collect();
        aggregates.push(SnrAggregate { snr_db: snr, pae: boxplot_stats(&paes)?, iso: iso15197_check(&all_records)? });
    }
    Ok(CrossValidationReport { folds: fold_results, aggregates })
}

type FoldSplit = (Vec<LabeledSample>, Vec<LabeledSample>, Vec<String>, Vec<String>);

fn split_fold(per_series: &BTreeMap<String, Vec<LabeledSample>>, mode: SplitMode, seed: u64) -> Result<FoldSplit> {
    match mode {
        SplitMode::BySeries { test_fraction } => {
            let (train, test) = split_by_series(per_series, test_fraction, seed)?;
            Ok((
                train.values().flatten().cloned().collect(),
                test.values().flatten().cloned().collect(),
                train.keys().cloned().collect(),
                test.keys().cloned().collect(),
            ))
        }
        SplitMode::BySample { test_fraction } => {
            if !(test_fraction > 0.0 && test_fraction < 1.0) {
                return invalid(format!("test fraction must lie in (0, 1), got {test_fraction}"));
            }
            let mut pooled: Vec<LabeledSample> = per_series.values().flatten().cloned().collect();
            if pooled.len() < 3 {
                return invalid("sample-level split needs at least 3 samples");
            }
            let n_test = ((test_fraction * pooled.len() as f64).round() as usize).clamp(1, pooled.len() - 2);
            pooled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let train = pooled.split_off(n_test);
            let ids: Vec<String> = per_series.keys().cloned().collect();
            Ok((train, pooled, ids.clone(), ids))
        }
    }
}

const RECORD_HEADER: [&str; 9] = ["label", "series_id", "k", "t_s", "true_u", "est_u", "abs_err", "pae", "iso_ok"];

/// Writes records as CSV with a leading free-form label column (e.g. SNR and
/// fold, or the update arm).
pub fn write_records<'a, W: Write, I>(rows: I, writer: W) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, &'a ErrorRecord)>,
{
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(RECORD_HEADER)?;
    for (label, r) in rows {
        w.write_record([
            label.to_string(),
            r.series_id.clone(),
            r.k.to_string(),
            r.t_s.to_string(),
            r.true_u.to_string(),
            r.est_u.to_string(),
            r.abs_err.to_string(),
            r.pae.to_string(),
            (r.iso15197_compliant() as u8).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
