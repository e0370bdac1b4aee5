//! Turning raw sensor time series into calibration datasets.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::gp::{CalibrationSample, FeatureVector};

/// Relative tolerance on the spacing of sample times.
pub const UNIFORM_SPACING_TOLERANCE: f64 = 1e-6;

/// One sensor deployment sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub series_id: String,
    /// Seconds since deployment, strictly increasing.
    pub t: Vec<f64>,
    /// Raw sensor outputs.
    pub y: Vec<f64>,
    /// Reference values in physical units, when available.
    pub u_ref: Option<Vec<f64>>,
    /// Seconds between samples.
    pub sample_interval: f64,
}

impl TimeSeries {
    /// Builds a series and checks lengths and grid uniformity. The sample
    /// interval is inferred from the first two times (or given explicitly
    /// for series shorter than two samples).
    pub fn new(
        series_id: impl Into<String>,
        t: Vec<f64>,
        y: Vec<f64>,
        u_ref: Option<Vec<f64>>,
        sample_interval: f64,
    ) -> Result<Self> {
        let series = Self { series_id: series_id.into(), t, y, u_ref, sample_interval };
        series.validate()?;
        Ok(series)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t.len() != self.y.len() {
            return invalid(format!("series {}: {} times but {} outputs", self.series_id, self.t.len(), self.y.len()));
        }
        if let Some(u) = &self.u_ref {
            if u.len() != self.t.len() {
                return invalid(format!(
                    "series {}: {} times but {} references",
                    self.series_id,
                    self.t.len(),
                    u.len()
                ));
            }
        }
        if !(self.sample_interval > 0.0 && self.sample_interval.is_finite()) {
            return invalid(format!("series {}: sample interval must be positive", self.series_id));
        }
        for (k, w) in self.t.windows(2).enumerate() {
            let dt = w[1] - w[0];
            if (dt - self.sample_interval).abs() > UNIFORM_SPACING_TOLERANCE * self.sample_interval {
                return invalid(format!(
                    "series {}: spacing {dt} s at index {k} deviates from interval {} s",
                    self.series_id, self.sample_interval
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    fn references(&self) -> Result<&[f64]> {
        self.u_ref
            .as_deref()
            .ok_or_else(|| crate::Error::InvalidInput(format!("series {} has no reference values", self.series_id)))
    }

    /// Reads the `t_s,y,u_ref` CSV schema (`u_ref` optional).
    pub fn read_csv<R: Read>(series_id: impl Into<String>, reader: R) -> Result<Self> {
        let series_id = series_id.into();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let (Some(ti), Some(yi)) = (col("t_s"), col("y")) else {
            return invalid(format!("series {series_id}: CSV header must contain t_s and y, got {headers:?}"));
        };
        let ui = col("u_ref");
        let (mut t, mut y, mut u) = (Vec::new(), Vec::new(), Vec::new());
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let field = |i: usize| -> Result<f64> {
                let raw = rec.get(i).unwrap_or("");
                raw.parse::<f64>().map_err(|_| {
                    crate::Error::InvalidInput(format!("series {series_id}: row {}: cannot parse {raw:?}", line + 2))
                })
            };
            t.push(field(ti)?);
            y.push(field(yi)?);
            if let Some(ui) = ui {
                u.push(field(ui)?);
            }
        }
        let sample_interval = if t.len() >= 2 { t[1] - t[0] } else { 1.0 };
        Self::new(series_id, t, y, ui.map(|_| u), sample_interval)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self> {
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_csv(id, std::fs::File::open(path)?)
    }

    /// Writes the `t_s,y,u_ref` CSV schema. Floats use the shortest
    /// representation that round-trips.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        match &self.u_ref {
            Some(u) => {
                w.write_record(["t_s", "y", "u_ref"])?;
                for k in 0..self.len() {
                    w.write_record([self.t[k].to_string(), self.y[k].to_string(), u[k].to_string()])?;
                }
            }
            None => {
                w.write_record(["t_s", "y"])?;
                for k in 0..self.len() {
                    w.write_record([self.t[k].to_string(), self.y[k].to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Number of past (`p`) and future (`ell`) samples around the center index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub p: usize,
    pub ell: usize,
}

impl WindowSpec {
    pub fn new(p: usize, ell: usize) -> Self {
        Self { p, ell }
    }

    pub fn window_len(&self) -> usize {
        self.p + self.ell + 1
    }

    /// Feature dimension including elapsed time.
    pub fn feature_dim(&self) -> usize {
        self.p + self.ell + 2
    }

    /// Center indices `k` for which a full window exists.
    pub fn centers(&self, len: usize) -> std::ops::Range<usize> {
        if len < self.window_len() {
            0..0
        } else {
            self.p..len - self.ell
        }
    }
}

/// Keeps every `factor`-th sample starting at index 0.
pub fn downsample(series: &TimeSeries, factor: usize) -> Result<TimeSeries> {
    if factor < 1 {
        return invalid("downsampling factor must be at least 1");
    }
    let pick = |v: &[f64]| v.iter().step_by(factor).copied().collect::<Vec<_>>();
    Ok(TimeSeries {
        series_id: series.series_id.clone(),
        t: pick(&series.t),
        y: pick(&series.y),
        u_ref: series.u_ref.as_deref().map(pick),
        sample_interval: series.sample_interval * factor as f64,
    })
}

/// Standard deviation of white noise that yields `snr_db` against a signal of
/// mean power `power`.
pub fn noise_std_for_snr(power: f64, snr_db: f64) -> f64 {
    (power / 10f64.powf(snr_db / 10.0)).sqrt()
}

/// Adds i.i.d. Gaussian noise to the references so that
/// `10 log10(mean(u^2) / noise variance) = snr_db`. An infinite SNR leaves the
/// series untouched.
pub fn add_reference_noise(series: &TimeSeries, snr_db: f64, rng_seed: u64) -> Result<TimeSeries> {
    let u = series.references()?;
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return invalid(format!("SNR must be a number or +inf, got {snr_db}"));
    }
    if snr_db == f64::INFINITY || u.is_empty() {
        return Ok(series.clone());
    }
    let power = u.iter().map(|v| v * v).sum::<f64>() / u.len() as f64;
    let std = noise_std_for_snr(power, snr_db);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let noisy = u.iter().map(|v| v + std * normal.sample(&mut rng)).collect();
    Ok(TimeSeries { u_ref: Some(noisy), ..series.clone() })
}

/// Stacks `y_{k-p} .. y_{k+ell}` and `t_k` for every admissible center `k`,
/// paired with the reference at `k`.
pub fn extract_samples(series: &TimeSeries, spec: &WindowSpec) -> Result<Vec<CalibrationSample>> {
    let u = series.references()?;
    if series.len() < spec.window_len() {
        return invalid(format!(
            "series {} has {} samples, window needs {}",
            series.series_id,
            series.len(),
            spec.window_len()
        ));
    }
    spec.centers(series.len())
        .map(|k| Ok(CalibrationSample { features: extract_features(series, spec, k)?, reference: u[k] }))
        .collect()
}

/// Feature vector centered at index `k` (no reference needed).
pub fn extract_features(series: &TimeSeries, spec: &WindowSpec, k: usize) -> Result<FeatureVector> {
    if k < spec.p || k + spec.ell >= series.len() {
        return invalid(format!("index {k} has no full window in series {}", series.series_id));
    }
    FeatureVector::new(series.y[k - spec.p..=k + spec.ell].to_vec(), series.t[k])
}

/// Assigns whole series to train or test. The test side receives
/// `round(test_fraction * n)` series, clamped so both sides are non-empty.
pub fn split_by_series<T: Clone>(
    datasets: &BTreeMap<String, T>,
    test_fraction: f64,
    rng_seed: u64,
) -> Result<(BTreeMap<String, T>, BTreeMap<String, T>)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return invalid(format!("test fraction must lie in (0, 1), got {test_fraction}"));
    }
    if datasets.len() < 2 {
        return invalid(format!("need at least 2 series to split, got {}", datasets.len()));
    }
    let n = datasets.len();
    let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut ids: Vec<&String> = datasets.keys().collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (i, id) in ids.into_iter().enumerate() {
        let side = if i < n_test { &mut test } else { &mut train };
        side.insert(id.clone(), datasets[id].clone());
    }
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize, dt: f64) -> TimeSeries {
        TimeSeries::new(
            "s",
            (0..n).map(|k| k as f64 * dt).collect(),
            (0..n).map(|k| 0.1 * k as f64).collect(),
            Some((0..n).map(|k| 100.0 + k as f64).collect()),
            dt,
        )
        .unwrap()
    }

    #[test]
    fn downsample_three_minute_to_nine() {
        let s = ramp(10, 180.0);
        let d = downsample(&s, 3).unwrap();
        assert_eq!(d.sample_interval, 540.0);
        assert_eq!(d.t, vec![0.0, 540.0, 1080.0, 1620.0]);
        assert_eq!(d.len(), 4);
        assert_eq!(d.u_ref.as_ref().unwrap(), &vec![100.0, 103.0, 106.0, 109.0]);
        d.validate().unwrap();
    }

    #[test]
    fn downsample_by_one_is_identity() {
        let s = ramp(7, 180.0);
        assert_eq!(downsample(&s, 1).unwrap(), s);
        assert!(downsample(&s, 0).is_err());
    }

    #[test]
    fn noise_std_for_constant_signal() {
        assert!((noise_std_for_snr(100.0 * 100.0, 20.0) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_snr_is_a_no_op() {
        let s = ramp(20, 180.0);
        assert_eq!(add_reference_noise(&s, f64::INFINITY, 1).unwrap(), s);
    }

    #[test]
    fn noise_requires_references() {
        let mut s = ramp(5, 180.0);
        s.u_ref = None;
        assert!(add_reference_noise(&s, 55.0, 0).is_err());
        assert!(extract_samples(&s, &WindowSpec::new(1, 1)).is_err());
    }

    #[test]
    fn window_ordering() {
        let s = ramp(8, 60.0);
        let samples = extract_samples(&s, &WindowSpec::new(2, 1)).unwrap();
        let z = &samples[0].features;
        assert_eq!(z.window, vec![s.y[0], s.y[1], s.y[2], s.y[3]]);
        assert_eq!(z.elapsed_time, s.t[2]);
        assert_eq!(samples[0].reference, 102.0);
        assert_eq!(samples.len(), 8 - 2 - 1);
    }

    #[test]
    fn static_window_uses_every_sample() {
        let s = ramp(9, 60.0);
        let samples = extract_samples(&s, &WindowSpec::new(0, 0)).unwrap();
        assert_eq!(samples.len(), 9);
        assert_eq!(samples[4].features.to_vec(), vec![s.y[4], s.t[4]]);
    }

    #[test]
    fn short_series_rejected() {
        let s = ramp(7, 60.0);
        assert!(extract_samples(&s, &WindowSpec::new(6, 1)).is_err());
        assert_eq!(extract_samples(&ramp(127, 540.0), &WindowSpec::new(6, 1)).unwrap().len(), 120);
    }

    #[test]
    fn irregular_grid_rejected() {
        let r = TimeSeries::new("x", vec![0.0, 1.0, 2.5], vec![0.0; 3], None, 1.0);
        assert!(r.is_err());
    }

    #[test]
    fn split_twenty_series() {
        let data: BTreeMap<String, usize> = (0..20).map(|i| (format!("p{i:02}"), i)).collect();
        let (train, test) = split_by_series(&data, 0.2, 11).unwrap();
        assert_eq!((train.len(), test.len()), (16, 4));
        assert!(train.keys().all(|k| !test.contains_key(k)));
        let (train2, test2) = split_by_series(&data, 0.2, 11).unwrap();
        assert_eq!(train, train2);
        assert_eq!(test, test2);
        assert!(split_by_series(&data, 1.0, 0).is_err());
        assert!(split_by_series(&data, 0.0, 0).is_err());
    }

    #[test]
    fn csv_round_trip_and_optional_reference() {
        let s = ramp(5, 180.0);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t_s,y,u_ref\n"));
        let back = TimeSeries::read_csv("s", buf.as_slice()).unwrap();
        assert_eq!(back, s);

        let no_ref = "t_s,y\n0,0.5\n60,0.6\n";
        let s2 = TimeSeries::read_csv("n", no_ref.as_bytes()).unwrap();
        assert!(s2.u_ref.is_none());
        assert_eq!(s2.sample_interval, 60.0);

        assert!(TimeSeries::read_csv("bad", "time,y\n0,1\n".as_bytes()).is_err());
        assert!(TimeSeries::read_csv("bad", "t_s,y\n0,abc\n".as_bytes()).is_err());
    }
}
