//! Synthetic experiments: a nonlinear, time-drifting first-order sensor and a
//! smooth blood-glucose profile generator.
//!
//! The profile generator is a stand-in for a physiological patient simulator.
//! Each profile is a baseline plus meal excursions (fast rise, slower decay)
//! minus insulin responses, plus an optional slow AR(1) fluctuation. Users
//! with real or externally simulated profiles can feed CSVs instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::windowing::TimeSeries;

pub const MIN_BGL: f64 = 20.0;
pub const MAX_BGL: f64 = 600.0;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Unit in which the elapsed time enters the drift term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftTimeUnit {
    /// `t` in seconds against a lifespan given as a bare number of minutes;
    /// the drift sweeps its full shape over the lifespan.
    Seconds,
    /// Consistent minutes; the drift term barely moves over one lifespan.
    Minutes,
}

/// Stock drifting sensor:
///
/// ```text
/// x[k+1] = a x[k] + b u[k]
/// y[k]   = gain * x[k]^exponent * (offset + tanh(s - shift) * sig(s - shift) * (plateau + sig(rolloff - s)))
/// s      = t[k] / (divisor * lifespan)
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorModel {
    pub a: f64,
    pub b: f64,
    pub lifespan: f64,
    pub output_gain: f64,
    pub exponent: f64,
    pub drift_offset: f64,
    pub onset_shift: f64,
    pub plateau: f64,
    pub rolloff: f64,
    pub time_divisor: f64,
    pub time_unit: DriftTimeUnit,
    #[serde(skip)]
    state: f64,
}

impl Default for SensorModel {
    fn default() -> Self {
        Self {
            a: 0.8187,
            b: 163.1,
            lifespan: 1140.0,
            output_gain: 0.2,
            exponent: 0.1,
            drift_offset: 0.8,
            onset_shift: 5.0,
            plateau: 0.6,
            rolloff: 17.0,
            time_divisor: 3.0,
            time_unit: DriftTimeUnit::Seconds,
            state: 0.0,
        }
    }
}

impl SensorModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.a.abs() < 1.0) {
            return invalid(format!("state decay a = {} is not stable", self.a));
        }
        if !(self.lifespan > 0.0 && self.time_divisor > 0.0) {
            return invalid("lifespan and time divisor must be positive");
        }
        Ok(())
    }

    /// Returns the latent state to `x = 0` (fresh deployment).
    pub fn reset(&mut self) {
        self.state = 0.0;
    }

    pub fn state(&self) -> f64 {
        self.state
    }

    /// Sensitivity multiplier at elapsed time `t_s` (seconds).
    pub fn drift_bracket(&self, t_s: f64) -> f64 {
        let t = match self.time_unit {
            DriftTimeUnit::Seconds => t_s,
            DriftTimeUnit::Minutes => t_s / 60.0,
        };
        let s = t / (self.time_divisor * self.lifespan);
        let onset = s - self.onset_shift;
        self.drift_offset + onset.tanh() * sigmoid(onset) * (self.plateau + sigmoid(self.rolloff - s))
    }

    /// Output map evaluated at state `x` and time `t_s`.
    pub fn output(&self, x: f64, t_s: f64) -> f64 {
        self.output_gain * x.powf(self.exponent) * self.drift_bracket(t_s)
    }

    /// Emits `y_k` from the current state, then advances the state with `u_k`.
    pub fn step(&mut self, u: f64, t_s: f64) -> Result<f64> {
        if !(u >= 0.0) {
            return invalid(format!("sensed value must be non-negative for the stock sensor, got {u}"));
        }
        let y = self.output(self.state, t_s);
        self.state = self.a * self.state + self.b * u;
        Ok(y)
    }

    /// Steady-state gain `b / (1 - a)`.
    pub fn dc_gain(&self) -> f64 {
        self.b / (1.0 - self.a)
    }
}

/// Runs a freshly reset sensor over `profile`, sampled every
/// `sample_interval_s` seconds from `t = 0`.
pub fn simulate_series(
    model: &SensorModel,
    profile: &[f64],
    sample_interval_s: f64,
    series_id: impl Into<String>,
) -> Result<TimeSeries> {
    model.validate()?;
    let mut sensor = model.clone();
    sensor.reset();
    let t: Vec<f64> = (0..profile.len()).map(|k| k as f64 * sample_interval_s).collect();
    let y = profile.iter().zip(&t).map(|(&u, &tk)| sensor.step(u, tk)).collect::<Result<Vec<_>>>()?;
    TimeSeries::new(series_id, t, y, Some(profile.to_vec()), sample_interval_s)
}

/// A smooth excursion: `magnitude` at its peak, zero before `time_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Excursion {
    pub time_min: f64,
    /// Peak height in mg/dL.
    pub magnitude: f64,
    /// Rise time constant (minutes).
    pub rise_min: f64,
    /// Decay time constant (minutes), longer than the rise.
    pub decay_min: f64,
}

impl Excursion {
    /// Difference of exponentials normalized to unit peak.
    pub fn value(&self, t_min: f64) -> f64 {
        let tau = t_min - self.time_min;
        if tau <= 0.0 {
            return 0.0;
        }
        let (r, d) = (self.rise_min, self.decay_min.max(self.rise_min * (1.0 + 1e-6)));
        let shape = |x: f64| (-x / d).exp() - (-x / r).exp();
        let peak_at = (d / r).ln() * r * d / (d - r);
        self.magnitude * shape(tau) / shape(peak_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BglProfile {
    /// mg/dL
    pub baseline: f64,
    pub meals: Vec<Excursion>,
    pub insulin: Vec<Excursion>,
    /// Standard deviation (mg/dL) of the slow AR(1) fluctuation; 0 disables it.
    pub variability: f64,
    pub duration_min: f64,
    pub sample_interval_min: f64,
}

impl BglProfile {
    pub fn constant(baseline: f64) -> Self {
        Self {
            baseline,
            meals: Vec::new(),
            insulin: Vec::new(),
            variability: 0.0,
            duration_min: 19.0 * 60.0,
            sample_interval_min: 3.0,
        }
    }

    /// Number of samples on `[0, duration]` inclusive.
    pub fn len(&self) -> usize {
        (self.duration_min / self.sample_interval_min + 1e-9).floor() as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// AR(1) correlation time of the slow fluctuation, minutes.
const FLUCTUATION_CORRELATION_MIN: f64 = 60.0;

/// Samples the profile on its grid. Values outside `[MIN_BGL, MAX_BGL]` are
/// clipped with a warning.
pub fn generate_profile(spec: &BglProfile, rng_seed: u64) -> Result<Vec<f64>> {
    if !(spec.duration_min > 0.0) {
        return invalid("profile duration must be positive");
    }
    if !(spec.sample_interval_min > 0.0) {
        return invalid("profile sample interval must be positive");
    }
    let n = spec.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let phi = (-spec.sample_interval_min / FLUCTUATION_CORRELATION_MIN).exp();
    let innovation = spec.variability * (1.0 - phi * phi).sqrt();
    let mut drift = if spec.variability > 0.0 { spec.variability * normal.sample(&mut rng) } else { 0.0 };
    let mut clipped = 0usize;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let t = k as f64 * spec.sample_interval_min;
        let meals: f64 = spec.meals.iter().map(|m| m.value(t)).sum();
        let insulin: f64 = spec.insulin.iter().map(|m| m.value(t)).sum();
        let mut u = spec.baseline + meals - insulin + drift;
        if !(MIN_BGL..=MAX_BGL).contains(&u) {
            clipped += 1;
            u = u.clamp(MIN_BGL, MAX_BGL);
        }
        out.push(u);
        if spec.variability > 0.0 {
            drift = phi * drift + innovation * normal.sample(&mut rng);
        }
    }
    if clipped > 0 {
        log::warn!("{clipped} of {n} profile values clipped to [{MIN_BGL}, {MAX_BGL}] mg/dL");
    }
    Ok(out)
}

/// Distributions from which a population of profiles is drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationSpec {
    pub n_profiles: usize,
    pub duration_min: f64,
    pub sample_interval_min: f64,
    pub baseline: (f64, f64),
    /// Nominal meal times in minutes after deployment.
    pub meal_times_min: Vec<f64>,
    pub meal_time_jitter_min: f64,
    pub meal_magnitude: (f64, f64),
    pub meal_rise_min: (f64, f64),
    pub meal_decay_min: (f64, f64),
    /// Insulin response magnitude as a fraction of the paired meal.
    pub insulin_fraction: (f64, f64),
    pub insulin_delay_min: (f64, f64),
    pub insulin_rise_min: (f64, f64),
    pub insulin_decay_min: (f64, f64),
    pub variability: (f64, f64),
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            n_profiles: 20,
            duration_min: 19.0 * 60.0,
            sample_interval_min: 3.0,
            baseline: (100.0, 160.0),
            // 07:00, 12:30, 19:00 and a late snack at 22:00 for a 05:00 start
            meal_times_min: vec![120.0, 450.0, 840.0, 1020.0],
            meal_time_jitter_min: 45.0,
            meal_magnitude: (40.0, 140.0),
            meal_rise_min: (20.0, 45.0),
            meal_decay_min: (70.0, 140.0),
            insulin_fraction: (0.2, 0.6),
            insulin_delay_min: (10.0, 40.0),
            insulin_rise_min: (40.0, 70.0),
            insulin_decay_min: (120.0, 200.0),
            variability: (2.0, 8.0),
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_min > 0.0 && self.sample_interval_min > 0.0) {
            return invalid("profile duration and sample interval must be positive");
        }
        for (name, (lo, hi)) in [
            ("baseline", self.baseline),
            ("meal_magnitude", self.meal_magnitude),
            ("meal_rise_min", self.meal_rise_min),
            ("meal_decay_min", self.meal_decay_min),
            ("insulin_fraction", self.insulin_fraction),
            ("insulin_delay_min", self.insulin_delay_min),
            ("insulin_rise_min", self.insulin_rise_min),
            ("insulin_decay_min", self.insulin_decay_min),
            ("variability", self.variability),
        ] {
            if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
                return invalid(format!("population range {name} must satisfy 0 <= lo <= hi, got ({lo}, {hi})"));
            }
        }
        if !(self.meal_time_jitter_min >= 0.0) {
            return invalid("meal time jitter must be non-negative");
        }
        Ok(())
    }

    /// Draws one profile specification per member plus a seed for its
    /// fluctuation term.
    pub fn sample(&self, rng_seed: u64) -> Vec<(BglProfile, u64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        (0..self.n_profiles)
            .map(|_| {
                let baseline = draw(&mut rng, self.baseline);
                let mut meals = Vec::new();
                let mut insulin = Vec::new();
                for &nominal in &self.meal_times_min {
                    let jitter = draw(&mut rng, (-self.meal_time_jitter_min, self.meal_time_jitter_min));
                    let meal = Excursion {
                        time_min: (nominal + jitter).max(0.0),
                        magnitude: draw(&mut rng, self.meal_magnitude),
                        rise_min: draw(&mut rng, self.meal_rise_min),
                        decay_min: draw(&mut rng, self.meal_decay_min),
                    };
                    insulin.push(Excursion {
                        time_min: meal.time_min + draw(&mut rng, self.insulin_delay_min),
                        magnitude: meal.magnitude * draw(&mut rng, self.insulin_fraction),
                        rise_min: draw(&mut rng, self.insulin_rise_min),
                        decay_min: draw(&mut rng, self.insulin_decay_min),
                    });
                    meals.push(meal);
                }
                let profile = BglProfile {
                    baseline,
                    meals,
                    insulin,
                    variability: draw(&mut rng, self.variability),
                    duration_min: self.duration_min,
                    sample_interval_min: self.sample_interval_min,
                };
                (profile, rng.random::<u64>())
            })
            .collect()
    }

    /// Generates `n_profiles` profiles with ids `p00`, `p01`, ...
    pub fn generate(&self, rng_seed: u64) -> Result<Vec<(String, Vec<f64>)>> {
        self.validate()?;
        self.sample(rng_seed)
            .into_iter()
            .enumerate()
            .map(|(i, (spec, seed))| Ok((format!("p{i:02}"), generate_profile(&spec, seed)?)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steady_state_approaches_dc_gain() {
        let mut s = SensorModel::default();
        for k in 0..500 {
            s.step(1.0, k as f64 * 180.0).unwrap();
        }
        let limit = 163.1 / (1.0 - 0.8187);
        assert!((s.state() - limit).abs() < 1e-9);
        assert!((limit - 899.61).abs() < 0.01);
        assert!((s.dc_gain() - 900.0).abs() < 0.5);
    }

    #[test]
    fn decay_matches_fifteen_minute_time_constant() {
        assert!(((-3.0f64 / 15.0).exp() - 0.8187).abs() < 5e-5);
    }

    #[test]
    fn output_at_deployment() {
        let s = SensorModel::default();
        let bracket = 0.8 + (-5f64).tanh() * sigmoid(-5.0) * (0.6 + sigmoid(17.0));
        assert!((bracket - 0.789).abs() < 1e-3);
        let expected = 0.2 * 180f64.powf(0.1) * bracket;
        assert!((s.output(180.0, 0.0) - expected).abs() < 1e-15);
    }

    #[test]
    fn zero_state_gives_zero_output() {
        let s = SensorModel::default();
        for t in [0.0, 1e4, 6e4] {
            assert_eq!(s.output(0.0, t), 0.0);
        }
    }

    #[test]
    fn output_uses_pre_update_state() {
        let mut s = SensorModel::default();
        assert_eq!(s.step(100.0, 0.0).unwrap(), 0.0);
        assert_eq!(s.state(), 16310.0);
        assert!(s.step(-1.0, 180.0).is_err());
    }

    #[test]
    fn minutes_unit_makes_drift_nearly_inert() {
        let s = SensorModel { time_unit: DriftTimeUnit::Minutes, ..Default::default() };
        let b0 = s.drift_bracket(0.0);
        let b1 = s.drift_bracket(68_400.0);
        assert!((b0 - b1).abs() < 1e-2);
    }

    #[test]
    fn simulate_empty_and_repeatable() {
        let m = SensorModel::default();
        assert!(simulate_series(&m, &[], 180.0, "e").unwrap().is_empty());
        let profile: Vec<f64> = (0..50).map(|k| 120.0 + k as f64).collect();
        let a = simulate_series(&m, &profile, 180.0, "a").unwrap();
        let b = simulate_series(&m, &profile, 180.0, "a").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        assert_eq!(a.t[49], 49.0 * 180.0);
        assert_eq!(a.u_ref.as_deref(), Some(profile.as_slice()));
    }

    #[test]
    fn constant_profile_without_events() {
        let spec = BglProfile::constant(123.0);
        let u = generate_profile(&spec, 5).unwrap();
        assert_eq!(u.len(), 381);
        assert!(u.iter().all(|&v| v == 123.0));
    }

    #[test]
    fn excursion_peaks_at_magnitude() {
        let e = Excursion { time_min: 10.0, magnitude: 50.0, rise_min: 20.0, decay_min: 90.0 };
        let peak = (0..2000).map(|k| e.value(k as f64 * 0.1)).fold(0.0, f64::max);
        assert!((peak - 50.0).abs() < 1e-3);
        assert_eq!(e.value(5.0), 0.0);
    }

    #[test]
    fn clipping_keeps_values_in_range() {
        let mut spec = BglProfile::constant(500.0);
        spec.meals.push(Excursion { time_min: 0.0, magnitude: 400.0, rise_min: 10.0, decay_min: 60.0 });
        let u = generate_profile(&spec, 0).unwrap();
        assert!(u.iter().all(|&v| (MIN_BGL..=MAX_BGL).contains(&v)));
        assert!(u.iter().any(|&v| v == MAX_BGL));
    }

    #[test]
    fn population_is_deterministic() {
        let spec = PopulationSpec::default();
        assert_eq!(spec.generate(3).unwrap(), spec.generate(3).unwrap());
        assert_ne!(spec.generate(3).unwrap(), spec.generate(4).unwrap());
    }
}
