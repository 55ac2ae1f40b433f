//! Seeded multi-station generator with a rainfall driver visible in both
//! modalities.
//!
//! Each station is a shared diurnal cycle, its own multi-day cycle, a linear
//! drift, Gaussian noise, and a level response to recent rainfall. Image
//! frames are a constant background plus a Gaussian blob whose integrated
//! intensity equals the current rainfall.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::Rng as _;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Tensor};

/// Steps per day at the 4-hour sampling interval.
pub const STEPS_PER_DAY: usize = 6;
pub const STEP_HOURS: i64 = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub stations: usize,
    pub length: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub diurnal_amplitude: f64,
    pub midterm_amplitude: f64,
    /// Multi-day cycle period range in steps.
    pub midterm_period: (usize, usize),
    pub drift: f64,
    pub noise_std: f64,
    pub rain_amplitude: f64,
    /// Probability that a rain event starts at a given step.
    pub rain_rate: f64,
    /// Per-step decay of rainfall intensity.
    pub rain_decay: f64,
    /// Per-step decay of the station level response to rain.
    pub response_decay: f64,
    pub rain_gain: f64,
    pub image_size: usize,
    pub background: f64,
    pub start: NaiveDateTime,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            stations: 6,
            length: 8766,
            lookback: 336,
            horizon: 192,
            diurnal_amplitude: 1.0,
            midterm_amplitude: 1.0,
            midterm_period: (60, 120),
            drift: 0.5,
            noise_std: 0.3,
            rain_amplitude: 1.0,
            rain_rate: 0.02,
            rain_decay: 0.7,
            response_decay: 0.97,
            rain_gain: 0.15,
            image_size: 8,
            background: 0.1,
            start: NaiveDate::from_ymd_opt(2021, 1, 1)
                .expect("valid date")
                .and_hms_opt(0, 0, 0)
                .expect("valid time"),
        }
    }
}

/// Per-station deterministic components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StationParams {
    pub diurnal_amplitude: f64,
    pub diurnal_phase: f64,
    pub midterm_amplitude: f64,
    pub midterm_period: f64,
    pub midterm_phase: f64,
    /// Total drift over the series.
    pub drift: f64,
    pub rain_gain: f64,
}

impl StationParams {
    /// The noise-free, rain-free value at step `t` of a series of `n` steps.
    pub fn clean(&self, t: usize, n: usize) -> f64 {
        let t = t as f64;
        self.diurnal_amplitude * (2.0 * PI * t / STEPS_PER_DAY as f64 + self.diurnal_phase).sin()
            + self.midterm_amplitude * (2.0 * PI * t / self.midterm_period + self.midterm_phase).sin()
            + self.drift * t / n as f64
    }
}

/// Raw generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticData {
    /// `[M×N]`
    pub series: Tensor,
    /// `[N×1×H×W]`
    pub frames: Tensor,
    pub timestamps: Vec<NaiveDateTime>,
    pub rain: Vec<f64>,
    pub stations: Vec<StationParams>,
}

pub fn synthetic_generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.length < cfg.lookback + cfg.horizon {
        return Err(Error::invalid(format!(
            "length {} shorter than lookback {} plus horizon {}",
            cfg.length, cfg.lookback, cfg.horizon
        )));
    }
    if cfg.stations == 0 || cfg.image_size < 4 {
        return Err(Error::invalid("need at least one station and 4×4 frames"));
    }
    let (pmin, pmax) = cfg.midterm_period;
    if pmin == 0 || pmin > pmax {
        return Err(Error::invalid(format!("bad multi-day period range {pmin}..{pmax}")));
    }
    if !(0.0..=1.0).contains(&cfg.rain_rate) || cfg.noise_std < 0.0 {
        return Err(Error::invalid("rain rate must lie in [0, 1] and noise must be nonnegative"));
    }
    let n = cfg.length;
    let m = cfg.stations;
    let mut rng = seeded_rng(cfg.seed);
    let shared_phase = rng.random_range(0.0..2.0 * PI);
    let stations: Vec<StationParams> = (0..m)
        .map(|_| StationParams {
            diurnal_amplitude: cfg.diurnal_amplitude * rng.random_range(0.7..1.3),
            diurnal_phase: shared_phase,
            midterm_amplitude: cfg.midterm_amplitude * rng.random_range(0.6..1.4),
            midterm_period: rng.random_range(pmin as f64..=pmax as f64),
            midterm_phase: rng.random_range(0.0..2.0 * PI),
            drift: cfg.drift * rng.random_range(-1.0..1.0),
            rain_gain: cfg.rain_gain * rng.random_range(0.5..1.5),
        })
        .collect();

    let intensity = Exp::new(1.0).expect("positive rate");
    let mut rain = Vec::with_capacity(n);
    let mut r = 0.0;
    for _ in 0..n {
        r *= cfg.rain_decay;
        if rng.random::<f64>() < cfg.rain_rate {
            r += cfg.rain_amplitude * intensity.sample(&mut rng);
        }
        rain.push(r);
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let mut series = vec![0.0; m * n];
    for (s, p) in stations.iter().enumerate() {
        let mut level = 0.0;
        for t in 0..n {
            level = level * cfg.response_decay + rain[t];
            let eps = if cfg.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            series[s * n + t] = p.clean(t, n) + p.rain_gain * level + eps;
        }
    }

    let hw = cfg.image_size;
    let centre = (hw as f64 - 1.0) / 2.0;
    let sigma = hw as f64 / 6.0;
    let mut blob: Vec<f64> = (0..hw * hw)
        .map(|i| {
            let (y, x) = ((i / hw) as f64 - centre, (i % hw) as f64 - centre);
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let z: f64 = blob.iter().sum();
    blob.iter_mut().for_each(|b| *b /= z);
    let mut frames = Vec::with_capacity(n * hw * hw);
    for &rt in &rain {
        frames.extend(blob.iter().map(|b| cfg.background + rt * b));
    }

    let timestamps = (0..n)
        .map(|t| cfg.start + Duration::hours(STEP_HOURS * t as i64))
        .collect();
    Ok(SyntheticData {
        series: Tensor::new(&[m, n], series)?,
        frames: Tensor::new(&[n, 1, hw, hw], frames)?,
        timestamps,
        rain,
        stations,
    })
}
