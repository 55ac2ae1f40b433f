//! Rolling-volatility anomaly detection.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volatility {
    pub window: usize,
    pub k_sigma: f64,
    /// Rolling std per step; `None` before the first full window.
    pub rolling_std: Vec<Option<f64>>,
    /// Bin edges (`bins + 1` values) and counts over the nonzero rolling stds.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub anomalies: Vec<usize>,
    /// Steps skipped because their window had zero spread.
    pub zero_std_steps: usize,
}

pub const HISTOGRAM_BINS: usize = 20;

/// Step `t` is compared with the mean and population std of the trailing
/// window `x[t+1−window ..= t]`.
pub fn rolling_anomalies(x: &[f64], window: usize, k_sigma: f64) -> Result<Volatility> {
    let n = x.len();
    if window < 2 || window >= n {
        return Err(Error::invalid(format!("window {window} must lie in [2, {n})")));
    }
    let mut rolling_std = vec![None; n];
    let mut anomalies = Vec::new();
    let mut zero_std_steps = 0;
    for t in window - 1..n {
        let win = &x[t + 1 - window..=t];
        let mean = win.iter().sum::<f64>() / window as f64;
        let var = win.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / window as f64;
        let std = var.sqrt();
        rolling_std[t] = Some(std);
        if std <= 1e-12 * (1.0 + mean.abs()) {
            zero_std_steps += 1;
            continue;
        }
        if (x[t] - mean).abs() > k_sigma * std {
            anomalies.push(t);
        }
    }
    let stds: Vec<f64> = rolling_std.iter().flatten().copied().filter(|&s| s > 0.0).collect();
    let (edges, counts) = histogram(&stds, HISTOGRAM_BINS);
    Ok(Volatility {
        window,
        k_sigma,
        rolling_std,
        edges,
        counts,
        anomalies,
        zero_std_steps,
    })
}

fn histogram(values: &[f64], bins: usize) -> (Vec<f64>, Vec<usize>) {
    if values.is_empty() {
        return (Vec::new(), Vec::new());
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let i = (((v - lo) / width) as usize).min(bins - 1);
        counts[i] += 1;
    }
    (edges, counts)
}
