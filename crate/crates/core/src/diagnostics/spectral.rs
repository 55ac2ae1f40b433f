//! Periodogram with LOESS overlay, analytic-signal envelopes and
//! autocorrelation.

use crate::error::{Error, Result};
use crate::numerics::{fft, ifft, ComplexBuffer};

/// Spectrum rebinned to one-day period resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Periodogram {
    /// Frequencies in cycles per day of the raw positive-frequency lines.
    pub freqs: Vec<f64>,
    /// `|X_f|²/N` per raw line, DC excluded.
    pub power: Vec<f64>,
    pub dc_power: f64,
    /// Bin centres in days.
    pub period_days: Vec<f64>,
    /// Peak raw power among the lines whose period falls in each bin.
    pub binned: Vec<f64>,
    pub loess: Vec<f64>,
    pub warning: Option<String>,
}

pub const MAX_PERIOD_DAYS: usize = 30;

/// `sample_interval` is in days. Bins are `[j−½, j+½)` days for
/// `j = 1..=30`; empty bins are omitted.
pub fn periodogram(x: &[f64], sample_interval: f64) -> Result<Periodogram> {
    let n = x.len();
    if n < 64 {
        return Err(Error::invalid(format!("periodogram needs at least 64 samples, got {n}")));
    }
    if !(sample_interval > 0.0) {
        return Err(Error::invalid("sample interval must be positive"));
    }
    let spec = fft(x)?.magnitude_squared();
    let scale = 1.0 / n as f64;
    let dc_power = spec[0] * scale;
    let span = n as f64 * sample_interval;
    let (mut freqs, mut power) = (Vec::new(), Vec::new());
    let mut peaks = vec![None; MAX_PERIOD_DAYS + 1];
    for (k, &p) in spec.iter().enumerate().take(n / 2 + 1).skip(1) {
        // Lines above Nyquist mirror these; fold their power in.
        let p = if 2 * k == n { p * scale } else { 2.0 * p * scale };
        let f = k as f64 / span;
        freqs.push(f);
        power.push(p);
        let bin = (1.0 / f).round();
        if (1.0..=MAX_PERIOD_DAYS as f64).contains(&bin) {
            let slot: &mut Option<f64> = &mut peaks[bin as usize];
            *slot = Some(slot.map_or(p, |q| q.max(p)));
        }
    }
    let (mut period_days, mut binned) = (Vec::new(), Vec::new());
    for (j, peak) in peaks.iter().enumerate().skip(1) {
        if let Some(p) = peak {
            period_days.push(j as f64);
            binned.push(*p);
        }
    }
    let total: f64 = power.iter().sum();
    let warning = (total <= 1e-12 * dc_power.max(f64::MIN_POSITIVE))
        .then(|| "constant series: all power is at DC".to_string());
    let loess = if binned.len() >= 3 { loess(&period_days, &binned, 0.3)? } else { binned.clone() };
    Ok(Periodogram {
        freqs,
        power,
        dc_power,
        period_days,
        binned,
        loess,
        warning,
    })
}

fn tricube(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let v = 1.0 - u * u * u;
        v * v * v
    }
}

fn local_linear(xs: &[f64], ys: &[f64], robust: &[f64], x0: f64, q: usize) -> f64 {
    let mut dist: Vec<f64> = xs.iter().map(|x| (x - x0).abs()).collect();
    dist.sort_by(f64::total_cmp);
    let h = dist[q - 1].max(1e-12) * 1.000_001;
    let (mut sw, mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for ((&x, &y), &r) in xs.iter().zip(ys).zip(robust) {
        let w = tricube((x - x0).abs() / h) * r;
        sw += w;
        sx += w * x;
        sy += w * y;
        sxx += w * x * x;
        sxy += w * x * y;
    }
    if sw <= 0.0 {
        return 0.0;
    }
    let (mx, my) = (sx / sw, sy / sw);
    let var = sxx / sw - mx * mx;
    if var <= 1e-12 * (1.0 + mx * mx) {
        return my;
    }
    my + (sxy / sw - mx * my) / var * (x0 - mx)
}

/// Local-linear LOESS with tricube weights over the nearest `span·n`
/// points, followed by one bisquare robustness pass.
pub fn loess(xs: &[f64], ys: &[f64], span: f64) -> Result<Vec<f64>> {
    let n = xs.len();
    if n != ys.len() || n < 2 {
        return Err(Error::invalid("loess needs at least two paired points"));
    }
    if !(span > 0.0 && span <= 1.0) {
        return Err(Error::invalid(format!("loess span {span} must lie in (0, 1]")));
    }
    let q = ((span * n as f64).ceil() as usize).clamp(2, n);
    let ones = vec![1.0; n];
    let fit: Vec<f64> = xs.iter().map(|&x| local_linear(xs, ys, &ones, x, q)).collect();
    let mut resid: Vec<f64> = ys.iter().zip(&fit).map(|(y, f)| (y - f).abs()).collect();
    let mut sorted = resid.clone();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[n / 2];
    if median <= 0.0 {
        return Ok(fit);
    }
    for r in &mut resid {
        let u = *r / (6.0 * median);
        *r = if u < 1.0 { (1.0 - u * u).powi(2) } else { 0.0 };
    }
    Ok(xs.iter().map(|&x| local_linear(xs, ys, &resid, x, q)).collect())
}

/// Instantaneous amplitude `|x + i·H(x)|` from the FFT analytic signal.
pub fn hilbert_envelope(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 16 {
        return Err(Error::invalid(format!("envelope needs at least 16 samples, got {n}")));
    }
    let spec = fft(x)?;
    let mut analytic = ComplexBuffer::zeros(n);
    for k in 0..n {
        let h = if k == 0 || 2 * k == n {
            1.0
        } else if 2 * k < n {
            2.0
        } else {
            0.0
        };
        analytic.re[k] = spec.re[k] * h;
        analytic.im[k] = spec.im[k] * h;
    }
    let z = ifft(&analytic)?;
    Ok(z.re.iter().zip(&z.im).map(|(r, i)| r.hypot(*i)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Acf {
    /// `r(ℓ)` for `ℓ = 1..=max_lag`.
    pub values: Vec<f64>,
    /// White-noise 95% bound `1.96/√N`.
    pub bound: f64,
}

/// Biased sample autocorrelation.
pub fn acf(x: &[f64], max_lag: usize) -> Result<Acf> {
    let n = x.len();
    if n <= max_lag {
        return Err(Error::invalid(format!("acf needs more than {max_lag} samples, got {n}")));
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - mean).collect();
    let c0: f64 = c.iter().map(|v| v * v).sum();
    if c0 <= 1e-12 * n as f64 * (1.0 + mean * mean) {
        return Err(Error::invalid("acf of a zero-variance series"));
    }
    let values = (1..=max_lag)
        .map(|l| c[..n - l].iter().zip(&c[l..]).map(|(a, b)| a * b).sum::<f64>() / c0)
        .collect();
    Ok(Acf {
        values,
        bound: 1.96 / (n as f64).sqrt(),
    })
}
