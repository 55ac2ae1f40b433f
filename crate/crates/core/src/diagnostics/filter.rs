//! Butterworth band-pass design in second-order sections and zero-phase
//! forward-backward filtering.

use std::f64::consts::PI;

use rustfft::num_complex::Complex64;

use crate::error::{Error, Result};

/// One biquad `(b0 + b1 z⁻¹ + b2 z⁻²) / (1 + a1 z⁻¹ + a2 z⁻²)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 2],
}

impl Biquad {
    fn response(&self, z_inv: Complex64) -> Complex64 {
        let z2 = z_inv * z_inv;
        (self.b[0] + z_inv * self.b[1] + z2 * self.b[2]) / (1.0 + z_inv * self.a[0] + z2 * self.a[1])
    }

    /// Steady-state transposed direct-form state for a unit constant input.
    fn step_state(&self) -> ([f64; 2], f64) {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let g = (b0 + b1 + b2) / (1.0 + a1 + a2);
        let z1 = b2 - a2 * g;
        ([b1 - a1 * g + z1, z1], g)
    }
}

/// Cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    /// Complex response at `freq` (same units as `fs`).
    pub fn response(&self, freq: f64, fs: f64) -> Complex64 {
        let z_inv = Complex64::from_polar(1.0, -2.0 * PI * freq / fs);
        self.sections.iter().map(|s| s.response(z_inv)).product()
    }

    /// Causal filtering starting from `state` scaled by `x0`.
    fn run(&self, x: &mut [f64], x0: f64) {
        let mut scale = x0;
        for s in &self.sections {
            let ([mut z0, mut z1], g) = s.step_state();
            z0 *= scale;
            z1 *= scale;
            scale *= g;
            for v in x.iter_mut() {
                let xi = *v;
                let y = s.b[0] * xi + z0;
                z0 = s.b[1] * xi - s.a[0] * y + z1;
                z1 = s.b[2] * xi - s.a[1] * y;
                *v = y;
            }
        }
    }

    /// Zero-phase filtering with odd extension at both ends.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let n = x.len();
        let pad = (3 * (2 * self.sections.len() + 1)).min(n.saturating_sub(1));
        if n < 2 {
            return Err(Error::invalid("filtfilt needs at least 2 samples"));
        }
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        let first = ext[0];
        self.run(&mut ext, first);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Digital Butterworth band-pass of the given prototype order, passing
/// `[low, high]` at sampling rate `fs`. Unit gain at the geometric band
/// centre.
pub fn butterworth_design(low: f64, high: f64, order: usize, fs: f64) -> Result<Sos> {
    if !(fs > 0.0 && 0.0 < low && low < high && high < fs / 2.0) {
        return Err(Error::invalid(format!(
            "band {low}..{high} must satisfy 0 < low < high < fs/2 = {}",
            fs / 2.0
        )));
    }
    if order == 0 {
        return Err(Error::invalid("filter order must be positive"));
    }
    let fs2 = 2.0 * fs;
    let wl = fs2 * (PI * low / fs).tan();
    let wh = fs2 * (PI * high / fs).tan();
    let (bw, w0) = (wh - wl, (wl * wh).sqrt());
    let mut poles = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * (bw / 2.0);
        let root = (p * p - w0 * w0).sqrt();
        for pb in [p + root, p - root] {
            poles.push((fs2 + pb) / (fs2 - pb));
        }
    }
    // Keep one pole of each conjugate pair; every section has zeros at ±1.
    let mut upper: Vec<Complex64> = poles.into_iter().filter(|p| p.im > 0.0).collect();
    upper.sort_by(|a, b| a.norm().total_cmp(&b.norm()));
    if upper.len() != order {
        return Err(Error::invalid("band too narrow for a stable design"));
    }
    let mut sos = Sos {
        sections: upper
            .iter()
            .map(|p| Biquad {
                b: [1.0, 0.0, -1.0],
                a: [-2.0 * p.re, p.norm_sqr()],
            })
            .collect(),
    };
    let centre = fs * (w0 / fs2).atan() / PI;
    let gain = sos.response(centre, fs).norm();
    let per = gain.powf(-1.0 / order as f64);
    for s in &mut sos.sections {
        s.b.iter_mut().for_each(|b| *b *= per);
    }
    Ok(sos)
}

/// Zero-phase Butterworth band-pass of `x`.
pub fn butterworth_bandpass(x: &[f64], low: f64, high: f64, order: usize, fs: f64) -> Result<Vec<f64>> {
    butterworth_design(low, high, order, fs)?.filtfilt(x)
}
