//! Discrete Fourier transforms over exact (unpadded) lengths.
//!
//! Arbitrary lengths are handled by `rustfft`, which switches to mixed-radix
//! or Bluestein plans internally, so no zero-padding ever changes the
//! transform length. Circular correlation therefore stays circular.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Split real/imaginary spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexBuffer {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexBuffer {
    pub fn zeros(len: usize) -> Self {
        Self {
            re: vec![0.0; len],
            im: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn magnitude_squared(&self) -> Vec<f64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .collect()
    }

    fn to_complex(&self) -> Vec<Complex<f64>> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&re, &im)| Complex::new(re, im))
            .collect()
    }

    fn from_complex(buf: &[Complex<f64>]) -> Self {
        Self {
            re: buf.iter().map(|c| c.re).collect(),
            im: buf.iter().map(|c| c.im).collect(),
        }
    }
}

fn transform(buf: &mut [Complex<f64>], inverse: bool) {
    PLANNER.with(|p| {
        let mut planner = p.borrow_mut();
        let plan = if inverse {
            planner.plan_fft_inverse(buf.len())
        } else {
            planner.plan_fft_forward(buf.len())
        };
        plan.process(buf);
    });
}

/// Forward DFT of a real sequence, `X[f] = Σ_t x[t]·e^{-2πi·f·t/T}`.
pub fn fft(x: &[f64]) -> Result<ComplexBuffer> {
    if x.is_empty() {
        return Err(Error::invalid("fft of an empty sequence"));
    }
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    transform(&mut buf, false);
    Ok(ComplexBuffer::from_complex(&buf))
}

/// Forward DFT of a complex sequence.
pub fn fft_complex(x: &ComplexBuffer) -> Result<ComplexBuffer> {
    if x.is_empty() {
        return Err(Error::invalid("fft of an empty sequence"));
    }
    let mut buf = x.to_complex();
    transform(&mut buf, false);
    Ok(ComplexBuffer::from_complex(&buf))
}

/// Inverse DFT including the `1/T` normalization.
pub fn ifft(x: &ComplexBuffer) -> Result<ComplexBuffer> {
    if x.is_empty() {
        return Err(Error::invalid("ifft of an empty sequence"));
    }
    if x.re.len() != x.im.len() {
        return Err(Error::shape("ifft", "re/im length mismatch"));
    }
    let mut buf = x.to_complex();
    transform(&mut buf, true);
    let scale = 1.0 / buf.len() as f64;
    for c in &mut buf {
        *c *= scale;
    }
    Ok(ComplexBuffer::from_complex(&buf))
}

/// Circular cross-correlation of two real sequences,
/// `out[τ] = Re 𝔽⁻¹(𝔽(q) ⊙ conj 𝔽(k))[τ] = Σ_t q[(t+τ) mod T]·k[t]`.
pub fn circular_correlate(q: &[f64], k: &[f64]) -> Result<Vec<f64>> {
    if q.len() != k.len() {
        return Err(Error::shape(
            "circular_correlate",
            format!("{} vs {}", q.len(), k.len()),
        ));
    }
    let fq = fft(q)?;
    let fk = fft(k)?;
    let mut prod = ComplexBuffer::zeros(q.len());
    for f in 0..q.len() {
        // (a+ib)(c-id)
        prod.re[f] = fq.re[f] * fk.re[f] + fq.im[f] * fk.im[f];
        prod.im[f] = fq.im[f] * fk.re[f] - fq.re[f] * fk.im[f];
    }
    Ok(ifft(&prod)?.re)
}

/// Circular convolution, `out[u] = Σ_τ a[τ]·b[(u-τ) mod T]`.
pub fn circular_convolve(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "circular_convolve",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let fa = fft(a)?;
    let fb = fft(b)?;
    let mut prod = ComplexBuffer::zeros(a.len());
    for f in 0..a.len() {
        prod.re[f] = fa.re[f] * fb.re[f] - fa.im[f] * fb.im[f];
        prod.im[f] = fa.re[f] * fb.im[f] + fa.im[f] * fb.re[f];
    }
    Ok(ifft(&prod)?.re)
}
