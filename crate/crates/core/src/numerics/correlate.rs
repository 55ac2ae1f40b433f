//! Per-channel circular cross-correlation through the frequency domain.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::fft::{circular_convolve, circular_correlate};
use crate::numerics::{CustomOp, Graph, Tensor, Var};

fn column(t: &Tensor, c: usize) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..rows).map(|r| t.data()[r * cols + c]).collect()
}

fn per_channel(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(&[f64], &[f64]) -> Result<Vec<f64>>,
) -> Result<Tensor> {
    let (t, d) = a.dims2()?;
    let mut out = vec![0.0; t * d];
    for c in 0..d {
        let col = f(&column(a, c), &column(b, c))?;
        for (r, v) in col.into_iter().enumerate() {
            out[r * d + c] = v;
        }
    }
    Tensor::new(&[t, d], out)
}

/// `out[τ, c] = Re 𝔽⁻¹(𝔽(q[:,c]) ⊙ conj 𝔽(k[:,c]))[τ]` for `q, k` of shape `[T×d]`,
/// i.e. `Σ_t q[(t+τ) mod T, c]·k[t, c]`.
pub fn freq_cross_correlate(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    q.dims2()?;
    if q.shape() != k.shape() {
        return Err(Error::shape(
            "freq_cross_correlate",
            format!("{:?} vs {:?}", q.shape(), k.shape()),
        ));
    }
    per_channel(q, k, circular_correlate)
}

struct CrossCorrelation;

impl CustomOp for CrossCorrelation {
    fn name(&self) -> &'static str {
        "freq_cross_correlate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>> {
        let (q, k) = (inputs[0], inputs[1]);
        // out[τ] = Σ_t q[t+τ]·k[t]
        // ∂q[u] = Σ_τ g[τ]·k[u-τ]   (circular convolution of g and k)
        // ∂k[t] = Σ_τ g[τ]·q[t+τ]   (correlation of q against g)
        let gq = per_channel(grad, k, circular_convolve)?;
        let gk = per_channel(q, grad, circular_correlate)?;
        Ok(vec![Some(gq), Some(gk)])
    }
}

impl Graph {
    /// Differentiable [`freq_cross_correlate`].
    pub fn freq_correlate(&mut self, q: Var, k: Var) -> Result<Var> {
        let out = freq_cross_correlate(self.value(q), self.value(k))?;
        self.custom(Rc::new(CrossCorrelation), &[q, k], out)
    }
}
