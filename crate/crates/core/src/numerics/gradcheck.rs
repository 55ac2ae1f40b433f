//! Central finite-difference gradient checking.
//!
//! The check only ever evaluates the forward pass; it never reads the
//! analytic adjoints it is compared against.

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Per-input normwise relative error `max|a-n| / max(max|n|, floor)`.
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }
}

pub const DEFAULT_STEP: f64 = 1e-4;

/// Compares the gradient of `f` w.r.t. every tensor in `inputs` with central
/// differences of step `h`. `f` builds a scalar from leaves bound in order.
pub fn check<F>(inputs: &[Tensor], h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * h);
        }
        let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-6);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        rel_errors.push(err / scale);
    }
    Ok(GradCheck { rel_errors })
}
