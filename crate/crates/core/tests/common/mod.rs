#![allow(dead_code)]

use xfmnet::layers::Ctx;
use xfmnet::numerics::{ParamId, ParamStore, Tensor, Var};
use xfmnet::Result;

/// Central-difference check of every listed parameter. Returns the
/// normwise relative error per parameter name.
pub fn param_gradcheck<F>(store: &ParamStore, ids: &[ParamId], h: f64, f: F) -> Vec<(String, f64)>
where
    F: Fn(&mut Ctx) -> Result<Var>,
{
    let mut cx = Ctx::new(store, false, 0);
    let loss = f(&mut cx).unwrap();
    let grads = cx.g.backward(loss).unwrap();
    let bound: Vec<(ParamId, Var)> = cx.g.bound_params().collect();

    let eval = |s: &ParamStore| -> f64 {
        let mut cx = Ctx::new(s, false, 0);
        let out = f(&mut cx).unwrap();
        cx.value(out).item().unwrap()
    };

    let mut work = store.clone();
    let mut out = Vec::new();
    for &id in ids {
        let analytic = bound
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| grads.get(*v).cloned())
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()));
        let base = store.get(id).clone();
        let mut numeric = vec![0.0; base.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut t = base.clone();
            t.data_mut()[j] += h;
            work.set(id, t.clone()).unwrap();
            let fp = eval(&work);
            t.data_mut()[j] -= 2.0 * h;
            work.set(id, t).unwrap();
            let fm = eval(&work);
            *slot = (fp - fm) / (2.0 * h);
        }
        work.set(id, base).unwrap();
        let scale = numeric.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-6);
        let err = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).abs())
            .fold(0.0, f64::max);
        out.push((store.entry(id).name.clone(), err / scale));
    }
    out
}

/// Scalar loss `Σ out ⊙ r` for a fixed pseudo-random `r`.
pub fn project(cx: &mut Ctx, out: Var, seed: u64) -> Result<Var> {
    let mut rng = xfmnet::numerics::seeded_rng(seed);
    let shape = cx.g.shape(out).to_vec();
    let r = cx.constant(Tensor::uniform(&shape, 1.0, &mut rng));
    let p = cx.g.mul(out, r)?;
    cx.g.sum(p)
}
