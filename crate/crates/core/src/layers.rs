//! Forward context and the small trainable building blocks shared by the
//! model modules.

use std::rc::Rc;

use rand::Rng as _;

use crate::error::Result;
use crate::numerics::{seeded_rng, Graph, ParamId, ParamStore, Rng, Tensor, Var};

/// One forward evaluation: the tape, the parameters it reads, and the
/// training-mode switch that controls dropout.
pub struct Ctx<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    pub training: bool,
    rng: Rng,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, training: bool, seed: u64) -> Self {
        Self {
            g: Graph::new(),
            store,
            training,
            rng: seeded_rng(seed),
        }
    }

    pub fn eval(store: &'a ParamStore) -> Self {
        Self::new(store, false, 0)
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        self.g.param(self.store, id)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.g.value(v)
    }

    /// Inverted dropout; identity outside training mode.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let keep = 1.0 - rate;
        let mut mask = Tensor::zeros(&shape);
        for m in mask.data_mut() {
            if self.rng.random::<f64>() < keep {
                *m = 1.0 / keep;
            }
        }
        self.g.mul_const(x, Rc::new(mask))
    }
}

pub(crate) fn xavier(store: &mut ParamStore, name: String, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> ParamId {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    store.add(name, Tensor::uniform(shape, bound, rng))
}

/// Feature-axis affine map `x[n×in]·W[in×out] + b[1×out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let w = xavier(store, format!("{name}.w"), &[d_in, d_out], d_in, d_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[1, d_out]));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        cx.g.linear(x, w, b)
    }
}

/// Time-axis affine map `W[out×in]·x[in×d] + b[out×1]`, changing sequence
/// length from `in` to `out`.
#[derive(Clone, Debug)]
pub struct TimeLinear {
    pub w: ParamId,
    pub b: ParamId,
}

impl TimeLinear {
    pub fn new(store: &mut ParamStore, name: &str, t_in: usize, t_out: usize, rng: &mut Rng) -> Self {
        let w = xavier(store, format!("{name}.w"), &[t_out, t_in], t_in, t_out, rng);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[t_out, 1]));
        Self { w, b }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let w = cx.p(self.w);
        let b = cx.p(self.b);
        let h = cx.g.matmul(w, x)?;
        cx.g.add_broadcast(h, b)
    }
}

/// Two-layer perceptron `W2·ReLU(W1·x + b1) + b2` without a residual path.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        Self {
            inner: Linear::new(store, &format!("{name}.0"), d_in, hidden, rng),
            outer: Linear::new(store, &format!("{name}.1"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.inner.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        self.outer.forward(cx, h)
    }
}

/// A trainable scalar logit stored as `[1×1]`.
pub(crate) fn scalar_param(store: &mut ParamStore, name: String, value: f64) -> ParamId {
    store.add(name, Tensor::full(&[1, 1], value))
}
