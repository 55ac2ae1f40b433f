//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every operation as a node holding its output value.
//! Nodes only reference earlier nodes, so the tape is topologically ordered
//! by construction and [`Graph::backward`] is a single reverse sweep.
//! Shape-bearing ops assume 2-D `[rows × cols]` operands unless stated.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::conv;
use crate::numerics::tensor::{gemm, Tensor};
use crate::numerics::{ParamId, ParamStore};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation with a hand-written adjoint.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient of the output.
    /// Returning `None` for an input means it receives no gradient.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    Affine(Var, f64),
    MulConst(Var, Rc<Tensor>),
    ScaleBy(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceCols { src: Var, start: usize },
    SliceRows { src: Var, start: usize },
    Sum(Var),
    Mean(Var),
    PoolRows(Var, usize),
    SpatialMean(Var),
    GatherRows(Var, Rc<[usize]>),
    Conv1d(conv::Conv1dSpec, Var, Var, Var),
    ConvTranspose1d(conv::Conv1dSpec, Var, Var, Var),
    Conv2d(conv::Conv2dSpec, Var, Var, Var),
    Custom(Rc<dyn CustomOp>, Vec<Var>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

/// Result of a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Graph(format!(
                "node {} does not exist on this graph ({} nodes)",
                v.0,
                self.nodes.len()
            )));
        }
        Ok(())
    }

    /// A value that takes no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a stored parameter to this graph, once per graph.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    /// Parameters bound on this graph with their node handles.
    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&p, &v)| (p, v))
    }

    fn binary_same(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        self.value(a).expect_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// `a[r×c] + b` where `b` is `[1×c]`, `[r×1]` or `[1×1]`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (r, c) = self.value(a).dims2()?;
        let (br, bc) = self.value(b).dims2()?;
        if !((br == 1 || br == r) && (bc == 1 || bc == c)) {
            return Err(Error::shape(
                "add_broadcast",
                format!("[{r}×{c}] + [{br}×{bc}]"),
            ));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                let bi = if br == 1 { 0 } else { i };
                let bj = if bc == 1 { 0 } else { j };
                out.push(av[i * c + j] + bv[bi * bc + bj]);
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::AddBroadcast(a, b),
            ng,
        ))
    }

    /// `scale·a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| scale * x + shift);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Affine(a, scale), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.affine(a, s, 0.0)
    }

    /// Elementwise product with a constant tensor (masks, dropout).
    pub fn mul_const(&mut self, a: Var, c: Rc<Tensor>) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).zip_map(&c, |x, y| x * y)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::MulConst(a, c), ng))
    }

    /// `a` scaled by the single element of `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        self.check(a)?;
        self.check(s)?;
        let sv = self.value(s).item()?;
        let out = self.value(a).scale(sv);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let out = crate::numerics::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).transpose2()?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(a);
        Ok(self.push(out, Op::Relu(a), ng))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        self.check(a)?;
        let out = self
            .value(a)
            .map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        Ok(self.push(out, Op::LeakyRelu(a, slope), ng))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(sigmoid);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Sigmoid(a), ng))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        Ok(self.push(out, Op::Tanh(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_rows_impl(a, None)
    }

    /// Row softmax restricted to entries where `mask` is true; masked
    /// entries are exactly zero.
    pub fn softmax_rows_masked(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        self.softmax_rows_impl(a, Some(mask))
    }

    fn softmax_rows_impl(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2()?;
        if let Some(m) = mask {
            if m.len() != r * c {
                return Err(Error::shape("softmax_rows_masked", "mask size"));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let allowed = |j: usize| mask.is_none_or(|m| m[i * c + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    mx = mx.max(v);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(Error::invalid(format!("softmax row {i} fully masked")));
            }
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - mx).exp();
                    out[i * c + j] = e;
                    z += e;
                }
            }
            for o in &mut out[i * c..(i + 1) * c] {
                *o /= z;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, c], out),
            Op::SoftmaxRows(a),
            ng,
        ))
    }

    /// Concatenation of 2-D tensors along `axis` (0 = rows, 1 = columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::invalid("concat needs parts and axis 0 or 1"));
        }
        for &p in parts {
            self.check(p)?;
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.value(p).dims2())
            .collect::<Result<_>>()?;
        let out = if axis == 1 {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(Error::shape("concat", format!("row counts {:?}", dims)));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for &p in parts {
                    out.extend_from_slice(self.value(p).row(i));
                }
            }
            Tensor::from_parts(vec![r, c], out)
        } else {
            let c = dims[0].1;
            if dims.iter().any(|d| d.1 != c) {
                return Err(Error::shape("concat", format!("col counts {:?}", dims)));
            }
            let r: usize = dims.iter().map(|d| d.0).sum();
            let mut out = Vec::with_capacity(r * c);
            for &p in parts {
                out.extend_from_slice(self.value(p).data());
            }
            Tensor::from_parts(vec![r, c], out)
        };
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2()?;
        if start + len > c {
            return Err(Error::shape(
                "slice_cols",
                format!("{start}+{len} > {c}"),
            ));
        }
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![r, len], out),
            Op::SliceCols { src: a, start },
            ng,
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2()?;
        if start + len > r {
            return Err(Error::shape(
                "slice_rows",
                format!("{start}+{len} > {r}"),
            ));
        }
        let out = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![len, c], out),
            Op::SliceRows { src: a, start },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), ng))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if self.value(a).numel() == 0 {
            return Err(Error::invalid("mean of an empty tensor"));
        }
        let s = self.value(a).mean();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), ng))
    }

    /// Average pooling of consecutive row groups of size `k`.
    pub fn pool_rows(&mut self, a: Var, k: usize) -> Result<Var> {
        self.check(a)?;
        let (r, c) = self.value(a).dims2()?;
        if k == 0 || r % k != 0 {
            return Err(Error::invalid(format!(
                "pool_rows: {r} rows not divisible by stride {k}"
            )));
        }
        let x = self.value(a).data();
        let ro = r / k;
        let mut out = vec![0.0; ro * c];
        for o in 0..ro {
            for j in 0..k {
                let src = &x[(o * k + j) * c..(o * k + j + 1) * c];
                for (d, s) in out[o * c..(o + 1) * c].iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in &mut out[o * c..(o + 1) * c] {
                *d /= k as f64;
            }
        }
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![ro, c], out),
            Op::PoolRows(a, k),
            ng,
        ))
    }

    /// `[N×C×H×W] → [N×C]` mean over the spatial axes.
    pub fn spatial_mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let shape = self.value(a).shape().to_vec();
        let [n, c, h, w] = shape[..] else {
            return Err(Error::shape("spatial_mean", format!("{:?}", shape)));
        };
        let hw = h * w;
        let x = self.value(a).data();
        let out: Vec<f64> = (0..n * c)
            .map(|i| x[i * hw..(i + 1) * hw].iter().fold(0.0, |s, v| s + v) / hw as f64)
            .collect();
        let ng = self.ng(a);
        Ok(self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::SpatialMean(a),
            ng,
        ))
    }

    /// Row lookup `table[idx[i]]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        self.check(table)?;
        let (r, c) = self.value(table).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {r} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(table);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len(), c], out),
            Op::GatherRows(table, idx.into()),
            ng,
        ))
    }

    /// Time-major 1-D convolution: `x[T×Ci]`, `w[Co×Ci×K]`, `b[Co]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let spec = conv::Conv1dSpec::new(self.value(x), self.value(w), self.value(b), stride, pad, None, false)?;
        let out = conv::conv1d_forward(&spec, self.value(x), self.value(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Conv1d(spec, x, w, b), ng))
    }

    /// Time-major transposed convolution: `x[Tin×Ci]`, `w[Ci×Co×K]`, `b[Co]`,
    /// output length `out_len`.
    pub fn conv_transpose1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        out_len: usize,
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let spec = conv::Conv1dSpec::new(
            self.value(x),
            self.value(w),
            self.value(b),
            stride,
            pad,
            Some(out_len),
            true,
        )?;
        let out = conv::conv_transpose1d_forward(&spec, self.value(x), self.value(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::ConvTranspose1d(spec, x, w, b), ng))
    }

    /// `x[N×Ci×H×W]`, `w[Co×Ci×KH×KW]`, `b[Co]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<Var> {
        self.check(x)?;
        self.check(w)?;
        self.check(b)?;
        let spec = conv::Conv2dSpec::new(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let out = conv::conv2d_forward(&spec, self.value(x), self.value(w), self.value(b));
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Conv2d(spec, x, w, b), ng))
    }

    /// Records an operation whose value was computed by the caller.
    pub fn custom(&mut self, op: Rc<dyn CustomOp>, inputs: &[Var], output: Tensor) -> Result<Var> {
        for &i in inputs {
            self.check(i)?;
        }
        let ng = inputs.iter().any(|&i| self.ng(i));
        Ok(self.push(output, Op::Custom(op, inputs.to_vec()), ng))
    }

    // Composite helpers.

    /// `x[n×in] · w[in×out] + b[1×out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_broadcast(h, b)
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let d = self.sub(pred, target)?;
        let sq = self.mul(d, d)?;
        self.mean(sq)
    }

    /// `p·a + (1-p)·b` for a one-element weight `p`.
    pub fn lerp(&mut self, a: Var, b: Var, p: Var) -> Result<Var> {
        let q = self.affine(p, -1.0, 1.0)?;
        let pa = self.scale_by(a, p)?;
        let qb = self.scale_by(b, q)?;
        self.add(pa, qb)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Graph(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, t: Tensor| {
            if v.0 >= i {
                return Err(Error::Graph(format!("cycle: node {i} reads node {}", v.0)));
            }
            if self.nodes[v.0].needs_grad {
                accumulate(&mut grads[v.0], t);
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                send(*a, g.zip_map(bv, |x, y| x * y)?)?;
                send(*b, g.zip_map(av, |x, y| x * y)?)?;
            }
            Op::AddBroadcast(a, b) => {
                send(*a, g.clone())?;
                let (r, c) = g.dims2()?;
                let (br, bc) = self.value(*b).dims2()?;
                let mut gb = vec![0.0; br * bc];
                for ii in 0..r {
                    for jj in 0..c {
                        let bi = if br == 1 { 0 } else { ii };
                        let bj = if bc == 1 { 0 } else { jj };
                        gb[bi * bc + bj] += g.data()[ii * c + jj];
                    }
                }
                send(*b, Tensor::from_parts(vec![br, bc], gb))?;
            }
            Op::Affine(a, s) => send(*a, g.scale(*s))?,
            Op::MulConst(a, c) => send(*a, g.zip_map(c, |x, y| x * y)?)?,
            Op::ScaleBy(a, s) => {
                let sv = self.value(*s).item()?;
                send(*a, g.scale(sv))?;
                let dot = g
                    .data()
                    .iter()
                    .zip(self.value(*a).data())
                    .fold(0.0, |acc, (x, y)| acc + x * y);
                send(*s, Tensor::full(self.value(*s).shape(), dot))?;
            }
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2()?;
                let (_, n) = self.value(*b).dims2()?;
                if self.ng(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, self.value(*b).data(), true, &mut ga, 0.0);
                    send(*a, Tensor::from_parts(vec![m, k], ga))?;
                }
                if self.ng(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, self.value(*a).data(), true, g.data(), false, &mut gb, 0.0);
                    send(*b, Tensor::from_parts(vec![k, n], gb))?;
                }
            }
            Op::Transpose(a) => send(*a, g.transpose2()?)?,
            Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape())?)?,
            Op::Relu(a) => {
                let x = self.value(*a);
                send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 })?)?;
            }
            Op::LeakyRelu(a, slope) => {
                let x = self.value(*a);
                let s = *slope;
                send(*a, g.zip_map(x, |gv, xv| if xv > 0.0 { gv } else { s * gv })?)?;
            }
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |gv, y| gv * y * (1.0 - y))?)?,
            Op::Tanh(a) => send(*a, g.zip_map(out, |gv, y| gv * (1.0 - y * y))?)?,
            Op::SoftmaxRows(a) => {
                let (r, c) = out.dims2()?;
                let mut gx = vec![0.0; r * c];
                for ii in 0..r {
                    let y = &out.data()[ii * c..(ii + 1) * c];
                    let gr = &g.data()[ii * c..(ii + 1) * c];
                    let dot = y.iter().zip(gr).fold(0.0, |s, (a, b)| s + a * b);
                    for j in 0..c {
                        gx[ii * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                send(*a, Tensor::from_parts(vec![r, c], gx))?;
            }
            Op::Concat { parts, axis } => {
                let (r, c) = g.dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (pr, pc) = self.value(p).dims2()?;
                    let piece = if *axis == 1 {
                        let mut d = Vec::with_capacity(pr * pc);
                        for ii in 0..r {
                            d.extend_from_slice(&g.data()[ii * c + offset..ii * c + offset + pc]);
                        }
                        offset += pc;
                        d
                    } else {
                        let d = g.data()[offset * c..(offset + pr) * c].to_vec();
                        offset += pr;
                        d
                    };
                    send(p, Tensor::from_parts(vec![pr, pc], piece))?;
                }
            }
            Op::SliceCols { src, start } => {
                let (r, c) = self.value(*src).dims2()?;
                let (_, len) = g.dims2()?;
                let mut gx = vec![0.0; r * c];
                for ii in 0..r {
                    gx[ii * c + start..ii * c + start + len]
                        .copy_from_slice(&g.data()[ii * len..(ii + 1) * len]);
                }
                send(*src, Tensor::from_parts(vec![r, c], gx))?;
            }
            Op::SliceRows { src, start } => {
                let (r, c) = self.value(*src).dims2()?;
                let (len, _) = g.dims2()?;
                let mut gx = vec![0.0; r * c];
                gx[start * c..(start + len) * c].copy_from_slice(g.data());
                send(*src, Tensor::from_parts(vec![r, c], gx))?;
            }
            Op::Sum(a) => {
                let g0 = g.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), g0))?;
            }
            Op::Mean(a) => {
                let n = self.value(*a).numel() as f64;
                let g0 = g.item()?;
                send(*a, Tensor::full(self.value(*a).shape(), g0 / n))?;
            }
            Op::PoolRows(a, k) => {
                let (r, c) = self.value(*a).dims2()?;
                let mut gx = vec![0.0; r * c];
                let inv = 1.0 / *k as f64;
                for t in 0..r {
                    let o = t / k;
                    for j in 0..c {
                        gx[t * c + j] = g.data()[o * c + j] * inv;
                    }
                }
                send(*a, Tensor::from_parts(vec![r, c], gx))?;
            }
            Op::SpatialMean(a) => {
                let shape = self.value(*a).shape().to_vec();
                let hw = shape[2] * shape[3];
                let inv = 1.0 / hw as f64;
                let mut gx = vec![0.0; shape.iter().product()];
                for (ii, &gv) in g.data().iter().enumerate() {
                    gx[ii * hw..(ii + 1) * hw].fill(gv * inv);
                }
                send(*a, Tensor::from_parts(shape, gx))?;
            }
            Op::GatherRows(table, idx) => {
                let (r, c) = self.value(*table).dims2()?;
                let mut gt = vec![0.0; r * c];
                for (k, &row) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[row * c + j] += g.data()[k * c + j];
                    }
                }
                send(*table, Tensor::from_parts(vec![r, c], gt))?;
            }
            Op::Conv1d(spec, x, w, b) => {
                let (gx, gw, gb) =
                    conv::conv1d_backward(spec, self.value(*x), self.value(*w), g);
                send(*x, gx)?;
                send(*w, gw)?;
                send(*b, gb)?;
            }
            Op::ConvTranspose1d(spec, x, w, b) => {
                let (gx, gw, gb) =
                    conv::conv_transpose1d_backward(spec, self.value(*x), self.value(*w), g);
                send(*x, gx)?;
                send(*w, gw)?;
                send(*b, gb)?;
            }
            Op::Conv2d(spec, x, w, b) => {
                let (gx, gw, gb) =
                    conv::conv2d_backward(spec, self.value(*x), self.value(*w), g);
                send(*x, gx)?;
                send(*w, gw)?;
                send(*b, gb)?;
            }
            Op::Custom(op, inputs) => {
                let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
                let gs = op.backward(&vals, out, g)?;
                if gs.len() != inputs.len() {
                    return Err(Error::Graph(format!(
                        "{} returned {} gradients for {} inputs",
                        op.name(),
                        gs.len(),
                        inputs.len()
                    )));
                }
                for (&v, gi) in inputs.iter().zip(gs) {
                    if let Some(gi) = gi {
                        gi.expect_same_shape(self.value(v), "custom backward")?;
                        send(v, gi)?;
                    }
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::new(&[2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(p, p).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let p = g.leaf(Tensor::from_vec(vec![1.0, 2.0]));
        assert!(g.backward(p).is_err());
    }

    #[test]
    fn foreign_node_is_rejected() {
        let mut g = Graph::new();
        let _ = g.leaf(Tensor::scalar(1.0));
        let mut other = Graph::new();
        for _ in 0..5 {
            other.leaf(Tensor::scalar(1.0));
        }
        let foreign = Var(4);
        assert!(g.backward(foreign).is_err());
        assert!(g.relu(foreign).is_err());
    }

    #[test]
    fn masked_softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap());
        let mask = [true, false, true, true, true, false];
        let y = g.softmax_rows_masked(x, &mask).unwrap();
        let v = g.value(y);
        assert_eq!(v.at2(0, 1), 0.0);
        assert_eq!(v.at2(1, 2), 0.0);
        for r in 0..2 {
            let s: f64 = v.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax_rows_masked(x, &[false; 6]).is_err());
    }

    #[test]
    fn broadcast_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let row = g.leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let col = g.leaf(Tensor::new(&[2, 1], vec![10.0, 20.0]).unwrap());
        let y = g.add_broadcast(a, row).unwrap();
        let y = g.add_broadcast(y, col).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0]);
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(row).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(grads.get(col).unwrap().data(), &[3.0, 3.0]);
        let bad = g.leaf(Tensor::zeros(&[3, 1]));
        let single = g.leaf(Tensor::zeros(&[1, 3]));
        assert!(g.add_broadcast(single, row).is_ok());
        assert!(g.add_broadcast(a, bad).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.leaf(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }
}
