//! Cross-resolution mixing: seasonal parts flow fine to coarse, trend parts
//! flow coarse to fine, each as a residual update.

use crate::error::{Error, Result};
use crate::layers::{xavier, Ctx, TimeLinear};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, Var};

/// Kernel widths of the parallel convolution branches.
pub const KERNELS: [usize; 3] = [3, 5, 7];

/// `p·a + (1−p)·b` with `(p, 1−p) = softmax(logits)`.
pub fn soft_fuse(a: &Tensor, b: &Tensor, logits: [f64; 2]) -> Result<Tensor> {
    let p = crate::numerics::sigmoid(logits[0] - logits[1]);
    a.zip_map(b, |x, y| p * x + (1.0 - p) * y)
}

/// Differentiable [`soft_fuse`] with `logits` a `[1×2]` variable.
pub fn soft_fuse_var(cx: &mut Ctx, a: Var, b: Var, logits: Var) -> Result<Var> {
    if cx.g.shape(a) != cx.g.shape(b) {
        return Err(Error::shape(
            "soft_fuse",
            format!("{:?} vs {:?}", cx.g.shape(a), cx.g.shape(b)),
        ));
    }
    let p = cx.g.softmax_rows(logits)?;
    let pa = cx.g.slice_cols(p, 0, 1)?;
    let pb = cx.g.slice_cols(p, 1, 1)?;
    let a = cx.g.scale_by(a, pa)?;
    let b = cx.g.scale_by(b, pb)?;
    cx.g.add(a, b)
}

#[derive(Clone, Debug)]
struct ConvBranch {
    w: ParamId,
    b: ParamId,
    kernel: usize,
}

/// Two time-axis linear maps with a ReLU between them.
#[derive(Clone, Debug)]
pub struct StackedTimeLinear {
    pub first: TimeLinear,
    pub second: TimeLinear,
}

impl StackedTimeLinear {
    fn new(store: &mut ParamStore, name: &str, t_in: usize, t_out: usize, rng: &mut Rng) -> Self {
        Self {
            first: TimeLinear::new(store, &format!("{name}.0"), t_in, t_out, rng),
            second: TimeLinear::new(store, &format!("{name}.1"), t_out, t_out, rng),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.first.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        self.second.forward(cx, h)
    }
}

/// Strided multi-kernel convolution mapping `T_l → T_{l+1}`.
#[derive(Clone, Debug)]
pub struct DownConv {
    branches: Vec<ConvBranch>,
    stride: usize,
}

impl DownConv {
    fn new(store: &mut ParamStore, name: &str, d: usize, stride: usize, rng: &mut Rng) -> Self {
        let branches = KERNELS
            .iter()
            .map(|&k| ConvBranch {
                w: xavier(store, format!("{name}.k{k}.w"), &[d, d, k], d * k, d * k, rng),
                b: store.add(format!("{name}.k{k}.b"), Tensor::zeros(&[d])),
                kernel: k,
            })
            .collect();
        Self { branches, stride }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for br in &self.branches {
            let (w, b) = (cx.p(br.w), cx.p(br.b));
            let y = cx.g.conv1d(x, w, b, self.stride, (br.kernel - 1) / 2)?;
            acc = Some(match acc {
                Some(a) => cx.g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }
}

/// Strided multi-kernel transposed convolution mapping `T_{l+1} → T_l`.
#[derive(Clone, Debug)]
pub struct UpConv {
    branches: Vec<ConvBranch>,
    stride: usize,
    out_len: usize,
}

impl UpConv {
    fn new(store: &mut ParamStore, name: &str, d: usize, stride: usize, out_len: usize, rng: &mut Rng) -> Self {
        let branches = KERNELS
            .iter()
            .map(|&k| ConvBranch {
                w: xavier(store, format!("{name}.k{k}.w"), &[d, d, k], d * k, d * k, rng),
                b: store.add(format!("{name}.k{k}.b"), Tensor::zeros(&[d])),
                kernel: k,
            })
            .collect();
        Self {
            branches,
            stride,
            out_len,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for br in &self.branches {
            let (w, b) = (cx.p(br.w), cx.p(br.b));
            let y = cx.g.conv_transpose1d(x, w, b, self.stride, (br.kernel - 1) / 2, self.out_len)?;
            acc = Some(match acc {
                Some(a) => cx.g.add(a, y)?,
                None => y,
            });
        }
        Ok(acc.expect("at least one kernel"))
    }
}

/// One adjacent level pair `(l, l+1)`.
#[derive(Clone, Debug)]
pub struct LevelPair {
    pub down_conv: DownConv,
    pub down_linear: StackedTimeLinear,
    pub season_logits: ParamId,
    pub up_conv: UpConv,
    pub up_linear: StackedTimeLinear,
    pub trend_logits: ParamId,
}

#[derive(Clone, Debug)]
pub struct EnhancementStack {
    pub pairs: Vec<LevelPair>,
    lengths: Vec<usize>,
}

impl EnhancementStack {
    /// `lengths` are the per-level sequence lengths, finest first.
    pub fn new(store: &mut ParamStore, name: &str, lengths: &[usize], d: usize, rng: &mut Rng) -> Result<Self> {
        let mut pairs = Vec::new();
        for l in 0..lengths.len().saturating_sub(1) {
            let (fine, coarse) = (lengths[l], lengths[l + 1]);
            if coarse == 0 || fine % coarse != 0 {
                return Err(Error::invalid(format!("level lengths {fine} and {coarse} are not a pooling pair")));
            }
            let stride = fine / coarse;
            let p = format!("{name}.{l}");
            pairs.push(LevelPair {
                down_conv: DownConv::new(store, &format!("{p}.down_conv"), d, stride, rng),
                down_linear: StackedTimeLinear::new(store, &format!("{p}.down_linear"), fine, coarse, rng),
                season_logits: store.add(format!("{p}.season_logits"), Tensor::zeros(&[1, 2])),
                up_conv: UpConv::new(store, &format!("{p}.up_conv"), d, stride, fine, rng),
                up_linear: StackedTimeLinear::new(store, &format!("{p}.up_linear"), coarse, fine, rng),
                trend_logits: store.add(format!("{p}.trend_logits"), Tensor::zeros(&[1, 2])),
            });
        }
        Ok(Self {
            pairs,
            lengths: lengths.to_vec(),
        })
    }

    fn check_levels(&self, cx: &Ctx, xs: &[Var], op: &'static str) -> Result<()> {
        if xs.len() != self.lengths.len() {
            return Err(Error::shape(op, format!("{} levels, stack built for {}", xs.len(), self.lengths.len())));
        }
        for (l, (&x, &t)) in xs.iter().zip(&self.lengths).enumerate() {
            if cx.g.shape(x)[0] != t {
                return Err(Error::shape(op, format!("level {l} has {} steps, expected {t}", cx.g.shape(x)[0])));
            }
        }
        Ok(())
    }

    /// Fine to coarse: `S[l+1] += fuse(conv(S[l]), linear(S[l]))`.
    pub fn seasonal_bottom_up(&self, cx: &mut Ctx, s: &[Var]) -> Result<Vec<Var>> {
        self.check_levels(cx, s, "seasonal_bottom_up")?;
        let mut out = s.to_vec();
        for (l, pair) in self.pairs.iter().enumerate() {
            let conv = pair.down_conv.forward(cx, out[l])?;
            let lin = pair.down_linear.forward(cx, out[l])?;
            let logits = cx.p(pair.season_logits);
            let fused = soft_fuse_var(cx, conv, lin, logits)?;
            out[l + 1] = cx.g.add(out[l + 1], fused)?;
        }
        Ok(out)
    }

    /// Coarse to fine: `R[l] += fuse(transconv(R[l+1]), linear(R[l+1]))`.
    pub fn trend_top_down(&self, cx: &mut Ctx, r: &[Var]) -> Result<Vec<Var>> {
        self.check_levels(cx, r, "trend_top_down")?;
        let mut out = r.to_vec();
        for (l, pair) in self.pairs.iter().enumerate().rev() {
            let conv = pair.up_conv.forward(cx, out[l + 1])?;
            let lin = pair.up_linear.forward(cx, out[l + 1])?;
            let logits = cx.p(pair.trend_logits);
            let fused = soft_fuse_var(cx, conv, lin, logits)?;
            out[l] = cx.g.add(out[l], fused)?;
        }
        Ok(out)
    }
}
