//! Cross-modal fusion of one resolution level and the anchored recursion.
//!
//! Stages: frequency-domain bidirectional attention, residual interpolation,
//! gated combination refined by self-attention, then seasonal-trend
//! integration through a feed-forward block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{scalar_param, xavier, Ctx, FeedForward, Linear};
use crate::numerics::{ParamId, ParamStore, Rng, Var};
use crate::sampling::LevelStreams;

/// How the two seasonal (or trend) streams are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-attention, interpolation and gated refinement.
    #[default]
    Gated,
    /// Plain average of the two streams.
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub d_model: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub d_ff: usize,
    pub mode: FusionMode,
}

/// `σ(logit)·a + (1−σ(logit))·b`.
pub fn interpolate(cx: &mut Ctx, a: Var, b: Var, logit: Var) -> Result<Var> {
    if cx.g.shape(a) != cx.g.shape(b) {
        return Err(Error::shape(
            "interpolate",
            format!("{:?} vs {:?}", cx.g.shape(a), cx.g.shape(b)),
        ));
    }
    let p = cx.g.sigmoid(logit)?;
    cx.g.lerp(a, b, p)
}

/// Bidirectional attention whose scores are circular cross-correlations
/// computed in the frequency domain.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q_temp: ParamId,
    pub k_temp: ParamId,
    pub v_temp: ParamId,
    pub q_img: ParamId,
    pub k_img: ParamId,
    pub v_img: ParamId,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{d} channels cannot split into {heads} heads")));
        }
        let mut proj = |part: &str| xavier(store, format!("{name}.{part}"), &[d, d], d, d, rng);
        Ok(Self {
            q_temp: proj("q_temp"),
            k_temp: proj("k_temp"),
            v_temp: proj("v_temp"),
            q_img: proj("q_img"),
            k_img: proj("k_img"),
            v_img: proj("v_img"),
            heads,
        })
    }

    /// Returns `(A_{t←i}, A_{i←t})`.
    pub fn forward(&self, cx: &mut Ctx, s_temp: Var, s_img: Var) -> Result<(Var, Var)> {
        if cx.g.shape(s_temp) != cx.g.shape(s_img) {
            return Err(Error::shape(
                "cross_attend",
                format!("{:?} vs {:?}", cx.g.shape(s_temp), cx.g.shape(s_img)),
            ));
        }
        let (_, d) = cx.value(s_temp).dims2()?;
        if d % self.heads != 0 {
            return Err(Error::shape("cross_attend", format!("{d} channels, {} heads", self.heads)));
        }
        let mut project = |x: Var, w: ParamId| {
            let w = cx.p(w);
            cx.g.matmul(x, w)
        };
        let q_t = project(s_temp, self.q_temp)?;
        let k_t = project(s_temp, self.k_temp)?;
        let v_t = project(s_temp, self.v_temp)?;
        let q_i = project(s_img, self.q_img)?;
        let k_i = project(s_img, self.k_img)?;
        let v_i = project(s_img, self.v_img)?;
        // Correlation and tanh act per channel, so splitting channels into
        // heads and concatenating them back is the identity on the layout.
        let a_ti = attend(cx, q_t, k_i, v_i)?;
        let a_it = attend(cx, q_i, k_t, v_t)?;
        Ok((a_ti, a_it))
    }
}

fn attend(cx: &mut Ctx, q: Var, k: Var, v: Var) -> Result<Var> {
    let c = cx.g.freq_correlate(q, k)?;
    let m = cx.g.tanh(c)?;
    cx.g.mul(m, v)
}

/// Scaled dot-product self-attention along time, no masking.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::invalid(format!("{d} channels cannot split into {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, rng),
            heads,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let (_, d) = cx.value(x).dims2()?;
        let dh = d / self.heads;
        let q = self.q.forward(cx, x)?;
        let k = self.k.forward(cx, x)?;
        let v = self.v.forward(cx, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = cx.g.slice_cols(q, h * dh, dh)?;
            let kh = cx.g.slice_cols(k, h * dh, dh)?;
            let vh = cx.g.slice_cols(v, h * dh, dh)?;
            let kt = cx.g.transpose(kh)?;
            let scores = cx.g.matmul(qh, kt)?;
            let scores = cx.g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let attn = cx.g.softmax_rows(scores)?;
            outs.push(cx.g.matmul(attn, vh)?);
        }
        cx.g.concat(&outs, 1)
    }
}

/// Gate `G = σ(W_g[a;b] + b_g)`, combination `G⊙a + (1−G)⊙b`, then the
/// self-attention and concatenation-FFN residuals.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub gate: Linear,
    pub mha: MultiHeadAttention,
    pub proj: Linear,
    pub ffn: FeedForward,
}

/// Intermediate values of one gated fusion.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub gate: Var,
    pub combined: Var,
    pub out: Var,
}

impl GatedFusion {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), 2 * d, d, rng),
            mha: MultiHeadAttention::new(store, &format!("{name}.mha"), d, cfg.self_heads, rng)?,
            proj: Linear::new(store, &format!("{name}.proj"), d, d, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), 2 * d, cfg.d_ff, d, rng),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, a: Var, b: Var) -> Result<GateOutput> {
        if cx.g.shape(a) != cx.g.shape(b) {
            return Err(Error::shape(
                "gate_fuse",
                format!("{:?} vs {:?}", cx.g.shape(a), cx.g.shape(b)),
            ));
        }
        let cat = cx.g.concat(&[a, b], 1)?;
        let logits = self.gate.forward(cx, cat)?;
        let gate = cx.g.sigmoid(logits)?;
        let diff = cx.g.sub(a, b)?;
        let gd = cx.g.mul(gate, diff)?;
        let combined = cx.g.add(b, gd)?;
        let att = self.mha.forward(cx, combined)?;
        let att = self.proj.forward(cx, att)?;
        let ff = self.ffn.forward(cx, cat)?;
        let out = cx.g.add(combined, att)?;
        let out = cx.g.add(out, ff)?;
        Ok(GateOutput { gate, combined, out })
    }
}

/// Stages one to three for one component (seasonal or trend).
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub cross: CrossAttention,
    pub alpha_temp: ParamId,
    pub alpha_img: ParamId,
    pub gated: GatedFusion,
    mode: FusionMode,
}

/// Stage outputs of one [`FusionBlock`].
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub a_t_from_i: Option<Var>,
    pub a_i_from_t: Option<Var>,
    pub fused: Var,
}

impl FusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            cross: CrossAttention::new(store, &format!("{name}.cross"), cfg.d_model, cfg.cross_heads, rng)?,
            alpha_temp: scalar_param(store, format!("{name}.alpha_temp"), 0.0),
            alpha_img: scalar_param(store, format!("{name}.alpha_img"), 0.0),
            gated: GatedFusion::new(store, &format!("{name}.gated"), cfg, rng)?,
            mode: cfg.mode,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, temp: Var, img: Var) -> Result<BlockOutput> {
        if self.mode == FusionMode::Mean {
            let s = cx.g.add(temp, img)?;
            let fused = cx.g.scale(s, 0.5)?;
            return Ok(BlockOutput {
                a_t_from_i: None,
                a_i_from_t: None,
                fused,
            });
        }
        let (a_ti, a_it) = self.cross.forward(cx, temp, img)?;
        let at = cx.p(self.alpha_temp);
        let ai = cx.p(self.alpha_img);
        let s_temp = interpolate(cx, a_ti, temp, at)?;
        let s_img = interpolate(cx, a_it, img, ai)?;
        let g = self.gated.forward(cx, s_temp, s_img)?;
        Ok(BlockOutput {
            a_t_from_i: Some(a_ti),
            a_i_from_t: Some(a_it),
            fused: g.out,
        })
    }
}

/// `Z = σ(α)·S̄ + (1−σ(α))·R̄`, `Ẑ = FFN(Z)`.
pub fn integrate_seasonal_trend(cx: &mut Ctx, s_bar: Var, r_bar: Var, alpha: Var, ffn: &FeedForward) -> Result<Var> {
    let z = interpolate(cx, s_bar, r_bar, alpha)?;
    ffn.forward(cx, z)
}

/// Probe-point activations of one level and round.
#[derive(Clone, Copy, Debug)]
pub struct FusionProbes {
    pub a_t_from_i: Option<Var>,
    pub a_i_from_t: Option<Var>,
    pub s_f: Var,
    pub z_hat: Var,
}

/// Seasonal and trend fusion blocks, integration weight and the shared
/// feed-forward block of one level.
#[derive(Clone, Debug)]
pub struct LevelFusion {
    pub seasonal: FusionBlock,
    pub trend: FusionBlock,
    pub alpha: ParamId,
    pub ffn: FeedForward,
}

/// Seasonal and trend parts of the three streams of one level.
#[derive(Clone, Copy, Debug)]
pub struct LevelParts {
    pub seasonal: LevelStreams,
    pub trend: LevelStreams,
}

impl LevelFusion {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            seasonal: FusionBlock::new(store, &format!("{name}.seasonal"), cfg, rng)?,
            trend: FusionBlock::new(store, &format!("{name}.trend"), cfg, rng)?,
            alpha: scalar_param(store, format!("{name}.alpha"), 0.0),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), cfg.d_model, cfg.d_ff, cfg.d_model, rng),
        })
    }

    pub fn forward(&self, cx: &mut Ctx, parts: &LevelParts) -> Result<FusionProbes> {
        let s = self.seasonal.forward(cx, parts.seasonal.temp, parts.seasonal.img)?;
        let r = self.trend.forward(cx, parts.trend.temp, parts.trend.img)?;
        let s_bar = cx.g.add(s.fused, parts.seasonal.con)?;
        let r_bar = cx.g.add(r.fused, parts.trend.con)?;
        let alpha = cx.p(self.alpha);
        let z_hat = integrate_seasonal_trend(cx, s_bar, r_bar, alpha, &self.ffn)?;
        Ok(FusionProbes {
            a_t_from_i: s.a_t_from_i,
            a_i_from_t: s.a_i_from_t,
            s_f: s.fused,
            z_hat,
        })
    }

    /// `ℱ(Ẑ)`, the anchor increment for the next round.
    pub fn feedback(&self, cx: &mut Ctx, z_hat: Var) -> Result<Var> {
        self.ffn.forward(cx, z_hat)
    }
}

/// Runs `n` rounds: round one applies `g` to the anchors, each later round
/// applies it to `anchor + ℱ(Ẑ_prev)` on every stream. Returns the probes of
/// every round, last round last.
pub fn recursive_fuse<G>(
    cx: &mut Ctx,
    anchors: &[LevelStreams],
    n: usize,
    fusions: &[LevelFusion],
    mut g: G,
) -> Result<Vec<Vec<FusionProbes>>>
where
    G: FnMut(&mut Ctx, &[LevelStreams]) -> Result<Vec<FusionProbes>>,
{
    if n < 1 {
        return Err(Error::invalid("recursive fusion needs at least one round"));
    }
    if anchors.len() != fusions.len() {
        return Err(Error::shape(
            "recursive_fuse",
            format!("{} levels, {} fusion instances", anchors.len(), fusions.len()),
        ));
    }
    let mut rounds = Vec::with_capacity(n);
    rounds.push(g(cx, anchors)?);
    for _ in 1..n {
        let prev = rounds.last().expect("one round done");
        let mut inputs = Vec::with_capacity(anchors.len());
        for ((anchor, fusion), probe) in anchors.iter().zip(fusions).zip(prev) {
            let inc = fusion.feedback(cx, probe.z_hat)?;
            let mut streams = anchor.as_array();
            for s in &mut streams {
                *s = cx.g.add(*s, inc)?;
            }
            inputs.push(LevelStreams::from_array(streams));
        }
        rounds.push(g(cx, &inputs)?);
    }
    Ok(rounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{seeded_rng, Tensor};

    fn cfg() -> FusionConfig {
        FusionConfig {
            d_model: 8,
            cross_heads: 2,
            self_heads: 4,
            d_ff: 16,
            mode: FusionMode::Gated,
        }
    }

    #[test]
    fn interpolate_examples() {
        let mut rng = seeded_rng(1);
        let store = ParamStore::new();
        let mut cx = Ctx::eval(&store);
        let a = cx.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let b = cx.constant(Tensor::randn(&[3, 2], 1.0, &mut rng));
        let lo = cx.constant(Tensor::full(&[1, 1], -60.0));
        let out = interpolate(&mut cx, a, b, lo).unwrap();
        assert!(cx.value(out).max_abs_diff(cx.value(b)) < 1e-12);
        let zero = cx.constant(Tensor::full(&[1, 1], 0.0));
        let out = interpolate(&mut cx, a, b, zero).unwrap();
        let mid = cx.value(a).zip_map(cx.value(b), |x, y| (x + y) / 2.0).unwrap();
        assert!(cx.value(out).max_abs_diff(&mid) < 1e-15);
        let any = cx.constant(Tensor::full(&[1, 1], 1.7));
        let out = interpolate(&mut cx, a, a, any).unwrap();
        assert!(cx.value(out).max_abs_diff(cx.value(a)) < 1e-15);
    }

    #[test]
    fn head_counts_must_divide() {
        let mut rng = seeded_rng(2);
        let mut store = ParamStore::new();
        assert!(CrossAttention::new(&mut store, "c", 6, 4, &mut rng).is_err());
        assert!(MultiHeadAttention::new(&mut store, "m", 6, 4, &mut rng).is_err());
    }

    #[test]
    fn zero_key_gives_zero_attention() {
        let mut rng = seeded_rng(3);
        let mut store = ParamStore::new();
        let ca = CrossAttention::new(&mut store, "c", 8, 2, &mut rng).unwrap();
        store.set(ca.k_img, Tensor::zeros(&[8, 8])).unwrap();
        let mut cx = Ctx::eval(&store);
        let t = cx.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
        let i = cx.constant(Tensor::randn(&[6, 8], 1.0, &mut rng));
        let (a_ti, a_it) = ca.forward(&mut cx, t, i).unwrap();
        assert!(cx.value(a_ti).max_abs() < 1e-12);
        assert!(cx.value(a_it).max_abs() > 1e-3);
    }

    #[test]
    fn gate_examples() {
        let mut rng = seeded_rng(4);
        let mut store = ParamStore::new();
        let gf = GatedFusion::new(&mut store, "g", &cfg(), &mut rng).unwrap();
        let v = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let w = Tensor::randn(&[5, 8], 1.0, &mut rng);

        let mut zero = store.clone();
        zero.zero_trainable();
        let mut cx = Ctx::eval(&zero);
        let (a, b) = (cx.constant(v.clone()), cx.constant(v.clone()));
        let out = gf.forward(&mut cx, a, b).unwrap();
        assert!(cx.value(out.out).max_abs_diff(&v) < 1e-15);
        let (a, b) = (cx.constant(v.clone()), cx.constant(w.clone()));
        let out = gf.forward(&mut cx, a, b).unwrap();
        assert!(cx.value(out.gate).data().iter().all(|&g| g == 0.5));
        let mid = v.zip_map(&w, |x, y| (x + y) / 2.0).unwrap();
        assert!(cx.value(out.combined).max_abs_diff(&mid) < 1e-15);

        let mut cx = Ctx::eval(&store);
        let (a, b) = (cx.constant(v.map(|x| 3.0 * x)), cx.constant(w));
        let out = gf.forward(&mut cx, a, b).unwrap();
        assert!(cx.value(out.gate).data().iter().all(|&g| g > 0.0 && g < 1.0));
    }

    #[test]
    fn integration_examples() {
        let mut rng = seeded_rng(5);
        let mut store = ParamStore::new();
        let ffn = FeedForward::new(&mut store, "f", 4, 16, 4, &mut rng);
        let bias = Tensor::new(&[1, 4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        store.zero_trainable();
        store.set(ffn.outer.b, bias.clone()).unwrap();
        let mut cx = Ctx::eval(&store);
        let s = cx.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let r = cx.constant(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let hi = cx.constant(Tensor::full(&[1, 1], 60.0));
        let z = integrate_seasonal_trend(&mut cx, s, r, hi, &ffn).unwrap();
        for row in 0..3 {
            assert_eq!(cx.value(z).row(row), bias.row(0));
        }
        let p = cx.g.sigmoid(hi).unwrap();
        let zs = cx.g.lerp(s, r, p).unwrap();
        assert!(cx.value(zs).max_abs_diff(cx.value(s)) < 1e-12);
    }

    #[test]
    fn mean_mode_averages() {
        let mut rng = seeded_rng(6);
        let mut store = ParamStore::new();
        let mut c = cfg();
        c.mode = FusionMode::Mean;
        let block = FusionBlock::new(&mut store, "b", &c, &mut rng).unwrap();
        let mut cx = Ctx::eval(&store);
        let a = cx.constant(Tensor::full(&[4, 8], 1.0));
        let b = cx.constant(Tensor::full(&[4, 8], 3.0));
        let out = block.forward(&mut cx, a, b).unwrap();
        assert!(cx.value(out.fused).data().iter().all(|&v| v == 2.0));
        assert!(out.a_t_from_i.is_none());
    }
}
