//! Aligned multiscale sampling and the per-level embeddings of both
//! modalities.
//!
//! Sensor series and encoded image features are average-pooled with the same
//! stride, so level `l` of either stream has `T_l = T / k^l` steps and step
//! `t` of one stream always describes the same wall-clock window as step `t`
//! of the other.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{xavier, Ctx, Linear};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, Var};

/// Calendar attributes of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timestamp {
    /// 0..=23
    pub hour: u8,
    /// 0..=6, Monday = 0
    pub weekday: u8,
    /// 0..=11
    pub month: u8,
}

impl Timestamp {
    pub fn new(hour: u8, weekday: u8, month: u8) -> Result<Self> {
        if hour > 23 || weekday > 6 || month > 11 {
            return Err(Error::invalid(format!(
                "timestamp out of range: hour {hour}, weekday {weekday}, month {month}"
            )));
        }
        Ok(Self {
            hour,
            weekday,
            month,
        })
    }
}

/// Sensor values `[B×M×T]` with per-step calendar attributes.
#[derive(Clone, Debug)]
pub struct SeriesBatch {
    pub values: Tensor,
    pub timestamps: Vec<Timestamp>,
}

impl SeriesBatch {
    pub fn new(values: Tensor, timestamps: Vec<Timestamp>, k: usize, levels: usize) -> Result<Self> {
        let [_, _, t] = values.shape()[..] else {
            return Err(Error::shape("SeriesBatch", format!("expected [B×M×T], got {:?}", values.shape())));
        };
        if timestamps.len() != t {
            return Err(Error::shape(
                "SeriesBatch",
                format!("{} timestamps for {t} steps", timestamps.len()),
            ));
        }
        level_lengths(t, k, levels)?;
        Ok(Self { values, timestamps })
    }
}

/// Image frames `[T×C×H×W]`.
#[derive(Clone, Debug)]
pub struct ImageSequence {
    pub frames: Tensor,
}

impl ImageSequence {
    pub fn new(frames: Tensor) -> Result<Self> {
        if frames.ndim() != 4 {
            return Err(Error::shape("ImageSequence", format!("expected [T×C×H×W], got {:?}", frames.shape())));
        }
        Ok(Self { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One model input: a lookback window of both modalities.
#[derive(Clone, Debug)]
pub struct Sample {
    /// `[M×T]`
    pub series: Tensor,
    pub timestamps: Vec<Timestamp>,
    /// `[T×C×H×W]`
    pub frames: Tensor,
}

impl Sample {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }
}

/// `T_l = T / k^l` for `l = 0..=levels`; `T` must be divisible by `k^levels`.
pub fn level_lengths(t: usize, k: usize, levels: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::invalid("pooling stride must be >= 1"));
    }
    let mut out = vec![t];
    let mut cur = t;
    for l in 1..=levels {
        if !cur.is_multiple_of(k) || cur / k == 0 {
            return Err(Error::invalid(format!(
                "length {t} is not divisible by {k}^{l}"
            )));
        }
        cur /= k;
        out.push(cur);
    }
    Ok(out)
}

/// Average pooling with window and stride `k` along the last axis.
pub fn pool1d_downsample(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 {
        return Err(Error::invalid("pooling stride must be >= 1"));
    }
    let t = *x
        .shape()
        .last()
        .ok_or_else(|| Error::invalid("pooling a zero-dimensional tensor"))?;
    if t % k != 0 {
        return Err(Error::invalid(format!(
            "length {t} is not divisible by stride {k}"
        )));
    }
    let to = t / k;
    let outer = x.numel() / t.max(1);
    let mut out = Vec::with_capacity(outer * to);
    for row in x.data().chunks(t) {
        for w in row.chunks(k) {
            out.push(w.iter().fold(0.0, |s, v| s + v) / k as f64);
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = to;
    Tensor::new(&shape, out)
}

/// Level-`l` step `t` takes the attributes of the first raw step it covers.
pub fn align_timestamps(ts: &[Timestamp], k: usize) -> Result<Vec<Timestamp>> {
    if k == 0 || !ts.len().is_multiple_of(k) {
        return Err(Error::invalid(format!(
            "{} timestamps not divisible by stride {k}",
            ts.len()
        )));
    }
    Ok(ts.iter().step_by(k).copied().collect())
}

/// Fixed sinusoidal positions: `PE[t,2i] = sin(t/10000^{2i/d})`,
/// `PE[t,2i+1] = cos(t/10000^{2i/d})`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(Error::invalid(format!("positional dimension {d} must be even")));
    }
    let mut out = vec![0.0; t * d];
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * i as f64 / d as f64);
            let ang = pos as f64 / freq;
            out[pos * d + 2 * i] = ang.sin();
            out[pos * d + 2 * i + 1] = ang.cos();
        }
    }
    Tensor::new(&[t, d], out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub stations: usize,
    pub d_model: usize,
    pub image_channels: usize,
    /// Channels of the first encoder convolution.
    pub encoder_hidden: usize,
    /// Feature width `d'` of the image encoder.
    pub image_features: usize,
    pub gat_radius: usize,
    pub dropout: f64,
}

/// Two stride-2 3×3 convolutions with ReLU, then a global spatial average.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    channels: usize,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, channels: usize, hidden: usize, features: usize, rng: &mut Rng) -> Self {
        let conv1_w = xavier(store, "encoder.conv1.w".into(), &[hidden, channels, 3, 3], channels * 9, hidden * 9, rng);
        let conv1_b = store.add("encoder.conv1.b", Tensor::zeros(&[hidden]));
        let conv2_w = xavier(store, "encoder.conv2.w".into(), &[features, hidden, 3, 3], hidden * 9, features * 9, rng);
        let conv2_b = store.add("encoder.conv2.b", Tensor::zeros(&[features]));
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            channels,
        }
    }

    /// `[T×C×H×W] → [T×d']`.
    pub fn encode(&self, cx: &mut Ctx, frames: Var) -> Result<Var> {
        let shape = cx.g.shape(frames).to_vec();
        let [_, c, h, w] = shape[..] else {
            return Err(Error::shape("image_encode", format!("{:?}", shape)));
        };
        if c != self.channels {
            return Err(Error::shape(
                "image_encode",
                format!("frames have {c} channels, encoder expects {}", self.channels),
            ));
        }
        if h < 4 || w < 4 {
            return Err(Error::invalid(format!("frames of {h}×{w} are smaller than 4×4")));
        }
        let (w1, b1, w2, b2) = (cx.p(self.conv1_w), cx.p(self.conv1_b), cx.p(self.conv2_w), cx.p(self.conv2_b));
        let x = cx.g.conv2d(frames, w1, b1, (2, 2), (1, 1))?;
        let x = cx.g.relu(x)?;
        let x = cx.g.conv2d(x, w2, b2, (2, 2), (1, 1))?;
        let x = cx.g.relu(x)?;
        cx.g.spatial_mean(x)
    }
}

/// Sum of trainable hour, weekday and month lookup rows.
#[derive(Clone, Debug)]
pub struct PeriodicEmbedding {
    pub hour: ParamId,
    pub weekday: ParamId,
    pub month: ParamId,
}

impl PeriodicEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng) -> Self {
        let mut table = |part: &str, rows: usize| store.add(format!("{name}.{part}"), Tensor::randn(&[rows, d], 0.02, rng));
        Self {
            hour: table("hour", 24),
            weekday: table("weekday", 7),
            month: table("month", 12),
        }
    }

    /// `[T×d]` rows `TE_h(h_t) + TE_w(w_t) + TE_m(m_t)`.
    pub fn forward(&self, cx: &mut Ctx, ts: &[Timestamp]) -> Result<Var> {
        let hours: Vec<usize> = ts.iter().map(|t| t.hour as usize).collect();
        let days: Vec<usize> = ts.iter().map(|t| t.weekday as usize).collect();
        let months: Vec<usize> = ts.iter().map(|t| t.month as usize).collect();
        let (h, w, m) = (cx.p(self.hour), cx.p(self.weekday), cx.p(self.month));
        let eh = cx.g.gather_rows(h, &hours)?;
        let ew = cx.g.gather_rows(w, &days)?;
        let em = cx.g.gather_rows(m, &months)?;
        let s = cx.g.add(eh, ew)?;
        cx.g.add(s, em)
    }
}

fn add_positional_and_periodic(cx: &mut Ctx, x: Var, periodic: &PeriodicEmbedding, ts: &[Timestamp]) -> Result<Var> {
    let (t, d) = cx.value(x).dims2()?;
    if ts.len() != t {
        return Err(Error::shape("embedding", format!("{} timestamps for {t} steps", ts.len())));
    }
    let pe = cx.constant(sinusoidal_pe(t, d)?);
    let per = periodic.forward(cx, ts)?;
    let s = cx.g.add(x, pe)?;
    cx.g.add(s, per)
}

/// Sensor-stream embedding: value MLP + positional + periodic.
#[derive(Clone, Debug)]
pub struct SeriesEmbedding {
    pub value_in: Linear,
    pub value_out: Linear,
    pub periodic: PeriodicEmbedding,
    stations: usize,
    dropout: f64,
}

impl SeriesEmbedding {
    pub fn new(store: &mut ParamStore, stations: usize, d: usize, dropout: f64, rng: &mut Rng) -> Self {
        Self {
            value_in: Linear::new(store, "series.value.0", stations, d, rng),
            value_out: Linear::new(store, "series.value.1", d, d, rng),
            periodic: PeriodicEmbedding::new(store, "series.periodic", d, rng),
            stations,
            dropout,
        }
    }

    /// `x_l[T_l×M] → F_temp[T_l×d]`.
    pub fn forward(&self, cx: &mut Ctx, x: Var, ts: &[Timestamp]) -> Result<Var> {
        let (_, m) = cx.value(x).dims2()?;
        if m != self.stations {
            return Err(Error::shape(
                "embed_series",
                format!("{m} stations, embedding expects {}", self.stations),
            ));
        }
        let h = self.value_in.forward(cx, x)?;
        let h = cx.g.relu(h)?;
        let h = cx.dropout(h, self.dropout)?;
        let e_val = self.value_out.forward(cx, h)?;
        add_positional_and_periodic(cx, e_val, &self.periodic, ts)
    }
}

/// Single-head graph attention over frames connected when `|t - t'| ≤ radius`.
#[derive(Clone, Debug)]
pub struct GraphAttention {
    pub w: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
    pub radius: usize,
}

impl GraphAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, radius: usize, rng: &mut Rng) -> Self {
        Self {
            w: xavier(store, format!("{name}.w"), &[d, d], d, d, rng),
            a_src: xavier(store, format!("{name}.a_src"), &[d, 1], d, 1, rng),
            a_dst: xavier(store, format!("{name}.a_dst"), &[d, 1], d, 1, rng),
            radius,
        }
    }

    /// Returns the aggregated node features and the `[T×T]` attention matrix.
    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let (t, _) = cx.value(x).dims2()?;
        if self.radius >= t {
            return Err(Error::invalid(format!(
                "adjacency radius {} must be smaller than the {t} frames",
                self.radius
            )));
        }
        let (w, a_src, a_dst) = (cx.p(self.w), cx.p(self.a_src), cx.p(self.a_dst));
        let h = cx.g.matmul(x, w)?;
        let dst = cx.g.matmul(h, a_dst)?;
        let src = cx.g.matmul(h, a_src)?;
        let src = cx.g.transpose(src)?;
        let zeros = cx.constant(Tensor::zeros(&[t, t]));
        let e = cx.g.add_broadcast(zeros, dst)?;
        let e = cx.g.add_broadcast(e, src)?;
        let e = cx.g.leaky_relu(e, 0.2)?;
        let mask: Vec<bool> = (0..t * t).map(|i| (i / t).abs_diff(i % t) <= self.radius).collect();
        let alpha = cx.g.softmax_rows_masked(e, &mask)?;
        let out = cx.g.matmul(alpha, h)?;
        Ok((out, alpha))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }
}

/// Image-stream embedding: graph attention value + positional + periodic.
#[derive(Clone, Debug)]
pub struct ImageEmbedding {
    pub gat: GraphAttention,
    pub periodic: PeriodicEmbedding,
}

impl ImageEmbedding {
    pub fn new(store: &mut ParamStore, d: usize, radius: usize, rng: &mut Rng) -> Self {
        Self {
            gat: GraphAttention::new(store, "image.gat", d, radius, rng),
            periodic: PeriodicEmbedding::new(store, "image.periodic", d, rng),
        }
    }

    /// Projected frame tokens `[T_l×d] → F_img[T_l×d]`.
    pub fn forward(&self, cx: &mut Ctx, f: Var, ts: &[Timestamp]) -> Result<Var> {
        let v = self.gat.forward(cx, f)?;
        add_positional_and_periodic(cx, v, &self.periodic, ts)
    }
}

/// Channel concatenation of both streams compressed by a 3×1 2-D convolution
/// over `[2d channels, T_l, 1]`.
#[derive(Clone, Debug)]
pub struct EarlyFusion {
    pub w: ParamId,
    pub b: ParamId,
}

impl EarlyFusion {
    pub fn new(store: &mut ParamStore, d: usize, rng: &mut Rng) -> Self {
        Self {
            w: xavier(store, "early_fusion.w".into(), &[d, 2 * d, 3, 1], 2 * d * 3, d * 3, rng),
            b: store.add("early_fusion.b", Tensor::zeros(&[d])),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, temp: Var, img: Var) -> Result<Var> {
        if cx.g.shape(temp) != cx.g.shape(img) {
            return Err(Error::shape(
                "early_fuse",
                format!("{:?} vs {:?}", cx.g.shape(temp), cx.g.shape(img)),
            ));
        }
        let (t, d) = cx.value(temp).dims2()?;
        let cat = cx.g.concat(&[temp, img], 1)?;
        let cat = cx.g.transpose(cat)?;
        let cat = cx.g.reshape(cat, &[1, 2 * d, t, 1])?;
        let (w, b) = (cx.p(self.w), cx.p(self.b));
        let y = cx.g.conv2d(cat, w, b, (1, 1), (1, 0))?;
        let y = cx.g.reshape(y, &[d, t])?;
        cx.g.transpose(y)
    }
}

/// The three aligned streams of one resolution level.
#[derive(Clone, Copy, Debug)]
pub struct LevelStreams {
    pub temp: Var,
    pub img: Var,
    pub con: Var,
}

impl LevelStreams {
    pub fn as_array(&self) -> [Var; 3] {
        [self.temp, self.img, self.con]
    }

    pub fn from_array(a: [Var; 3]) -> Self {
        Self {
            temp: a[0],
            img: a[1],
            con: a[2],
        }
    }
}

/// Per-level `(F_temp, F_img, F_con)`, finest level first.
#[derive(Clone, Debug)]
pub struct MultiScalePair {
    pub levels: Vec<LevelStreams>,
}

/// Everything between raw inputs and the per-level stream triples.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub encoder: ImageEncoder,
    pub image_proj: Linear,
    pub series: SeriesEmbedding,
    pub image: ImageEmbedding,
    pub fusion: EarlyFusion,
    pub config: EmbeddingConfig,
}

impl Embedder {
    pub fn new(store: &mut ParamStore, config: EmbeddingConfig, rng: &mut Rng) -> Result<Self> {
        if !config.d_model.is_multiple_of(2) {
            return Err(Error::invalid("model dimension must be even"));
        }
        let d = config.d_model;
        Ok(Self {
            encoder: ImageEncoder::new(store, config.image_channels, config.encoder_hidden, config.image_features, rng),
            image_proj: Linear::new(store, "image.proj", config.image_features, d, rng),
            series: SeriesEmbedding::new(store, config.stations, d, config.dropout, rng),
            image: ImageEmbedding::new(store, d, config.gat_radius, rng),
            fusion: EarlyFusion::new(store, d, rng),
            config,
        })
    }

    /// Builds `levels + 1` aligned stream triples from one sample.
    pub fn forward(&self, cx: &mut Ctx, sample: &Sample, k: usize, levels: usize) -> Result<MultiScalePair> {
        let t = sample.len();
        let lens = level_lengths(t, k, levels)?;
        let (m, ts) = sample.series.dims2()?;
        if ts != t {
            return Err(Error::shape("embed", format!("series has {ts} steps, {t} timestamps")));
        }
        if sample.frames.shape().first() != Some(&t) {
            return Err(Error::shape(
                "embed",
                format!("{t} series steps but frames {:?}", sample.frames.shape()),
            ));
        }
        let _ = m;
        let frames = cx.constant(sample.frames.clone());
        let mut raw = self.encoder.encode(cx, frames)?;
        let mut series = sample.series.clone();
        let mut stamps = sample.timestamps.clone();
        let mut out = Vec::with_capacity(lens.len());
        for l in 0..lens.len() {
            if l > 0 {
                series = pool1d_downsample(&series, k)?;
                stamps = align_timestamps(&stamps, k)?;
                raw = cx.g.pool_rows(raw, k)?;
            }
            let x = cx.constant(series.transpose2()?);
            let temp = self.series.forward(cx, x, &stamps)?;
            let tokens = self.image_proj.forward(cx, raw)?;
            let img = self.image.forward(cx, tokens, &stamps)?;
            let con = self.fusion.forward(cx, temp, img)?;
            out.push(LevelStreams { temp, img, con });
        }
        Ok(MultiScalePair { levels: out })
    }
}
