//! Full network assembly, per-scale heads and error metrics.

use serde::{Deserialize, Serialize};

use crate::enhancement::EnhancementStack;
use crate::error::{Error, Result};
use crate::layers::{Ctx, Linear, TimeLinear};
use crate::loctrend::{init_kernels, window_starts, KernelBank};
use crate::numerics::{ParamId, ParamStore, Rng, Tensor, Var};
use crate::sampling::{level_lengths, EmbeddingConfig, Embedder, LevelStreams, Sample};
use crate::xgatefusion::{recursive_fuse, FusionConfig, FusionMode, FusionProbes, LevelFusion, LevelParts};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stations: usize,
    pub lookback: usize,
    pub horizon: usize,
    /// Pooling stride between levels.
    pub pool: usize,
    pub levels: usize,
    pub d_model: usize,
    pub rounds: usize,
    pub trend_window: usize,
    pub trend_stride: usize,
    pub kernels: usize,
    pub d_ff: usize,
    pub cross_heads: usize,
    pub self_heads: usize,
    pub image_channels: usize,
    pub encoder_hidden: usize,
    pub image_features: usize,
    pub gat_radius: usize,
    pub dropout: f64,
    pub fusion: FusionMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stations: 6,
            lookback: 336,
            horizon: 192,
            pool: 2,
            levels: 3,
            d_model: 16,
            rounds: 2,
            trend_window: 27,
            trend_stride: 1,
            kernels: 8,
            d_ff: 16,
            cross_heads: 2,
            self_heads: 4,
            image_channels: 1,
            encoder_hidden: 8,
            image_features: 16,
            gat_radius: 2,
            dropout: 0.1,
            fusion: FusionMode::Gated,
        }
    }
}

impl ModelConfig {
    pub fn level_lengths(&self) -> Result<Vec<usize>> {
        level_lengths(self.lookback, self.pool, self.levels)
    }

    pub fn validate(&self) -> Result<()> {
        let lens = self.level_lengths()?;
        let coarsest = *lens.last().expect("at least one level");
        if self.trend_window > coarsest {
            return Err(Error::invalid(format!(
                "trend window {} exceeds the coarsest level length {coarsest}",
                self.trend_window
            )));
        }
        window_starts(coarsest, self.trend_window, self.trend_stride)?;
        if self.kernels == 0 || self.kernels > self.d_model {
            return Err(Error::invalid(format!(
                "{} kernel bases in dimension {}",
                self.kernels, self.d_model
            )));
        }
        if self.rounds == 0 {
            return Err(Error::invalid("recursive fusion needs at least one round"));
        }
        if self.stations == 0 || self.horizon == 0 {
            return Err(Error::invalid("stations and horizon must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::invalid("model dimension must be even"));
        }
        for (heads, what) in [(self.cross_heads, "cross"), (self.self_heads, "self")] {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(Error::invalid(format!(
                    "{} channels cannot split into {heads} {what}-attention heads",
                    self.d_model
                )));
            }
        }
        if self.gat_radius >= coarsest {
            return Err(Error::invalid(format!(
                "adjacency radius {} must be smaller than the coarsest level length {coarsest}",
                self.gat_radius
            )));
        }
        Ok(())
    }
}

/// `Reg` maps time `T_l → τ`, `Proj` maps channels `d → M`.
#[derive(Clone, Debug)]
pub struct ForecastHead {
    pub reg: TimeLinear,
    pub proj: Linear,
}

impl ForecastHead {
    /// `Ẑ[T_l×d] → [M×τ]`.
    pub fn forward(&self, cx: &mut Ctx, z: Var) -> Result<Var> {
        let y = self.reg.forward(cx, z)?;
        let y = self.proj.forward(cx, y)?;
        cx.g.transpose(y)
    }
}

/// Mean over levels of each head applied to its level's output.
pub fn predict(cx: &mut Ctx, z_hats: &[Var], heads: &[ForecastHead]) -> Result<Var> {
    if z_hats.len() != heads.len() || heads.is_empty() {
        return Err(Error::shape(
            "predict",
            format!("{} level outputs for {} heads", z_hats.len(), heads.len()),
        ));
    }
    let mut acc: Option<Var> = None;
    for (&z, head) in z_hats.iter().zip(heads) {
        let y = head.forward(cx, z)?;
        acc = Some(match acc {
            Some(a) => cx.g.add(a, y)?,
            None => y,
        });
    }
    cx.g.scale(acc.expect("non-empty"), 1.0 / heads.len() as f64)
}

/// Mean squared and mean absolute error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(metrics(pred, target)?.mse)
}

pub fn mae(pred: &Tensor, target: &Tensor) -> Result<f64> {
    Ok(metrics(pred, target)?.mae)
}

pub fn metrics(pred: &Tensor, target: &Tensor) -> Result<Metrics> {
    if pred.shape() != target.shape() {
        return Err(Error::shape("metrics", format!("{:?} vs {:?}", pred.shape(), target.shape())));
    }
    if pred.numel() == 0 {
        return Err(Error::invalid("metrics of an empty tensor"));
    }
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.data().iter().zip(target.data()) {
        let e = p - t;
        se += e * e;
        ae += e.abs();
    }
    let a = pred.numel() as f64;
    Ok(Metrics { mse: se / a, mae: ae / a })
}

/// Everything a forward pass produces.
pub struct ForwardOutput {
    pub prediction: Var,
    /// Probe points of every round, last round last, one entry per level.
    pub rounds: Vec<Vec<FusionProbes>>,
}

#[derive(Clone, Debug)]
pub struct XfmNet {
    pub config: ModelConfig,
    pub embedder: Embedder,
    pub kernel_bank: ParamId,
    /// Shared by the three streams; seasonal and trend paths use disjoint
    /// parameters of each level pair.
    pub enhancement: EnhancementStack,
    pub fusions: Vec<LevelFusion>,
    pub heads: Vec<ForecastHead>,
}

impl XfmNet {
    pub fn new(store: &mut ParamStore, config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let lens = config.level_lengths()?;
        let d = config.d_model;
        let embedder = Embedder::new(
            store,
            EmbeddingConfig {
                stations: config.stations,
                d_model: d,
                image_channels: config.image_channels,
                encoder_hidden: config.encoder_hidden,
                image_features: config.image_features,
                gat_radius: config.gat_radius,
                dropout: config.dropout,
            },
            rng,
        )?;
        let bank = KernelBank::axis(config.kernels, d)?;
        let kernel_bank = store.add_frozen("loctrend.kernels", bank.bases);
        let enhancement = EnhancementStack::new(store, "enhance", &lens, d, rng)?;
        let fcfg = FusionConfig {
            d_model: d,
            cross_heads: config.cross_heads,
            self_heads: config.self_heads,
            d_ff: config.d_ff,
            mode: config.fusion,
        };
        let fusions = (0..lens.len())
            .map(|l| LevelFusion::new(store, &format!("fusion.{l}"), &fcfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let heads = lens
            .iter()
            .enumerate()
            .map(|(l, &t)| ForecastHead {
                reg: TimeLinear::new(store, &format!("head.{l}.reg"), t, config.horizon, rng),
                proj: Linear::new(store, &format!("head.{l}.proj"), d, config.stations, rng),
            })
            .collect();
        Ok(Self {
            config,
            embedder,
            kernel_bank,
            enhancement,
            fusions,
            heads,
        })
    }

    pub fn bank(&self, store: &ParamStore) -> Result<KernelBank> {
        KernelBank::from_bases(store.get(self.kernel_bank).clone())
    }

    /// Fits the kernel bank on the embedded windows of `samples` (all
    /// streams and levels) and stores it frozen.
    pub fn fit_kernels(&self, store: &mut ParamStore, samples: &[Sample]) -> Result<KernelBank> {
        let w = self.config.trend_window;
        let d = self.config.d_model;
        let mut data = Vec::new();
        let mut n = 0;
        for sample in samples {
            let mut cx = Ctx::eval(store);
            let pair = self.embedder.forward(&mut cx, sample, self.config.pool, self.config.levels)?;
            for level in &pair.levels {
                for v in level.as_array() {
                    let f = cx.value(v);
                    let t = f.shape()[0];
                    // Non-overlapping windows keep the sample small.
                    for start in window_starts(t, w, w)? {
                        data.extend_from_slice(&f.data()[start * d..(start + w) * d]);
                        n += 1;
                    }
                }
            }
        }
        let bank = init_kernels(&Tensor::new(&[n, w, d], data)?, self.config.kernels)?;
        store.set(self.kernel_bank, bank.bases.clone())?;
        Ok(bank)
    }

    /// Decompose, enhance and fuse every level once.
    pub fn fuse_once(&self, cx: &mut Ctx, bank: &KernelBank, levels: &[LevelStreams]) -> Result<Vec<FusionProbes>> {
        let (w, s) = (self.config.trend_window, self.config.trend_stride);
        let nl = levels.len();
        let mut seasonal = vec![[levels[0].temp; 3]; nl];
        let mut trend = vec![[levels[0].temp; 3]; nl];
        for (l, streams) in levels.iter().enumerate() {
            for (i, x) in streams.as_array().into_iter().enumerate() {
                let (r, sv) = cx.g.local_trend(x, w, s, bank)?;
                seasonal[l][i] = sv;
                trend[l][i] = r;
            }
        }
        for i in 0..3 {
            let s_in: Vec<Var> = seasonal.iter().map(|a| a[i]).collect();
            let r_in: Vec<Var> = trend.iter().map(|a| a[i]).collect();
            let s_out = self.enhancement.seasonal_bottom_up(cx, &s_in)?;
            let r_out = self.enhancement.trend_top_down(cx, &r_in)?;
            for l in 0..nl {
                seasonal[l][i] = s_out[l];
                trend[l][i] = r_out[l];
            }
        }
        let mut out = Vec::with_capacity(nl);
        for (l, fusion) in self.fusions.iter().enumerate() {
            let parts = LevelParts {
                seasonal: LevelStreams::from_array(seasonal[l]),
                trend: LevelStreams::from_array(trend[l]),
            };
            out.push(fusion.forward(cx, &parts)?);
        }
        Ok(out)
    }

    pub fn forward(&self, cx: &mut Ctx, sample: &Sample) -> Result<ForwardOutput> {
        let (m, t) = sample.series.dims2()?;
        if m != self.config.stations || t != self.config.lookback {
            return Err(Error::shape(
                "forward",
                format!(
                    "sample is [{m}×{t}], model expects [{}×{}]",
                    self.config.stations, self.config.lookback
                ),
            ));
        }
        let bank = self.bank(cx.store)?;
        let pair = self.embedder.forward(cx, sample, self.config.pool, self.config.levels)?;
        let rounds = recursive_fuse(cx, &pair.levels, self.config.rounds, &self.fusions, |cx, lv| {
            self.fuse_once(cx, &bank, lv)
        })?;
        let z: Vec<Var> = rounds.last().expect("one round").iter().map(|p| p.z_hat).collect();
        let prediction = predict(cx, &z, &self.heads)?;
        Ok(ForwardOutput { prediction, rounds })
    }
}
