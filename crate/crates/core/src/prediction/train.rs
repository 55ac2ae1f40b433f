//! Mini-batch training with Adam, validation-based checkpoint selection,
//! evaluation and the seasonal-naive reference forecaster.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Ctx;
use crate::numerics::{seeded_rng, AdamConfig, AdamState, ParamStore, Tensor};
use crate::prediction::data::{Split, Windows};
use crate::prediction::model::{metrics, Metrics, XfmNet};
use crate::sampling::Sample;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// Step between consecutive training window starts.
    pub train_stride: usize,
    /// Step between validation and test window starts.
    pub eval_stride: usize,
    /// Cap on optimizer steps per epoch; `None` uses every window.
    pub batches_per_epoch: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            patience: 10,
            train_stride: 1,
            eval_stride: 1,
            batches_per_epoch: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch size and epoch count must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate {} must be finite and >= 0", self.lr)));
        }
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::invalid("window strides must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Metrics,
    pub val: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: Metrics,
    pub steps: usize,
    pub stopped_early: bool,
}

/// One optimizer step on `batch`. Returns the batch metrics computed from
/// the training-mode forward passes.
pub fn train_step(
    model: &XfmNet,
    store: &mut ParamStore,
    adam: &mut AdamState,
    batch: &[(Sample, Tensor)],
    step: usize,
    seed: u64,
) -> Result<Metrics> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads: Vec<Option<Tensor>> = vec![None; store.len()];
    let mut total = Metrics::default();
    for (i, (sample, target)) in batch.iter().enumerate() {
        let mask_seed = seed ^ ((step as u64) << 20) ^ i as u64;
        let mut cx = Ctx::new(store, true, mask_seed);
        let out = model.forward(&mut cx, sample)?;
        let m = metrics(cx.value(out.prediction), target)?;
        if !m.mse.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("loss is {} on sample {i}", m.mse),
            });
        }
        total.mse += m.mse * scale;
        total.mae += m.mae * scale;
        let y = cx.constant(target.clone());
        let loss = cx.g.mse(out.prediction, y)?;
        let loss = cx.g.scale(loss, scale)?;
        let g = cx.g.backward(loss)?;
        let mut bound: Vec<_> = cx.g.bound_params().collect();
        bound.sort_by_key(|(p, _)| *p);
        for (pid, var) in bound {
            if !store.is_trainable(pid) {
                continue;
            }
            if let Some(t) = g.get(var) {
                match &mut grads[pid.index()] {
                    Some(acc) => acc.add_assign(t)?,
                    slot => *slot = Some(t.clone()),
                }
            }
        }
    }
    adam.update(store, &grads).map_err(|e| Error::Diverged {
        step,
        msg: e.to_string(),
    })?;
    Ok(total)
}

/// Eval-mode metrics over the windows of `split`.
pub fn evaluate(model: &XfmNet, store: &ParamStore, windows: &Windows, split: Split, stride: usize) -> Result<Metrics> {
    let starts = windows.starts(split, stride);
    if starts.is_empty() {
        return Err(Error::invalid(format!("{} split has no windows", split.name())));
    }
    let mut total = Metrics::default();
    for &s in &starts {
        let (sample, target) = windows.sample(s)?;
        let mut cx = Ctx::eval(store);
        let out = model.forward(&mut cx, &sample)?;
        let m = metrics(cx.value(out.prediction), &target)?;
        total.mse += m.mse;
        total.mae += m.mae;
    }
    let n = starts.len() as f64;
    Ok(Metrics {
        mse: total.mse / n,
        mae: total.mae / n,
    })
}

/// Repeats the last `period` observed steps across the horizon.
pub fn seasonal_naive_forecast(sample: &Sample, horizon: usize, period: usize) -> Result<Tensor> {
    let (m, t) = sample.series.dims2()?;
    if period == 0 || period > t {
        return Err(Error::invalid(format!("period {period} does not fit lookback {t}")));
    }
    let mut out = Vec::with_capacity(m * horizon);
    for s in 0..m {
        let row = sample.series.row(s);
        out.extend((0..horizon).map(|h| row[t - period + h % period]));
    }
    Tensor::new(&[m, horizon], out)
}

pub fn seasonal_naive(windows: &Windows, split: Split, stride: usize, period: usize) -> Result<Metrics> {
    let starts = windows.starts(split, stride);
    if starts.is_empty() {
        return Err(Error::invalid(format!("{} split has no windows", split.name())));
    }
    let mut total = Metrics::default();
    for &s in &starts {
        let (sample, target) = windows.sample(s)?;
        let m = metrics(&seasonal_naive_forecast(&sample, windows.horizon, period)?, &target)?;
        total.mse += m.mse;
        total.mae += m.mae;
    }
    let n = starts.len() as f64;
    Ok(Metrics {
        mse: total.mse / n,
        mae: total.mae / n,
    })
}

/// Fits the kernel bank on the first batch, then trains with early stopping.
/// On return `store` holds the parameters of the best validation epoch.
pub fn train(
    model: &XfmNet,
    store: &mut ParamStore,
    windows: &Windows,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        store,
    )?;
    let train_starts = windows.starts(Split::Train, cfg.train_stride);
    if train_starts.is_empty() {
        return Err(Error::invalid("training split has no windows"));
    }
    let mut rng = seeded_rng(cfg.seed);
    let mut history = Vec::new();
    let mut best: Option<(usize, Metrics, ParamStore)> = None;
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    for epoch in 1..=cfg.epochs {
        let mut order = train_starts.clone();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        if let Some(cap) = cfg.batches_per_epoch {
            batches.truncate(cap.max(1));
        }
        let mut train_total = Metrics::default();
        for (b, idx) in batches.iter().enumerate() {
            let batch = idx.iter().map(|&s| windows.sample(s)).collect::<Result<Vec<_>>>()?;
            if epoch == 1 && b == 0 {
                let samples: Vec<Sample> = batch.iter().map(|(s, _)| s.clone()).collect();
                model.fit_kernels(store, &samples)?;
            }
            step += 1;
            let m = train_step(model, store, &mut adam, &batch, step, cfg.seed)?;
            train_total.mse += m.mse;
            train_total.mae += m.mae;
        }
        let nb = batches.len() as f64;
        let record = EpochRecord {
            epoch,
            train: Metrics {
                mse: train_total.mse / nb,
                mae: train_total.mae / nb,
            },
            val: evaluate(model, store, windows, Split::Val, cfg.eval_stride)?,
        };
        on_epoch(&record);
        history.push(record);
        let improved = best.as_ref().is_none_or(|(_, m, _)| record.val.mse < m.mse);
        if improved {
            best = Some((epoch, record.val, store.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val, best_store) = best.expect("at least one epoch");
    *store = best_store;
    Ok(TrainReport {
        history,
        best_epoch,
        best_val,
        steps: step,
        stopped_early,
    })
}

/// `epoch,split,mse,mae` rows, train before val per epoch.
pub fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut body = String::from("epoch,split,mse,mae\n");
    for r in history {
        body.push_str(&format!("{},train,{:.9},{:.9}\n", r.epoch, r.train.mse, r.train.mae));
        body.push_str(&format!("{},val,{:.9},{:.9}\n", r.epoch, r.val.mse, r.val.mae));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::io(path, e))
}
