//! Subcommand implementations.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xfmnet::diagnostics::{diagnose, feature_evolution_export, write_feature_exports, write_reports};
use xfmnet::layers::Ctx;
use xfmnet::numerics::{checkpoint, seeded_rng, ParamStore, Tensor};
use xfmnet::prediction::{
    evaluate, seasonal_naive, synthetic_generate, train, write_metrics_csv, Dataset, Metrics, ModelConfig,
    Normalization, Split, SplitBounds, Windows, XfmNet,
};

use crate::config::{prepare_output, require_dir, require_file, RunConfig};
use crate::error::{CliError, Result};
use crate::io::{load_dataset, manifest_path, write_image_blob, write_series_csv};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const NORMALIZATION_FILE: &str = "normalization.json";
pub const MODEL_FILE: &str = "model.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_FILE: &str = "eval.csv";

/// Period of the seasonal-naive reference: one day of 4-hour steps.
pub const NAIVE_PERIOD: usize = 6;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| {
        CliError::Core(xfmnet::Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(xfmnet::Error::from)? + "\n";
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| xfmnet::Error::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Writes `series.csv`, `images.bin` and its manifest. Frames are stored
/// at `f32` precision, so the written data reloads bitwise.
pub fn synth(cfg: RunConfig) -> Result<()> {
    let out = cfg.output_dir()?.to_path_buf();
    let (series_path, blob_path) = cfg.data_paths(Some(&out))?;
    let manifest = manifest_path(&blob_path);
    for p in [&series_path, &blob_path, &manifest] {
        if p.exists() && !cfg.force {
            return Err(CliError::Exists(p.display().to_string()));
        }
    }
    prepare_output(&out, &[CONFIG_FILE], cfg.force)?;
    let data = synthetic_generate(&cfg.synthetic)?;
    write_series_csv(&series_path, &data.series, &data.timestamps)?;
    write_image_blob(&blob_path, &data.frames)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    println!(
        "wrote {} stations x {} steps to {}",
        data.series.shape()[0],
        data.series.shape()[1],
        out.display()
    );
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let (series, images) = cfg.data_paths(None)?;
    require_file(&series)?;
    require_file(&images)?;
    load_dataset(&series, &images)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub parameters: usize,
    pub steps: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub val: Metrics,
    pub test: Metrics,
    pub seasonal_naive_val: Metrics,
    pub seasonal_naive_test: Metrics,
}

/// Trains, keeps the best-validation parameters and writes the checkpoint,
/// normalization, per-epoch metrics and a summary.
pub fn train_cmd(mut cfg: RunConfig) -> Result<()> {
    let out = cfg.output_dir()?.to_path_buf();
    let data = load_data(&cfg)?;
    cfg.model.stations = data.stations();
    cfg.model.validate()?;
    prepare_output(
        &out,
        &[CONFIG_FILE, CHECKPOINT_DIR, NORMALIZATION_FILE, MODEL_FILE, METRICS_FILE, SUMMARY_FILE],
        cfg.force,
    )?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;

    let norm = Normalization::fit(&data, SplitBounds::new(data.len()).train_end)?;
    let windows = Windows::new(norm.apply(&data)?, cfg.model.lookback, cfg.model.horizon)?;
    let mut store = ParamStore::new();
    let model = XfmNet::new(&mut store, cfg.model.clone(), &mut seeded_rng(cfg.seed))?;
    let report = train(&model, &mut store, &windows, &cfg.train, |r| {
        eprintln!(
            "epoch {:>3}  train mse {:.4} mae {:.4}  val mse {:.4} mae {:.4}",
            r.epoch, r.train.mse, r.train.mae, r.val.mse, r.val.mae
        );
    })?;
    checkpoint::quantize_f32(&mut store);
    checkpoint::save(&out.join(CHECKPOINT_DIR), &store)?;
    write_json(&out.join(NORMALIZATION_FILE), &norm)?;
    write_json(&out.join(MODEL_FILE), &cfg.model)?;
    write_metrics_csv(&out.join(METRICS_FILE), &report.history)?;

    let stride = cfg.train.eval_stride;
    let summary = Summary {
        parameters: store.num_scalars(),
        steps: report.steps,
        best_epoch: report.best_epoch,
        stopped_early: report.stopped_early,
        val: evaluate(&model, &store, &windows, Split::Val, stride)?,
        test: evaluate(&model, &store, &windows, Split::Test, stride)?,
        seasonal_naive_val: seasonal_naive(&windows, Split::Val, stride, NAIVE_PERIOD)?,
        seasonal_naive_test: seasonal_naive(&windows, Split::Test, stride, NAIVE_PERIOD)?,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    println!(
        "best epoch {}: val mse {:.6}, test mse {:.6} (seasonal naive val {:.6})",
        summary.best_epoch, summary.val.mse, summary.test.mse, summary.seasonal_naive_val.mse
    );
    Ok(())
}

/// A trained model restored from a training output directory.
pub struct Restored {
    pub model: XfmNet,
    pub store: ParamStore,
    pub norm: Normalization,
}

pub fn restore(dir: &Path) -> Result<Restored> {
    require_dir(dir)?;
    let config: ModelConfig = read_json(&dir.join(MODEL_FILE))?;
    let norm: Normalization = read_json(&dir.join(NORMALIZATION_FILE))?;
    let mut store = ParamStore::new();
    let model = XfmNet::new(&mut store, config, &mut seeded_rng(0))?;
    checkpoint::load_into(&dir.join(CHECKPOINT_DIR), &mut store)?;
    Ok(Restored { model, store, norm })
}

fn restored_windows(cfg: &RunConfig, r: &Restored) -> Result<Windows> {
    let data = load_data(cfg)?;
    if data.stations() != r.model.config.stations {
        return Err(CliError::Usage(format!(
            "data has {} stations, checkpoint expects {}",
            data.stations(),
            r.model.config.stations
        )));
    }
    Ok(Windows::new(r.norm.apply(&data)?, r.model.config.lookback, r.model.config.horizon)?)
}

/// Metrics of a checkpoint and of the seasonal-naive reference on one split.
pub fn eval_cmd(cfg: RunConfig) -> Result<()> {
    let out = cfg.output_dir()?.to_path_buf();
    let restored = restore(cfg.checkpoint_dir()?)?;
    let windows = restored_windows(&cfg, &restored)?;
    prepare_output(&out, &[CONFIG_FILE, EVAL_FILE], cfg.force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let split = cfg.eval_split;
    let stride = cfg.train.eval_stride;
    let m = evaluate(&restored.model, &restored.store, &windows, split, stride)?;
    let naive = seasonal_naive(&windows, split, stride, NAIVE_PERIOD)?;
    let mut s = String::from("model,split,mse,mae\n");
    let _ = writeln!(s, "xfmnet,{},{:.9},{:.9}", split.name(), m.mse, m.mae);
    let _ = writeln!(s, "seasonal_naive,{},{:.9},{:.9}", split.name(), naive.mse, naive.mae);
    write_text(&out.join(EVAL_FILE), &s)?;
    println!("{} mse {:.6} mae {:.6}", split.name(), m.mse, m.mae);
    Ok(())
}

/// Per-station analysis of the raw series.
pub fn diagnose_cmd(cfg: RunConfig) -> Result<()> {
    let out = cfg.output_dir()?.to_path_buf();
    let data = load_data(&cfg)?;
    prepare_output(&out, &[CONFIG_FILE, "periodogram.csv", "acf.csv", "volatility.csv"], cfg.force)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let reports = (0..data.stations())
        .map(|s| Ok((format!("station_{}", s + 1), diagnose(data.series.row(s), &cfg.diagnose)?)))
        .collect::<Result<Vec<_>>>()?;
    for (name, r) in &reports {
        if let Some(w) = &r.periodogram.warning {
            eprintln!("warning: {name}: {w}");
        }
    }
    let files = write_reports(&out, &reports, cfg.diagnose.svg)?;
    println!("wrote {} files to {}", files.len(), out.display());
    Ok(())
}

/// Channel correlations and activation grids of every fusion probe, per
/// round and level, for one window.
pub fn probe_cmd(cfg: RunConfig) -> Result<()> {
    let out = cfg.output_dir()?.to_path_buf();
    let restored = restore(cfg.checkpoint_dir()?)?;
    let windows = restored_windows(&cfg, &restored)?;
    prepare_output(&out, &[CONFIG_FILE], cfg.force)?;
    let start = match cfg.probe_window {
        Some(s) => s,
        None => windows.starts(Split::Test, 1)[0],
    };
    write_text(&out.join(CONFIG_FILE), &cfg.to_json())?;
    let (sample, _) = windows.sample(start)?;
    let mut cx = Ctx::eval(&restored.store);
    let fwd = restored.model.forward(&mut cx, &sample)?;
    let mut probes: Vec<(String, Tensor)> = Vec::new();
    for (r, round) in fwd.rounds.iter().enumerate() {
        for (l, p) in round.iter().enumerate() {
            let tag = format!("round{}_level{l}", r + 1);
            if let Some(v) = p.a_t_from_i {
                probes.push((format!("{tag}_a_t_from_i"), cx.value(v).clone()));
            }
            if let Some(v) = p.a_i_from_t {
                probes.push((format!("{tag}_a_i_from_t"), cx.value(v).clone()));
            }
            probes.push((format!("{tag}_s_f"), cx.value(p.s_f).clone()));
            probes.push((format!("{tag}_z_hat"), cx.value(p.z_hat).clone()));
        }
    }
    let exports = feature_evolution_export(&probes)?;
    let files = write_feature_exports(&out, &exports)?;
    println!("wrote {} files for window {start} to {}", files.len(), out.display());
    Ok(())
}
