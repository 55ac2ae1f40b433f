use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use xfmnet::numerics::checkpoint;
use xfmnet::prediction::{ModelConfig, Normalization, Split, SyntheticConfig, TrainConfig, Windows};
use xfmnet_cli::config::RunConfig;
use xfmnet_cli::io::load_dataset;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_xfmnet"));
    c.env_remove("XFMNET_OUTPUT_DIR");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fail(args: &[&str]) -> String {
    let out = run(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");
    err
}

fn toy_config() -> RunConfig {
    RunConfig {
        synthetic: SyntheticConfig {
            stations: 2,
            length: 400,
            lookback: 16,
            horizon: 4,
            image_size: 4,
            midterm_period: (10, 20),
            ..Default::default()
        },
        model: ModelConfig {
            stations: 2,
            lookback: 16,
            horizon: 4,
            levels: 2,
            d_model: 4,
            trend_window: 3,
            kernels: 2,
            d_ff: 4,
            cross_heads: 2,
            self_heads: 2,
            encoder_hidden: 2,
            image_features: 3,
            gat_radius: 1,
            ..Default::default()
        },
        train: TrainConfig {
            epochs: 2,
            batch_size: 4,
            batches_per_epoch: Some(2),
            eval_stride: 9,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every output file except the echoed config, which records the output path.
fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "config.json" {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Synthesizes the toy dataset into `root/data`.
fn synth(root: &Path, cfg: &RunConfig) -> PathBuf {
    let config = write_config(root, cfg);
    let data = root.join("data");
    ok(&["synth", "--config", s(&config), "--output-dir", s(&data)]);
    data
}

fn train(root: &Path, name: &str, data: &Path, extra: &[&str]) -> PathBuf {
    let config = root.join("run.json");
    let out = root.join(name);
    let mut args = vec!["train", "--config", s(&config), "--data-dir", s(data), "--output-dir", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

#[test]
fn synth_round_trip_and_determinism() {
    let root = tempfile::tempdir().unwrap();
    let cfg = toy_config();
    let data = synth(root.path(), &cfg);
    let loaded = load_dataset(&data.join("series.csv"), &data.join("images.bin")).unwrap();
    let gen = xfmnet::prediction::synthetic_generate(&cfg.synthetic).unwrap();
    assert_eq!(loaded.series, gen.series);
    assert_eq!(loaded.timestamps, gen.timestamps);
    assert_eq!(loaded.frames, gen.frames.map(|v| v as f32 as f64));
    let header = fs::read_to_string(data.join("series.csv")).unwrap();
    assert!(header.starts_with("timestamp,station_1,station_2\n2021-01-01T00:00:00,"));

    let again = root.path().join("again");
    ok(&["synth", "--config", s(&root.path().join("run.json")), "--output-dir", s(&again)]);
    assert_eq!(files(&data), files(&again));

    let err = fail(&["synth", "--config", s(&root.path().join("run.json")), "--output-dir", s(&data)]);
    assert!(err.starts_with("error[exists]"), "{err}");
    ok(&["synth", "--config", s(&root.path().join("run.json")), "--output-dir", s(&data), "--force"]);
}

#[test]
fn full_size_synth_shape() {
    let root = tempfile::tempdir().unwrap();
    let out = root.path().join("bj");
    ok(&["synth", "--output-dir", s(&out), "--seed", "3"]);
    let d = load_dataset(&out.join("series.csv"), &out.join("images.bin")).unwrap();
    assert_eq!(d.series.shape(), &[6, 8766]);
    assert_eq!(d.frames.shape()[0], 8766);
}

#[test]
fn malformed_csv_names_the_line() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), &toy_config());
    let csv = data.join("series.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();

    let mut ragged = lines.clone();
    ragged[4] = ragged[4].rsplit_once(',').unwrap().0.to_string();
    fs::write(&csv, ragged.join("\n") + "\n").unwrap();
    let err = fail(&["diagnose", "--data-dir", s(&data), "--output-dir", s(&root.path().join("d1"))]);
    assert!(err.starts_with("error[parse]") && err.contains("line 5"), "{err}");

    let (ts, _) = lines[7].split_once(',').unwrap();
    lines[7] = format!("{ts},1.0,abc");
    fs::write(&csv, lines.join("\n") + "\n").unwrap();
    let err = fail(&["diagnose", "--data-dir", s(&data), "--output-dir", s(&root.path().join("d2"))]);
    assert!(err.contains("line 8") && err.contains("abc"), "{err}");
}

#[test]
fn series_image_length_mismatch() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), &toy_config());
    let csv = data.join("series.csv");
    let text = fs::read_to_string(&csv).unwrap();
    let shorter: Vec<&str> = text.lines().take(300).collect();
    fs::write(&csv, shorter.join("\n") + "\n").unwrap();
    let err = fail(&["diagnose", "--data-dir", s(&data), "--output-dir", s(&root.path().join("d"))]);
    assert!(err.starts_with("error[shape]") && err.contains("299") && err.contains("400"), "{err}");
}

#[test]
fn config_errors() {
    let root = tempfile::tempdir().unwrap();
    let p = root.path().join("bad.json");
    fs::write(&p, r#"{"seed": 1, "learning_rate": 0.1}"#).unwrap();
    let err = fail(&["synth", "--config", s(&p), "--output-dir", s(&root.path().join("o"))]);
    assert!(err.starts_with("error[usage]") && err.contains("learning_rate"), "{err}");
    let err = fail(&["synth"]);
    assert!(err.contains("output directory"), "{err}");
    let err = fail(&["train", "--fusion", "max"]);
    assert!(err.starts_with("error[usage]"), "{err}");
    let err = fail(&["train", "--output-dir", s(&root.path().join("t")), "--data-dir", s(&root.path().join("none"))]);
    assert!(err.contains("does not exist"), "{err}");
}

#[test]
fn train_is_reproducible_and_echo_reruns() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), &toy_config());
    let a = train(root.path(), "a", &data, &["--seed", "7"]);
    let b = train(root.path(), "b", &data, &["--seed", "7"]);
    assert_eq!(files(&a), files(&b));
    let metrics = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 2 * 2);
    assert!(metrics.starts_with("epoch,split,mse,mae\n1,train,"));

    let c = root.path().join("c");
    ok(&["train", "--config", s(&a.join("config.json")), "--output-dir", s(&c)]);
    assert_eq!(files(&a), files(&c));

    let d = train(root.path(), "d", &data, &["--seed", "8"]);
    assert_ne!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(d.join("metrics.csv")).unwrap());
    let echoed: RunConfig = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!((echoed.seed, echoed.train.seed, echoed.synthetic.seed), (7, 7, 7));
}

#[test]
fn eval_of_zeroed_checkpoint_is_mean_square() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), &toy_config());
    let trained = train(root.path(), "t", &data, &[]);
    let ckpt = trained.join("checkpoint");
    let mut blob = fs::read(ckpt.join(checkpoint::BLOB_FILE)).unwrap();
    for (entry, t) in checkpoint::load(&ckpt).unwrap() {
        if entry.trainable {
            let start = entry.offset as usize;
            blob[start..start + 4 * t.numel()].fill(0);
        }
    }
    fs::write(ckpt.join(checkpoint::BLOB_FILE), blob).unwrap();
    let out = root.path().join("eval");
    ok(&[
        "eval",
        "--data-dir",
        s(&data),
        "--checkpoint",
        s(&trained),
        "--output-dir",
        s(&out),
        "--eval-stride",
        "1",
    ]);
    let text = fs::read_to_string(out.join("eval.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(&row[..2], &["xfmnet", "test"]);
    let mse: f64 = row[2].parse().unwrap();

    let ds = load_dataset(&data.join("series.csv"), &data.join("images.bin")).unwrap();
    let norm: Normalization = serde_json::from_str(&fs::read_to_string(trained.join("normalization.json")).unwrap()).unwrap();
    let w = Windows::new(norm.apply(&ds).unwrap(), 16, 4).unwrap();
    let starts = w.starts(Split::Test, 1);
    let want = starts
        .iter()
        .map(|&st| {
            let y = w.sample(st).unwrap().1;
            y.data().iter().map(|v| v * v).sum::<f64>() / y.numel() as f64
        })
        .sum::<f64>()
        / starts.len() as f64;
    assert!((mse - want).abs() < 1e-8, "{mse} vs {want}");
}

#[test]
fn diagnose_finds_configured_period() {
    let root = tempfile::tempdir().unwrap();
    let mut cfg = toy_config();
    cfg.synthetic = SyntheticConfig {
        stations: 2,
        length: 2000,
        noise_std: 0.0,
        rain_amplitude: 0.0,
        drift: 0.0,
        midterm_amplitude: 0.0,
        ..Default::default()
    };
    let data = synth(root.path(), &cfg);
    let out = root.path().join("diag");
    ok(&["diagnose", "--data-dir", s(&data), "--output-dir", s(&out), "--svg"]);
    let text = fs::read_to_string(out.join("periodogram.csv")).unwrap();
    let mut best = (String::new(), f64::NEG_INFINITY);
    for line in text.lines().skip(1).filter(|l| l.starts_with("station_1,")) {
        let f: Vec<&str> = line.split(',').collect();
        let p: f64 = f[2].parse().unwrap();
        if p > best.1 {
            best = (f[1].to_string(), p);
        }
    }
    assert_eq!(best.0, "1");
    for f in ["acf.csv", "volatility.csv", "envelope_daily.csv", "envelope_midterm.csv", "acf.svg", "config.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let again = root.path().join("diag2");
    ok(&["diagnose", "--data-dir", s(&data), "--output-dir", s(&again), "--svg"]);
    assert_eq!(files(&out), files(&again));
}

#[test]
fn probe_exports_every_stage() {
    let root = tempfile::tempdir().unwrap();
    let data = synth(root.path(), &toy_config());
    let trained = train(root.path(), "t", &data, &[]);
    let run_probe = |name: &str| {
        let out = root.path().join(name);
        ok(&["probe", "--data-dir", s(&data), "--checkpoint", s(&trained), "--output-dir", s(&out)]);
        out
    };
    let a = run_probe("p1");
    let b = run_probe("p2");
    assert_eq!(files(&a), files(&b));
    for stage in ["a_t_from_i", "a_i_from_t", "s_f", "z_hat"] {
        for kind in ["corr", "activation"] {
            let f = a.join(format!("stage_{kind}_round2_level0_{stage}.csv"));
            assert!(f.exists(), "{}", f.display());
        }
    }
    let corr = fs::read_to_string(a.join("stage_corr_round1_level1_s_f.csv")).unwrap();
    assert!(corr.starts_with("stage,i,j,rho,degenerate\n"));
    assert_eq!(corr.lines().count(), 1 + 4 * 4);
}
