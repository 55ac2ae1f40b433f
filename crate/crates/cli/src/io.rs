//! Series CSV and image blob reading and writing.

use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};
use xfmnet::numerics::Tensor;
use xfmnet::prediction::Dataset;

use crate::error::{CliError, Result};

pub const TIME_FORMAT: &str = "%Y-%m-%dT%H:%M:%S";

/// Sidecar description of a raw image blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageManifest {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "C")]
    pub c: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub dtype: String,
    pub endianness: String,
}

/// `images.bin` → `images.json`.
pub fn manifest_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(xfmnet::Error::Io {
        path: path.display().to_string(),
        source: e,
    })
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

pub fn write_series_csv(path: &Path, series: &Tensor, timestamps: &[NaiveDateTime]) -> Result<()> {
    let (m, n) = series.dims2()?;
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Csv(path.display().to_string(), e.to_string()))?;
    let header: Vec<String> = std::iter::once("timestamp".to_string())
        .chain((1..=m).map(|s| format!("station_{s}")))
        .collect();
    let csv_err = |e: csv::Error| CliError::Csv(path.display().to_string(), e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (t, ts) in timestamps.iter().enumerate().take(n) {
        let mut row = Vec::with_capacity(m + 1);
        row.push(ts.format(TIME_FORMAT).to_string());
        row.extend((0..m).map(|s| series.at2(s, t).to_string()));
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Returns `[M×N]` values and timestamps. Errors name the 1-based line.
pub fn read_series_csv(path: &Path) -> Result<(Tensor, Vec<NaiveDateTime>)> {
    let mut r = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| CliError::Csv(path.display().to_string(), e.to_string()))?;
    let header = r
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .clone();
    if header.get(0) != Some("timestamp") || header.len() < 2 {
        return Err(parse_err(path, 1, "header must be timestamp,station_1,..."));
    }
    let m = header.len() - 1;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); m];
    let mut timestamps = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != m + 1 {
            return Err(parse_err(path, line, format!("expected {} fields, found {}", m + 1, rec.len())));
        }
        let ts = NaiveDateTime::parse_from_str(&rec[0], TIME_FORMAT)
            .map_err(|e| parse_err(path, line, format!("timestamp {:?}: {e}", &rec[0])))?;
        timestamps.push(ts);
        for (s, col) in columns.iter_mut().enumerate() {
            let cell = &rec[s + 1];
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("non-numeric value {cell:?} in column {}", s + 2)))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("non-finite value {cell:?}")));
            }
            col.push(v);
        }
    }
    if timestamps.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    let n = timestamps.len();
    Ok((Tensor::new(&[m, n], columns.concat())?, timestamps))
}

pub fn write_image_blob(path: &Path, frames: &Tensor) -> Result<()> {
    let shape = frames.shape();
    if shape.len() != 4 {
        return Err(CliError::Usage(format!("frames must be [T×C×H×W], got {shape:?}")));
    }
    let bytes: Vec<u8> = frames.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| io_err(path, e))?;
    let manifest = ImageManifest {
        t: shape[0],
        c: shape[1],
        h: shape[2],
        w: shape[3],
        dtype: "f32".into(),
        endianness: "little".into(),
    };
    let mpath = manifest_path(path);
    let text = serde_json::to_string_pretty(&manifest).map_err(xfmnet::Error::from)? + "\n";
    fs::write(&mpath, text).map_err(|e| io_err(&mpath, e))
}

pub fn read_image_blob(path: &Path) -> Result<Tensor> {
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    let m: ImageManifest = serde_json::from_str(&text).map_err(xfmnet::Error::from)?;
    if m.dtype != "f32" || m.endianness != "little" {
        return Err(CliError::Usage(format!(
            "{}: unsupported dtype {} / endianness {}",
            mpath.display(),
            m.dtype,
            m.endianness
        )));
    }
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let numel = m.t * m.c * m.h * m.w;
    if bytes.len() != numel * 4 {
        return Err(CliError::Usage(format!(
            "{}: {} bytes, manifest needs {}",
            path.display(),
            bytes.len(),
            numel * 4
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Tensor::new(&[m.t, m.c, m.h, m.w], data)?)
}

pub fn load_dataset(series_csv: &Path, image_blob: &Path) -> Result<Dataset> {
    let (series, timestamps) = read_series_csv(series_csv)?;
    let frames = read_image_blob(image_blob)?;
    Ok(Dataset::new(series, frames, timestamps)?)
}
