//! Chronological splits, train-split normalization and lookback windows.

use chrono::{Datelike, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::prediction::synthetic::SyntheticData;
use crate::sampling::{Sample, Timestamp};

impl Timestamp {
    pub fn from_datetime(dt: &NaiveDateTime) -> Self {
        Self {
            hour: dt.hour() as u8,
            weekday: dt.weekday().num_days_from_monday() as u8,
            month: dt.month0() as u8,
        }
    }
}

/// Aligned sensor series and image frames on a shared time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[M×N]`
    pub series: Tensor,
    /// `[N×C×H×W]`
    pub frames: Tensor,
    pub timestamps: Vec<NaiveDateTime>,
}

impl Dataset {
    pub fn new(series: Tensor, frames: Tensor, timestamps: Vec<NaiveDateTime>) -> Result<Self> {
        let (_, n) = series.dims2()?;
        if frames.ndim() != 4 {
            return Err(Error::shape("dataset", format!("frames must be [T×C×H×W], got {:?}", frames.shape())));
        }
        if frames.shape()[0] != n {
            return Err(Error::shape(
                "dataset",
                format!("series has {n} steps but images have {}", frames.shape()[0]),
            ));
        }
        if timestamps.len() != n {
            return Err(Error::shape(
                "dataset",
                format!("series has {n} steps but {} timestamps", timestamps.len()),
            ));
        }
        Ok(Self {
            series,
            frames,
            timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn stations(&self) -> usize {
        self.series.shape()[0]
    }
}

impl From<SyntheticData> for Dataset {
    fn from(d: SyntheticData) -> Self {
        Self {
            series: d.series,
            frames: d.frames,
            timestamps: d.timestamps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// 7:1:2 chronological split boundaries.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitBounds {
    pub train_end: usize,
    pub val_end: usize,
    pub len: usize,
}

impl SplitBounds {
    pub fn new(len: usize) -> Self {
        let train_end = len * 7 / 10;
        let val_end = train_end + len / 10;
        Self {
            train_end,
            val_end,
            len,
        }
    }

    /// Target range `[lo, hi)` of a split.
    fn targets(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => (0, self.train_end),
            Split::Val => (self.train_end, self.val_end),
            Split::Test => (self.val_end, self.len),
        }
    }
}

/// Per-station z-score parameters plus one scalar pair for image pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub frame_mean: f64,
    pub frame_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count().max(1) as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    (mean, if std > 1e-12 { std } else { 1.0 })
}

impl Normalization {
    /// Statistics over steps `[0, end)` only.
    pub fn fit(data: &Dataset, end: usize) -> Result<Self> {
        if end == 0 || end > data.len() {
            return Err(Error::invalid(format!("cannot fit statistics on {end} of {} steps", data.len())));
        }
        let n = data.len();
        let (mut mean, mut std) = (Vec::new(), Vec::new());
        for row in data.series.data().chunks(n) {
            let (m, s) = mean_std(row[..end].iter().copied());
            mean.push(m);
            std.push(s);
        }
        let per_frame = data.frames.numel() / n;
        let (frame_mean, frame_std) = mean_std(data.frames.data()[..end * per_frame].iter().copied());
        Ok(Self {
            mean,
            std,
            frame_mean,
            frame_std,
        })
    }

    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        if self.mean.len() != data.stations() {
            return Err(Error::shape(
                "normalize",
                format!("{} stations, statistics for {}", data.stations(), self.mean.len()),
            ));
        }
        let n = data.len();
        let mut series = data.series.clone();
        for (s, row) in series.data_mut().chunks_mut(n).enumerate() {
            for v in row {
                *v = (*v - self.mean[s]) / self.std[s];
            }
        }
        let frames = data.frames.map(|v| (v - self.frame_mean) / self.frame_std);
        Dataset::new(series, frames, data.timestamps.clone())
    }
}

/// Lookback/horizon windows over a normalized dataset.
#[derive(Clone, Debug)]
pub struct Windows {
    pub data: Dataset,
    pub bounds: SplitBounds,
    pub lookback: usize,
    pub horizon: usize,
    calendar: Vec<Timestamp>,
}

impl Windows {
    pub fn new(data: Dataset, lookback: usize, horizon: usize) -> Result<Self> {
        let bounds = SplitBounds::new(data.len());
        let calendar = data.timestamps.iter().map(Timestamp::from_datetime).collect();
        let w = Self {
            data,
            bounds,
            lookback,
            horizon,
            calendar,
        };
        for split in [Split::Train, Split::Val, Split::Test] {
            if w.count(split) == 0 {
                return Err(Error::invalid(format!(
                    "{} split has no complete window of {lookback} + {horizon} steps",
                    split.name()
                )));
            }
        }
        Ok(w)
    }

    fn range(&self, split: Split) -> (usize, usize) {
        let (lo, hi) = self.bounds.targets(split);
        // Window `i` reads inputs `[i, i+T)` and targets `[i+T, i+T+τ)`.
        let first = lo.saturating_sub(self.lookback);
        let first = if split == Split::Train { 0 } else { first };
        let last = hi.checked_sub(self.lookback + self.horizon);
        match last {
            Some(last) if last >= first => (first, last + 1),
            _ => (0, 0),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        let (a, b) = self.range(split);
        b - a
    }

    /// Window start offsets of a split, every `stride` steps.
    pub fn starts(&self, split: Split, stride: usize) -> Vec<usize> {
        let (a, b) = self.range(split);
        (a..b).step_by(stride.max(1)).collect()
    }

    pub fn sample(&self, start: usize) -> Result<(Sample, Tensor)> {
        let (t, tau) = (self.lookback, self.horizon);
        let n = self.data.len();
        if start + t + tau > n {
            return Err(Error::invalid(format!("window at {start} runs past {n} steps")));
        }
        let m = self.data.stations();
        let mut series = Vec::with_capacity(m * t);
        let mut target = Vec::with_capacity(m * tau);
        for row in self.data.series.data().chunks(n) {
            series.extend_from_slice(&row[start..start + t]);
            target.extend_from_slice(&row[start + t..start + t + tau]);
        }
        let per = self.data.frames.numel() / n;
        let mut shape = self.data.frames.shape().to_vec();
        shape[0] = t;
        let frames = Tensor::new(&shape, self.data.frames.data()[start * per..(start + t) * per].to_vec())?;
        Ok((
            Sample {
                series: Tensor::new(&[m, t], series)?,
                timestamps: self.calendar[start..start + t].to_vec(),
                frames,
            },
            Tensor::new(&[m, tau], target)?,
        ))
    }
}
