//! Run configuration: JSON file, then command-line overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xfmnet::diagnostics::DiagnoseConfig;
use xfmnet::prediction::{ModelConfig, Split, SyntheticConfig, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into the synthetic and training seeds.
    pub seed: u64,
    pub series_csv: Option<PathBuf>,
    pub image_blob: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    /// Training output directory holding a checkpoint.
    pub checkpoint: Option<PathBuf>,
    pub force: bool,
    pub synthetic: SyntheticConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diagnose: DiagnoseConfig,
    pub eval_split: Split,
    /// Window start used by `probe`; `None` takes the first test window.
    pub probe_window: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            series_csv: None,
            image_blob: None,
            output_dir: None,
            checkpoint: None,
            force: false,
            synthetic: SyntheticConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            diagnose: DiagnoseConfig::default(),
            eval_split: Split::Test,
            probe_window: None,
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| xfmnet::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| CliError::Usage("no output directory; pass --output-dir or set XFMNET_OUTPUT_DIR".into()))
    }

    /// Series and image paths, defaulting to `series.csv` and `images.bin`
    /// under `dir`.
    pub fn data_paths(&self, dir: Option<&Path>) -> Result<(PathBuf, PathBuf)> {
        let series = match (&self.series_csv, dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join("series.csv"),
            (None, None) => return Err(CliError::Usage("no series CSV; pass --series-csv".into())),
        };
        let images = match (&self.image_blob, dir) {
            (Some(p), _) => p.clone(),
            (None, Some(d)) => d.join("images.bin"),
            (None, None) => return Err(CliError::Usage("no image blob; pass --image-blob".into())),
        };
        Ok((series, images))
    }

    pub fn checkpoint_dir(&self) -> Result<&Path> {
        self.checkpoint
            .as_deref()
            .ok_or_else(|| CliError::Usage("no checkpoint; pass --checkpoint".into()))
    }

    /// Propagates the master seed and checks sub-configurations.
    pub fn resolve(mut self) -> Result<Self> {
        self.synthetic.seed = self.seed;
        self.train.seed = self.seed;
        self.train.validate()?;
        Ok(self)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}

pub fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist or is not a file", path.display())))
    }
}

pub fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::Usage(format!("{} does not exist or is not a directory", path.display())))
    }
}

/// Creates `dir`; the listed outputs must not exist unless `force` is set.
pub fn prepare_output(dir: &Path, outputs: &[&str], force: bool) -> Result<()> {
    if !force {
        for name in outputs {
            let p = dir.join(name);
            if p.exists() {
                return Err(CliError::Exists(p.display().to_string()));
            }
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| {
        CliError::Core(xfmnet::Error::Io {
            path: dir.display().to_string(),
            source: e,
        })
    })
}
