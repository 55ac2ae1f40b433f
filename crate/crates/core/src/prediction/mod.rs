//! Forecast heads, model assembly, data handling and training.

pub mod data;
pub mod model;
pub mod synthetic;
pub mod train;

pub use data::{Dataset, Normalization, Split, SplitBounds, Windows};
pub use model::{mae, metrics, mse, predict, ForecastHead, ForwardOutput, Metrics, ModelConfig, XfmNet};
pub use synthetic::{synthetic_generate, StationParams, SyntheticConfig, SyntheticData, STEPS_PER_DAY};
pub use train::{
    evaluate, seasonal_naive, seasonal_naive_forecast, train, train_step, write_metrics_csv, EpochRecord,
    TrainConfig, TrainReport,
};
