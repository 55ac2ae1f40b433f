//! Multiscale multimodal forecasting engine.
//!
//! Sensor series and co-registered precipitation imagery are downsampled in
//! lockstep, embedded, split into seasonal and trend parts by a sliding
//! kernel-basis decomposer, mixed across resolutions, and fused with
//! frequency-domain cross-attention and gating before per-scale forecast
//! heads. A signal-diagnostics toolkit ships alongside.

pub mod diagnostics;
pub mod enhancement;
pub mod error;
pub mod layers;
pub mod loctrend;
pub mod numerics;
pub mod prediction;
pub mod sampling;
pub mod xgatefusion;

pub use error::{Error, Result};
