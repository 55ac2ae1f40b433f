//! Channel correlation and activation exports of fusion-stage probes.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct StageCorrelation {
    pub stage: String,
    /// `[d×d]` Pearson correlation across time.
    pub corr: Tensor,
    /// Channels with zero variance; their entries are 0.
    pub degenerate: Vec<bool>,
}

/// Pearson correlation between the columns of `x [T×d]`.
pub fn channel_correlation(stage: &str, x: &Tensor) -> Result<StageCorrelation> {
    let (t, d) = x.dims2()?;
    if t < 2 {
        return Err(Error::invalid(format!("stage {stage} needs at least 2 steps")));
    }
    let mut centered = x.clone();
    let mut norms = vec![0.0; d];
    for j in 0..d {
        let mean = (0..t).map(|i| x.at2(i, j)).sum::<f64>() / t as f64;
        for i in 0..t {
            let c = x.at2(i, j) - mean;
            centered.set2(i, j, c);
            norms[j] += c * c;
        }
    }
    let degenerate: Vec<bool> = norms
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let scale = (0..t).map(|i| x.at2(i, j).abs()).fold(0.0, f64::max);
            s <= 1e-24 * t as f64 * (1.0 + scale * scale)
        })
        .collect();
    let mut corr = Tensor::zeros(&[d, d]);
    for a in 0..d {
        for b in a..d {
            if degenerate[a] || degenerate[b] {
                continue;
            }
            let cov: f64 = (0..t).map(|i| centered.at2(i, a) * centered.at2(i, b)).sum();
            let r = if a == b { 1.0 } else { (cov / (norms[a] * norms[b]).sqrt()).clamp(-1.0, 1.0) };
            corr.set2(a, b, r);
            corr.set2(b, a, r);
        }
    }
    Ok(StageCorrelation {
        stage: stage.to_string(),
        corr,
        degenerate,
    })
}

/// Element-wise magnitude grid `|x|` of a `[T×d]` probe.
pub fn activation_magnitude(x: &Tensor) -> Result<Tensor> {
    x.dims2()?;
    Ok(x.map(f64::abs))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageExport {
    pub correlation: StageCorrelation,
    pub magnitude: Tensor,
}

/// Correlation matrix and magnitude grid for each labelled probe.
pub fn feature_evolution_export(probes: &[(String, Tensor)]) -> Result<Vec<StageExport>> {
    probes
        .iter()
        .map(|(stage, x)| {
            Ok(StageExport {
                correlation: channel_correlation(stage, x)?,
                magnitude: activation_magnitude(x)?,
            })
        })
        .collect()
}
