//! Series analysis toolkit: periodogram with LOESS overlay, Butterworth
//! band envelopes, autocorrelation, rolling-volatility anomalies and
//! fusion-stage feature exports, with CSV and optional SVG output.

mod features;
mod filter;
mod spectral;
pub mod svg;
mod volatility;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use features::{activation_magnitude, channel_correlation, feature_evolution_export, StageCorrelation, StageExport};
pub use filter::{butterworth_bandpass, butterworth_design, Biquad, Sos};
pub use spectral::{acf, hilbert_envelope, loess, periodogram, Acf, Periodogram, MAX_PERIOD_DAYS};
pub use volatility::{rolling_anomalies, Volatility, HISTOGRAM_BINS};

use crate::error::{Error, Result};

/// Frequency band in cycles per day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    pub name: String,
    pub low: f64,
    pub high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnoseConfig {
    pub sample_interval_days: f64,
    pub filter_order: usize,
    pub bands: Vec<Band>,
    pub max_lag: usize,
    pub window: usize,
    pub k_sigma: f64,
    pub svg: bool,
}

impl Default for DiagnoseConfig {
    fn default() -> Self {
        Self {
            sample_interval_days: 1.0 / 6.0,
            filter_order: 4,
            bands: vec![
                Band {
                    name: "daily".into(),
                    low: 0.8,
                    high: 1.2,
                },
                Band {
                    name: "midterm".into(),
                    low: 1.0 / 20.0,
                    high: 1.0 / 10.0,
                },
            ],
            max_lag: 25,
            window: 48,
            k_sigma: 3.0,
            svg: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub band: Band,
    pub filtered: Vec<f64>,
    pub envelope: Vec<f64>,
}

/// Analysis of one series.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticsReport {
    pub periodogram: Periodogram,
    pub envelopes: Vec<Envelope>,
    pub acf: Acf,
    pub volatility: Volatility,
}

pub fn diagnose(x: &[f64], cfg: &DiagnoseConfig) -> Result<DiagnosticsReport> {
    let fs = 1.0 / cfg.sample_interval_days;
    let envelopes = cfg
        .bands
        .iter()
        .map(|band| {
            let filtered = butterworth_bandpass(x, band.low, band.high, cfg.filter_order, fs)?;
            let envelope = hilbert_envelope(&filtered)?;
            Ok(Envelope {
                band: band.clone(),
                filtered,
                envelope,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DiagnosticsReport {
        periodogram: periodogram(x, cfg.sample_interval_days)?,
        envelopes,
        acf: acf(x, cfg.max_lag)?,
        volatility: rolling_anomalies(x, cfg.window, cfg.k_sigma)?,
    })
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))
}

fn file_label(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes `periodogram.csv`, `envelope_<band>.csv`, `acf.csv`,
/// `volatility.csv` and `anomalies.csv`, one `station` column per file,
/// plus SVG charts when `svg` is set. Returns the written file names.
pub fn write_reports(dir: &Path, reports: &[(String, DiagnosticsReport)], svg: bool) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut out = |name: String, body: String| -> Result<()> {
        write(dir, &name, &body)?;
        files.push(name);
        Ok(())
    };

    let mut s = String::from("station,period_days,power,loess\n");
    for (st, r) in reports {
        let p = &r.periodogram;
        for ((d, pw), lo) in p.period_days.iter().zip(&p.binned).zip(&p.loess) {
            let _ = writeln!(s, "{st},{d},{pw},{lo}");
        }
    }
    out("periodogram.csv".into(), s)?;

    if let Some((_, first)) = reports.first() {
        for (i, env) in first.envelopes.iter().enumerate() {
            let mut s = String::from("station,step,filtered,envelope\n");
            for (st, r) in reports {
                let e = &r.envelopes[i];
                for (t, (f, a)) in e.filtered.iter().zip(&e.envelope).enumerate() {
                    let _ = writeln!(s, "{st},{t},{f},{a}");
                }
            }
            out(format!("envelope_{}.csv", file_label(&env.band.name)), s)?;
        }
    }

    let mut s = String::from("station,lag,acf,bound_95_white_noise\n");
    for (st, r) in reports {
        for (l, v) in r.acf.values.iter().enumerate() {
            let _ = writeln!(s, "{st},{},{v},{}", l + 1, r.acf.bound);
        }
    }
    out("acf.csv".into(), s)?;

    let mut s = String::from("station,bin_lo,bin_hi,count,anomalies,zero_std_steps\n");
    for (st, r) in reports {
        let v = &r.volatility;
        for (i, c) in v.counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "{st},{},{},{c},{},{}",
                v.edges[i],
                v.edges[i + 1],
                v.anomalies.len(),
                v.zero_std_steps
            );
        }
    }
    out("volatility.csv".into(), s)?;

    let mut s = String::from("station,step\n");
    for (st, r) in reports {
        for t in &r.volatility.anomalies {
            let _ = writeln!(s, "{st},{t}");
        }
    }
    out("anomalies.csv".into(), s)?;

    if svg {
        let lines: Vec<svg::Line> = reports
            .iter()
            .map(|(st, r)| svg::Line {
                label: st,
                xs: &r.periodogram.period_days,
                ys: &r.periodogram.loess,
                dashed: false,
            })
            .collect();
        out(
            "periodogram.svg".into(),
            svg::line_chart("Periodogram (LOESS)", "period (days)", "power", &lines),
        )?;
        let lags: Vec<f64> = reports
            .first()
            .map(|(_, r)| (1..=r.acf.values.len()).map(|l| l as f64).collect())
            .unwrap_or_default();
        let bound = reports.first().map(|(_, r)| vec![r.acf.bound; lags.len()]).unwrap_or_default();
        let mut lines: Vec<svg::Line> = reports
            .iter()
            .map(|(st, r)| svg::Line {
                label: st,
                xs: &lags,
                ys: &r.acf.values,
                dashed: false,
            })
            .collect();
        lines.push(svg::Line {
            label: "95% bound",
            xs: &lags,
            ys: &bound,
            dashed: true,
        });
        out("acf.svg".into(), svg::line_chart("Autocorrelation", "lag", "acf", &lines))?;
        if let Some((_, first)) = reports.first() {
            for (i, env) in first.envelopes.iter().enumerate() {
                let steps: Vec<f64> = (0..env.envelope.len()).map(|t| t as f64).collect();
                let lines: Vec<svg::Line> = reports
                    .iter()
                    .map(|(st, r)| svg::Line {
                        label: st,
                        xs: &steps,
                        ys: &r.envelopes[i].envelope,
                        dashed: false,
                    })
                    .collect();
                let name = file_label(&env.band.name);
                out(
                    format!("envelope_{name}.svg"),
                    svg::line_chart(&format!("Envelope: {}", env.band.name), "step", "amplitude", &lines),
                )?;
            }
        }
    }
    Ok(files)
}

/// Writes `stage_corr_<stage>.csv` and `stage_activation_<stage>.csv` for
/// every export. Returns the written file names.
pub fn write_feature_exports(dir: &Path, exports: &[StageExport]) -> Result<Vec<String>> {
    let mut files = Vec::new();
    for e in exports {
        let c = &e.correlation;
        let label = file_label(&c.stage);
        let d = c.degenerate.len();
        let mut s = String::from("stage,i,j,rho,degenerate\n");
        for i in 0..d {
            for j in 0..d {
                let flag = u8::from(c.degenerate[i] || c.degenerate[j]);
                let _ = writeln!(s, "{},{i},{j},{},{flag}", c.stage, c.corr.at2(i, j));
            }
        }
        let name = format!("stage_corr_{label}.csv");
        write(dir, &name, &s)?;
        files.push(name);

        let (t, d) = e.magnitude.dims2()?;
        let mut s = String::from("stage,step,channel,magnitude\n");
        for i in 0..t {
            for j in 0..d {
                let _ = writeln!(s, "{},{i},{j},{}", c.stage, e.magnitude.at2(i, j));
            }
        }
        let name = format!("stage_activation_{label}.csv");
        write(dir, &name, &s)?;
        files.push(name);
    }
    Ok(files)
}
