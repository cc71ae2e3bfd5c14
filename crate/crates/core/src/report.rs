//! CSV reports and the run manifest.
//!
//! Floats are written in shortest round-trip form, so every file re-parses
//! to bit-identical values. Missing values are written as `NA`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{ErrorReport, FitFailure, GeneratorCheckReport, OrderFit};
use crate::error::{Error, Result};
use crate::sampler::{EnsembleResult, ErgodicResult, SampleRow};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// `Option<f64>` written as a number or `NA`.
mod na {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_str("NA"),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        let s = String::deserialize(d)?;
        if s == "NA" {
            return Ok(None);
        }
        s.parse().map(Some).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub observable: String,
    pub mean: f64,
    pub variance: f64,
    pub ci95: f64,
    pub n_effective: usize,
    pub rejection_rate: f64,
    pub escape_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub delta: f64,
    pub n_steps: usize,
    pub estimate: f64,
    pub reference: f64,
    pub error: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderFitRow {
    pub quantity: String,
    #[serde(with = "na")]
    pub order: Option<f64>,
    #[serde(with = "na")]
    pub coefficient: Option<f64>,
    pub points_used: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RichardsonRow {
    pub delta_pair: String,
    pub combined: f64,
    pub error: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityRow {
    pub observable: String,
    pub estimate: f64,
    pub ci95: f64,
    pub verdict: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRow {
    pub probe: usize,
    #[serde(rename = "Vb")]
    pub vb: f64,
    #[serde(rename = "EVb1")]
    pub evb1: f64,
    pub ci95: f64,
    pub ratio: f64,
}

/// `samples.csv`: `chain,step,H` followed by one column per observable.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTable {
    pub observables: Vec<String>,
    pub rows: Vec<SampleRow>,
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub const ENSEMBLE_HEADER: &[&str] = &[
    "observable",
    "mean",
    "variance",
    "ci95",
    "n_effective",
    "rejection_rate",
    "escape_count",
];
pub const ERROR_HEADER: &[&str] = &["delta", "n_steps", "estimate", "reference", "error", "ci95"];
pub const ORDER_FIT_HEADER: &[&str] = &["quantity", "order", "coefficient", "points_used"];
pub const RICHARDSON_HEADER: &[&str] = &["delta_pair", "combined", "error", "ci95"];
pub const STATIONARITY_HEADER: &[&str] = &["observable", "estimate", "ci95", "verdict"];
pub const LYAPUNOV_HEADER: &[&str] = &["probe", "Vb", "EVb1", "ci95", "ratio"];

pub fn ensemble_rows(r: &EnsembleResult) -> Vec<EnsembleRow> {
    r.stats
        .iter()
        .map(|s| EnsembleRow {
            observable: s.name.clone(),
            mean: s.mean,
            variance: s.variance,
            ci95: s.ci_halfwidth,
            n_effective: s.n_effective,
            rejection_rate: r.rejection_rate,
            escape_count: r.escape_count,
        })
        .collect()
}

pub fn ergodic_rows(r: &ErgodicResult) -> Vec<EnsembleRow> {
    r.averages
        .iter()
        .map(|a| EnsembleRow {
            observable: a.name.clone(),
            mean: a.mean,
            variance: a.variance,
            ci95: a.ci_halfwidth,
            n_effective: a.n_effective,
            rejection_rate: r.rejection_rate,
            escape_count: 0,
        })
        .collect()
}

pub fn error_rows(r: &ErrorReport) -> Vec<ErrorRow> {
    r.points
        .iter()
        .map(|p| ErrorRow {
            delta: p.delta,
            n_steps: p.n_steps,
            estimate: p.estimate.value,
            reference: p.reference.value,
            error: p.error,
            ci95: p.ci,
        })
        .collect()
}

pub fn order_fit_row(quantity: &str, fit: &std::result::Result<OrderFit, FitFailure>) -> OrderFitRow {
    match fit {
        Ok(f) => OrderFitRow {
            quantity: quantity.to_string(),
            order: Some(f.order),
            coefficient: Some(f.c1),
            points_used: f.points_used,
        },
        Err(e) => OrderFitRow {
            quantity: quantity.to_string(),
            order: None,
            coefficient: None,
            points_used: e.usable,
        },
    }
}

pub fn richardson_rows(r: &ErrorReport) -> Vec<RichardsonRow> {
    r.richardson
        .iter()
        .map(|p| RichardsonRow {
            delta_pair: format!("{}/{}", p.delta, p.delta / 2.0),
            combined: p.combined,
            error: p.error,
            ci95: p.ci,
        })
        .collect()
}

pub fn stationarity_rows(r: &[GeneratorCheckReport]) -> Vec<StationarityRow> {
    r.iter()
        .map(|c| StationarityRow {
            observable: c.observable.clone(),
            estimate: c.estimate,
            ci95: c.ci,
            verdict: if c.pass { "pass" } else { "fail" }.to_string(),
        })
        .collect()
}

pub fn write_samples(path: &Path, table: &SampleTable) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    let mut header = vec!["chain".to_string(), "step".to_string(), "H".to_string()];
    header.extend(table.observables.iter().cloned());
    w.write_record(&header)?;
    for r in &table.rows {
        let mut rec = vec![r.chain.to_string(), r.step.to_string(), format!("{:?}", r.hamiltonian)];
        rec.extend(r.values.iter().map(|v| format!("{v:?}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<SampleTable> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() < 3 || &header[0] != "chain" || &header[1] != "step" || &header[2] != "H" {
        return Err(Error::invalid(format!("{} is not a samples file", path.display())));
    }
    let observables = header.iter().skip(3).map(str::to_string).collect();
    let bad = |f: &str| Error::invalid(format!("bad field '{f}' in {}", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| rec[i].parse::<f64>().map_err(|_| bad(&rec[i]));
        rows.push(SampleRow {
            chain: rec[0].parse().map_err(|_| bad(&rec[0]))?,
            step: rec[1].parse().map_err(|_| bad(&rec[1]))?,
            hamiltonian: num(2)?,
            values: (3..rec.len()).map(num).collect::<Result<_>>()?,
        });
    }
    Ok(SampleTable { observables, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hex form of the 64-bit config hash.
    pub config_hash: String,
    pub tool_version: String,
    pub master_seed: u64,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn new(config_hash: u64, master_seed: u64, wall_clock_seconds: f64, outputs: Vec<String>) -> Self {
        RunManifest {
            config_hash: format!("{config_hash:016x}"),
            tool_version: TOOL_VERSION.to_string(),
            master_seed,
            wall_clock_seconds,
            outputs,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Numerical(format!("manifest serialisation: {e}")))?;
        fs::write(&path, text + "\n")?;
        Ok(path)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("manifest: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_rows_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weak_error.csv");
        let rows = vec![
            ErrorRow {
                delta: 0.08,
                n_steps: 25,
                estimate: 0.1 + 0.2,
                reference: 1.0 / 3.0,
                error: -1.2345678901234567e-7,
                ci95: 0.0,
            },
            ErrorRow {
                delta: 1e-300,
                n_steps: 1,
                estimate: f64::INFINITY,
                reference: -0.0,
                error: 5e-324,
                ci95: 1e300,
            },
        ];
        write_rows(&path, &rows, ERROR_HEADER).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("delta,n_steps,estimate,reference,error,ci95\n"));
        let back: Vec<ErrorRow> = read_rows(&path).unwrap();
        assert_eq!(back, rows);
        assert_eq!(back[0].estimate.to_bits(), rows[0].estimate.to_bits());
        assert_eq!(back[1].reference.to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn order_fit_na_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("order_fit.csv");
        let rows = vec![
            order_fit_row("weak_error", &Err(FitFailure { usable: 0, required: 3 })),
            OrderFitRow {
                quantity: "richardson".into(),
                order: Some(2.0000000001),
                coefficient: Some(-0.3),
                points_used: 3,
            },
        ];
        write_rows(&path, &rows, ORDER_FIT_HEADER).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("weak_error,NA,NA,0"), "{text}");
        assert_eq!(read_rows::<OrderFitRow>(&path).unwrap(), rows);
    }

    #[test]
    fn samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("samples.csv");
        let table = SampleTable {
            observables: vec!["hamiltonian".into(), "exp_bh(0.5)".into()],
            rows: vec![SampleRow {
                chain: 3,
                step: 40,
                hamiltonian: 0.7,
                values: vec![0.7, 1.4190675485932571],
            }],
        };
        write_samples(&path, &table).unwrap();
        assert_eq!(read_samples(&path).unwrap(), table);
    }

    #[test]
    fn lyapunov_header_spelling() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lyapunov_drift.csv");
        let rows = vec![LyapunovRow {
            probe: 0,
            vb: 2.0,
            evb1: 1.5,
            ci95: 0.01,
            ratio: 0.745,
        }];
        write_rows(&path, &rows, LYAPUNOV_HEADER).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("probe,Vb,EVb1,ci95,ratio\n"));
        assert_eq!(read_rows::<LyapunovRow>(&path).unwrap(), rows);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = RunManifest::new(0xdead_beef, 7, 1.5, vec!["ensemble.csv".into()]);
        m.write(dir.path()).unwrap();
        let back = RunManifest::read(dir.path()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.config_hash, "00000000deadbeef");
    }
}
