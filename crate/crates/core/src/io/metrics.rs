//! CSV and JSON outputs: per-step training metrics, diagnostics, ablation
//! tables, and trained parameters.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::detector::DetectorParams;
use crate::sim::noise::NoiseConfig;
use crate::sim::train::StepRecord;

pub const METRICS_HEADER: &str =
    "step,loss_total,loss_cls_sup,loss_reg_sup,loss_cls_unsup,loss_reg_unsup,loss_feat,map,fp_rate,sigma_pearson";
pub const PRECISION_CURVE_HEADER: &str = "iou_threshold,precision";
pub const SIGMA_SCATTER_HEADER: &str = "sigma,true_iou";
pub const ABLATION_HEADER: &str = "axis,value,map,ap50,ap75";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Appends rows to a CSV with a fixed header. A new or empty file gets the
/// header first; an existing file must already start with exactly that header.
/// Every row is flushed as it is written.
pub struct CsvAppender {
    file: File,
}

impl CsvAppender {
    pub fn open(path: &Path, header: &str) -> Result<Self> {
        let existing = match File::open(path) {
            Ok(f) => {
                let mut first = String::new();
                BufReader::new(f).read_line(&mut first)?;
                Some(first)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        match existing.as_deref() {
            None | Some("") => {
                writeln!(file, "{header}")?;
                file.flush()?;
            }
            Some(first) if first.trim_end_matches(['\r', '\n']) == header => {}
            Some(first) => {
                return Err(Error::Data(format!(
                    "{} has header {:?}, expected {header:?}",
                    path.display(),
                    first.trim_end()
                )))
            }
        }
        Ok(CsvAppender { file })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        w.write_record(fields)?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        self.file.write_all(&bytes)?;
        self.file.flush()?;
        Ok(())
    }
}

pub fn metrics_row(r: &StepRecord) -> Vec<String> {
    vec![
        r.step.to_string(),
        r.loss.total.to_string(),
        r.loss.cls_sup.to_string(),
        r.loss.reg_sup.to_string(),
        r.loss.cls_unsup.to_string(),
        r.loss.reg_unsup.to_string(),
        r.loss.feat_consistency.to_string(),
        opt(r.map),
        opt(r.fp_rate),
        opt(r.sigma_pearson),
    ]
}

pub fn write_metrics(path: &Path, records: &[StepRecord]) -> Result<()> {
    let mut out = CsvAppender::open(path, METRICS_HEADER)?;
    for r in records {
        out.row(&metrics_row(r))?;
    }
    Ok(())
}

/// Writes a fresh two-or-more column CSV, replacing any existing file.
pub fn write_table(path: &Path, header: &str, rows: &[Vec<String>]) -> Result<()> {
    if path.exists() {
        std::fs::remove_file(path)?;
    }
    let mut out = CsvAppender::open(path, header)?;
    for r in rows {
        out.row(r)?;
    }
    Ok(())
}

pub fn write_precision_curve(path: &Path, points: &[(f64, f64)]) -> Result<()> {
    let rows: Vec<Vec<String>> = points.iter().map(|(t, p)| vec![t.to_string(), p.to_string()]).collect();
    write_table(path, PRECISION_CURVE_HEADER, &rows)
}

pub fn write_sigma_scatter(path: &Path, sigmas: &[f64], true_ious: &[f64]) -> Result<()> {
    let rows: Vec<Vec<String>> = sigmas.iter().zip(true_ious).map(|(s, t)| vec![s.to_string(), t.to_string()]).collect();
    write_table(path, SIGMA_SCATTER_HEADER, &rows)
}

pub const PARAMS_VERSION: u32 = 1;

/// Trained head plus everything needed to rebuild the proposal features it was
/// trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsFile {
    pub version: u32,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub feature_dim: usize,
    pub nms_iou: f64,
    pub params: DetectorParams,
}

pub fn save_params(p: &ParamsFile, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(p)?)?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamsFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let p: ParamsFile = serde_json::from_str(&text).map_err(|e| Error::Data(e.to_string()))?;
    if p.version != PARAMS_VERSION {
        return Err(Error::Version { found: p.version, expected: PARAMS_VERSION, hint: "retrain to produce a current params file".into() });
    }
    if p.params.w_cls.len() != p.params.dim * p.params.n_categories
        || p.params.w_reg.len() != 4 * p.params.dim
        || p.params.b_cls.len() != p.params.n_categories
        || p.params.b_reg.len() != 4
        || p.params.dim != p.feature_dim
    {
        return Err(Error::Data("params file has inconsistent shapes".into()));
    }
    Ok(p)
}
