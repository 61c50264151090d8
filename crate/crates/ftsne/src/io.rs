//! File formats: dataset and embedding CSVs, optimizer traces, metric
//! curves, heatmap grids, and the evaluation summary JSON.
//!
//! All CSVs carry a header row, use `,` as separator and `.` as the
//! decimal mark. Floats are written in shortest-roundtrip form, so
//! reading a file back reproduces the exact values.

use crate::affinity::Dataset;
use crate::divergence::HeatmapGrids;
use crate::error::{FtsneError, Result};
use crate::matrix::Mat;
use crate::metrics::RetrievalCurves;
use crate::variational::RoundRecord;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

fn format_err(path: &Path, reason: impl Into<String>) -> FtsneError {
    FtsneError::Format {
        path: path.display().to_string(),
        reason: reason.into(),
    }
}

/// Writes a dataset as `f0..f{D-1}[,label]`.
pub fn write_dataset_csv(path: &Path, data: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..data.dim()).map(|k| format!("f{k}")).collect();
    let labels = data.labels();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..data.len() {
        let mut rec: Vec<String> = data.points().row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l.get(i, 0).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset written by [`write_dataset_csv`]: header `f0..f{D-1}`
/// with an optional final `label` column.
pub fn read_dataset_csv(path: &Path) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_label = cols.last() == Some(&"label");
    let n_features = cols.len() - has_label as usize;
    if n_features == 0 {
        return Err(format_err(path, "no feature columns"));
    }
    for (k, name) in cols.iter().take(n_features).enumerate() {
        let expect = format!("f{k}");
        if *name != expect {
            return Err(format_err(
                path,
                format!("expected column '{expect}', found '{name}'"),
            ));
        }
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols.len() {
            return Err(format_err(path, format!("ragged record on line {}", line + 2)));
        }
        let mut row = Vec::with_capacity(n_features);
        for v in rec.iter().take(n_features) {
            row.push(
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad number '{v}'")))?,
            );
        }
        rows.push(row);
        if has_label {
            let v = rec.get(n_features).unwrap();
            labels.push(
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad label '{v}'")))?,
            );
        }
    }
    if rows.is_empty() {
        return Err(format_err(path, "no data rows"));
    }
    let label_mat = has_label.then(|| {
        Mat::from_rows(&labels.iter().map(|&v| vec![v]).collect::<Vec<_>>())
    });
    Dataset::new(Mat::from_rows(&rows), label_mat)
}

/// Writes embedding coordinates as `y0..y{d-1}[,label]`.
pub fn write_embedding_csv(path: &Path, coords: &Mat, labels: Option<&Mat>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..coords.cols()).map(|k| format!("y{k}")).collect();
    if labels.is_some() {
        header.push("label".into());
    }
    w.write_record(&header)?;
    for i in 0..coords.rows() {
        let mut rec: Vec<String> = coords.row(i).iter().map(|v| v.to_string()).collect();
        if let Some(l) = labels {
            rec.push(l.get(i, 0).to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an embedding CSV; the label column, when present, is ignored.
pub fn read_embedding_csv(path: &Path) -> Result<Mat> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    let has_label = cols.last() == Some(&"label");
    let d = cols.len() - has_label as usize;
    if d == 0 {
        return Err(format_err(path, "no coordinate columns"));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let mut row = Vec::with_capacity(d);
        for v in rec.iter().take(d) {
            row.push(
                v.parse::<f64>()
                    .map_err(|_| format_err(path, format!("bad number '{v}'")))?,
            );
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(format_err(path, "no data rows"));
    }
    Ok(Mat::from_rows(&rows))
}

/// Writes a primal loss trace as `epoch,loss`.
pub fn write_loss_trace_csv(path: &Path, trace: &[(usize, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "loss"])?;
    for (epoch, loss) in trace {
        w.write_record([epoch.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a minimax trace as
/// `round,variational_objective,primal_loss,clip_events`.
pub fn write_variational_trace_csv(path: &Path, trace: &[RoundRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["round", "variational_objective", "primal_loss", "clip_events"])?;
    for rec in trace {
        w.write_record([
            rec.round.to_string(),
            rec.variational_objective.to_string(),
            rec.primal_loss.to_string(),
            rec.clip_events.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes retrieval curves as `param,precision,recall,fscore`.
pub fn write_curves_csv(path: &Path, curves: &RetrievalCurves) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["param", "precision", "recall", "fscore"])?;
    for i in 0..curves.params.len() {
        w.write_record([
            curves.params[i].to_string(),
            curves.precision[i].to_string(),
            curves.recall[i].to_string(),
            curves.fscore[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes one heatmap surface as `p,q,value`.
fn write_grid_csv(path: &Path, p_values: &[f64], q_values: &[f64], grid: &Mat) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["p", "q", "value"])?;
    for (i, &p) in p_values.iter().enumerate() {
        for (j, &q) in q_values.iter().enumerate() {
            w.write_record([p.to_string(), q.to_string(), grid.get(i, j).to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the loss surface and the q-gradient surface to two files.
pub fn write_heatmap_csvs(loss_path: &Path, grad_path: &Path, grids: &HeatmapGrids) -> Result<()> {
    write_grid_csv(loss_path, &grids.p_values, &grids.q_values, &grids.loss)?;
    write_grid_csv(grad_path, &grids.p_values, &grids.q_values, &grids.gradient)
}

/// Per-metric slice of the evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub max_fscore: f64,
    pub curve_csv: String,
}

/// Evaluation summary mirroring the per-(dataset, divergence, metric)
/// layout of the result tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: String,
    pub embedding: String,
    pub seed: u64,
    pub perplexity: f64,
    pub metrics: BTreeMap<String, MetricSummary>,
}

pub fn write_summary_json(path: &Path, summary: &EvalSummary) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn read_summary_json(path: &Path) -> Result<EvalSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
