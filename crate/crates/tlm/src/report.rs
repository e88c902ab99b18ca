//! CSV series and JSON summaries written next to each run.

use std::fs;
use std::path::Path;

use serde::Serialize;
use tlm_core::diagnostics::{ContributionStudy, ForgettingReport, GradientDiagnostics, TaylorResult, TrendReport};
use tlm_core::ttl::TtlReport;

use crate::error::{Result, TlmError};

pub fn write_json<T: Serialize + ?Sized>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    fs::write(path, text).map_err(|e| TlmError::io(path, e))
}

/// Writes a header row plus records; the CSV writer quotes as needed.
pub fn write_csv<R>(path: &Path, header: &[&str], rows: R) -> Result<()>
where
    R: IntoIterator<Item = Vec<String>>,
{
    let io = |e: csv::Error| TlmError::Io { path: path.to_path_buf(), source: e.into() };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| TlmError::io(path, e))
}

/// Per-step TTL records.
pub fn write_ttl_steps(report: &TtlReport, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["sample_id", "input_ppl", "S", "backward", "loss", "window_index"],
        report.records.iter().map(|r| {
            vec![
                r.sample_id.clone(),
                r.input_ppl.to_string(),
                r.score.to_string(),
                r.backward_performed.to_string(),
                r.loss.to_string(),
                r.window_index.to_string(),
            ]
        }),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TtlSummary {
    pub mode: String,
    pub p0: f64,
    pub samples: usize,
    pub backward_count: usize,
    pub update_count: usize,
    pub mean_ppl_before: f64,
    pub mean_ppl_after: f64,
    /// Online mode only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_selection_fractions: Option<Vec<f64>>,
}

pub fn write_trend(report: &TrendReport, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["updates", "input_ppl", "output_ppl", "input_normalized", "output_normalized"],
        (0..report.checkpoints.len()).map(|i| {
            vec![
                report.checkpoints[i].to_string(),
                report.input_ppl[i].to_string(),
                report.output_ppl[i].to_string(),
                report.input_normalized[i].to_string(),
                report.output_normalized[i].to_string(),
            ]
        }),
    )
}

pub fn write_cross_gradient(diag: &GradientDiagnostics, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["batch", "inner_product"],
        diag.inner_products.iter().enumerate().map(|(i, v)| vec![i.to_string(), v.to_string()]),
    )
}

pub fn write_taylor(rows: &[(String, TaylorResult)], path: &Path) -> Result<()> {
    write_csv(
        path,
        &["sample_id", "eta", "inner_product", "log_p_before", "log_p_after", "residual"],
        rows.iter().map(|(id, t)| {
            vec![
                id.clone(),
                t.eta.to_string(),
                t.inner_product.to_string(),
                t.log_p_before.to_string(),
                t.log_p_after.to_string(),
                t.residual.to_string(),
            ]
        }),
    )
}

pub fn write_contribution(study: &ContributionStudy, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["fraction", "strategy", "subset_size", "final_mean_ppl", "baseline_mean_ppl"],
        study.rows.iter().map(|r| {
            vec![
                r.fraction.to_string(),
                format!("{:?}", r.strategy).to_lowercase(),
                r.subset_size.to_string(),
                r.final_mean_ppl.to_string(),
                study.baseline_mean_ppl.to_string(),
            ]
        }),
    )
}

pub fn write_forgetting(report: &ForgettingReport, path: &Path) -> Result<()> {
    write_csv(
        path,
        &["budget", "baseline", "lora", "full"],
        report.budgets.iter().enumerate().map(|(i, b)| {
            vec![b.to_string(), report.baseline.to_string(), report.lora[i].to_string(), report.full[i].to_string()]
        }),
    )
}
