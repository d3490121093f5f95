//! Aggregated metric reports.

use std::path::Path;

use serde::{Deserialize, Serialize};
use unictrl_core::metrics::MetricReport;

use crate::error::{Error, Result};
use crate::manifest::write_json;

/// Mean and population standard deviation of one mode's runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: String,
    pub runs: usize,
    pub consistency_mean: f64,
    pub consistency_std: f64,
    pub motion_mean: f64,
    pub motion_std: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expectation: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub summary: Vec<ModeSummary>,
    pub runs: Vec<MetricReport>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Groups reports by mode, in order of first appearance.
pub fn summarize(reports: &[MetricReport]) -> Result<Vec<ModeSummary>> {
    if reports.is_empty() {
        return Err(Error::Usage("no reports to summarize".into()));
    }
    let mut modes: Vec<&str> = Vec::new();
    for r in reports {
        if !modes.contains(&r.mode.as_str()) {
            modes.push(&r.mode);
        }
    }
    Ok(modes
        .into_iter()
        .map(|mode| {
            let group: Vec<&MetricReport> = reports.iter().filter(|r| r.mode == mode).collect();
            let c: Vec<f64> = group.iter().map(|r| r.consistency_score).collect();
            let m: Vec<f64> = group.iter().map(|r| r.motion_score).collect();
            let (consistency_mean, consistency_std) = mean_std(&c);
            let (motion_mean, motion_std) = mean_std(&m);
            ModeSummary {
                mode: mode.to_string(),
                runs: group.len(),
                consistency_mean,
                consistency_std,
                motion_mean,
                motion_std,
                expectation: group[0].expectation.clone(),
            }
        })
        .collect())
}

pub fn build_report(reports: &[MetricReport]) -> Result<ReportDocument> {
    Ok(ReportDocument {
        summary: summarize(reports)?,
        runs: reports.to_vec(),
    })
}

pub fn emit_report(reports: &[MetricReport], path: &Path) -> Result<ReportDocument> {
    let doc = build_report(reports)?;
    write_json(&doc, path)?;
    Ok(doc)
}
