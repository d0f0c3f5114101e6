use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DsamError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportMode {
    EndToEnd,
    FeatureProbe,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Pooled backbone features.
    Theta,
    /// Concatenated pooled features of all aggregation modules.
    Lambda,
    ThetaLambda,
}

impl FeatureSource {
    pub fn label(&self) -> &'static str {
        match self {
            FeatureSource::Theta => "theta",
            FeatureSource::Lambda => "lambda",
            FeatureSource::ThetaLambda => "theta+lambda",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub mode: Option<ReportMode>,
    pub feature_source: Option<FeatureSource>,
    pub network: Option<String>,
    pub backbone: Option<String>,
    pub repetitions: usize,
    /// Sample standard deviation of the per-repetition averages.
    pub average_std: f64,
    pub c_param: Option<f64>,
    pub probe_strategy: Option<String>,
    pub config_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub domain: String,
    /// Mean over repetitions, percent.
    pub accuracy: f64,
    pub std: f64,
    pub runs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub title: String,
    pub rows: Vec<ReportRow>,
    pub average: f64,
    pub metadata: ReportMetadata,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// One row per target domain: mean and std over its repetitions, plus the
/// average over rows.
pub fn build_report(
    title: &str,
    per_run: &[(String, Vec<f64>)],
    repetitions: usize,
    mut metadata: ReportMetadata,
) -> Result<EvalReport> {
    if per_run.is_empty() || repetitions == 0 {
        return Err(DsamError::EmptyDataset("no runs to report".into()));
    }
    for (domain, runs) in per_run {
        if runs.len() != repetitions {
            return Err(DsamError::InvalidSpec(format!(
                "ragged report input: `{domain}` has {} runs, expected {repetitions}",
                runs.len()
            )));
        }
        if let Some(bad) = runs.iter().find(|a| !(0.0..=100.0).contains(*a)) {
            return Err(DsamError::InvalidSpec(format!("accuracy {bad} of `{domain}` outside [0, 100]")));
        }
    }
    let rows: Vec<ReportRow> = per_run
        .iter()
        .map(|(domain, runs)| ReportRow {
            domain: domain.clone(),
            accuracy: mean(runs),
            std: sample_std(runs),
            runs: runs.clone(),
        })
        .collect();
    let average = mean(&rows.iter().map(|r| r.accuracy).collect::<Vec<_>>());
    let per_rep_avg: Vec<f64> = (0..repetitions)
        .map(|k| mean(&per_run.iter().map(|(_, runs)| runs[k]).collect::<Vec<_>>()))
        .collect();
    metadata.repetitions = repetitions;
    metadata.average_std = sample_std(&per_rep_avg);
    Ok(EvalReport {
        title: title.to_string(),
        rows,
        average,
        metadata,
    })
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let hash = self.metadata.config_hash.as_deref().unwrap_or("");
        let mut out = String::from("domain,accuracy,std,config_hash\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{:.4},{:.4},{hash}", r.domain, r.accuracy, r.std);
        }
        let _ = writeln!(out, "Avg,{:.4},{:.4},{hash}", self.average, self.metadata.average_std);
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Domains as columns plus an Avg column, one line per report, in the
    /// layout of a results table.
    pub fn render_table(reports: &[EvalReport]) -> String {
        let Some(first) = reports.first() else {
            return String::new();
        };
        let mut out = String::new();
        let _ = write!(out, "| {:<28} |", "");
        for r in &first.rows {
            let _ = write!(out, " {:>15} |", r.domain);
        }
        let _ = writeln!(out, " {:>15} |", "Avg");
        let _ = write!(out, "|{}|", "-".repeat(30));
        for _ in 0..=first.rows.len() {
            let _ = write!(out, "{}|", "-".repeat(17));
        }
        out.push('\n');
        for report in reports {
            let _ = write!(out, "| {:<28} |", report.title);
            for col in &first.rows {
                match report.rows.iter().find(|r| r.domain == col.domain) {
                    Some(r) => {
                        let _ = write!(out, " {:>15} |", format!("{:.2} ± {:.2}", r.accuracy, r.std));
                    }
                    None => {
                        let _ = write!(out, " {:>15} |", "-");
                    }
                }
            }
            let _ = writeln!(
                out,
                " {:>15} |",
                format!("{:.2} ± {:.2}", report.average, report.metadata.average_std)
            );
        }
        out
    }

    /// Writes `<stem>.csv` and `<stem>.json` under `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        let csv = dir.join(format!("{stem}.csv"));
        fs::write(&csv, self.to_csv()).map_err(|e| DsamError::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        fs::write(&json, self.to_json()?).map_err(|e| DsamError::io(&json, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| DsamError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
