//! Tabular estimate reports: one row per penalty level with the estimate, its standard error
//! and the number of active sub-likelihoods, plus an optional uniform-weights row.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimate::EstimateReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    /// `None` marks the uniform-weights row.
    pub lambda: Option<f64>,
    pub theta_hat: f64,
    pub se: f64,
    pub n_active: usize,
}

impl ReportRow {
    /// Uses the first parameter coordinate.
    pub fn from_estimate(est: &EstimateReport) -> Self {
        Self {
            lambda: est.lambda,
            theta_hat: est.theta_hat[0],
            se: est.standard_errors[0],
            n_active: est.n_active,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Rows in decreasing `lambda`.
    pub rows: Vec<ReportRow>,
    pub uniform: Option<ReportRow>,
    /// Total number of sub-likelihoods.
    pub m: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Text,
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::InvalidInput(format!("unknown report format `{other}`"))),
        }
    }
}

impl Report {
    pub fn new(estimates: &[EstimateReport], uniform: Option<&EstimateReport>, m: usize) -> Result<Self> {
        if estimates.is_empty() && uniform.is_none() {
            return Err(Error::InvalidInput("report needs at least one estimate".into()));
        }
        let rows: Vec<ReportRow> = estimates.iter().map(ReportRow::from_estimate).collect();
        if rows.iter().any(|r| r.lambda.is_none()) {
            return Err(Error::InvalidInput("penalized rows need a lambda".into()));
        }
        if rows.windows(2).any(|w| w[1].lambda >= w[0].lambda) {
            return Err(Error::InvalidInput("report rows must have strictly decreasing lambda".into()));
        }
        Ok(Self {
            rows,
            uniform: uniform.map(ReportRow::from_estimate),
            m,
        })
    }

    pub fn all_rows(&self) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().chain(self.uniform.iter())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Power of ten used to annotate a column, chosen so the largest magnitude lies in `[1, 1000)`.
fn column_exponent(values: impl Iterator<Item = f64>) -> i32 {
    let largest = values.filter(|v| v.is_finite()).fold(0.0_f64, |a, v| a.max(v.abs()));
    if largest == 0.0 || (1.0..1000.0).contains(&largest) {
        0
    } else {
        largest.log10().floor() as i32
    }
}

fn scale_label(exp: i32) -> String {
    if exp == 0 {
        String::new()
    } else {
        format!(" (x10^{exp})")
    }
}

pub fn emit_report(report: &Report, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)?),
        ReportFormat::Csv => {
            let mut wtr = csv::Writer::from_writer(Vec::new());
            wtr.write_record(["lambda", "theta_hat", "se", "n_sublikelihoods"])?;
            for row in report.all_rows() {
                wtr.write_record([
                    row.lambda.map(|l| format!("{l:e}")).unwrap_or_else(|| "uniform".into()),
                    format!("{:e}", row.theta_hat),
                    format!("{:e}", row.se),
                    row.n_active.to_string(),
                ])?;
            }
            let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
            Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
        }
        ReportFormat::Text => {
            let theta_exp = column_exponent(report.all_rows().map(|r| r.theta_hat));
            let se_exp = column_exponent(report.all_rows().map(|r| r.se));
            let headers = [
                "lambda".to_string(),
                format!("theta_hat{}", scale_label(theta_exp)),
                format!("SE{}", scale_label(se_exp)),
                format!("#sub-likelihoods (of {})", report.m),
            ];
            let cells: Vec<[String; 4]> = report
                .all_rows()
                .map(|r| {
                    [
                        r.lambda.map(|l| format!("{l:.4e}")).unwrap_or_else(|| "uniform".into()),
                        format!("{:.4}", r.theta_hat / 10f64.powi(theta_exp)),
                        format!("{:.4}", r.se / 10f64.powi(se_exp)),
                        r.n_active.to_string(),
                    ]
                })
                .collect();
            let widths: Vec<usize> = (0..4)
                .map(|c| cells.iter().map(|r| r[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
                .collect();
            let mut out = String::new();
            let line = |out: &mut String, row: &[String]| {
                let parts: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
                let _ = writeln!(out, "{}", parts.join("  "));
            };
            line(&mut out, &headers);
            let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
            line(&mut out, &rule);
            for row in &cells {
                line(&mut out, row);
            }
            Ok(out)
        }
    }
}

pub fn write_report(report: &Report, format: ReportFormat, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, emit_report(report, format)?)?;
    Ok(())
}
