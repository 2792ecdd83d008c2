//! Aggregation of replicate estimates into bias, coverage and efficiency.

use std::io::Write;

use serde::Serialize;

use crate::error::{Result, SorError};

/// One replicate's estimates and standard errors for one arm.
pub type ArmOutcome = std::result::Result<(Vec<f64>, Vec<f64>), String>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub scenario: String,
    pub design: String,
    pub estimator: String,
    pub parameter: String,
    pub truth: f64,
    pub mean_est: f64,
    pub pct_bias: f64,
    pub coverage: f64,
    pub emp_var: f64,
    /// Empirical variance under the SRS baseline over that of this arm.
    pub rel_eff: Option<f64>,
    pub n_failed: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricsRow>,
    /// The first failure message of each arm that had any.
    pub failures: Vec<(String, String, String)>,
}

/// 100·(mean − β)/β, or 100·(mean − β) when β = 0.
pub fn percent_bias(mean: f64, truth: f64) -> f64 {
    if truth == 0.0 {
        100.0 * (mean - truth)
    } else {
        100.0 * (mean - truth) / truth
    }
}

/// Mean, unbiased variance and Wald-95% coverage (%) of one parameter.
pub fn summarize(estimates: &[f64], ses: &[f64], truth: f64) -> (f64, f64, f64) {
    let n = estimates.len() as f64;
    let mean = estimates.iter().sum::<f64>() / n;
    let var = if estimates.len() > 1 {
        estimates.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        f64::NAN
    };
    let covered = estimates
        .iter()
        .zip(ses)
        .filter(|(e, s)| (*e - 1.96 * *s) <= truth && truth <= (*e + 1.96 * *s))
        .count();
    (mean, var, 100.0 * covered as f64 / n)
}

impl MetricsTable {
    pub fn extend(&mut self, other: MetricsTable) {
        self.rows.extend(other.rows);
        self.failures.extend(other.failures);
    }

    pub fn get(&self, scenario: &str, design: &str, estimator: &str, parameter: &str) -> Option<&MetricsRow> {
        self.rows
            .iter()
            .find(|r| r.scenario == scenario && r.design == design && r.estimator == estimator && r.parameter == parameter)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let io = |e: csv::Error| SorError::Io(std::io::Error::other(e));
        out.write_record([
            "scenario", "design", "estimator", "parameter", "truth", "mean_est", "pct_bias", "coverage", "emp_var", "rel_eff", "n_failed",
        ])
        .map_err(io)?;
        for r in &self.rows {
            out.write_record([
                r.scenario.clone(),
                r.design.clone(),
                r.estimator.clone(),
                r.parameter.clone(),
                num(r.truth),
                num(r.mean_est),
                num(r.pct_bias),
                num(r.coverage),
                num(r.emp_var),
                r.rel_eff.map_or_else(|| "NA".into(), num),
                r.n_failed.to_string(),
            ])
            .map_err(io)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| SorError::Io(std::io::Error::other(e)))
    }
}

/// Shortest round-trip decimal; NaN as "NA".
fn num(v: f64) -> String {
    if v.is_nan() {
        "NA".into()
    } else {
        format!("{v}")
    }
}
