//! The JSON result document and the flat estimates CSV.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::config::FitConfig;
use crate::comparators::ComparatorFit;
use crate::error::Result;
use crate::simlab::Estimator;
use crate::sorfit::SorFit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Software {
    pub name: String,
    pub version: String,
}

impl Software {
    pub fn current() -> Self {
        Self { name: env!("CARGO_PKG_NAME").into(), version: env!("CARGO_PKG_VERSION").into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputInfo {
    pub path: String,
    pub sha256: String,
    pub n_subjects: usize,
    pub n_obs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp_estimate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp_ci_lower: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exp_ci_upper: Option<f64>,
}

impl Estimate {
    pub fn new(name: String, estimate: f64, se: f64, exp: bool) -> Self {
        let (lo, hi) = (estimate - 1.96 * se, estimate + 1.96 * se);
        Self {
            name,
            estimate,
            se,
            ci_lower: lo,
            ci_upper: hi,
            exp_estimate: exp.then(|| estimate.exp()),
            exp_ci_lower: exp.then(|| lo.exp()),
            exp_ci_upper: exp.then(|| hi.exp()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub iterations: usize,
    pub beta_score_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_converged: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_iterations: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aux_score_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub estimator: Estimator,
    /// Multiplier applied to every design ratio for this fit.
    pub ratio_scale: f64,
    pub estimates: Vec<Estimate>,
    /// Auxiliary-model coefficients; empty for naive and IPW fits.
    pub gamma: Vec<Estimate>,
    pub phi: f64,
    pub alpha: Option<f64>,
    pub y0_used: f64,
    pub convergence: Convergence,
}

impl FitResult {
    pub fn from_sor(fit: &SorFit, ratio_scale: f64, exp: bool) -> Self {
        let se = fit.se_beta();
        let se_g = fit.se_gamma();
        let gamma = fit.gamma();
        Self {
            estimator: Estimator::Sor,
            ratio_scale,
            estimates: fit.beta_names.iter().enumerate().map(|(k, n)| Estimate::new(n.clone(), fit.beta[k], se[k], exp)).collect(),
            gamma: fit.aux.names().into_iter().enumerate().map(|(k, n)| Estimate::new(n, gamma[k], se_g[k], false)).collect(),
            phi: fit.phi,
            alpha: fit.alpha,
            y0_used: fit.y0_used,
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                beta_score_norm: fit.beta_score_norm,
                aux_converged: Some(fit.aux.converged),
                aux_iterations: Some(fit.aux.iterations),
                aux_score_norm: Some(fit.aux.score_norm),
            },
        }
    }

    pub fn from_comparator(fit: &ComparatorFit, estimator: Estimator, exp: bool) -> Self {
        let se = fit.se_beta();
        Self {
            estimator,
            ratio_scale: 1.0,
            estimates: fit.beta_names.iter().enumerate().map(|(k, n)| Estimate::new(n.clone(), fit.beta[k], se[k], exp)).collect(),
            gamma: vec![],
            phi: fit.phi,
            alpha: fit.alpha,
            y0_used: fit.y0_used,
            convergence: Convergence {
                converged: fit.converged,
                iterations: fit.iterations,
                beta_score_norm: fit.beta_score_norm,
                aux_converged: None,
                aux_iterations: None,
                aux_score_norm: None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultDocument {
    pub software: Software,
    pub input: InputInfo,
    pub config: FitConfig,
    pub fits: Vec<FitResult>,
}

impl ResultDocument {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self).map_err(|e| crate::SorError::numeric(e.to_string()))?;
        s.push('\n');
        Ok(s)
    }

    /// One row per (fit, parameter). Exponentiated columns are empty unless requested.
    pub fn write_estimates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let header =
            ["estimator", "ratio_scale", "parameter", "estimate", "se", "ci_lower", "ci_upper", "exp_estimate", "exp_ci_lower", "exp_ci_upper"];
        w.write_record(header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(fmt_num).unwrap_or_default();
        for fit in &self.fits {
            for e in &fit.estimates {
                w.write_record([
                    fit.estimator.to_string(),
                    fmt_num(fit.ratio_scale),
                    e.name.clone(),
                    fmt_num(e.estimate),
                    fmt_num(e.se),
                    fmt_num(e.ci_lower),
                    fmt_num(e.ci_upper),
                    opt(e.exp_estimate),
                    opt(e.exp_ci_lower),
                    opt(e.exp_ci_upper),
                ])
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal form, so every digit of the f64 survives.
pub fn fmt_num(v: f64) -> String {
    format!("{v:?}")
}

fn csv_err(e: csv::Error) -> crate::SorError {
    crate::SorError::Io(std::io::Error::other(e.to_string()))
}
