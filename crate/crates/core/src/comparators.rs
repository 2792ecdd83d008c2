//! Reference estimators: naive GEE that ignores the design, and GEE with
//! inverse-probability weights 1/π(Z, X1).

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::ModelFrame;
use crate::error::{Result, SorError};
use crate::sorfit::{alternate, beta_names, robust_beta_covariance, FitOptions, GeeProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Naive,
    Ipw,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Naive => "naive",
            Method::Ipw => "ipw",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ComparatorFit {
    pub method: Method,
    pub beta: DVector<f64>,
    pub beta_names: Vec<String>,
    pub phi: f64,
    pub alpha: Option<f64>,
    /// Robust covariance of β̂, clustered by subject.
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub y0_used: f64,
    pub beta_score_norm: f64,
}

impl ComparatorFit {
    pub fn se_beta(&self) -> DVector<f64> {
        self.covariance.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn wald_ci(&self, k: usize) -> (f64, f64) {
        let se = self.se_beta()[k];
        (self.beta[k] - 1.96 * se, self.beta[k] + 1.96 * se)
    }
}

fn fit_with(frame: &ModelFrame, opts: &FitOptions, weights: Option<Vec<f64>>, method: Method) -> Result<ComparatorFit> {
    let family = opts.family_spec(frame)?;
    for (i, &y) in frame.y.iter().enumerate() {
        if !family.in_support(y) {
            return Err(SorError::domain(format!("row {}: response {y} is outside the {} support", i + 1, family.kind())));
        }
    }
    let mut problem = GeeProblem::untilted(frame, family, opts.working, opts.quad.clone());
    if let Some(w) = weights {
        problem = problem.with_weights(w);
    }
    let mean = alternate(&problem, None, &opts.tol)?;
    let covariance = robust_beta_covariance(&problem, &mean.beta, mean.phi, mean.alpha.unwrap_or(0.0))?;
    Ok(ComparatorFit {
        method,
        beta: mean.beta,
        beta_names: beta_names(frame),
        phi: mean.phi,
        alpha: mean.alpha,
        covariance,
        iterations: mean.iterations,
        converged: mean.converged,
        y0_used: family.y0(),
        beta_score_norm: mean.beta_score_norm,
    })
}

/// Standard GEE with a subject-clustered robust sandwich.
pub fn fit_naive(frame: &ModelFrame, opts: &FitOptions) -> Result<ComparatorFit> {
    fit_with(frame, opts, None, Method::Naive)
}

/// GEE with each residual weighted by 1/π(Z, X1).
///
/// φ and α use the same weights as ratio-form estimators, so rescaling every
/// weight by a constant leaves β̂ and its robust SEs unchanged.
pub fn fit_ipw(frame: &ModelFrame, opts: &FitOptions) -> Result<ComparatorFit> {
    let pi = frame.pi.as_ref().ok_or_else(|| {
        SorError::config("inverse-probability weighting needs absolute sampling probabilities; the design only gives ratios")
    })?;
    ipw_weights(pi).and_then(|w| fit_with(frame, opts, Some(w), Method::Ipw))
}

/// Fits with explicit weights; `fit_ipw` passes 1/π.
pub fn fit_weighted(frame: &ModelFrame, opts: &FitOptions, weights: Vec<f64>) -> Result<ComparatorFit> {
    if weights.len() != frame.n_obs() {
        return Err(SorError::config("one weight per observation is required"));
    }
    if weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
        return Err(SorError::config("weights must be positive and finite"));
    }
    fit_with(frame, opts, Some(weights), Method::Ipw)
}

fn ipw_weights(pi: &[f64]) -> Result<Vec<f64>> {
    pi.iter()
        .enumerate()
        .map(|(i, &p)| {
            if p > 0.0 && p <= 1.0 {
                Ok(1.0 / p)
            } else {
                Err(SorError::config(format!("row {}: sampling probability {p} is not in (0, 1]", i + 1)))
            }
        })
        .collect()
}
