//! Fit configuration: the JSON file format plus inline overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::auxiliary::HSpec;
use crate::data::FrameSpec;
use crate::design::{DesignLevel, SamplingDesign};
use crate::error::{Result, SorError};
use crate::family::FamilyKind;
use crate::simlab::Estimator;
use crate::sorfit::{FitOptions, Tolerances, WorkingCorrelation};

/// The design block: ratios or absolute probabilities per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default = "default_level")]
    pub level: DesignLevel,
    #[serde(default)]
    pub strata: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<BTreeMap<String, [f64; 2]>>,
}

fn default_level() -> DesignLevel {
    DesignLevel::Subject
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { level: DesignLevel::Subject, strata: vec![], ratio: None, probs: None }
    }
}

impl DesignConfig {
    pub fn build(&self) -> Result<SamplingDesign> {
        match (&self.ratio, &self.probs) {
            (Some(_), Some(_)) => Err(SorError::config("design gives both 'ratio' and 'probs'; use one")),
            (Some(r), None) => SamplingDesign::from_ratios(self.level, self.strata.clone(), r),
            (None, Some(p)) => {
                let p = p.iter().map(|(k, v)| (k.clone(), (v[0], v[1]))).collect();
                SamplingDesign::from_probs(self.level, self.strata.clone(), &p)
            }
            (None, None) => {
                if self.strata.is_empty() {
                    Ok(SamplingDesign::unit(self.level))
                } else {
                    Err(SorError::config("design names stratum columns but gives no 'ratio' or 'probs'"))
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub family: FamilyKind,
    #[serde(default = "default_response")]
    pub response: String,
    #[serde(default = "default_id")]
    pub id: String,
    #[serde(default = "default_time")]
    pub time: String,
    /// Column holding the auxiliary indicator Z.
    #[serde(default = "default_aux")]
    pub aux: String,
    pub mean: Vec<String>,
    #[serde(default)]
    pub w1: Vec<String>,
    #[serde(default)]
    pub w2: Vec<String>,
    #[serde(default = "HSpec::identity")]
    pub h: HSpec,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub y0: Option<f64>,
    #[serde(default = "default_working")]
    pub working: WorkingCorrelation,
    #[serde(default)]
    pub no_interference: bool,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn default_response() -> String {
    "y".into()
}
fn default_id() -> String {
    "id".into()
}
fn default_time() -> String {
    "time".into()
}
fn default_aux() -> String {
    "z".into()
}
fn default_working() -> WorkingCorrelation {
    WorkingCorrelation::Independence
}
fn default_estimator() -> Estimator {
    Estimator::Sor
}

impl FitConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SorError::config(format!("cannot read config '{}': {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SorError::config(format!("invalid fit config: {e}")))
    }

    /// A minimal config when no file is given; inline flags fill it in.
    pub fn skeleton(family: FamilyKind) -> Self {
        Self {
            family,
            response: default_response(),
            id: default_id(),
            time: default_time(),
            aux: default_aux(),
            mean: vec!["1".into()],
            w1: vec![],
            w2: vec![],
            h: HSpec::identity(),
            design: DesignConfig::default(),
            y0: None,
            working: default_working(),
            no_interference: false,
            estimator: default_estimator(),
            tolerances: Tolerances::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.is_empty() {
            return Err(SorError::config("the mean model needs at least one column"));
        }
        if self.estimator == Estimator::Sor && self.w1.is_empty() && self.w2.is_empty() {
            return Err(SorError::config("the sor estimator needs auxiliary columns in 'w1' and/or 'w2'"));
        }
        if self.estimator == Estimator::Ipw && self.design.probs.is_none() {
            return Err(SorError::config(
                "estimator 'ipw' needs absolute sampling probabilities ('probs' in the design block)",
            ));
        }
        self.design.build().map(|_| ())
    }

    /// Every data column the fit reads besides id, time, response and Z.
    pub fn covariate_columns(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for c in self.mean.iter().chain(&self.w1).chain(&self.w2).chain(&self.design.strata) {
            let implicit = c == "1" || c.eq_ignore_ascii_case("intercept") || *c == self.time;
            if !implicit && !out.contains(c) {
                out.push(c.clone());
            }
        }
        out
    }

    pub fn frame_spec(&self) -> FrameSpec {
        let time_alias = |v: &Vec<String>| v.iter().map(|c| if *c == self.time { "time".into() } else { c.clone() }).collect();
        FrameSpec { mean: time_alias(&self.mean), w1: time_alias(&self.w1), w2: time_alias(&self.w2) }
    }

    pub fn fit_options(&self) -> FitOptions {
        let mut o = FitOptions::new(self.family);
        o.y0 = self.y0;
        o.working = self.working;
        o.no_interference = self.no_interference;
        o.h = self.h.clone();
        o.tol = self.tolerances.clone();
        o
    }
}

/// Parses `key=value;key=value` into ratios.
pub fn parse_ratio_flag(s: &str) -> Result<BTreeMap<String, f64>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| SorError::config(format!("ratio entry '{p}' is not key=value")))?;
            let v: f64 = v.trim().parse().map_err(|_| SorError::config(format!("ratio '{v}' is not numeric")))?;
            Ok((k.trim().to_string(), v))
        })
        .collect()
}

/// Parses `key=p1:p0;...` into probability pairs.
pub fn parse_probs_flag(s: &str) -> Result<BTreeMap<String, [f64; 2]>> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| SorError::config(format!("probs entry '{p}' is not key=p1:p0")))?;
            let (a, b) = v
                .split_once(':')
                .ok_or_else(|| SorError::config(format!("probs entry '{p}' is not key=p1:p0")))?;
            let num = |x: &str| x.trim().parse::<f64>().map_err(|_| SorError::config(format!("probability '{x}' is not numeric")));
            Ok((k.trim().to_string(), [num(a)?, num(b)?]))
        })
        .collect()
}

/// Parses `identity`, `abs`, `indicator:c`.
pub fn parse_h_flag(s: &str) -> Result<HSpec> {
    match s.split_once(':') {
        Some(("indicator", c)) => c
            .trim()
            .parse()
            .map(HSpec::indicator)
            .map_err(|_| SorError::config(format!("indicator threshold '{c}' is not numeric"))),
        None if s == "identity" => Ok(HSpec::identity()),
        None if s == "abs" || s == "absolute" => Ok(HSpec::absolute()),
        _ => Err(SorError::config(format!("unknown h '{s}'; use identity, abs or indicator:<c>"))),
    }
}

pub fn split_list(s: &str) -> Vec<String> {
    s.split(',').map(|c| c.trim().to_string()).filter(|c| !c.is_empty()).collect()
}
