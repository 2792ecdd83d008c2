//! Design samplers: probabilities per stratum and Bernoulli selection.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generators::Population;
use crate::data::LongitudinalDataset;
use crate::design::{DesignLevel, SamplingDesign};
use crate::error::{Result, SorError};

/// Subject-level designs: simple random, stratified on x1, stratified on Z,
/// stratified on both. Observation-level: random or outcome-dependent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignKind {
    Srs,
    Es,
    Avs,
    Eavs,
    Ods,
}

impl fmt::Display for DesignKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DesignKind::Srs => "SRS",
            DesignKind::Es => "ES",
            DesignKind::Avs => "AVS",
            DesignKind::Eavs => "EAVS",
            DesignKind::Ods => "ODS",
        })
    }
}

/// Sampling settings shared by every design of a scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingTargets {
    /// Expected number of sampled subjects (subject-level designs).
    pub target_n: usize,
    /// π0 of the outcome-dependent observation design; π1 = 1.
    pub ods_pi0: f64,
}

/// Subject-level x1 and Z, read from each subject's first row.
fn subject_values(pop: &Population) -> (Vec<f64>, Vec<f64>) {
    (0..pop.n_subjects())
        .map(|k| (pop.x1[pop.offsets[k]], pop.z[pop.offsets[k]]))
        .unzip()
}

fn stratum_prob(expected: f64, size: usize, label: &str) -> Result<f64> {
    if size == 0 {
        return Err(SorError::config(format!("stratum {label} is empty")));
    }
    let p = expected / size as f64;
    if p > 1.0 {
        return Err(SorError::config(format!(
            "stratum {label} has {size} units, fewer than the {expected} expected draws"
        )));
    }
    Ok(p)
}

/// The true sampling probabilities of `kind` for this population.
pub fn design_probabilities(pop: &Population, kind: DesignKind, targets: SamplingTargets) -> Result<SamplingDesign> {
    let one = |p: f64| BTreeMap::from([("*".to_string(), (p, p))]);
    match pop.level {
        DesignLevel::Subject => {
            let (x1, z) = subject_values(pop);
            let n = targets.target_n as f64;
            let count = |f: &dyn Fn(f64, f64) -> bool| x1.iter().zip(&z).filter(|(a, b)| f(**a, **b)).count();
            match kind {
                DesignKind::Srs => {
                    let p = stratum_prob(n, x1.len(), "of all subjects")?;
                    SamplingDesign::from_probs(DesignLevel::Subject, vec![], &one(p))
                }
                DesignKind::Es => {
                    let mut probs = BTreeMap::new();
                    for v in [0.0, 1.0] {
                        let p = stratum_prob(n / 2.0, count(&|a, _| a == v), &format!("x1={v}"))?;
                        probs.insert(format!("{v}"), (p, p));
                    }
                    SamplingDesign::from_probs(DesignLevel::Subject, vec!["x1".into()], &probs)
                }
                DesignKind::Avs => {
                    let p1 = stratum_prob(n / 2.0, count(&|_, b| b == 1.0), "Z=1")?;
                    let p0 = stratum_prob(n / 2.0, count(&|_, b| b == 0.0), "Z=0")?;
                    SamplingDesign::from_probs(DesignLevel::Subject, vec![], &BTreeMap::from([("*".to_string(), (p1, p0))]))
                }
                DesignKind::Eavs => {
                    let mut probs = BTreeMap::new();
                    for v in [0.0, 1.0] {
                        let p1 = stratum_prob(n / 4.0, count(&|a, b| a == v && b == 1.0), &format!("Z=1, x1={v}"))?;
                        let p0 = stratum_prob(n / 4.0, count(&|a, b| a == v && b == 0.0), &format!("Z=0, x1={v}"))?;
                        probs.insert(format!("{v}"), (p1, p0));
                    }
                    SamplingDesign::from_probs(DesignLevel::Subject, vec!["x1".into()], &probs)
                }
                DesignKind::Ods => Err(SorError::config("ODS is an observation-level design")),
            }
        }
        DesignLevel::Observation => {
            let pi0 = targets.ods_pi0;
            if !(pi0 > 0.0 && pi0 <= 1.0) {
                return Err(SorError::config(format!("ods_pi0 must lie in (0, 1], got {pi0}")));
            }
            match kind {
                DesignKind::Ods => SamplingDesign::from_probs(
                    DesignLevel::Observation,
                    vec![],
                    &BTreeMap::from([("*".to_string(), (1.0, pi0))]),
                ),
                DesignKind::Srs => {
                    let n1 = pop.z.iter().filter(|&&z| z == 1.0).count() as f64;
                    let n0 = pop.n_obs() as f64 - n1;
                    let p = (n1 + pi0 * n0) / pop.n_obs() as f64;
                    SamplingDesign::from_probs(DesignLevel::Observation, vec![], &one(p))
                }
                other => Err(SorError::config(format!("{other} is a subject-level design"))),
            }
        }
    }
}

/// Independent Bernoulli selection of subjects or observations.
pub fn apply_design<R: Rng + ?Sized>(pop: &Population, design: &SamplingDesign, rng: &mut R) -> Result<LongitudinalDataset> {
    let cols: Vec<&[f64]> = design
        .strata_columns
        .iter()
        .map(|c| match c.as_str() {
            "x1" => Ok(pop.x1.as_slice()),
            other => Err(SorError::config(format!("generated populations cannot stratify on '{other}'"))),
        })
        .collect::<Result<_>>()?;
    let prob = |i: usize| -> Result<f64> {
        let vals: Vec<f64> = cols.iter().map(|c| c[i]).collect();
        let s = design.stratum_for(&vals)?;
        let (p1, p0) = s.probs.ok_or_else(|| SorError::config("sampling needs absolute probabilities"))?;
        Ok(if pop.z[i] == 1.0 { p1 } else { p0 })
    };
    let mut keep = vec![false; pop.n_obs()];
    match design.level {
        DesignLevel::Subject => {
            for k in 0..pop.n_subjects() {
                let rows = pop.offsets[k]..pop.offsets[k + 1];
                let take = rng.random::<f64>() < prob(rows.start)?;
                keep[rows].iter_mut().for_each(|v| *v = take);
            }
        }
        DesignLevel::Observation => {
            for (i, v) in keep.iter_mut().enumerate() {
                *v = rng.random::<f64>() < prob(i)?;
            }
        }
    }
    pop.subset(&keep)
}
