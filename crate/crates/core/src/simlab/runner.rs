//! Scenario definition and replicate execution.

use std::collections::BTreeMap;
use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::generators::{Generator, GeneratorSpec};
use super::metrics::{percent_bias, summarize, ArmOutcome, MetricsRow, MetricsTable};
use super::sampling::{apply_design, design_probabilities, DesignKind, SamplingTargets};
use crate::auxiliary::HSpec;
use crate::comparators::{fit_ipw, fit_naive};
use crate::data::{FrameSpec, ModelFrame};
use crate::design::{misspecify, SamplingDesign, StratumRestriction};
use crate::error::{Result, SorError};
use crate::family::FamilyKind;
use crate::sorfit::{fit_sor, FitOptions, Tolerances, WorkingCorrelation};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Estimator {
    Naive,
    Ipw,
    Sor,
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Estimator::Naive => "naive",
            Estimator::Ipw => "ipw",
            Estimator::Sor => "sor",
        })
    }
}

/// Analysis-time ratio error: ratios times `factor`, optionally only where
/// the restriction holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Misspecification {
    pub factor: f64,
    #[serde(default)]
    pub restriction: Option<StratumRestriction>,
}

/// One (design, estimator) combination fitted in every replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arm {
    pub design: DesignKind,
    pub estimator: Estimator,
    pub working: WorkingCorrelation,
    #[serde(default)]
    pub misspec: Option<Misspecification>,
}

impl Arm {
    pub fn new(design: DesignKind, estimator: Estimator, working: WorkingCorrelation) -> Self {
        Self { design, estimator, working, misspec: None }
    }

    pub fn misspecified(mut self, factor: f64, restriction: Option<StratumRestriction>) -> Self {
        self.misspec = Some(Misspecification { factor, restriction });
        self
    }

    /// Design label used in metrics rows, e.g. `AVS` or `AVS ratio*1.5 x1=1`.
    pub fn design_label(&self) -> String {
        match &self.misspec {
            None => self.design.to_string(),
            Some(m) => {
                let mut s = format!("{} ratio*{}", self.design, short(m.factor));
                if let Some(r) = &m.restriction {
                    s.push_str(&format!(" {}={}", r.column, r.value));
                }
                s
            }
        }
    }
}

fn short(v: f64) -> String {
    let s = format!("{v:.4}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

/// How the sampled data are fitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitSpec {
    pub family: FamilyKind,
    pub mean: Vec<String>,
    pub w1: Vec<String>,
    pub w2: Vec<String>,
    pub h: HSpec,
    #[serde(default)]
    pub y0: Option<f64>,
    /// Covariates of the mean model are constant within subject.
    #[serde(default)]
    pub no_interference: bool,
    #[serde(default)]
    pub tol: Tolerances,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimScenario {
    pub name: String,
    pub generator: GeneratorSpec,
    /// Subjects in each generated population.
    pub population_size: usize,
    /// Expected sampled subjects for subject-level designs.
    #[serde(default)]
    pub target_n: usize,
    #[serde(default = "default_ods_pi0")]
    pub ods_pi0: f64,
    pub fit: FitSpec,
    pub arms: Vec<Arm>,
    pub replicates: usize,
    pub seed: u64,
}

fn default_ods_pi0() -> f64 {
    0.11
}

impl SimScenario {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(SorError::config("replicate count must be at least 1"));
        }
        if self.population_size == 0 {
            return Err(SorError::config("population_size must be positive"));
        }
        if self.arms.is_empty() {
            return Err(SorError::config(format!("scenario '{}' has no arms", self.name)));
        }
        if self.fit.mean.len() != 4 {
            return Err(SorError::config("the mean model must have the four generator coefficients"));
        }
        for a in &self.arms {
            if let Some(m) = &a.misspec {
                if !(m.factor > 0.0 && m.factor.is_finite()) {
                    return Err(SorError::config(format!("misspecification factor must be positive, got {}", m.factor)));
                }
            }
        }
        Ok(())
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.fit
            .mean
            .iter()
            .map(|n| if n == "1" { "(Intercept)".to_string() } else { n.clone() })
            .collect()
    }

    fn fit_options(&self, arm: &Arm) -> FitOptions {
        let mut o = FitOptions::new(self.fit.family);
        o.y0 = self.fit.y0;
        o.working = arm.working;
        o.no_interference = self.fit.no_interference;
        o.h = self.fit.h.clone();
        o.tol = self.fit.tol.clone();
        o
    }

    fn frame_spec(&self) -> FrameSpec {
        FrameSpec { mean: self.fit.mean.clone(), w1: self.fit.w1.clone(), w2: self.fit.w2.clone() }
    }
}

/// An independent generator for (master seed, replicate, purpose).
pub fn stream_rng(master: u64, replicate: u64, purpose: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(replicate.to_le_bytes());
    h.update(purpose.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

fn fit_arm(s: &SimScenario, arm: &Arm, sample: &crate::data::LongitudinalDataset, truth_design: &SamplingDesign) -> ArmOutcome {
    let run = || -> Result<(Vec<f64>, Vec<f64>)> {
        let design = match &arm.misspec {
            None => truth_design.clone(),
            Some(m) => misspecify(truth_design, m.factor, m.restriction.as_ref())?,
        };
        let frame = ModelFrame::build(sample, &s.frame_spec(), &design)?;
        let opts = s.fit_options(arm);
        let (beta, se) = match arm.estimator {
            Estimator::Naive => {
                let f = fit_naive(&frame, &opts)?;
                (f.beta.clone(), f.se_beta())
            }
            Estimator::Ipw => {
                let f = fit_ipw(&frame, &opts)?;
                (f.beta.clone(), f.se_beta())
            }
            Estimator::Sor => {
                let f = fit_sor(&frame, &opts)?;
                (f.beta.clone(), f.se_beta())
            }
        };
        if beta.iter().chain(se.iter()).any(|v| !v.is_finite()) {
            return Err(SorError::numeric("non-finite estimate or standard error"));
        }
        Ok((beta.iter().copied().collect(), se.iter().copied().collect()))
    };
    run().map_err(|e| e.to_string())
}

/// All arms of one replicate. Arms sharing a design share its sample.
pub fn run_replicate(s: &SimScenario, generator: &Generator, r: u64) -> Vec<ArmOutcome> {
    let pop = generator.generate(s.population_size, &mut stream_rng(s.seed, r, "population"));
    let targets = SamplingTargets { target_n: s.target_n, ods_pi0: s.ods_pi0 };
    let mut samples: BTreeMap<DesignKind, std::result::Result<_, String>> = BTreeMap::new();
    s.arms
        .iter()
        .map(|arm| {
            let entry = samples.entry(arm.design).or_insert_with(|| {
                let d = design_probabilities(&pop, arm.design, targets).map_err(|e| e.to_string())?;
                let mut rng = stream_rng(s.seed, r, &format!("design:{}", arm.design));
                let sample = apply_design(&pop, &d, &mut rng).map_err(|e| e.to_string())?;
                Ok((d, sample))
            });
            match entry {
                Ok((d, sample)) => fit_arm(s, arm, sample, d),
                Err(e) => Err(e.clone()),
            }
        })
        .collect()
}

/// Runs every replicate (in parallel on the current rayon pool) and
/// aggregates in replicate order.
pub fn run_scenario(s: &SimScenario) -> Result<MetricsTable> {
    s.validate()?;
    let generator = Generator::new(&s.generator)?;
    let outcomes: Vec<Vec<ArmOutcome>> = (0..s.replicates as u64)
        .into_par_iter()
        .map(|r| run_replicate(s, &generator, r))
        .collect();
    Ok(aggregate(s, &outcomes))
}

pub fn aggregate(s: &SimScenario, outcomes: &[Vec<ArmOutcome>]) -> MetricsTable {
    let truth = s.generator.beta();
    let names = s.parameter_names();
    let baseline = s
        .arms
        .iter()
        .position(|a| a.design == DesignKind::Srs && a.estimator == Estimator::Naive && a.misspec.is_none());
    let mut table = MetricsTable::default();
    let mut variances: Vec<Vec<f64>> = Vec::new();
    let mut pending = Vec::new();
    for (a, arm) in s.arms.iter().enumerate() {
        let mut est = vec![Vec::new(); names.len()];
        let mut ses = vec![Vec::new(); names.len()];
        let mut failed = 0;
        let mut first_error = None;
        for rep in outcomes {
            match &rep[a] {
                Ok((b, se)) => {
                    for k in 0..names.len() {
                        est[k].push(b[k]);
                        ses[k].push(se[k]);
                    }
                }
                Err(e) => {
                    failed += 1;
                    first_error.get_or_insert_with(|| e.clone());
                }
            }
        }
        if let Some(e) = first_error {
            table.failures.push((arm.design_label(), arm.estimator.to_string(), e));
        }
        let mut vars = Vec::new();
        for k in 0..names.len() {
            let (mean, var, cov) = if est[k].is_empty() {
                (f64::NAN, f64::NAN, f64::NAN)
            } else {
                summarize(&est[k], &ses[k], truth[k])
            };
            vars.push(var);
            pending.push((a, k, MetricsRow {
                scenario: s.name.clone(),
                design: arm.design_label(),
                estimator: arm.estimator.to_string(),
                parameter: names[k].clone(),
                truth: truth[k],
                mean_est: mean,
                pct_bias: percent_bias(mean, truth[k]),
                coverage: cov,
                emp_var: var,
                rel_eff: None,
                n_failed: failed,
            }));
        }
        variances.push(vars);
    }
    for (a, k, mut row) in pending {
        if let Some(b) = baseline {
            let re = variances[b][k] / variances[a][k];
            row.rel_eff = re.is_finite().then_some(re);
        }
        table.rows.push(row);
    }
    table
}
