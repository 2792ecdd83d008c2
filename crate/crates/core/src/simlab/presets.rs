//! Named scenario presets, scaled by default with a full-size variant.

use super::generators::{GeneratorSpec, ObservationGaussianParams, SubjectPoissonParams};
use super::runner::{Arm, Estimator, FitSpec, SimScenario};
use super::sampling::DesignKind;
use crate::auxiliary::HSpec;
use crate::design::StratumRestriction;
use crate::error::{Result, SorError};
use crate::family::FamilyKind;
use crate::sorfit::{Tolerances, WorkingCorrelation};

pub const PRESETS: [&str; 6] = ["table1_p15", "table1_p50", "table2", "table3", "table4_r12", "table4_r40"];

const DEFAULT_SEED: u64 = 20_140_101;

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn poisson_fit() -> FitSpec {
    FitSpec {
        family: FamilyKind::Poisson,
        mean: names(&["1", "x1", "t", "tx1"]),
        w1: names(&["1", "x1", "t", "tk2"]),
        w2: names(&["1", "x1", "t", "tk2"]),
        h: HSpec::indicator(1.0),
        y0: None,
        no_interference: true,
        tol: Tolerances::default(),
    }
}

fn gaussian_fit() -> FitSpec {
    FitSpec {
        family: FamilyKind::Gaussian,
        mean: names(&["1", "x1", "t", "tx1"]),
        w1: names(&["1", "x1", "t"]),
        w2: names(&["1", "x1", "t"]),
        h: HSpec::absolute(),
        y0: None,
        no_interference: false,
        tol: Tolerances::default(),
    }
}

/// (population subjects, target sample, replicates) of the subject-level tables.
fn subject_sizes(full: bool) -> (usize, usize, usize) {
    if full {
        (100_000, 500, 2000)
    } else {
        (20_000, 250, 500)
    }
}

fn subject_scenario(name: String, p_x1: f64, arms: Vec<Arm>, full: bool) -> SimScenario {
    let (n_pop, n, reps) = subject_sizes(full);
    SimScenario {
        name,
        generator: GeneratorSpec::SubjectPoisson(SubjectPoissonParams::standard(p_x1)),
        population_size: n_pop,
        target_n: n,
        ods_pi0: 0.11,
        fit: poisson_fit(),
        arms,
        replicates: reps,
        seed: DEFAULT_SEED,
    }
}

fn p_label(p: f64) -> &'static str {
    if p == 0.15 {
        "p15"
    } else {
        "p50"
    }
}

fn table1(p_x1: f64, full: bool) -> SimScenario {
    use DesignKind::*;
    use Estimator::*;
    let ex = WorkingCorrelation::Exchangeable;
    let arms = vec![
        Arm::new(Srs, Naive, ex),
        Arm::new(Es, Naive, ex),
        Arm::new(Avs, Naive, ex),
        Arm::new(Avs, Ipw, ex),
        Arm::new(Avs, Sor, ex),
        Arm::new(Eavs, Naive, ex),
        Arm::new(Eavs, Ipw, ex),
        Arm::new(Eavs, Sor, ex),
    ];
    subject_scenario(format!("table1_{}", p_label(p_x1)), p_x1, arms, full)
}

fn misspec_table(prefix: &str, p_x1: f64, restriction: Option<StratumRestriction>, full: bool) -> SimScenario {
    let ex = WorkingCorrelation::Exchangeable;
    let mut arms = Vec::new();
    for factor in [2.0 / 3.0, 1.5] {
        for design in [DesignKind::Avs, DesignKind::Eavs] {
            for est in [Estimator::Ipw, Estimator::Sor] {
                arms.push(Arm::new(design, est, ex).misspecified(factor, restriction.clone()));
            }
        }
    }
    subject_scenario(format!("{prefix}_{}", p_label(p_x1)), p_x1, arms, full)
}

fn table4(name: &str, p_x1: f64, beta_x1: f64, full: bool) -> SimScenario {
    let (n_pop, reps) = if full { (5000, 2000) } else { (2000, 500) };
    let ind = WorkingCorrelation::Independence;
    SimScenario {
        name: name.into(),
        generator: GeneratorSpec::ObservationGaussian(ObservationGaussianParams::standard(p_x1, beta_x1)),
        population_size: n_pop,
        target_n: 0,
        ods_pi0: 0.11,
        fit: gaussian_fit(),
        arms: vec![
            Arm::new(DesignKind::Srs, Estimator::Naive, WorkingCorrelation::Exchangeable),
            Arm::new(DesignKind::Ods, Estimator::Naive, ind),
            Arm::new(DesignKind::Ods, Estimator::Ipw, ind),
            Arm::new(DesignKind::Ods, Estimator::Sor, ind),
        ],
        replicates: reps,
        seed: DEFAULT_SEED,
    }
}

/// The scenarios of a named preset.
pub fn preset(name: &str, full: bool) -> Result<Vec<SimScenario>> {
    let x1_is_1 = || Some(StratumRestriction { column: "x1".into(), value: 1.0 });
    Ok(match name {
        "table1_p15" => vec![table1(0.15, full)],
        "table1_p50" => vec![table1(0.5, full)],
        "table2" => vec![misspec_table("table2", 0.15, None, full), misspec_table("table2", 0.5, None, full)],
        "table3" => vec![misspec_table("table3", 0.15, x1_is_1(), full), misspec_table("table3", 0.5, x1_is_1(), full)],
        "table4_r12" => vec![table4("table4_r12", 0.05, 0.5, full)],
        "table4_r40" => vec![table4("table4_r40", 0.1, 0.68, full)],
        other => {
            return Err(SorError::config(format!(
                "unknown preset '{other}'; available presets: {}",
                PRESETS.join(", ")
            )))
        }
    })
}
