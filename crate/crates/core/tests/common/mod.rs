//! Independent oracles shared by the property tests and the acceptance target.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use sor::auxiliary::HSpec;
use sor::data::{FrameSpec, LongitudinalDataset, ModelFrame};
use sor::design::{tilt_for_observation, DesignLevel, SamplingDesign};
use sor::family::{log_sample_density, sample_moments, FamilyKind, FamilySpec, TiltFunction};
use sor::quadrature::QuadratureConfig;
use sor::sorfit::{GeeProblem, WorkingCorrelation};

/// One family/tilt instance.
#[derive(Debug, Clone)]
pub struct TiltCase {
    pub kind: FamilyKind,
    pub theta: f64,
    pub phi: f64,
    pub y0: f64,
    pub tilt: TiltFunction,
}

impl TiltCase {
    pub fn family(&self) -> FamilySpec {
        FamilySpec::new(self.kind, Some(self.y0)).unwrap()
    }
}

pub fn random_h(rng: &mut impl Rng) -> HSpec {
    match rng.random_range(0..3) {
        0 => HSpec::identity(),
        1 => HSpec::absolute(),
        _ => HSpec::indicator(rng.random_range(0..3) as f64 + 0.5 * rng.random_range(0..2) as f64),
    }
}

pub fn random_kind(rng: &mut impl Rng) -> FamilyKind {
    [FamilyKind::Gaussian, FamilyKind::Poisson, FamilyKind::Bernoulli][rng.random_range(0..3)]
}

pub fn random_tilt_case(rng: &mut impl Rng) -> TiltCase {
    let kind = random_kind(rng);
    let (theta, phi, y0) = match kind {
        FamilyKind::Gaussian => (rng.random_range(-2.0..2.0), rng.random_range(0.2..3.0), rng.random_range(-1.0..1.0)),
        FamilyKind::Poisson => (rng.random_range(-1.0..2.5), 1.0, rng.random_range(0..3) as f64),
        FamilyKind::Bernoulli => (rng.random_range(-3.0..3.0), 1.0, rng.random_range(0..2) as f64),
    };
    let tilt = if rng.random_bool(0.25) {
        TiltFunction::Exponential { slope: rng.random_range(-1.0..1.0), y0 }
    } else {
        let h = Arc::new(random_h(rng));
        tilt_for_observation(
            rng.random_range(-3.0..1.0),
            rng.random_range(-1.5..1.5),
            &h,
            rng.random_range(0.05..30.0),
            y0,
        )
    };
    TiltCase { kind, theta, phi, y0, tilt }
}

/// log dF_P(y)/dF_P(y0), written out per family.
fn log_odds_p(kind: FamilyKind, y: f64, theta: f64, phi: f64, y0: f64) -> f64 {
    match kind {
        FamilyKind::Gaussian => theta * (y - y0) / phi - (y * y - y0 * y0) / (2.0 * phi),
        FamilyKind::Poisson => theta * (y - y0) - ln_fact(y) + ln_fact(y0),
        FamilyKind::Bernoulli => theta * (y - y0),
    }
}

fn ln_fact(y: f64) -> f64 {
    (2..=y as u64).map(|k| (k as f64).ln()).sum()
}

/// Composite Simpson; the endpoints take one-sided limits so that a jump at
/// a segment edge is evaluated from inside the segment.
fn simpson(a: f64, b: f64, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let h = (b - a) / n as f64;
    let eps = 1e-9 * (b - a);
    let mut s = f(a + eps) + f(b - eps);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Total mass of exp(log_sample_density), by composite Simpson split at the
/// tilt's breakpoints (Gaussian) or by direct summation (discrete families).
pub fn total_mass(c: &TiltCase) -> f64 {
    let q = QuadratureConfig::default();
    let fam = c.family();
    let log_norm = sample_moments(c.theta, c.phi, &fam, &c.tilt, &q).unwrap().log_normalizer;
    let dens = |y: f64| (log_odds_p(c.kind, y, c.theta, c.phi, c.y0) + c.tilt.log_ratio(y) - log_norm).exp();
    // The library density must agree pointwise with the written-out one.
    let probe = if c.kind == FamilyKind::Bernoulli { [0.0, 1.0] } else { [c.y0, c.y0 + 1.0] };
    for y in probe {
        let lib = log_sample_density(y, c.theta, c.phi, &fam, &c.tilt, &q).unwrap();
        assert!((lib - dens(y).ln()).abs() < 1e-9, "density mismatch at y = {y}");
    }
    match c.kind {
        FamilyKind::Gaussian => {
            let sd = c.phi.sqrt();
            let shift = match c.tilt {
                TiltFunction::Exponential { slope, .. } => slope * c.phi,
                _ => 0.0,
            };
            let (lo, hi) = (c.theta + shift - 16.0 * sd, c.theta + shift + 16.0 * sd);
            let mut cuts = vec![lo];
            cuts.extend(c.tilt.breakpoints().iter().copied().filter(|&b| b > lo && b < hi));
            cuts.push(hi);
            cuts.windows(2).map(|w| simpson(w[0], w[1], 4000, dens)).sum()
        }
        FamilyKind::Poisson => (0..600).map(|y| dens(y as f64)).sum(),
        FamilyKind::Bernoulli => dens(0.0) + dens(1.0),
    }
}

/// Relative error of the exponential-tilt moments against the closed forms
/// (Gaussian mean θ + aφ, variance φ; Poisson mean and variance λe^a).
pub fn exponential_tilt_error(kind: FamilyKind, theta: f64, phi: f64, a: f64) -> f64 {
    let y0 = if kind == FamilyKind::Gaussian { 0.3 } else { 0.0 };
    let fam = FamilySpec::new(kind, Some(y0)).unwrap();
    let m = sample_moments(theta, phi, &fam, &TiltFunction::Exponential { slope: a, y0 }, &QuadratureConfig::default()).unwrap();
    let (mu, var) = match kind {
        FamilyKind::Gaussian => (theta + a * phi, phi),
        FamilyKind::Poisson => ((theta + a).exp(), (theta + a).exp()),
        FamilyKind::Bernoulli => unreachable!(),
    };
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-300);
    // Gaussian means near 0 are compared on the sd scale.
    let mu_err = if kind == FamilyKind::Gaussian { (m.mu_s - mu).abs() / phi.sqrt().max(mu.abs()) } else { rel(m.mu_s, mu) };
    mu_err.max(rel(m.var_s, var))
}

/// A small frame built by hand: x = (1, x1), w1 = w2 = (1, w).
pub fn small_frame(rng: &mut impl Rng, kind: FamilyKind, n: usize, r: f64) -> ModelFrame {
    let y = (0..n)
        .map(|_| match kind {
            FamilyKind::Gaussian => rng.random_range(-2.0..2.0),
            FamilyKind::Poisson => rng.random_range(0..5) as f64,
            FamilyKind::Bernoulli => rng.random_range(0..2) as f64,
        })
        .collect::<Vec<f64>>();
    let x1: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { x1[i] });
    let wm = DMatrix::from_fn(n, 2, |i, k| if k == 0 { 1.0 } else { w[i] });
    ModelFrame {
        y,
        z: vec![0.0; n],
        x,
        x_names: vec!["1".into(), "x1".into()],
        w1: wm.clone(),
        w1_names: vec!["1".into(), "w".into()],
        w2: wm,
        w2_names: vec!["1".into(), "w".into()],
        r: vec![r; n],
        pi: None,
        offsets: (0..=n).collect(),
        subject_ids: (0..n).map(|i| format!("s{i}")).collect(),
        level: DesignLevel::Observation,
    }
}

pub struct JacobianCase {
    pub kind: FamilyKind,
    pub frame: ModelFrame,
    pub beta: DVector<f64>,
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    pub h: HSpec,
    pub phi: f64,
    pub y0: f64,
}

pub fn random_jacobian_case(rng: &mut impl Rng, r: f64) -> JacobianCase {
    let kind = random_kind(rng);
    let frame = small_frame(rng, kind, 3, r);
    let (beta, phi, y0) = match kind {
        FamilyKind::Gaussian => (
            DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]),
            rng.random_range(0.3..2.0),
            rng.random_range(-0.5..0.5),
        ),
        FamilyKind::Poisson => (DVector::from_vec(vec![rng.random_range(-0.5..1.5), rng.random_range(-0.5..0.5)]), 1.0, 0.0),
        FamilyKind::Bernoulli => (DVector::from_vec(vec![rng.random_range(-1.5..1.5), rng.random_range(-1.0..1.0)]), 1.0, 0.0),
    };
    JacobianCase {
        kind,
        frame,
        beta,
        gamma1: DVector::from_vec(vec![rng.random_range(-2.5..0.5), rng.random_range(-0.5..0.5)]),
        gamma2: DVector::from_vec(vec![rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5)]),
        h: random_h(rng),
        phi,
        y0,
    }
}

impl JacobianCase {
    fn problem(&self, g1: &DVector<f64>, g2: &DVector<f64>) -> GeeProblem<'_> {
        let fam = FamilySpec::new(self.kind, Some(self.y0)).unwrap();
        GeeProblem::tilted(&self.frame, fam, WorkingCorrelation::Independence, QuadratureConfig::default(), g1, g2, &self.h)
    }

    fn mu_s(&self, g: &DVector<f64>) -> Vec<f64> {
        let p1 = self.gamma1.len();
        let g1 = g.rows(0, p1).into_owned();
        let g2 = g.rows(p1, g.len() - p1).into_owned();
        self.problem(&g1, &g2).moments(&self.beta, self.phi).unwrap().iter().map(|m| m.mu_s).collect()
    }

    pub fn analytic(&self) -> DMatrix<f64> {
        self.problem(&self.gamma1, &self.gamma2).dmu_dgamma(&self.beta, self.phi).unwrap()
    }

    /// Richardson-extrapolated central differences of μ_S in γ.
    pub fn finite_difference(&self) -> DMatrix<f64> {
        let mut g = DVector::zeros(self.gamma1.len() + self.gamma2.len());
        g.rows_mut(0, self.gamma1.len()).copy_from(&self.gamma1);
        g.rows_mut(self.gamma1.len(), self.gamma2.len()).copy_from(&self.gamma2);
        let n = self.frame.n_obs();
        let mut out = DMatrix::zeros(n, g.len());
        let central = |k: usize, h: f64| {
            let (mut gp, mut gm) = (g.clone(), g.clone());
            gp[k] += h;
            gm[k] -= h;
            let (a, b) = (self.mu_s(&gp), self.mu_s(&gm));
            a.iter().zip(&b).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>()
        };
        for k in 0..g.len() {
            let (d1, d2) = (central(k, 2e-3), central(k, 1e-3));
            for i in 0..n {
                out[(i, k)] = (4.0 * d2[i] - d1[i]) / 3.0;
            }
        }
        out
    }

    /// max |analytic − FD| / max |analytic| (absolute when the Jacobian is tiny).
    pub fn relative_error(&self) -> f64 {
        let (a, fd) = (self.analytic(), self.finite_difference());
        (&a - &fd).amax() / a.amax().max(1e-3)
    }

    /// Relative error of the β score and (Gaussian) the φ score against
    /// central differences of the log-likelihood.
    pub fn score_error(&self) -> f64 {
        let prob = self.problem(&self.gamma1, &self.gamma2);
        let (u, _) = prob.estimating_function(&self.beta, self.phi, 0.0).unwrap();
        let ll = |b: &DVector<f64>, phi: f64| prob.loglik(b, phi).unwrap();
        let rich = |f: &dyn Fn(f64) -> f64| {
            let d = |h: f64| (f(h) - f(-h)) / (2.0 * h);
            (4.0 * d(5e-4) - d(1e-3)) / 3.0
        };
        let mut worst: f64 = 0.0;
        for k in 0..self.beta.len() {
            let fd = rich(&|h| {
                let mut b = self.beta.clone();
                b[k] += h;
                ll(&b, self.phi)
            });
            worst = worst.max((u[k] - fd).abs() / u[k].abs().max(1e-2));
        }
        if self.kind == FamilyKind::Gaussian {
            let s = prob.dispersion_score(&self.beta, self.phi).unwrap();
            let fd = rich(&|h| ll(&self.beta, self.phi + h));
            worst = worst.max((s - fd).abs() / s.abs().max(1e-2));
        }
        worst
    }
}

/// A Gaussian longitudinal dataset with `n` subjects of 2 to 5 visits.
pub fn gaussian_dataset(rng: &mut impl Rng, n: usize) -> LongitudinalDataset {
    let (mut ids, mut offsets, mut time, mut y, mut z, mut x1) = (vec![], vec![0], vec![], vec![], vec![], vec![]);
    for k in 0..n {
        let m = rng.random_range(2..=5);
        let xi = f64::from(u8::from(rng.random_bool(0.4)));
        let b: f64 = rng.random_range(-0.8..0.8);
        let zi = f64::from(u8::from(b + rng.random_range(-0.5..0.5) > 0.2));
        for t in 0..m {
            let yi = 0.5 + 0.7 * xi - 0.2 * t as f64 + b + rng.random_range(-1.5..1.5);
            time.push(t as f64);
            y.push(yi);
            z.push(zi);
            x1.push(xi);
        }
        ids.push(format!("s{k}"));
        offsets.push(y.len());
    }
    let cols = BTreeMap::from([("x1".to_string(), x1)]);
    LongitudinalDataset::from_columns(ids, offsets, time, y, z, cols).unwrap()
}

pub fn gaussian_spec() -> FrameSpec {
    let v = |s: &[&str]| s.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    FrameSpec { mean: v(&["1", "x1", "t"]), w1: v(&["1", "x1"]), w2: v(&["1", "x1"]) }
}

/// Ordinary least squares with the subject-clustered sandwich, by hand.
pub fn ols_oracle(frame: &ModelFrame) -> (DVector<f64>, f64, DMatrix<f64>) {
    let x = &frame.x;
    let y = DVector::from_column_slice(&frame.y);
    let xtx_inv = (x.transpose() * x).try_inverse().unwrap();
    let beta = &xtx_inv * x.transpose() * &y;
    let e = &y - x * &beta;
    let phi = e.norm_squared() / y.len() as f64;
    let p = x.ncols();
    let mut meat = DMatrix::zeros(p, p);
    for k in 0..frame.n_subjects() {
        let rows = frame.subject_rows(k);
        let mut s = DVector::zeros(p);
        for i in rows {
            s += x.row(i).transpose() * e[i];
        }
        meat += &s * s.transpose();
    }
    (beta, phi, &xtx_inv * meat * &xtx_inv)
}

pub fn unit_design() -> SamplingDesign {
    SamplingDesign::unit(DesignLevel::Subject)
}

/// Largest relative difference, with `floor` guarding values near zero.
pub fn max_rel(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor)).fold(0.0, f64::max)
}
