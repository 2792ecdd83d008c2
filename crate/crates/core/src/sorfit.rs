//! The second offsetted regression: a GEE for β under the tilted sample law,
//! the dispersion score for φ, an exchangeable α, and the stacked sandwich.
//!
//! Working covariance convention: with `a_j = var_S(j)/φ = ∂μ_S/∂θ`, we use
//! `D = diag(a) X` and `V = φ · A^{1/2} C A^{1/2}`, so the diagonal of V is the
//! tilted variance in response units.

use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::auxiliary::{fit_aux, lambda_s, AuxOptions, AuxiliaryFit, HSpec};
use crate::data::ModelFrame;
use crate::design::{tilt_for_observation, DesignLevel, DesignTilt};
use crate::error::{Result, SorError};
use crate::family::{sample_moments, tilted_law, FamilyKind, FamilySpec, SampleMoments, TiltFunction};
use crate::quadrature::QuadratureConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WorkingCorrelation {
    Independence,
    Exchangeable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// max |Δβ| between Fisher-scoring iterates.
    pub beta: f64,
    /// |Δφ|/φ.
    pub phi: f64,
    /// max-norm of Σ U_i at the reported β.
    pub score: f64,
    pub max_beta_iter: usize,
    pub max_outer_iter: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { beta: 1e-8, phi: 1e-8, score: 1e-8, max_beta_iter: 50, max_outer_iter: 100 }
    }
}

/// Everything a β/φ/α fit needs besides the data.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub family: FamilyKind,
    /// Reference response; Gaussian fits default to the response median.
    pub y0: Option<f64>,
    pub working: WorkingCorrelation,
    pub no_interference: bool,
    pub h: HSpec,
    pub quad: QuadratureConfig,
    pub tol: Tolerances,
    pub aux: AuxOptions,
}

impl FitOptions {
    pub fn new(family: FamilyKind) -> Self {
        Self {
            family,
            y0: None,
            working: WorkingCorrelation::Independence,
            no_interference: false,
            h: HSpec::identity(),
            quad: QuadratureConfig::default(),
            tol: Tolerances::default(),
            aux: AuxOptions::default(),
        }
    }

    pub fn family_spec(&self, frame: &ModelFrame) -> Result<FamilySpec> {
        let y0 = match (self.family, self.y0) {
            (_, Some(v)) => Some(v),
            (FamilyKind::Gaussian, None) => Some(frame.response_median()),
            _ => None,
        };
        FamilySpec::new(self.family, y0)
    }
}

struct TiltSetup {
    lin1: Vec<f64>,
    lin2: Vec<f64>,
    h: Arc<HSpec>,
}

type MomentCache = Option<(DVector<f64>, f64, Rc<Vec<SampleMoments>>)>;

/// A mean-model estimating equation on one frame: tilted (SOR), untilted
/// (naive) or weighted (IPW).
pub struct GeeProblem<'a> {
    frame: &'a ModelFrame,
    family: FamilySpec,
    quad: QuadratureConfig,
    working: WorkingCorrelation,
    tilt: Option<TiltSetup>,
    weights: Option<Vec<f64>>,
    cache: RefCell<MomentCache>,
}

impl<'a> GeeProblem<'a> {
    /// Design ignored: μ_S = μ_P.
    pub fn untilted(
        frame: &'a ModelFrame,
        family: FamilySpec,
        working: WorkingCorrelation,
        quad: QuadratureConfig,
    ) -> Self {
        Self { frame, family, quad, working, tilt: None, weights: None, cache: RefCell::new(None) }
    }

    /// Tilted by the auxiliary model with coefficients (γ1, γ2).
    pub fn tilted(
        frame: &'a ModelFrame,
        family: FamilySpec,
        working: WorkingCorrelation,
        quad: QuadratureConfig,
        gamma1: &DVector<f64>,
        gamma2: &DVector<f64>,
        h: &HSpec,
    ) -> Self {
        let lin1 = (&frame.w1 * gamma1).iter().copied().collect();
        let lin2 = (&frame.w2 * gamma2).iter().copied().collect();
        let tilt = TiltSetup { lin1, lin2, h: Arc::new(h.clone()) };
        Self { frame, family, quad, working, tilt: Some(tilt), weights: None, cache: RefCell::new(None) }
    }

    /// Per-observation multipliers of the residual, as in inverse-probability weighting.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Self {
        self.weights = Some(weights);
        self
    }

    pub fn family(&self) -> &FamilySpec {
        &self.family
    }

    pub fn frame(&self) -> &ModelFrame {
        self.frame
    }

    pub fn n_beta(&self) -> usize {
        self.frame.x.ncols()
    }

    pub fn n_gamma(&self) -> usize {
        self.frame.w1.ncols() + self.frame.w2.ncols()
    }

    pub fn theta(&self, beta: &DVector<f64>, i: usize) -> f64 {
        (0..beta.len()).map(|k| self.frame.x[(i, k)] * beta[k]).sum()
    }

    pub fn tilt_for_row(&self, i: usize) -> TiltFunction {
        match &self.tilt {
            None => TiltFunction::Zero,
            Some(t) => tilt_for_observation(t.lin1[i], t.lin2[i], &t.h, self.frame.r[i], self.family.y0()),
        }
    }

    fn check_theta(&self, theta: f64, i: usize) -> Result<()> {
        let bad = !theta.is_finite() || (self.family.kind() == FamilyKind::Poisson && theta > 700.0);
        if bad {
            return Err(SorError::domain(format!(
                "row {}: linear predictor {theta} leaves the {} mean space",
                i + 1,
                self.family.kind()
            )));
        }
        Ok(())
    }

    /// Tilted moments of every row at (β, φ).
    pub fn moments(&self, beta: &DVector<f64>, phi: f64) -> Result<Rc<Vec<SampleMoments>>> {
        if let Some((b, p, m)) = self.cache.borrow().as_ref() {
            if b == beta && *p == phi {
                return Ok(Rc::clone(m));
            }
        }
        let n = self.frame.n_obs();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let theta = self.theta(beta, i);
            self.check_theta(theta, i)?;
            let tilt = self.tilt_for_row(i);
            let m = sample_moments(theta, phi, &self.family, &tilt, &self.quad)
                .map_err(|e| annotate(e, i))?;
            out.push(m);
        }
        let rc = Rc::new(out);
        *self.cache.borrow_mut() = Some((beta.clone(), phi, Rc::clone(&rc)));
        Ok(rc)
    }

    fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    /// Applies C⁻¹ of an exchangeable matrix to the columns of `m` in place.
    fn apply_c_inv(&self, alpha: f64, m: &mut DMatrix<f64>) {
        if self.working == WorkingCorrelation::Independence || alpha == 0.0 {
            return;
        }
        let n = m.nrows() as f64;
        let kappa = alpha / (1.0 + (n - 1.0) * alpha);
        let scale = 1.0 / (1.0 - alpha);
        for mut col in m.column_iter_mut() {
            let s: f64 = col.sum();
            for v in col.iter_mut() {
                *v = scale * (*v - kappa * s);
            }
        }
    }

    /// Per-subject pieces: (U_k, D'V⁻¹WD, rows v_j = a_j/sd_j · x_j, sd_j).
    fn subject_blocks(
        &self,
        k: usize,
        beta: &DVector<f64>,
        phi: f64,
        alpha: f64,
        mom: &[SampleMoments],
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let rows = self.frame.subject_rows(k);
        let m = rows.len();
        let p = beta.len();
        let mut v = DMatrix::zeros(m, p);
        let mut s = DMatrix::zeros(m, 1);
        for (j, i) in rows.clone().enumerate() {
            let var = mom[i].var_s;
            if !(var > 0.0 && var.is_finite()) {
                return Err(SorError::numeric(format!(
                    "subject '{}': working variance {var} is not positive at row {}",
                    self.frame.subject_ids[k],
                    i + 1
                )));
            }
            let sd = var.sqrt();
            let c = sd / phi;
            for q in 0..p {
                v[(j, q)] = c * self.frame.x[(i, q)];
            }
            s[(j, 0)] = self.weight(i) * (self.frame.y[i] - mom[i].mu_s) / sd;
        }
        let mut wv = v.clone();
        for (j, i) in rows.enumerate() {
            let w = self.weight(i);
            if w != 1.0 {
                wv.row_mut(j).scale_mut(w);
            }
        }
        self.apply_c_inv(alpha, &mut s);
        self.apply_c_inv(alpha, &mut wv);
        let u = v.transpose() * s.column(0);
        let info = v.transpose() * wv;
        Ok((u, info))
    }

    /// Σ U_i and I_UU = Σ D'V⁻¹D at (β, φ, α).
    pub fn estimating_function(
        &self,
        beta: &DVector<f64>,
        phi: f64,
        alpha: f64,
    ) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let mom = self.moments(beta, phi)?;
        let p = beta.len();
        let mut u = DVector::zeros(p);
        let mut info = DMatrix::zeros(p, p);
        for k in 0..self.frame.n_subjects() {
            let (uk, ik) = self.subject_blocks(k, beta, phi, alpha, &mom)?;
            u += uk;
            info += ik;
        }
        Ok((u, info))
    }

    /// Per-subject U_k.
    pub fn subject_scores(&self, beta: &DVector<f64>, phi: f64, alpha: f64) -> Result<Vec<DVector<f64>>> {
        let mom = self.moments(beta, phi)?;
        (0..self.frame.n_subjects())
            .map(|k| self.subject_blocks(k, beta, phi, alpha, &mom).map(|b| b.0))
            .collect()
    }

    /// Fisher scoring from `start` until max |Δβ| < tol and the score is below
    /// `tol.score`. Steps are halved while they fail to reduce U'I⁻¹U or leave
    /// the parameter space.
    pub fn solve_beta(
        &self,
        start: &DVector<f64>,
        phi: f64,
        alpha: f64,
        tol: &Tolerances,
    ) -> Result<(DVector<f64>, usize)> {
        const MAX_HALVINGS: usize = 30;
        let mut beta = start.clone();
        let mut trajectory: Vec<f64> = Vec::new();
        let (mut u, info) = self.estimating_function(&beta, phi, alpha)?;
        let mut step = newton_step(&info, &u)?;
        for it in 1..=tol.max_beta_iter {
            trajectory.extend(beta.iter());
            if step.amax() < tol.beta && u.amax() < tol.score {
                return Ok((beta, it));
            }
            let q0 = u.dot(&step);
            let mut t = 1.0;
            let mut halvings = 0;
            loop {
                let cand = &beta + &step * t;
                let trial = self
                    .estimating_function(&cand, phi, alpha)
                    .and_then(|(u2, i2)| newton_step(&i2, &u2).map(|s2| (u2, s2)));
                match trial {
                    Ok((u2, s2)) if u2.dot(&s2) <= q0 || halvings == MAX_HALVINGS => {
                        let moved = (&step * t).amax();
                        beta = cand;
                        u = u2;
                        step = s2;
                        if moved < tol.beta * 1e-6 {
                            // The score cannot be reduced further at working precision.
                            return Ok((beta, it));
                        }
                        break;
                    }
                    Ok(_) => {}
                    Err(_) if halvings < MAX_HALVINGS => {}
                    Err(e) => return Err(e),
                }
                t *= 0.5;
                halvings += 1;
            }
        }
        Err(SorError::Estimation {
            message: format!("β Fisher scoring did not converge in {} iterations", tol.max_beta_iter),
            iterations: tol.max_beta_iter,
            last_iterate: trajectory,
        })
    }

    /// d log L/dφ under working independence.
    ///
    /// Only Gaussian responses carry a free φ; there
    /// `c'(y;φ) = y²/(2φ²) − 1/(2φ)` and the score reduces to
    /// `φ⁻² Σ [(Y²/2 − θY) − E_S(y²/2 − θy)]`.
    pub fn dispersion_score(&self, beta: &DVector<f64>, phi: f64) -> Result<f64> {
        if self.family.kind() != FamilyKind::Gaussian {
            return Ok(0.0);
        }
        let mom = self.moments(beta, phi)?;
        let mut s = 0.0;
        for (i, m) in mom.iter().enumerate() {
            let theta = self.theta(beta, i);
            let y = self.frame.y[i];
            let obs = 0.5 * y * y - theta * y;
            let expct = 0.5 * (m.var_s + m.mu_s * m.mu_s) - theta * m.mu_s;
            s += self.weight(i) * (obs - expct);
        }
        Ok(s / (phi * phi))
    }

    /// Σ log dF_S(Y_ij) under working independence.
    pub fn loglik(&self, beta: &DVector<f64>, phi: f64) -> Result<f64> {
        let mom = self.moments(beta, phi)?;
        let y0 = self.family.y0();
        let mut ll = 0.0;
        for (i, m) in mom.iter().enumerate() {
            let theta = self.theta(beta, i);
            let y = self.frame.y[i];
            let lo = theta * (y - y0) / phi + self.family.log_c(y, phi) - self.family.log_c(y0, phi);
            ll += lo + self.tilt_for_row(i).log_ratio(y) - m.log_normalizer;
        }
        Ok(ll)
    }

    /// Root of the dispersion score. Works on φ²·score, which is linear in φ
    /// for an untilted Gaussian: secant steps until the root is bracketed
    /// (expanding by factors of two), then Illinois false position.
    pub fn solve_phi(&self, beta: &DVector<f64>, phi0: f64, tol: &Tolerances) -> Result<f64> {
        if self.family.has_fixed_dispersion() {
            return Ok(1.0);
        }
        const MAX_EVALS: usize = 200;
        let n = self.frame.n_obs() as f64;
        let (lo_lim, hi_lim) = (phi0 * 1e-6, phi0 * 1e6);
        let no_root = |last: f64| SorError::Estimation {
            message: "dispersion score has no sign change on [1e-6, 1e6] x initial phi".into(),
            iterations: 0,
            last_iterate: vec![last],
        };
        let mut p0 = phi0;
        let mut s0 = self.dispersion_score(beta, p0)? * p0 * p0;
        if s0 == 0.0 {
            return Ok(p0);
        }
        // First proposal: exact for an untilted Gaussian.
        let mut p1 = (p0 + 2.0 * s0 / n).clamp(p0 / 10.0, p0 * 10.0);
        if ((p1 - p0) / p0).abs() < tol.phi {
            return Ok(p1);
        }
        let mut s1 = self.dispersion_score(beta, p1)? * p1 * p1;
        // Unbracketed phase: the score is positive when φ is too small.
        let mut evals = 2;
        while s0.signum() == s1.signum() {
            if s1 == 0.0 {
                return Ok(p1);
            }
            let mut p2 = p1 - s1 * (p1 - p0) / (s1 - s0);
            if !(p2 > 0.0 && p2.is_finite()) || p2 > 10.0 * p1 || p2 < p1 / 10.0 || (p2 - p1).signum() != s1.signum() {
                p2 = if s1 > 0.0 { p1 * 2.0 } else { p1 / 2.0 };
            }
            if p2 < lo_lim || p2 > hi_lim || evals >= MAX_EVALS {
                return Err(no_root(p1));
            }
            if ((p2 - p1) / p1).abs() < tol.phi {
                return Ok(p2);
            }
            p0 = p1;
            s0 = s1;
            p1 = p2;
            s1 = self.dispersion_score(beta, p1)? * p1 * p1;
            evals += 1;
        }
        if s1 == 0.0 {
            return Ok(p1);
        }
        // Illinois false position on the bracket (a, b).
        let (mut a, mut sa, mut b, mut sb) = (p0, s0, p1, s1);
        let mut side = 0i8;
        while evals < MAX_EVALS {
            let c = (a * sb - b * sa) / (sb - sa);
            let step = (c - b).abs().min((c - a).abs());
            if step < tol.phi * c || (b - a).abs() < tol.phi * c {
                return Ok(c);
            }
            let sc = self.dispersion_score(beta, c)? * c * c;
            evals += 1;
            if sc == 0.0 {
                return Ok(c);
            }
            if sc.signum() == sb.signum() {
                b = c;
                sb = sc;
                if side == -1 {
                    sa *= 0.5;
                }
                side = -1;
            } else {
                a = c;
                sa = sc;
                if side == 1 {
                    sb *= 0.5;
                }
                side = 1;
            }
        }
        Err(SorError::Estimation {
            message: "dispersion solve did not converge".into(),
            iterations: evals,
            last_iterate: vec![b],
        })
    }

    /// Moment estimator of an exchangeable α from tilted Pearson residuals:
    /// the mean within-subject residual product over the mean squared
    /// residual, clamped to the valid range for the largest cluster. Under
    /// weights each subject counts with the weight of its first row.
    pub fn estimate_alpha(&self, beta: &DVector<f64>, phi: f64) -> Result<f64> {
        let mom = self.moments(beta, phi)?;
        let (mut num, mut pairs, mut sumsq, mut count) = (0.0, 0.0, 0.0, 0.0);
        for k in 0..self.frame.n_subjects() {
            let rows = self.frame.subject_rows(k);
            let w = self.weight(rows.start);
            let e: Vec<f64> = rows.map(|i| (self.frame.y[i] - mom[i].mu_s) / mom[i].var_s.sqrt()).collect();
            let sum: f64 = e.iter().sum();
            let sq: f64 = e.iter().map(|v| v * v).sum();
            let m = e.len() as f64;
            num += w * 0.5 * (sum * sum - sq);
            pairs += w * 0.5 * m * (m - 1.0);
            sumsq += w * sq;
            count += w * m;
        }
        if pairs == 0.0 {
            return Err(SorError::domain("no pairs: every subject has a single observation"));
        }
        if sumsq == 0.0 {
            return Err(SorError::numeric("all Pearson residuals are zero"));
        }
        let scale = sumsq / count;
        let num = num / scale;
        let nmax = self.frame.max_cluster_size() as f64;
        let lo = -1.0 / (nmax - 1.0) + 1e-6;
        let hi = 1.0 - 1e-6;
        Ok((num / pairs).clamp(lo, hi))
    }

    /// ∂μ_S/∂(γ1, γ2) for every row.
    ///
    /// Rows are `−(W1 · Cov_S(y, F), W2 · Cov_S(y, h(y)F))`; zero when r = 1.
    pub fn dmu_dgamma(&self, beta: &DVector<f64>, phi: f64) -> Result<DMatrix<f64>> {
        let (p1, p2) = (self.frame.w1.ncols(), self.frame.w2.ncols());
        let n = self.frame.n_obs();
        let mut jac = DMatrix::zeros(n, p1 + p2);
        let Some(t) = &self.tilt else {
            return Ok(jac);
        };
        for i in 0..n {
            let r = self.frame.r[i];
            if r == 1.0 {
                continue;
            }
            let theta = self.theta(beta, i);
            self.check_theta(theta, i)?;
            let dt = DesignTilt::new(t.lin1[i], t.lin2[i], Arc::clone(&t.h), r, self.family.y0());
            let (c1, c2) = jacobian_covariances(theta, phi, &self.family, dt, &self.quad).map_err(|e| annotate(e, i))?;
            for k in 0..p1 {
                jac[(i, k)] = -self.frame.w1[(i, k)] * c1;
            }
            for k in 0..p2 {
                jac[(i, p1 + k)] = -self.frame.w2[(i, k)] * c2;
            }
        }
        Ok(jac)
    }

    /// I_UT = Σ D'V⁻¹ ∂μ_S/∂γ'.
    pub fn info_ut(&self, beta: &DVector<f64>, phi: f64, alpha: f64, jac: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mom = self.moments(beta, phi)?;
        let p = beta.len();
        let q = jac.ncols();
        let mut out = DMatrix::zeros(p, q);
        for k in 0..self.frame.n_subjects() {
            let rows = self.frame.subject_rows(k);
            let m = rows.len();
            let mut v = DMatrix::zeros(m, p);
            let mut jw = DMatrix::zeros(m, q);
            for (j, i) in rows.enumerate() {
                let sd = mom[i].var_s.sqrt();
                for c in 0..p {
                    v[(j, c)] = sd / phi * self.frame.x[(i, c)];
                }
                let w = self.weight(i);
                for c in 0..q {
                    jw[(j, c)] = w * jac[(i, c)] / sd;
                }
            }
            self.apply_c_inv(alpha, &mut jw);
            out += v.transpose() * jw;
        }
        Ok(out)
    }
}

/// (Cov_S(y, F), Cov_S(y, h(y)F)) on the nodes of the tilted law.
fn jacobian_covariances(
    theta: f64,
    phi: f64,
    family: &FamilySpec,
    dt: DesignTilt,
    quad: &QuadratureConfig,
) -> Result<(f64, f64)> {
    let h = dt.h().clone();
    let f_of = {
        let dt = dt.clone();
        move |y: f64| dt.f(y)
    };
    let law = tilted_law(theta, phi, family, &TiltFunction::Design(dt), quad)?;
    let (mut ey, mut ef, mut eyf, mut ehf, mut eyhf) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for &(y, p) in &law.points {
        let f = f_of(y);
        let hf = h.eval(y) * f;
        ey += p * y;
        ef += p * f;
        eyf += p * y * f;
        ehf += p * hf;
        eyhf += p * y * hf;
    }
    Ok((eyf - ey * ef, eyhf - ey * ehf))
}

fn annotate(e: SorError, i: usize) -> SorError {
    match e {
        SorError::Domain(m) => SorError::Domain(format!("row {}: {m}", i + 1)),
        SorError::Numeric(m) => SorError::Numeric(format!("row {}: {m}", i + 1)),
        other => other,
    }
}

fn newton_step(info: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    let step = info
        .clone()
        .cholesky()
        .map(|c| c.solve(u))
        .or_else(|| info.clone().lu().solve(u))
        .ok_or_else(|| SorError::numeric("β information matrix is singular"))?;
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(SorError::numeric("non-finite Fisher-scoring step"))
    }
}

/// β, φ, α from the alternating solve.
#[derive(Debug, Clone)]
pub struct MeanFit {
    pub beta: DVector<f64>,
    pub phi: f64,
    pub alpha: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub beta_score_norm: f64,
}

/// Alternates β (Fisher scoring), φ (dispersion score) and α (moments) until
/// the three stop moving.
pub fn alternate(
    problem: &GeeProblem,
    start: Option<(DVector<f64>, f64)>,
    tol: &Tolerances,
) -> Result<MeanFit> {
    let exch = problem.working == WorkingCorrelation::Exchangeable;
    let (mut beta, mut phi) = match start {
        Some(s) => s,
        None => {
            let b = initial_beta(problem)?;
            let phi = if problem.family.has_fixed_dispersion() { 1.0 } else { initial_phi(problem) };
            (b, phi)
        }
    };
    let mut alpha = 0.0;
    let mut outer = 0;
    let mut converged = false;
    let mut total_iters = 0;
    while outer < tol.max_outer_iter {
        outer += 1;
        let phi_new = problem.solve_phi(&beta, phi, tol)?;
        let (b_new, it) = problem.solve_beta(&beta, phi_new, alpha, tol)?;
        total_iters += it;
        let alpha_new = if exch { problem.estimate_alpha(&b_new, phi_new)? } else { 0.0 };
        let db = (&b_new - &beta).amax();
        let dphi = ((phi_new - phi) / phi).abs();
        let dalpha = (alpha_new - alpha).abs();
        beta = b_new;
        phi = phi_new;
        alpha = alpha_new;
        if db < tol.beta && dphi < tol.phi && dalpha < tol.beta {
            converged = true;
            break;
        }
    }
    if !converged {
        let mut last = beta.iter().copied().collect::<Vec<_>>();
        last.push(phi);
        last.push(alpha);
        return Err(SorError::Estimation {
            message: "alternating β/φ/α iterations did not converge".into(),
            iterations: outer,
            last_iterate: last,
        });
    }
    let (beta, _) = problem.solve_beta(&beta, phi, alpha, tol)?;
    let (u, _) = problem.estimating_function(&beta, phi, alpha)?;
    Ok(MeanFit {
        beta,
        phi,
        alpha: exch.then_some(alpha),
        iterations: total_iters,
        converged,
        beta_score_norm: u.amax(),
    })
}

/// A starting β: the intercept at the link of the mean response, other terms 0.
fn initial_beta(problem: &GeeProblem) -> Result<DVector<f64>> {
    let frame = problem.frame;
    let p = frame.x.ncols();
    let mut beta = DVector::zeros(p);
    let ybar = frame.y.iter().sum::<f64>() / frame.n_obs() as f64;
    let link = match problem.family.kind() {
        FamilyKind::Gaussian => ybar,
        FamilyKind::Poisson => ybar.max(1e-3).ln(),
        FamilyKind::Bernoulli => {
            let p = ybar.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        }
    };
    // Least squares of the constant `link` on X gives the intercept-equivalent start.
    let target = DVector::from_element(frame.n_obs(), link);
    let xtx = frame.x.transpose() * &frame.x;
    let xty = frame.x.transpose() * target;
    match xtx.cholesky() {
        Some(c) => beta.copy_from(&c.solve(&xty)),
        None => {
            return Err(SorError::domain("mean-model design matrix is rank deficient"));
        }
    }
    Ok(beta)
}

fn initial_phi(problem: &GeeProblem) -> f64 {
    let f = problem.frame;
    let ybar = f.y.iter().sum::<f64>() / f.n_obs() as f64;
    let v = f.y.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / f.n_obs() as f64;
    if v > 0.0 {
        v
    } else {
        1.0
    }
}

/// Names of the mean-model coefficients.
pub fn beta_names(frame: &ModelFrame) -> Vec<String> {
    frame.x_names.iter().map(|n| if n == "1" { "(Intercept)".to_string() } else { n.clone() }).collect()
}

/// A complete SOR fit.
#[derive(Debug, Clone)]
pub struct SorFit {
    pub beta: DVector<f64>,
    pub beta_names: Vec<String>,
    pub aux: AuxiliaryFit,
    pub phi: f64,
    pub alpha: Option<f64>,
    /// Joint covariance of (γ̂, β̂), γ first.
    pub covariance: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub y0_used: f64,
    pub beta_score_norm: f64,
}

impl SorFit {
    pub fn gamma(&self) -> DVector<f64> {
        self.aux.gamma()
    }

    pub fn n_gamma(&self) -> usize {
        self.aux.gamma1.len() + self.aux.gamma2.len()
    }

    pub fn beta_covariance(&self) -> DMatrix<f64> {
        let q = self.n_gamma();
        let p = self.beta.len();
        self.covariance.view((q, q), (p, p)).into_owned()
    }

    pub fn gamma_covariance(&self) -> DMatrix<f64> {
        let q = self.n_gamma();
        self.covariance.view((0, 0), (q, q)).into_owned()
    }

    pub fn se_beta(&self) -> DVector<f64> {
        self.beta_covariance().diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn se_gamma(&self) -> DVector<f64> {
        self.gamma_covariance().diagonal().map(|v| v.max(0.0).sqrt())
    }

    /// 95% Wald interval for β_k.
    pub fn wald_ci(&self, k: usize) -> (f64, f64) {
        let se = self.se_beta()[k];
        (self.beta[k] - 1.96 * se, self.beta[k] + 1.96 * se)
    }
}

/// Checks the working-correlation choice against the design level.
pub fn check_working(frame: &ModelFrame, opts: &FitOptions) -> Result<()> {
    if opts.working == WorkingCorrelation::Exchangeable {
        if frame.level != DesignLevel::Subject {
            return Err(SorError::config(
                "exchangeable working correlation requires a subject-level design; observation-level fits use independence",
            ));
        }
        if !opts.no_interference {
            return Err(SorError::config(
                "exchangeable working correlation requires the no_interference flag for subject-level designs",
            ));
        }
    }
    Ok(())
}

/// Î⁻¹ Q̂ Î⁻ᵀ over the stacked (T, U) estimating functions.
pub fn sandwich_covariance(
    problem: &GeeProblem,
    aux: &AuxiliaryFit,
    beta: &DVector<f64>,
    phi: f64,
    alpha: f64,
) -> Result<DMatrix<f64>> {
    let frame = problem.frame;
    let q = aux.gamma1.len() + aux.gamma2.len();
    let p = beta.len();
    let jac = problem.dmu_dgamma(beta, phi)?;
    let (_, i_uu) = problem.estimating_function(beta, phi, alpha)?;
    let i_ut = problem.info_ut(beta, phi, alpha, &jac)?;
    let u_k = problem.subject_scores(beta, phi, alpha)?;

    let mut info = DMatrix::zeros(q + p, q + p);
    info.view_mut((0, 0), (q, q)).copy_from(&aux.info_tt);
    info.view_mut((q, 0), (p, q)).copy_from(&i_ut);
    info.view_mut((q, q), (p, p)).copy_from(&i_uu);

    let mut meat = DMatrix::zeros(q + p, q + p);
    let mut stacked = DVector::zeros(q + p);
    for (k, uk) in u_k.iter().enumerate() {
        stacked.fill(0.0);
        for i in frame.subject_rows(k) {
            let row = aux.score_row(frame, i);
            let mut top = stacked.rows_mut(0, q);
            top += row;
        }
        stacked.rows_mut(q, p).copy_from(uk);
        meat.ger(1.0, &stacked, &stacked, 1.0);
    }
    let inv = info
        .try_inverse()
        .ok_or_else(|| SorError::numeric("stacked information matrix is singular"))?;
    let cov = &inv * meat * inv.transpose();
    Ok(0.5 * (&cov + cov.transpose()))
}

/// Robust covariance of β alone: I_UU⁻¹ Q_UU I_UU⁻ᵀ.
pub fn robust_beta_covariance(problem: &GeeProblem, beta: &DVector<f64>, phi: f64, alpha: f64) -> Result<DMatrix<f64>> {
    let (_, info) = problem.estimating_function(beta, phi, alpha)?;
    let p = beta.len();
    let mut meat = DMatrix::zeros(p, p);
    for uk in problem.subject_scores(beta, phi, alpha)? {
        meat.ger(1.0, &uk, &uk, 1.0);
    }
    let inv = info.try_inverse().ok_or_else(|| SorError::numeric("β information matrix is singular"))?;
    let cov = &inv * meat * inv.transpose();
    Ok(0.5 * (&cov + cov.transpose()))
}

/// Fits the auxiliary model, then β/φ/α under the tilted law, then the sandwich.
pub fn fit_sor(frame: &ModelFrame, opts: &FitOptions) -> Result<SorFit> {
    check_working(frame, opts)?;
    let family = opts.family_spec(frame)?;
    for (i, &y) in frame.y.iter().enumerate() {
        if !family.in_support(y) {
            return Err(SorError::domain(format!("row {}: response {y} is outside the {} support", i + 1, family.kind())));
        }
    }
    let aux = fit_aux(frame, &opts.h, &opts.aux)?;

    // Start from the naive fit.
    let naive = GeeProblem::untilted(frame, family, WorkingCorrelation::Independence, opts.quad.clone());
    let start = alternate(&naive, None, &opts.tol)?;

    let problem = GeeProblem::tilted(frame, family, opts.working, opts.quad.clone(), &aux.gamma1, &aux.gamma2, &opts.h);
    let mean = alternate(&problem, Some((start.beta, start.phi)), &opts.tol)?;
    let alpha = mean.alpha.unwrap_or(0.0);
    let covariance = sandwich_covariance(&problem, &aux, &mean.beta, mean.phi, alpha)?;
    Ok(SorFit {
        beta: mean.beta,
        beta_names: beta_names(frame),
        aux,
        phi: mean.phi,
        alpha: mean.alpha,
        covariance,
        iterations: mean.iterations,
        converged: mean.converged,
        y0_used: family.y0(),
        beta_score_norm: mean.beta_score_norm,
    })
}

/// Per-row tilted moments at (β, γ, φ); the SOR mean model in isolation.
pub fn predict_sample_mean(problem: &GeeProblem, beta: &DVector<f64>, phi: f64) -> Result<Vec<SampleMoments>> {
    Ok(problem.moments(beta, phi)?.as_ref().clone())
}

/// λ_S of every row at the fitted γ.
pub fn fitted_lambda_s(frame: &ModelFrame, aux: &AuxiliaryFit) -> Vec<f64> {
    (0..frame.n_obs())
        .map(|i| {
            let (l1, l2) = aux.linear_parts(frame, i);
            lambda_s(l1, l2, aux.h.eval(frame.y[i]), frame.r[i])
        })
        .collect()
}
