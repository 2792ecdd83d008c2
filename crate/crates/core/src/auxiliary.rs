//! The auxiliary model: an offsetted logistic regression of Z on
//! `(W1, h(Y)·W2)` with offset `log r`.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

use crate::data::ModelFrame;
use crate::error::{Result, SorError};
use crate::family::expit;

#[derive(Debug, Clone, PartialEq)]
pub enum HKind {
    Identity,
    Absolute,
    /// 1{y ≥ c}.
    Indicator(f64),
    /// Piecewise linear through `(knots, values)`, constant beyond the ends.
    Table { knots: Vec<f64>, values: Vec<f64> },
}

/// The transform h(·) multiplying W2 in the auxiliary model.
#[derive(Debug, Clone, PartialEq)]
pub struct HSpec {
    kind: HKind,
    breakpoints: Vec<f64>,
}

impl Default for HSpec {
    fn default() -> Self {
        Self::identity()
    }
}

impl HSpec {
    pub fn identity() -> Self {
        Self { kind: HKind::Identity, breakpoints: vec![] }
    }

    pub fn absolute() -> Self {
        Self { kind: HKind::Absolute, breakpoints: vec![0.0] }
    }

    pub fn indicator(c: f64) -> Self {
        Self { kind: HKind::Indicator(c), breakpoints: vec![c] }
    }

    pub fn table(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(SorError::config("h table needs at least one knot"));
        }
        if points.iter().any(|(k, v)| !k.is_finite() || !v.is_finite()) {
            return Err(SorError::config("h table entries must be finite"));
        }
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(SorError::config("h table knots must be strictly increasing"));
        }
        let (knots, values): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();
        Ok(Self { breakpoints: knots.clone(), kind: HKind::Table { knots, values } })
    }

    pub fn kind(&self) -> &HKind {
        &self.kind
    }

    /// Points where h is not differentiable.
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    #[inline]
    pub fn eval(&self, y: f64) -> f64 {
        match &self.kind {
            HKind::Identity => y,
            HKind::Absolute => y.abs(),
            HKind::Indicator(c) => {
                if y >= *c {
                    1.0
                } else {
                    0.0
                }
            }
            HKind::Table { knots, values } => {
                if y <= knots[0] {
                    return values[0];
                }
                let last = knots.len() - 1;
                if y >= knots[last] {
                    return values[last];
                }
                let k = knots.partition_point(|&x| x <= y);
                let (x0, x1) = (knots[k - 1], knots[k]);
                let (v0, v1) = (values[k - 1], values[k]);
                v0 + (v1 - v0) * (y - x0) / (x1 - x0)
            }
        }
    }

    /// Scaled copy with `h_c(y) = h(y / c)`; used when responses are rescaled by c.
    pub fn rescaled(&self, c: f64) -> Self {
        match &self.kind {
            HKind::Identity | HKind::Absolute => self.clone(),
            HKind::Indicator(t) => Self::indicator(t * c),
            HKind::Table { knots, values } => {
                Self::table(knots.iter().map(|k| k * c).zip(values.iter().copied()).collect())
                    .expect("rescaling keeps knots sorted")
            }
        }
    }
}

impl fmt::Display for HSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            HKind::Identity => write!(f, "identity"),
            HKind::Absolute => write!(f, "abs"),
            HKind::Indicator(c) => write!(f, "indicator({c})"),
            HKind::Table { knots, .. } => write!(f, "table({} knots)", knots.len()),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum HRepr {
    Name(String),
    Indicator { indicator: f64 },
    Table { table: Vec<(f64, f64)> },
}

impl Serialize for HSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let repr = match &self.kind {
            HKind::Identity => HRepr::Name("identity".into()),
            HKind::Absolute => HRepr::Name("abs".into()),
            HKind::Indicator(c) => HRepr::Indicator { indicator: *c },
            HKind::Table { knots, values } => HRepr::Table {
                table: knots.iter().copied().zip(values.iter().copied()).collect(),
            },
        };
        repr.serialize(s)
    }
}

impl<'de> Deserialize<'de> for HSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match HRepr::deserialize(d)? {
            HRepr::Name(n) => match n.as_str() {
                "identity" => Ok(HSpec::identity()),
                "abs" | "absolute" => Ok(HSpec::absolute()),
                other => Err(de::Error::custom(format!("unknown h '{other}'"))),
            },
            HRepr::Indicator { indicator } => Ok(HSpec::indicator(indicator)),
            HRepr::Table { table } => HSpec::table(table).map_err(de::Error::custom),
        }
    }
}

/// `h_eval` in function form.
pub fn h_eval(h: &HSpec, y: f64) -> f64 {
    h.eval(y)
}

/// Offsetted sample-scale probability λ_S = expit(W1'γ1 + h(y)W2'γ2 + log r).
pub fn lambda_s(lin1: f64, lin2: f64, hy: f64, r: f64) -> f64 {
    expit(lin1 + hy * lin2 + r.ln())
}

/// Population-scale λ_P from a sample-scale λ_S: odds(λ_P) = odds(λ_S)/r.
pub fn lambda_p_from_s(lambda_s: f64, r: f64) -> f64 {
    expit(logit_precise(lambda_s) - r.ln())
}

/// Sample-scale λ_S from a population-scale λ_P: odds(λ_S) = odds(λ_P)·r.
pub fn lambda_s_from_p(lambda_p: f64, r: f64) -> f64 {
    expit(logit_precise(lambda_p) + r.ln())
}

/// log odds that keeps full relative precision in 1 − p for p near one.
fn logit_precise(p: f64) -> f64 {
    if p < 0.5 {
        p.ln() - (-p).ln_1p()
    } else {
        let q = 1.0 - p;
        (-q).ln_1p() - q.ln()
    }
}

/// Fitted auxiliary model.
#[derive(Debug, Clone)]
pub struct AuxiliaryFit {
    pub w1_names: Vec<String>,
    pub w2_names: Vec<String>,
    pub h: HSpec,
    pub gamma1: DVector<f64>,
    pub gamma2: DVector<f64>,
    /// Σ G'G·λ_S(1−λ_S) at γ̂.
    pub info_tt: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub score_norm: f64,
}

impl AuxiliaryFit {
    pub fn gamma(&self) -> DVector<f64> {
        let mut g = DVector::zeros(self.gamma1.len() + self.gamma2.len());
        g.rows_mut(0, self.gamma1.len()).copy_from(&self.gamma1);
        g.rows_mut(self.gamma1.len(), self.gamma2.len()).copy_from(&self.gamma2);
        g
    }

    pub fn names(&self) -> Vec<String> {
        self.w1_names
            .iter()
            .map(|n| format!("w1:{n}"))
            .chain(self.w2_names.iter().map(|n| format!("w2:{n}")))
            .collect()
    }

    /// (W1'γ1, W2'γ2) for one row of the frame.
    pub fn linear_parts(&self, frame: &ModelFrame, row: usize) -> (f64, f64) {
        linear_parts(frame, row, &self.gamma1, &self.gamma2)
    }

    /// Per-row contribution to Σ T_i: (W1, h(y)W2)(Z − λ_S).
    pub fn score_row(&self, frame: &ModelFrame, row: usize) -> DVector<f64> {
        let mut g = DVector::zeros(self.gamma1.len() + self.gamma2.len());
        let (l1, l2) = self.linear_parts(frame, row);
        let hy = self.h.eval(frame.y[row]);
        let resid = frame.z[row] - lambda_s(l1, l2, hy, frame.r[row]);
        aux_row(frame, row, hy, &mut g);
        g *= resid;
        g
    }
}

fn linear_parts(frame: &ModelFrame, row: usize, g1: &DVector<f64>, g2: &DVector<f64>) -> (f64, f64) {
    let l1 = (0..g1.len()).map(|k| frame.w1[(row, k)] * g1[k]).sum();
    let l2 = (0..g2.len()).map(|k| frame.w2[(row, k)] * g2[k]).sum();
    (l1, l2)
}

fn aux_row(frame: &ModelFrame, row: usize, hy: f64, out: &mut DVector<f64>) {
    let p1 = frame.w1.ncols();
    for k in 0..p1 {
        out[k] = frame.w1[(row, k)];
    }
    for k in 0..frame.w2.ncols() {
        out[p1 + k] = hy * frame.w2[(row, k)];
    }
}

/// Aux design matrix G with rows (W1, h(y)W2).
pub fn aux_design(frame: &ModelFrame, h: &HSpec) -> DMatrix<f64> {
    let (p1, p2) = (frame.w1.ncols(), frame.w2.ncols());
    let n = frame.n_obs();
    DMatrix::from_fn(n, p1 + p2, |i, k| {
        if k < p1 {
            frame.w1[(i, k)]
        } else {
            h.eval(frame.y[i]) * frame.w2[(i, k - p1)]
        }
    })
}

/// Names of columns that are (numerically) linear combinations of earlier ones.
pub fn collinear_columns(g: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut bad = Vec::new();
    for (k, name) in names.iter().enumerate() {
        let mut v = g.column(k).into_owned();
        let norm0 = v.norm();
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        // Second pass for numerical orthogonality.
        for b in &basis {
            let proj = b.dot(&v);
            v.axpy(-proj, b, 1.0);
        }
        let norm = v.norm();
        if norm0 == 0.0 || norm <= 1e-9 * norm0.max(1.0) {
            bad.push(name.clone());
        } else {
            basis.push(v / norm);
        }
    }
    bad
}

/// Settings for the Newton solve of the auxiliary score.
#[derive(Debug, Clone)]
pub struct AuxOptions {
    pub max_iter: usize,
    pub max_halvings: usize,
    pub tol: f64,
}

impl Default for AuxOptions {
    fn default() -> Self {
        Self { max_iter: 100, max_halvings: 20, tol: 1e-10 }
    }
}

/// Fits λ_S by Newton–Raphson with step-halving, starting from γ = 0.
pub fn fit_aux(frame: &ModelFrame, h: &HSpec, opts: &AuxOptions) -> Result<AuxiliaryFit> {
    frame.check_z_constant_within_subject()?;
    let g = aux_design(frame, h);
    let names: Vec<String> = frame
        .w1_names
        .iter()
        .map(|n| format!("w1:{n}"))
        .chain(frame.w2_names.iter().map(|n| format!("w2:{n}")))
        .collect();
    let bad = collinear_columns(&g, &names);
    if !bad.is_empty() {
        return Err(SorError::domain(format!(
            "auxiliary design is rank deficient; collinear columns: {}",
            bad.join(", ")
        )));
    }
    let n = frame.n_obs();
    let p = g.ncols();
    let offset: Vec<f64> = frame.r.iter().map(|r| r.ln()).collect();

    // Returns the score, the information and the log-likelihood.
    let eval = |gamma: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>, f64) {
        let eta = &g * gamma;
        let mut score = DVector::zeros(p);
        let mut wts = DVector::zeros(n);
        let mut ll = 0.0;
        for i in 0..n {
            let e = eta[i] + offset[i];
            ll += frame.z[i] * e - if e > 0.0 { e + (-e).exp().ln_1p() } else { e.exp().ln_1p() };
            let lam = expit(e);
            let resid = frame.z[i] - lam;
            score.axpy(resid, &g.row(i).transpose(), 1.0);
            wts[i] = lam * (1.0 - lam);
        }
        let mut gw = g.clone();
        for i in 0..n {
            let w = wts[i];
            gw.row_mut(i).scale_mut(w);
        }
        (score, g.transpose() * gw, ll)
    };

    let mut gamma = DVector::zeros(p);
    let (mut score, mut info, mut ll) = eval(&gamma);
    let mut norm = score.amax();
    let mut iterations = 0;
    let mut converged = norm < opts.tol;
    while !converged && iterations < opts.max_iter {
        iterations += 1;
        let step = match info.clone().cholesky() {
            Some(ch) => ch.solve(&score),
            None => {
                return Err(SorError::Estimation {
                    message: "auxiliary information matrix is singular (possible separation)".into(),
                    iterations,
                    last_iterate: gamma.iter().copied().collect(),
                })
            }
        };
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..=opts.max_halvings {
            let cand = &gamma + &step * t;
            let (s, i, cll) = eval(&cand);
            let cn = s.amax();
            // The log-likelihood is concave, so a Newton step scaled small enough
            // always raises it; ties at the roundoff floor fall back to the score norm.
            let tie = cll >= ll - 1e-12 * ll.abs().max(1.0) && cn < norm;
            if cn.is_finite() && (cll > ll || tie) {
                gamma = cand;
                score = s;
                info = i;
                ll = cll;
                norm = cn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if norm < opts.tol {
            converged = true;
        } else if !accepted {
            // No halving reduces the score: accept if we are at the roundoff floor.
            let floor = 1e-12 * (n as f64) * g.amax().max(1.0);
            if norm < opts.tol.max(floor) * 100.0 {
                converged = true;
            }
            break;
        }
    }
    if !converged {
        return Err(SorError::Estimation {
            message: format!("auxiliary Newton solve did not converge (score max-norm {norm:.3e})"),
            iterations,
            last_iterate: gamma.iter().copied().collect(),
        });
    }
    let p1 = frame.w1.ncols();
    Ok(AuxiliaryFit {
        w1_names: frame.w1_names.clone(),
        w2_names: frame.w2_names.clone(),
        h: h.clone(),
        gamma1: gamma.rows(0, p1).into_owned(),
        gamma2: gamma.rows(p1, p - p1).into_owned(),
        info_tt: info,
        iterations,
        converged,
        score_norm: norm,
    })
}

/// Σ_i T_i(γ) at an arbitrary γ; used by derivative checks.
pub fn aux_score(frame: &ModelFrame, h: &HSpec, gamma: &DVector<f64>) -> DVector<f64> {
    let g = aux_design(frame, h);
    let eta = &g * gamma;
    let mut score = DVector::zeros(g.ncols());
    for i in 0..frame.n_obs() {
        let lam = expit(eta[i] + frame.r[i].ln());
        score.axpy(frame.z[i] - lam, &g.row(i).transpose(), 1.0);
    }
    score
}
