//! Exponential-family responses in odds-model form.
//!
//! A population density `f(y) = exp{[θy − b(θ)]/φ + c(y; φ)}` is represented by
//! its odds against a reference value `y0`,
//!
//! ```text
//! odds_P(y) = exp{θ(y − y0)/φ + c(y; φ) − c(y0; φ)},
//! ```
//!
//! and a biased sample multiplies those odds by a response-dependent sampling
//! ratio `ρ(y)/ρ(y0)`. The tilted law stays in the exponential family with the
//! same θ; only its reference measure changes. Everything in this module is a
//! pure function of its inputs.

use std::fmt;
use std::sync::{Arc, OnceLock};

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::design::DesignTilt;
use crate::error::{Result, SorError};
use crate::quadrature::{gl_rule, QuadratureConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Gaussian,
    Poisson,
    Bernoulli,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    RealLine,
    NonNegativeIntegers,
    Binary,
}

/// A family together with its reference response value `y0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilySpec {
    kind: FamilyKind,
    y0: f64,
}

impl FamilySpec {
    /// Builds a family, defaulting `y0` to 0 for the discrete families.
    ///
    /// Gaussian families have no default; callers freeze one (usually the
    /// sample median of the observed responses) before fitting.
    pub fn new(kind: FamilyKind, y0: Option<f64>) -> Result<Self> {
        let y0 = match (kind, y0) {
            (_, Some(v)) => v,
            (FamilyKind::Poisson | FamilyKind::Bernoulli, None) => 0.0,
            (FamilyKind::Gaussian, None) => {
                return Err(SorError::config("a Gaussian family needs an explicit y0"))
            }
        };
        let spec = Self { kind, y0 };
        if !spec.in_support(y0) {
            return Err(SorError::domain(format!(
                "reference value y0 = {y0} is outside the {} support",
                kind.name()
            )));
        }
        Ok(spec)
    }

    pub fn gaussian(y0: f64) -> Self {
        Self::new(FamilyKind::Gaussian, Some(y0)).expect("finite y0")
    }

    pub fn poisson() -> Self {
        Self { kind: FamilyKind::Poisson, y0: 0.0 }
    }

    pub fn bernoulli() -> Self {
        Self { kind: FamilyKind::Bernoulli, y0: 0.0 }
    }

    pub fn kind(&self) -> FamilyKind {
        self.kind
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn with_y0(self, y0: f64) -> Result<Self> {
        Self::new(self.kind, Some(y0))
    }

    pub fn support(&self) -> Support {
        match self.kind {
            FamilyKind::Gaussian => Support::RealLine,
            FamilyKind::Poisson => Support::NonNegativeIntegers,
            FamilyKind::Bernoulli => Support::Binary,
        }
    }

    pub fn in_support(&self, y: f64) -> bool {
        match self.support() {
            Support::RealLine => y.is_finite(),
            Support::NonNegativeIntegers => y >= 0.0 && y.fract() == 0.0 && y.is_finite(),
            Support::Binary => y == 0.0 || y == 1.0,
        }
    }

    /// Poisson and Bernoulli responses carry no free dispersion.
    pub fn has_fixed_dispersion(&self) -> bool {
        !matches!(self.kind, FamilyKind::Gaussian)
    }

    /// Cumulant function b(θ).
    pub fn cumulant(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 0.5 * theta * theta,
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Bernoulli => softplus(theta),
        }
    }

    /// Mean map b'(θ).
    pub fn mean(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => theta,
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Bernoulli => expit(theta),
        }
    }

    /// Variance function b''(θ).
    pub fn variance_function(&self, theta: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => 1.0,
            FamilyKind::Poisson => theta.exp(),
            FamilyKind::Bernoulli => {
                let p = expit(theta);
                p * (1.0 - p)
            }
        }
    }

    /// c(y; φ).
    pub fn log_c(&self, y: f64, phi: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => {
                -y * y / (2.0 * phi) - 0.5 * (2.0 * std::f64::consts::PI * phi).ln()
            }
            FamilyKind::Poisson => -ln_factorial(y as u64),
            FamilyKind::Bernoulli => 0.0,
        }
    }

    /// ∂c(y; φ)/∂φ.
    pub fn dlog_c_dphi(&self, y: f64, phi: f64) -> f64 {
        match self.kind {
            FamilyKind::Gaussian => y * y / (2.0 * phi * phi) - 0.5 / phi,
            FamilyKind::Poisson | FamilyKind::Bernoulli => 0.0,
        }
    }

    fn check_phi(&self, phi: f64) -> Result<()> {
        if !(phi > 0.0 && phi.is_finite()) {
            return Err(SorError::domain(format!("dispersion must be positive, got {phi}")));
        }
        if self.has_fixed_dispersion() && phi != 1.0 {
            return Err(SorError::domain(format!(
                "the {} family has dispersion fixed at 1, got {phi}",
                self.kind.name()
            )));
        }
        Ok(())
    }

    fn check_support(&self, y: f64) -> Result<()> {
        if self.in_support(y) {
            Ok(())
        } else {
            Err(SorError::domain(format!(
                "response {y} is outside the {} support",
                self.kind.name()
            )))
        }
    }
}

impl FamilyKind {
    pub fn name(&self) -> &'static str {
        match self {
            FamilyKind::Gaussian => "gaussian",
            FamilyKind::Poisson => "poisson",
            FamilyKind::Bernoulli => "bernoulli",
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FamilyKind {
    type Err = SorError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(FamilyKind::Gaussian),
            "poisson" => Ok(FamilyKind::Poisson),
            "bernoulli" | "binomial" | "binary" => Ok(FamilyKind::Bernoulli),
            other => Err(SorError::config(format!("unknown family '{other}'"))),
        }
    }
}

#[inline]
pub fn expit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// ln(k!) with a cached table for small k.
pub fn ln_factorial(k: u64) -> f64 {
    const TABLE_LEN: usize = 4096;
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let mut t = Vec::with_capacity(TABLE_LEN);
        let mut acc = 0.0;
        t.push(0.0);
        for i in 1..TABLE_LEN {
            acc += (i as f64).ln();
            t.push(acc);
        }
        t
    });
    if (k as usize) < TABLE_LEN {
        table[k as usize]
    } else {
        ln_gamma(k as f64 + 1.0)
    }
}

// ---------------------------------------------------------------------------
// Tilt functions
// ---------------------------------------------------------------------------

/// A user supplied log sampling ratio, re-centred so that it vanishes at `y0`.
#[derive(Clone)]
pub struct CustomTilt {
    f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
    at_y0: f64,
    bounds: Option<(f64, f64)>,
    breakpoints: Vec<f64>,
}

impl CustomTilt {
    /// `bounds`, when known, brackets `exp(log_ratio)` over the support.
    pub fn new(
        y0: f64,
        f: impl Fn(f64) -> f64 + Send + Sync + 'static,
        bounds: Option<(f64, f64)>,
        breakpoints: Vec<f64>,
    ) -> Self {
        let at_y0 = f(y0);
        Self { f: Arc::new(f), at_y0, bounds, breakpoints }
    }
}

impl fmt::Debug for CustomTilt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTilt")
            .field("bounds", &self.bounds)
            .field("breakpoints", &self.breakpoints)
            .finish_non_exhaustive()
    }
}

/// log{ρ(y)/ρ(y0)} for one observation.
#[derive(Debug, Clone, Default)]
pub enum TiltFunction {
    /// Unbiased sampling.
    #[default]
    Zero,
    /// log ratio `slope · (y − y0)`; mostly useful as a closed-form check.
    Exponential { slope: f64, y0: f64 },
    /// The ratio induced by an auxiliary model and a design ratio.
    Design(DesignTilt),
    Custom(CustomTilt),
}

impl TiltFunction {
    pub fn log_ratio(&self, y: f64) -> f64 {
        match self {
            TiltFunction::Zero => 0.0,
            TiltFunction::Exponential { slope, y0 } => slope * (y - y0),
            TiltFunction::Design(d) => d.ratio(y).ln(),
            TiltFunction::Custom(c) => (c.f)(y) - c.at_y0,
        }
    }

    #[inline]
    pub fn ratio(&self, y: f64) -> f64 {
        match self {
            TiltFunction::Zero => 1.0,
            TiltFunction::Design(d) => d.ratio(y),
            _ => self.log_ratio(y).exp(),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            TiltFunction::Zero => true,
            TiltFunction::Exponential { slope, .. } => *slope == 0.0,
            _ => false,
        }
    }

    /// Lower and upper bounds on `ratio(y)` when they are known.
    pub fn bounds(&self) -> Option<(f64, f64)> {
        match self {
            TiltFunction::Zero => Some((1.0, 1.0)),
            TiltFunction::Exponential { .. } => None,
            TiltFunction::Design(d) => Some(d.bounds()),
            TiltFunction::Custom(c) => c.bounds,
        }
    }

    /// Points where the ratio is not smooth in y.
    pub fn breakpoints(&self) -> &[f64] {
        match self {
            TiltFunction::Zero | TiltFunction::Exponential { .. } => &[],
            TiltFunction::Design(d) => d.breakpoints(),
            TiltFunction::Custom(c) => &c.breakpoints,
        }
    }

    /// Factor by which the tilt can inflate the upper tail of a count law.
    fn tail_inflation(&self) -> f64 {
        match self {
            TiltFunction::Exponential { slope, .. } => slope.max(0.0).exp(),
            _ => match self.bounds() {
                Some((lo, hi)) if lo > 0.0 => (hi / lo).max(1.0),
                _ => 1.0,
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Odds and tilted moments
// ---------------------------------------------------------------------------

/// Tilted mean, tilted variance (in response units) and log ∫ odds_S.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleMoments {
    pub mu_s: f64,
    pub var_s: f64,
    pub log_normalizer: f64,
}

/// θ with b'(θ) = `mu_p`.
pub fn canonical_theta(mu_p: f64, family: &FamilySpec) -> Result<f64> {
    let ok = match family.kind {
        FamilyKind::Gaussian => mu_p.is_finite(),
        FamilyKind::Poisson => mu_p > 0.0 && mu_p.is_finite(),
        FamilyKind::Bernoulli => mu_p > 0.0 && mu_p < 1.0,
    };
    if !ok {
        return Err(SorError::domain(format!(
            "mean {mu_p} is outside the {} mean space",
            family.kind.name()
        )));
    }
    Ok(match family.kind {
        FamilyKind::Gaussian => mu_p,
        FamilyKind::Poisson => mu_p.ln(),
        FamilyKind::Bernoulli => logit(mu_p),
    })
}

fn log_population_odds(y: f64, theta: f64, phi: f64, family: &FamilySpec) -> f64 {
    let y0 = family.y0;
    theta * (y - y0) / phi + family.log_c(y, phi) - family.log_c(y0, phi)
}

/// dF_P(y)/dF_P(y0).
pub fn population_odds(y: f64, theta: f64, phi: f64, family: &FamilySpec) -> Result<f64> {
    family.check_support(y)?;
    family.check_phi(phi)?;
    Ok(log_population_odds(y, theta, phi, family).exp())
}

/// dF_S(y)/dF_S(y0) = odds_P(y) · ρ(y)/ρ(y0).
pub fn sample_odds(
    y: f64,
    theta: f64,
    phi: f64,
    family: &FamilySpec,
    tilt: &TiltFunction,
) -> Result<f64> {
    family.check_support(y)?;
    family.check_phi(phi)?;
    Ok((log_population_odds(y, theta, phi, family) + tilt.log_ratio(y)).exp())
}

/// The tilted law discretised on quadrature nodes (continuous families) or
/// on its truncated support (discrete families). Probabilities sum to one.
#[derive(Debug, Clone)]
pub struct TiltedLaw {
    pub points: Vec<(f64, f64)>,
    pub log_normalizer: f64,
}

impl TiltedLaw {
    pub fn expectation(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.points.iter().map(|&(y, p)| p * f(y)).sum()
    }

    pub fn moments(&self) -> SampleMoments {
        let mu: f64 = self.points.iter().map(|&(y, p)| p * y).sum();
        let var: f64 = self.points.iter().map(|&(y, p)| p * (y - mu) * (y - mu)).sum();
        SampleMoments { mu_s: mu, var_s: var, log_normalizer: self.log_normalizer }
    }
}

/// Tilted mean and variance of the sample law.
///
/// A zero tilt short-circuits to the population moments.
pub fn sample_moments(
    theta: f64,
    phi: f64,
    family: &FamilySpec,
    tilt: &TiltFunction,
    quad: &QuadratureConfig,
) -> Result<SampleMoments> {
    family.check_phi(phi)?;
    if matches!(tilt, TiltFunction::Zero) {
        return Ok(untilted_moments(theta, phi, family));
    }
    match family.kind {
        FamilyKind::Gaussian => {
            let (sums, log_norm) = gaussian_sums(theta, phi, family.y0, tilt, quad, None)?;
            let (s0, s1, s2) = sums;
            let m1 = s1 / s0;
            let sd = phi.sqrt();
            Ok(SampleMoments {
                mu_s: theta + sd * m1,
                var_s: phi * (s2 / s0 - m1 * m1).max(0.0),
                log_normalizer: log_norm,
            })
        }
        _ => Ok(tilted_law(theta, phi, family, tilt, quad)?.moments()),
    }
}

fn untilted_moments(theta: f64, phi: f64, family: &FamilySpec) -> SampleMoments {
    let y0 = family.y0;
    match family.kind {
        FamilyKind::Gaussian => SampleMoments {
            mu_s: theta,
            var_s: phi,
            log_normalizer: (y0 - theta).powi(2) / (2.0 * phi) + 0.5 * (2.0 * std::f64::consts::PI * phi).ln(),
        },
        FamilyKind::Poisson => {
            let mu = theta.exp();
            SampleMoments {
                mu_s: mu,
                var_s: mu,
                log_normalizer: mu - theta * y0 + ln_factorial(y0 as u64),
            }
        }
        FamilyKind::Bernoulli => {
            let p = expit(theta);
            SampleMoments {
                mu_s: p,
                var_s: p * (1.0 - p),
                log_normalizer: softplus(theta) - theta * y0,
            }
        }
    }
}

/// log dF_S(y) = [θy − b*(θ)]/φ + c*(y; φ).
///
/// Written through the odds this is `log odds_S(y) − log ∫ odds_S`, so
/// `b*(θ) = θ y0 + φ · log ∫ odds_S` and the density is normalized for any φ.
pub fn log_sample_density(
    y: f64,
    theta: f64,
    phi: f64,
    family: &FamilySpec,
    tilt: &TiltFunction,
    quad: &QuadratureConfig,
) -> Result<f64> {
    family.check_support(y)?;
    let m = sample_moments(theta, phi, family, tilt, quad)?;
    Ok(log_population_odds(y, theta, phi, family) + tilt.log_ratio(y) - m.log_normalizer)
}

/// The discretised tilted law; shares nodes with [`sample_moments`].
pub fn tilted_law(
    theta: f64,
    phi: f64,
    family: &FamilySpec,
    tilt: &TiltFunction,
    quad: &QuadratureConfig,
) -> Result<TiltedLaw> {
    family.check_phi(phi)?;
    match family.kind {
        FamilyKind::Gaussian => {
            let mut pts = Vec::with_capacity(2 * quad.base_nodes() + 4 * quad.nodes_per_panel);
            let (sums, log_norm) = gaussian_sums(theta, phi, family.y0, tilt, quad, Some(&mut pts))?;
            let sd = phi.sqrt();
            let inv = 1.0 / sums.0;
            for p in pts.iter_mut() {
                p.0 = theta + sd * p.0;
                p.1 *= inv;
            }
            Ok(TiltedLaw { points: pts, log_normalizer: log_norm })
        }
        FamilyKind::Bernoulli => {
            let y0 = family.y0;
            let w0 = tilt.ratio(0.0) * (-theta * y0).exp();
            let w1 = tilt.ratio(1.0) * (theta * (1.0 - y0)).exp();
            let s = w0 + w1;
            Ok(TiltedLaw { points: vec![(0.0, w0 / s), (1.0, w1 / s)], log_normalizer: s.ln() })
        }
        FamilyKind::Poisson => poisson_law(theta, family.y0, tilt, quad),
    }
}

/// Tilted Poisson law by direct summation over the support.
///
/// Untilted weights are built by the recursion `p(y) = p(y−1)·μ/y`, anchored
/// at the mode so large means cannot overflow.
fn poisson_law(theta: f64, y0: f64, tilt: &TiltFunction, quad: &QuadratureConfig) -> Result<TiltedLaw> {
    let mu = theta.exp();
    if !(mu.is_finite()) {
        return Err(SorError::numeric(format!("Poisson mean overflow at theta = {theta}")));
    }
    let mode = mu.floor() as u64;
    let inflated = mu * tilt.tail_inflation();
    let threshold = inflated + quad.tail_sd * inflated.sqrt();
    let min_last = quad.min_terms.saturating_sub(1) as u64;

    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(quad.min_terms + 16);
    // Downward from the mode to zero.
    let mut base = 1.0;
    let mut down: Vec<(f64, f64)> = Vec::with_capacity(mode as usize + 1);
    let mut y = mode;
    loop {
        let yf = y as f64;
        down.push((yf, base * tilt.ratio(yf)));
        if y == 0 {
            break;
        }
        base *= yf / mu;
        y -= 1;
    }
    let mut sum: f64 = down.iter().map(|p| p.1).sum();
    pts.extend(down.into_iter().rev());

    // Upward until the tail criterion holds.
    let mut base = 1.0;
    let mut y = mode;
    loop {
        y += 1;
        if y as usize > quad.max_terms {
            return Err(SorError::numeric(format!(
                "Poisson tilted sum did not converge within {} terms (mean {mu})",
                quad.max_terms
            )));
        }
        let yf = y as f64;
        base *= mu / yf;
        let term = base * tilt.ratio(yf);
        sum += term;
        pts.push((yf, term));
        if y >= min_last && yf > threshold && term < quad.tail_rel * sum {
            break;
        }
    }
    if !(sum > 0.0 && sum.is_finite()) {
        return Err(SorError::numeric(format!("degenerate tilted Poisson sum at mean {mu}")));
    }
    let inv = 1.0 / sum;
    for p in pts.iter_mut() {
        p.1 *= inv;
    }
    // log Σ odds_S = log(sum) + log odds_P(mode) with odds relative to y0.
    let log_anchor = theta * (mode as f64 - y0) - ln_factorial(mode) + ln_factorial(y0 as u64);
    Ok(TiltedLaw { points: pts, log_normalizer: sum.ln() + log_anchor })
}

struct GaussianLayout {
    /// Panel edges in standardized units.
    edges: Vec<f64>,
    /// (u, w · exp(−u²/2)) for every node, panel by panel.
    nodes: Vec<(f64, f64)>,
}

fn build_layout(quad: &QuadratureConfig, level: u32) -> GaussianLayout {
    let scale = (1u64 << level) as f64;
    let half = quad.half_width_sd * scale;
    let panels = quad.panels << level;
    let width = 2.0 * half / panels as f64;
    let (x, w) = gl_rule(quad.nodes_per_panel);
    let mut edges = Vec::with_capacity(panels + 1);
    let mut nodes = Vec::with_capacity(panels * quad.nodes_per_panel);
    for p in 0..=panels {
        edges.push(-half + width * p as f64);
    }
    for p in 0..panels {
        let mid = edges[p] + 0.5 * width;
        for (xi, wi) in x.iter().zip(w) {
            let u = mid + 0.5 * width * xi;
            nodes.push((u, 0.5 * width * wi * (-0.5 * u * u).exp()));
        }
    }
    GaussianLayout { edges, nodes }
}

fn layout(quad: &QuadratureConfig, level: u32) -> std::borrow::Cow<'static, GaussianLayout> {
    static DEFAULT: OnceLock<Vec<GaussianLayout>> = OnceLock::new();
    let default = QuadratureConfig::default();
    if quad.panels == default.panels
        && quad.nodes_per_panel == default.nodes_per_panel
        && quad.half_width_sd == default.half_width_sd
        && level < 2
    {
        let cached = DEFAULT.get_or_init(|| vec![build_layout(&default, 0), build_layout(&default, 1)]);
        std::borrow::Cow::Borrowed(&cached[level as usize])
    } else {
        std::borrow::Cow::Owned(build_layout(quad, level))
    }
}

impl Clone for GaussianLayout {
    fn clone(&self) -> Self {
        Self { edges: self.edges.clone(), nodes: self.nodes.clone() }
    }
}

/// Σ K(u)R(y), Σ u K R, Σ u² K R over one layout, with panels that contain a
/// tilt breakpoint split at the breakpoint.
fn gaussian_pass(
    theta: f64,
    sd: f64,
    tilt: &TiltFunction,
    quad: &QuadratureConfig,
    level: u32,
    mut collect: Option<&mut Vec<(f64, f64)>>,
) -> (f64, f64, f64) {
    let lay = layout(quad, level);
    let n = quad.nodes_per_panel;
    let mut kinks: Vec<f64> = tilt
        .breakpoints()
        .iter()
        .map(|b| (b - theta) / sd)
        .filter(|u| *u > lay.edges[0] && *u < *lay.edges.last().unwrap())
        .collect();
    kinks.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let (mut s0, mut s1, mut s2) = (0.0, 0.0, 0.0);
    let mut visit = |u: f64, k: f64| {
        let w = k * tilt.ratio(theta + sd * u);
        s0 += w;
        s1 += w * u;
        s2 += w * u * u;
        if let Some(buf) = collect.as_deref_mut() {
            buf.push((u, w));
        }
    };
    let mut next_kink = 0;
    for p in 0..lay.edges.len() - 1 {
        let (a, b) = (lay.edges[p], lay.edges[p + 1]);
        while next_kink < kinks.len() && kinks[next_kink] <= a {
            next_kink += 1;
        }
        let first = next_kink;
        let mut last = first;
        while last < kinks.len() && kinks[last] < b {
            last += 1;
        }
        if first == last {
            for &(u, k) in &lay.nodes[p * n..(p + 1) * n] {
                visit(u, k);
            }
        } else {
            let (x, w) = gl_rule(n);
            let mut lo = a;
            for hi in kinks[first..last].iter().copied().chain(std::iter::once(b)) {
                let half = 0.5 * (hi - lo);
                let mid = 0.5 * (hi + lo);
                if half > 0.0 {
                    for (xi, wi) in x.iter().zip(w) {
                        let u = mid + half * xi;
                        visit(u, half * wi * (-0.5 * u * u).exp());
                    }
                }
                lo = hi;
            }
        }
    }
    (s0, s1, s2)
}

/// Runs the doubling loop for a Gaussian tilted integral and returns the
/// standardized sums together with log ∫ odds_S dy.
fn gaussian_sums(
    theta: f64,
    phi: f64,
    y0: f64,
    tilt: &TiltFunction,
    quad: &QuadratureConfig,
    mut collect: Option<&mut Vec<(f64, f64)>>,
) -> Result<((f64, f64, f64), f64)> {
    let sd = phi.sqrt();
    let offset = (y0 - theta).powi(2) / (2.0 * phi) + sd.ln();
    let log_norm = |s0: f64| offset + s0.ln();

    let mut prev = gaussian_pass(theta, sd, tilt, quad, 0, None);
    let mut prev_ln = log_norm(prev.0);
    let mut history = vec![prev_ln];
    for level in 1..=quad.max_doublings as u32 {
        if let Some(buf) = collect.as_deref_mut() {
            buf.clear();
        }
        let cur = gaussian_pass(theta, sd, tilt, quad, level, collect.as_deref_mut());
        let cur_ln = log_norm(cur.0);
        history.push(cur_ln);
        if !(cur.0 > 0.0 && cur_ln.is_finite()) {
            break;
        }
        if (cur_ln - prev_ln).abs() <= quad.rel_tol * cur_ln.abs().max(1.0) {
            return Ok((cur, cur_ln));
        }
        prev = cur;
        prev_ln = cur_ln;
    }
    let _ = prev;
    Err(SorError::numeric(format!(
        "Gaussian tilted integral did not settle after {} doublings (theta {theta}, phi {phi}); \
         log normalizer history {history:?}",
        quad.max_doublings
    )))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> QuadratureConfig {
        QuadratureConfig::default()
    }

    #[test]
    fn canonical_theta_examples() {
        assert_eq!(canonical_theta(2.5, &FamilySpec::gaussian(0.0)).unwrap(), 2.5);
        assert_eq!(canonical_theta(1.0, &FamilySpec::poisson()).unwrap(), 0.0);
        let t = canonical_theta(0.25, &FamilySpec::bernoulli()).unwrap();
        assert!((t - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((t + 1.0986).abs() < 1e-4);
    }

    #[test]
    fn canonical_theta_rejects_mean_outside_space() {
        assert!(matches!(canonical_theta(0.0, &FamilySpec::poisson()), Err(SorError::Domain(_))));
        assert!(canonical_theta(1.0, &FamilySpec::bernoulli()).is_err());
        assert!(canonical_theta(f64::NAN, &FamilySpec::gaussian(0.0)).is_err());
    }

    #[test]
    fn population_odds_examples() {
        let pois = FamilySpec::poisson();
        assert_eq!(population_odds(0.0, 0.3, 1.0, &pois).unwrap(), 1.0);
        // Poisson(2): f(1)/f(0) = 2.
        let o = population_odds(1.0, 2f64.ln(), 1.0, &pois).unwrap();
        assert!((o - 2.0).abs() < 1e-14);
        // N(0,1): φ(1)/φ(0) = e^{-1/2}.
        let g = FamilySpec::gaussian(0.0);
        let o = population_odds(1.0, 0.0, 1.0, &g).unwrap();
        assert!((o - 0.60653).abs() < 1e-5);
        assert!((o - (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn population_odds_rejects_outside_support() {
        assert!(population_odds(1.5, 0.0, 1.0, &FamilySpec::poisson()).is_err());
        assert!(population_odds(-1.0, 0.0, 1.0, &FamilySpec::poisson()).is_err());
        assert!(population_odds(2.0, 0.0, 1.0, &FamilySpec::bernoulli()).is_err());
    }

    #[test]
    fn sample_odds_examples() {
        let pois = FamilySpec::poisson();
        let theta = 2f64.ln();
        let tilt = TiltFunction::Custom(CustomTilt::new(0.0, |y| if y >= 1.0 { 3f64.ln() } else { 0.0 }, None, vec![]));
        let o = sample_odds(1.0, theta, 1.0, &pois, &tilt).unwrap();
        assert!((o - 6.0).abs() < 1e-13);
        assert_eq!(sample_odds(0.0, theta, 1.0, &pois, &tilt).unwrap(), 1.0);
        let p = population_odds(3.0, theta, 1.0, &pois).unwrap();
        let s = sample_odds(3.0, theta, 1.0, &pois, &TiltFunction::Zero).unwrap();
        assert_eq!(p, s);
    }

    #[test]
    fn untilted_poisson_moments() {
        let m = sample_moments(0.0, 1.0, &FamilySpec::poisson(), &TiltFunction::Zero, &quad()).unwrap();
        assert_eq!(m.mu_s, 1.0);
        assert_eq!(m.var_s, 1.0);
    }

    #[test]
    fn step_tilted_poisson_mean_matches_enumeration() {
        // Oracle: direct enumeration of Poisson(1) mass up to y = 200 with the
        // mass at y ≥ 1 doubled.
        let mut num = 0.0;
        let mut den = 0.0;
        let mut p = (-1.0f64).exp();
        for y in 0..=200u32 {
            if y > 0 {
                p /= y as f64;
            }
            let w = if y >= 1 { 2.0 * p } else { p };
            num += y as f64 * w;
            den += w;
        }
        let oracle = num / den;
        assert!((oracle - 2.0 / (2.0 - (-1.0f64).exp())).abs() < 1e-14);

        let tilt = TiltFunction::Custom(CustomTilt::new(
            0.0,
            |y| if y >= 1.0 { 2f64.ln() } else { 0.0 },
            Some((1.0, 2.0)),
            vec![1.0],
        ));
        let m = sample_moments(0.0, 1.0, &FamilySpec::poisson(), &tilt, &quad()).unwrap();
        assert!((m.mu_s - oracle).abs() < 1e-12, "{} vs {oracle}", m.mu_s);
        assert!((m.mu_s - 1.22540).abs() < 1e-5);
    }

    #[test]
    fn gaussian_linear_tilt_is_a_mean_shift() {
        let g = FamilySpec::gaussian(0.0);
        let tilt = TiltFunction::Exponential { slope: 1.0, y0: 0.0 };
        let m = sample_moments(0.0, 1.0, &g, &tilt, &quad()).unwrap();
        assert!((m.mu_s - 1.0).abs() < 1e-10, "{}", m.mu_s);
        assert!((m.var_s - 1.0).abs() < 1e-10, "{}", m.var_s);
    }

    #[test]
    fn bernoulli_two_point_bayes() {
        let b = FamilySpec::bernoulli();
        let theta = canonical_theta(0.25, &b).unwrap();
        let tilt = TiltFunction::Custom(CustomTilt::new(0.0, |y| y * 4f64.ln(), Some((1.0, 4.0)), vec![]));
        let lp1 = log_sample_density(1.0, theta, 1.0, &b, &tilt, &quad()).unwrap();
        let p1 = lp1.exp();
        let oracle = 4.0 * 0.25 / (4.0 * 0.25 + 0.75);
        assert!((p1 - oracle).abs() < 1e-14);
        assert!((p1 - 0.5714).abs() < 1e-4);
        let lp0 = log_sample_density(0.0, theta, 1.0, &b, &tilt, &quad()).unwrap();
        assert!((lp0.exp() + p1 - 1.0).abs() < 1e-14);
    }

    #[test]
    fn poisson_log_density_sums_to_one() {
        let tilt = TiltFunction::Custom(CustomTilt::new(
            0.0,
            |y| if y >= 1.0 { 2f64.ln() } else { 0.0 },
            Some((1.0, 2.0)),
            vec![],
        ));
        let fam = FamilySpec::poisson();
        let total: f64 = (0..200)
            .map(|y| log_sample_density(y as f64, 0.0, 1.0, &fam, &tilt, &quad()).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_tilt_log_density_is_population_log_density() {
        let g = FamilySpec::gaussian(0.7);
        let (theta, phi, y) = (1.3, 2.2, -0.4);
        let got = log_sample_density(y, theta, phi, &g, &TiltFunction::Zero, &quad()).unwrap();
        let want = (theta * y - g.cumulant(theta)) / phi + g.log_c(y, phi);
        assert!((got - want).abs() < 1e-12);

        let p = FamilySpec::poisson();
        let got = log_sample_density(3.0, 0.4, 1.0, &p, &TiltFunction::Zero, &quad()).unwrap();
        let want = 0.4 * 3.0 - 0.4f64.exp() - ln_factorial(3);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn large_poisson_mean_does_not_overflow() {
        let tilt = TiltFunction::Custom(CustomTilt::new(0.0, |_| 0.0, Some((1.0, 1.0)), vec![]));
        let m = sample_moments(2000f64.ln(), 1.0, &FamilySpec::poisson(), &tilt, &quad()).unwrap();
        assert!((m.mu_s / 2000.0 - 1.0).abs() < 1e-10);
        assert!((m.var_s / 2000.0 - 1.0).abs() < 1e-8);
        let exact = untilted_moments(2000f64.ln(), 1.0, &FamilySpec::poisson());
        assert!((m.log_normalizer - exact.log_normalizer).abs() < 1e-9);
    }

    #[test]
    fn discrete_families_reject_free_dispersion() {
        let r = sample_moments(0.0, 2.0, &FamilySpec::poisson(), &TiltFunction::Zero, &quad());
        assert!(r.is_err());
    }
}
