//! Sampling designs: per-stratum design ratios r = π(1,X1)/π(0,X1), optional
//! absolute probabilities, and the response-dependent sampling ratio
//! ρ(y)/ρ(y0) implied by the auxiliary model.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::auxiliary::{HKind, HSpec};
use crate::data::LongitudinalDataset;
use crate::error::{Result, SorError};
use crate::family::{expit, TiltFunction};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DesignLevel {
    Subject,
    Observation,
}

/// One stratum: a value (or wildcard) per stratum column.
#[derive(Debug, Clone, PartialEq)]
pub struct StratumKey(Vec<Option<f64>>);

impl StratumKey {
    pub fn parse(key: &str, n_columns: usize) -> Result<Self> {
        let key = key.trim();
        if key.is_empty() || key == "*" {
            return Ok(Self(vec![None; n_columns]));
        }
        let parts: Vec<&str> = key.split(',').map(str::trim).collect();
        if parts.len() != n_columns {
            return Err(SorError::config(format!(
                "stratum key '{key}' has {} components but the design declares {n_columns} stratum columns",
                parts.len()
            )));
        }
        let vals = parts
            .iter()
            .map(|p| {
                if *p == "*" {
                    Ok(None)
                } else {
                    p.parse::<f64>()
                        .map(Some)
                        .map_err(|_| SorError::config(format!("stratum key component '{p}' is not numeric")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self(vals))
    }

    fn matches(&self, values: &[f64]) -> bool {
        self.0.iter().zip(values).all(|(k, v)| k.is_none_or(|k| k == *v))
    }

    fn specificity(&self) -> usize {
        self.0.iter().filter(|k| k.is_some()).count()
    }
}

impl fmt::Display for StratumKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.iter().all(|k| k.is_none()) {
            return f.write_str("*");
        }
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|k| match k {
                Some(v) => format!("{v}"),
                None => "*".into(),
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub key: StratumKey,
    pub ratio: f64,
    /// (π1, π0) when absolute probabilities are known.
    pub probs: Option<(f64, f64)>,
}

/// A sampling design as declared for analysis.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingDesign {
    pub level: DesignLevel,
    pub strata_columns: Vec<String>,
    pub strata: Vec<Stratum>,
}

/// Limits a misspecification to the rows where `column == value`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumRestriction {
    pub column: String,
    pub value: f64,
}

impl SamplingDesign {
    /// Unbiased sampling: one stratum with r = 1.
    pub fn unit(level: DesignLevel) -> Self {
        Self {
            level,
            strata_columns: vec![],
            strata: vec![Stratum { key: StratumKey(vec![]), ratio: 1.0, probs: None }],
        }
    }

    pub fn from_ratios(
        level: DesignLevel,
        strata_columns: Vec<String>,
        ratios: &BTreeMap<String, f64>,
    ) -> Result<Self> {
        let strata = ratios
            .iter()
            .map(|(k, &r)| {
                if !(r > 0.0 && r.is_finite()) {
                    return Err(SorError::config(format!("design ratio for stratum '{k}' must be positive, got {r}")));
                }
                Ok(Stratum { key: StratumKey::parse(k, strata_columns.len())?, ratio: r, probs: None })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::checked(level, strata_columns, strata)
    }

    pub fn from_probs(
        level: DesignLevel,
        strata_columns: Vec<String>,
        probs: &BTreeMap<String, (f64, f64)>,
    ) -> Result<Self> {
        let strata = probs
            .iter()
            .map(|(k, &(p1, p0))| {
                for p in [p1, p0] {
                    if !(p > 0.0 && p <= 1.0) {
                        return Err(SorError::config(format!(
                            "sampling probabilities for stratum '{k}' must lie in (0, 1], got ({p1}, {p0})"
                        )));
                    }
                }
                Ok(Stratum {
                    key: StratumKey::parse(k, strata_columns.len())?,
                    ratio: p1 / p0,
                    probs: Some((p1, p0)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::checked(level, strata_columns, strata)
    }

    fn checked(level: DesignLevel, strata_columns: Vec<String>, strata: Vec<Stratum>) -> Result<Self> {
        if strata.is_empty() {
            return Err(SorError::config("design declares no strata"));
        }
        for (i, a) in strata.iter().enumerate() {
            if strata[..i].iter().any(|b| b.key == a.key) {
                return Err(SorError::config(format!("stratum '{}' is declared twice", a.key)));
            }
        }
        Ok(Self { level, strata_columns, strata })
    }

    pub fn has_probs(&self) -> bool {
        self.strata.iter().all(|s| s.probs.is_some())
    }

    /// The stratum governing a row with the given stratum-column values.
    pub fn stratum_for(&self, values: &[f64]) -> Result<&Stratum> {
        let mut best: Option<&Stratum> = None;
        let mut tie = false;
        for s in self.strata.iter().filter(|s| s.key.matches(values)) {
            match best {
                None => best = Some(s),
                Some(b) if s.key.specificity() > b.key.specificity() => {
                    best = Some(s);
                    tie = false;
                }
                Some(b) if s.key.specificity() == b.key.specificity() => tie = true,
                _ => {}
            }
        }
        let describe = || {
            values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(",")
        };
        match (best, tie) {
            (Some(s), false) => Ok(s),
            (Some(_), true) => Err(SorError::config(format!("stratum values ({}) match several strata", describe()))),
            (None, _) => Err(SorError::config(format!(
                "no stratum declared for values ({}) of columns [{}]",
                describe(),
                self.strata_columns.join(", ")
            ))),
        }
    }

    /// Per-row design ratio and, when known, the probability of the row's own Z.
    pub fn resolve(&self, data: &LongitudinalDataset) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        let cols = self
            .strata_columns
            .iter()
            .map(|c| data.column(c))
            .collect::<Result<Vec<_>>>()?;
        let n = data.n_obs();
        let mut r = Vec::with_capacity(n);
        let mut pi = self.has_probs().then(|| Vec::with_capacity(n));
        let mut vals = vec![0.0; cols.len()];
        for i in 0..n {
            for (v, c) in vals.iter_mut().zip(&cols) {
                *v = c[i];
            }
            let s = self.stratum_for(&vals).map_err(|e| match e {
                SorError::Config(m) => SorError::Parse { row: data.source_row(i), message: m },
                other => other,
            })?;
            r.push(s.ratio);
            if let (Some(p), Some((p1, p0))) = (pi.as_mut(), s.probs) {
                p.push(if data.z[i] == 1.0 { p1 } else { p0 });
            }
        }
        Ok((r, pi))
    }

    /// All ratios multiplied by `c`; absolute probabilities are dropped.
    pub fn ratio_scaled(&self, c: f64) -> Self {
        let mut d = self.clone();
        for s in &mut d.strata {
            s.ratio *= c;
            s.probs = None;
        }
        d
    }
}

/// Multiplies the analysis-time ratios by `factor`, everywhere or only where
/// `restriction` holds. Absolute probabilities follow with π0 → π0/factor.
pub fn misspecify(
    design: &SamplingDesign,
    factor: f64,
    restriction: Option<&StratumRestriction>,
) -> Result<SamplingDesign> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(SorError::domain(format!("misspecification factor must be positive, got {factor}")));
    }
    let scale = |s: &mut Stratum| {
        s.ratio *= factor;
        if let Some((p1, p0)) = s.probs.as_mut() {
            *p0 /= factor;
            if *p0 > 1.0 {
                // Keep π0 a probability by moving the excess to π1.
                *p1 /= *p0;
                *p0 = 1.0;
            }
            s.ratio = *p1 / *p0;
        }
    };
    let mut out = design.clone();
    let Some(rest) = restriction else {
        out.strata.iter_mut().for_each(scale);
        return Ok(out);
    };
    let pos = match design.strata_columns.iter().position(|c| *c == rest.column) {
        Some(p) => p,
        None => {
            out.strata_columns.push(rest.column.clone());
            for s in &mut out.strata {
                s.key.0.push(None);
            }
            out.strata_columns.len() - 1
        }
    };
    let mut extra = Vec::new();
    for s in &mut out.strata {
        match s.key.0[pos] {
            Some(v) if v == rest.value => scale(s),
            Some(_) => {}
            None => {
                let mut narrowed = s.clone();
                narrowed.key.0[pos] = Some(rest.value);
                scale(&mut narrowed);
                extra.push(narrowed);
            }
        }
    }
    out.strata.extend(extra);
    Ok(out)
}

/// r = n1(1−p)/(n0·p): the design ratio implied by a sample's composition
/// and the population prevalence p of Z = 1.
pub fn ratio_from_counts(n1: u64, n0: u64, prevalence: f64) -> Result<f64> {
    if n1 == 0 || n0 == 0 {
        return Err(SorError::domain("ratio_from_counts needs positive counts in both auxiliary strata"));
    }
    if !(prevalence > 0.0 && prevalence < 1.0) {
        return Err(SorError::domain(format!("prevalence must lie in (0, 1), got {prevalence}")));
    }
    Ok(n1 as f64 * (1.0 - prevalence) / (n0 as f64 * prevalence))
}

/// ρ(y)/ρ(y0) for one observation.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct RhoRatio(pub f64);

/// (1 − λ(y) + rλ(y)) / (1 − λ(y0) + rλ(y0)).
pub fn rho_ratio(y: f64, y0: f64, lambda_p_at: impl Fn(f64) -> f64, r: f64) -> Result<RhoRatio> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(SorError::domain(format!("design ratio must be positive, got {r}")));
    }
    let (ly, l0) = (lambda_p_at(y), lambda_p_at(y0));
    for l in [ly, l0] {
        if !(l > 0.0 && l < 1.0) {
            return Err(SorError::domain(format!("auxiliary probability {l} is outside (0, 1)")));
        }
    }
    Ok(RhoRatio((1.0 - ly + r * ly) / (1.0 - l0 + r * l0)))
}

/// The sampling ratio of one observation as a function of its response.
///
/// λ_P(y) = expit(lin1 + h(y)·lin2), where lin1 = W1'γ1 and lin2 = W2'γ2.
#[derive(Debug, Clone)]
pub struct DesignTilt {
    lin1: f64,
    lin2: f64,
    r: f64,
    y0: f64,
    h: Arc<HSpec>,
    den: f64,
    /// Below/above values for an indicator h, which make the ratio a step.
    step: Option<(f64, f64, f64)>,
}

impl DesignTilt {
    pub fn new(lin1: f64, lin2: f64, h: Arc<HSpec>, r: f64, y0: f64) -> Self {
        let num = |hy: f64| {
            let l = expit(lin1 + hy * lin2);
            1.0 - l + r * l
        };
        let den = num(h.eval(y0));
        let step = match h.kind() {
            HKind::Indicator(c) => Some((*c, num(0.0) / den, num(1.0) / den)),
            _ => None,
        };
        Self { lin1, lin2, r, y0, h, den, step }
    }

    pub fn y0(&self) -> f64 {
        self.y0
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn h(&self) -> &HSpec {
        &self.h
    }

    #[inline]
    pub fn lambda_p(&self, y: f64) -> f64 {
        expit(self.lin1 + self.h.eval(y) * self.lin2)
    }

    #[inline]
    pub fn ratio(&self, y: f64) -> f64 {
        if let Some((c, lo, hi)) = self.step {
            return if y >= c { hi } else { lo };
        }
        let l = self.lambda_p(y);
        (1.0 - l + self.r * l) / self.den
    }

    /// F(y) = λ(1−λ)(1−r)/(1−λ+rλ), so that ∂ log ratio(y)/∂(W'γ) = −F(y).
    #[inline]
    pub fn f(&self, y: f64) -> f64 {
        let l = self.lambda_p(y);
        l * (1.0 - l) * (1.0 - self.r) / (1.0 - l + self.r * l)
    }

    pub fn bounds(&self) -> (f64, f64) {
        (self.r.min(1.0) / self.den, self.r.max(1.0) / self.den)
    }

    pub fn breakpoints(&self) -> &[f64] {
        self.h.breakpoints()
    }

    /// Whether the ratio is identically one.
    pub fn is_trivial(&self) -> bool {
        self.r == 1.0 || self.lin2 == 0.0
    }
}

/// The tilt of one observation given its linear predictors and design ratio.
pub fn tilt_for_observation(lin1: f64, lin2: f64, h: &Arc<HSpec>, r: f64, y0: f64) -> TiltFunction {
    let t = DesignTilt::new(lin1, lin2, Arc::clone(h), r, y0);
    if t.is_trivial() {
        TiltFunction::Zero
    } else {
        TiltFunction::Design(t)
    }
}
