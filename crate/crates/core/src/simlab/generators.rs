//! Population generators for the two simulation settings.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::copula::CopulaPlan;
use crate::data::LongitudinalDataset;
use crate::design::DesignLevel;
use crate::error::{Result, SorError};
use crate::family::expit;

/// Column names every generated dataset carries besides `time`.
pub const COLUMNS: [&str; 4] = ["x1", "t", "tx1", "tk2"];

/// A finite population in long format, grouped by subject.
#[derive(Debug, Clone)]
pub struct Population {
    pub level: DesignLevel,
    /// Subject boundaries into the row vectors.
    pub offsets: Vec<usize>,
    pub time: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub x1: Vec<f64>,
    /// Y − μ + ξ per row for observation-level populations; empty otherwise.
    pub latent: Vec<f64>,
}

impl Population {
    fn new(level: DesignLevel) -> Self {
        Self { level, offsets: vec![0], time: vec![], y: vec![], z: vec![], x1: vec![], latent: vec![] }
    }

    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    /// The sampled dataset holding the rows with `keep[i]`; subjects with no
    /// kept rows are dropped.
    pub fn subset(&self, keep: &[bool]) -> Result<LongitudinalDataset> {
        let mut ids = Vec::new();
        let mut offsets = vec![0];
        let (mut time, mut y, mut z, mut x1) = (vec![], vec![], vec![], vec![]);
        for k in 0..self.n_subjects() {
            let before = y.len();
            for i in self.offsets[k]..self.offsets[k + 1] {
                if keep[i] {
                    time.push(self.time[i]);
                    y.push(self.y[i]);
                    z.push(self.z[i]);
                    x1.push(self.x1[i]);
                }
            }
            if y.len() > before {
                ids.push(format!("s{}", k + 1));
                offsets.push(y.len());
            }
        }
        if y.is_empty() {
            return Err(SorError::numeric("the sample is empty"));
        }
        let cols = covariate_columns(&time, &x1);
        LongitudinalDataset::from_columns(ids, offsets, time, y, z, cols)
    }

    /// The whole population as a dataset.
    pub fn dataset(&self) -> Result<LongitudinalDataset> {
        self.subset(&vec![true; self.n_obs()])
    }
}

/// x1, t, t·x1 and the spline term (t − 2)+.
pub fn covariate_columns(time: &[f64], x1: &[f64]) -> BTreeMap<String, Vec<f64>> {
    let mut cols = BTreeMap::new();
    cols.insert("x1".into(), x1.to_vec());
    cols.insert("t".into(), time.to_vec());
    cols.insert("tx1".into(), time.iter().zip(x1).map(|(t, x)| t * x).collect());
    cols.insert("tk2".into(), time.iter().map(|t| (t - 2.0).max(0.0)).collect());
    cols
}

/// Correlated Poisson counts with a subject-level auxiliary indicator driven
/// by the first count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectPoissonParams {
    /// (β0, βx1, βt, βtx1) of log E[Y] = β0 + βx1·x1 + βt·t + βtx1·t·x1.
    pub beta: [f64; 4],
    /// Pearson correlation of counts within a subject.
    pub alpha: f64,
    pub gamma0: f64,
    pub gamma1: f64,
    pub p_x1: f64,
    pub min_visits: usize,
    pub max_visits: usize,
}

impl SubjectPoissonParams {
    pub fn standard(p_x1: f64) -> Self {
        Self {
            beta: [-1.4, 0.4, -0.1, 0.1],
            alpha: 0.5,
            gamma0: -3.15,
            gamma1: 6.3,
            p_x1,
            min_visits: 3,
            max_visits: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_x1 > 0.0 && self.p_x1 < 1.0) {
            return Err(SorError::config(format!("p_x1 must lie in (0, 1), got {}", self.p_x1)));
        }
        if self.min_visits == 0 || self.min_visits > self.max_visits {
            return Err(SorError::config("visit counts must satisfy 1 ≤ min_visits ≤ max_visits"));
        }
        Ok(())
    }

    pub fn mean(&self, x1: f64, t: f64) -> f64 {
        let b = &self.beta;
        (b[0] + b[1] * x1 + b[2] * t + b[3] * t * x1).exp()
    }
}

/// Calibrated copulas for x1 = 0 and x1 = 1 over the longest visit schedule.
#[derive(Debug, Clone)]
pub struct SubjectPoissonGenerator {
    pub params: SubjectPoissonParams,
    plans: [CopulaPlan; 2],
}

impl SubjectPoissonGenerator {
    pub fn new(params: SubjectPoissonParams) -> Result<Self> {
        params.validate()?;
        let plan = |x1: f64| {
            let means: Vec<f64> = (0..params.max_visits).map(|t| params.mean(x1, t as f64)).collect();
            CopulaPlan::new(&means, params.alpha)
        };
        let plans = [plan(0.0)?, plan(1.0)?];
        Ok(Self { params, plans })
    }

    pub fn plan(&self, x1: usize) -> &CopulaPlan {
        &self.plans[x1]
    }

    pub fn generate<R: Rng + ?Sized>(&self, n_subjects: usize, rng: &mut R) -> Population {
        let p = &self.params;
        let mut pop = Population::new(DesignLevel::Subject);
        let mut normals = Vec::with_capacity(p.max_visits);
        let mut counts = Vec::with_capacity(p.max_visits);
        for _ in 0..n_subjects {
            let x1 = usize::from(rng.random::<f64>() < p.p_x1);
            let n = rng.random_range(p.min_visits..=p.max_visits);
            normals.clear();
            normals.extend((0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
            self.plans[x1].draw(&normals, &mut counts);
            let pz = expit(p.gamma0 + p.gamma1 * f64::from(u8::from(counts[0] >= 1)));
            let z = f64::from(u8::from(rng.random::<f64>() < pz));
            for (t, &c) in counts.iter().enumerate() {
                pop.time.push(t as f64);
                pop.y.push(f64::from(c));
                pop.z.push(z);
                pop.x1.push(x1 as f64);
            }
            pop.offsets.push(pop.y.len());
        }
        pop
    }
}

/// Gaussian responses with exchangeable errors and an observation-level
/// auxiliary indicator flagging the most extreme, noisily measured responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationGaussianParams {
    pub beta: [f64; 4],
    /// Within-subject error correlation.
    pub alpha: f64,
    pub error_variance: f64,
    pub p_x1: f64,
    pub visits: usize,
    /// Share of Var(Y + ξ) carried by Y.
    pub signal_share: f64,
    /// Fraction of observations with Z = 1.
    pub z_fraction: f64,
}

impl ObservationGaussianParams {
    pub fn standard(p_x1: f64, beta_x1: f64) -> Self {
        Self {
            beta: [0.0, beta_x1, 0.0, 0.0],
            alpha: 0.3,
            error_variance: 1.0,
            p_x1,
            visits: 10,
            signal_share: 0.8,
            z_fraction: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_x1 > 0.0 && self.p_x1 < 1.0) {
            return Err(SorError::config(format!("p_x1 must lie in (0, 1), got {}", self.p_x1)));
        }
        if !(0.0..1.0).contains(&self.alpha) || self.error_variance <= 0.0 || self.visits == 0 {
            return Err(SorError::config("need 0 ≤ alpha < 1, error_variance > 0 and visits ≥ 1"));
        }
        if !(self.signal_share > 0.0 && self.signal_share <= 1.0) || !(self.z_fraction > 0.0 && self.z_fraction < 1.0) {
            return Err(SorError::config("signal_share must lie in (0, 1] and z_fraction in (0, 1)"));
        }
        Ok(())
    }

    pub fn mean(&self, x1: f64, t: f64) -> f64 {
        let b = &self.beta;
        b[0] + b[1] * x1 + b[2] * t + b[3] * t * x1
    }

    /// E[Y] over the covariate distribution.
    pub fn overall_mean(&self) -> f64 {
        let tbar = (self.visits as f64 - 1.0) / 2.0;
        let b = &self.beta;
        b[0] + b[1] * self.p_x1 + b[2] * tbar + b[3] * tbar * self.p_x1
    }

    pub fn generate<R: Rng + ?Sized>(&self, n_subjects: usize, rng: &mut R) -> Population {
        let mut pop = Population::new(DesignLevel::Observation);
        let sd_b = (self.alpha * self.error_variance).sqrt();
        let sd_e = ((1.0 - self.alpha) * self.error_variance).sqrt();
        for _ in 0..n_subjects {
            let x1 = f64::from(u8::from(rng.random::<f64>() < self.p_x1));
            let b: f64 = sd_b * rng.sample::<f64, _>(StandardNormal);
            for t in 0..self.visits {
                let e: f64 = sd_e * rng.sample::<f64, _>(StandardNormal);
                pop.time.push(t as f64);
                pop.y.push(self.mean(x1, t as f64) + b + e);
                pop.x1.push(x1);
            }
            pop.offsets.push(pop.y.len());
        }
        let n = pop.n_obs();
        let ybar = pop.y.iter().sum::<f64>() / n as f64;
        let var_y = pop.y.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let sd_xi = (var_y * (1.0 - self.signal_share) / self.signal_share).sqrt();
        let mu = self.overall_mean();
        pop.latent = pop.y.iter().map(|y| y - mu + sd_xi * rng.sample::<f64, _>(StandardNormal)).collect();
        let w: Vec<f64> = pop.latent.iter().map(|v| v.abs()).collect();
        let delta = upper_cut(&w, self.z_fraction);
        pop.z = w.iter().map(|&v| f64::from(u8::from(v > delta))).collect();
        pop
    }
}

/// The threshold leaving round(fraction·n) values strictly above it.
pub fn upper_cut(w: &[f64], fraction: f64) -> f64 {
    let mut s = w.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let k = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
    s[n - k - 1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    SubjectPoisson(SubjectPoissonParams),
    ObservationGaussian(ObservationGaussianParams),
}

impl GeneratorSpec {
    pub fn level(&self) -> DesignLevel {
        match self {
            GeneratorSpec::SubjectPoisson(_) => DesignLevel::Subject,
            GeneratorSpec::ObservationGaussian(_) => DesignLevel::Observation,
        }
    }

    pub fn beta(&self) -> [f64; 4] {
        match self {
            GeneratorSpec::SubjectPoisson(p) => p.beta,
            GeneratorSpec::ObservationGaussian(p) => p.beta,
        }
    }
}

/// A generator with any expensive setup done once.
#[derive(Debug, Clone)]
pub enum Generator {
    SubjectPoisson(SubjectPoissonGenerator),
    ObservationGaussian(ObservationGaussianParams),
}

impl Generator {
    pub fn new(spec: &GeneratorSpec) -> Result<Self> {
        Ok(match spec {
            GeneratorSpec::SubjectPoisson(p) => Generator::SubjectPoisson(SubjectPoissonGenerator::new(p.clone())?),
            GeneratorSpec::ObservationGaussian(p) => {
                p.validate()?;
                Generator::ObservationGaussian(p.clone())
            }
        })
    }

    pub fn generate<R: Rng + ?Sized>(&self, n_subjects: usize, rng: &mut R) -> Population {
        match self {
            Generator::SubjectPoisson(g) => g.generate(n_subjects, rng),
            Generator::ObservationGaussian(g) => g.generate(n_subjects, rng),
        }
    }
}
