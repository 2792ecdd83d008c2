//! Long-format longitudinal data and the numeric model frame used by fits.

use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use nalgebra::DMatrix;

use crate::design::{DesignLevel, SamplingDesign};
use crate::error::{Result, SorError};

/// One sampled observation before grouping.
#[derive(Debug, Clone)]
pub struct Record {
    pub id: String,
    pub time: f64,
    pub y: f64,
    pub z: f64,
    /// Values of the named covariate columns, in the dataset's column order.
    pub values: Vec<f64>,
    /// 1-based row number in the source, for error messages.
    pub source_row: usize,
}

/// Sampled long-format data, grouped by subject and ordered by time.
#[derive(Debug, Clone)]
pub struct LongitudinalDataset {
    subject_ids: Vec<String>,
    offsets: Vec<usize>,
    pub time: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    names: Vec<String>,
    columns: Vec<Vec<f64>>,
    source_rows: Vec<usize>,
}

impl LongitudinalDataset {
    /// Groups records by subject (in order of first appearance) and sorts each
    /// subject's rows by time.
    pub fn from_records(names: Vec<String>, records: Vec<Record>) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut groups: HashMap<String, Vec<Record>> = HashMap::new();
        for rec in records {
            if rec.values.len() != names.len() {
                return Err(SorError::Parse {
                    row: rec.source_row,
                    message: format!("expected {} covariate values, found {}", names.len(), rec.values.len()),
                });
            }
            if rec.z != 0.0 && rec.z != 1.0 {
                return Err(SorError::Parse {
                    row: rec.source_row,
                    message: format!("auxiliary indicator must be 0 or 1, found {}", rec.z),
                });
            }
            if !groups.contains_key(&rec.id) {
                order.push(rec.id.clone());
            }
            groups.entry(rec.id.clone()).or_default().push(rec);
        }
        let n: usize = groups.values().map(Vec::len).sum();
        let mut ds = Self {
            subject_ids: Vec::with_capacity(order.len()),
            offsets: vec![0],
            time: Vec::with_capacity(n),
            y: Vec::with_capacity(n),
            z: Vec::with_capacity(n),
            columns: vec![Vec::with_capacity(n); names.len()],
            names,
            source_rows: Vec::with_capacity(n),
        };
        for id in order {
            let mut rows = groups.remove(&id).expect("grouped id");
            rows.sort_by(|a, b| a.time.total_cmp(&b.time));
            for w in rows.windows(2) {
                if w[0].time == w[1].time {
                    return Err(SorError::Parse {
                        row: w[1].source_row,
                        message: format!("duplicate time {} for subject '{id}'", w[1].time),
                    });
                }
            }
            for rec in rows {
                ds.time.push(rec.time);
                ds.y.push(rec.y);
                ds.z.push(rec.z);
                ds.source_rows.push(rec.source_row);
                for (c, v) in ds.columns.iter_mut().zip(rec.values) {
                    c.push(v);
                }
            }
            ds.subject_ids.push(id);
            ds.offsets.push(ds.y.len());
        }
        Ok(ds)
    }

    /// Builds a dataset from already-grouped columns; `offsets` delimit subjects.
    pub fn from_columns(
        subject_ids: Vec<String>,
        offsets: Vec<usize>,
        time: Vec<f64>,
        y: Vec<f64>,
        z: Vec<f64>,
        columns: BTreeMap<String, Vec<f64>>,
    ) -> Result<Self> {
        let n = y.len();
        if offsets.first() != Some(&0) || offsets.last() != Some(&n) || offsets.len() != subject_ids.len() + 1 {
            return Err(SorError::config("subject offsets do not partition the rows"));
        }
        if time.len() != n || z.len() != n || columns.values().any(|c| c.len() != n) {
            return Err(SorError::config("dataset columns differ in length"));
        }
        let (names, columns): (Vec<String>, Vec<Vec<f64>>) = columns.into_iter().unzip();
        Ok(Self { subject_ids, offsets, time, y, z, names, columns, source_rows: (1..=n).collect() })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn subject_rows(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn column_names(&self) -> &[String] {
        &self.names
    }

    pub fn source_row(&self, i: usize) -> usize {
        self.source_rows[i]
    }

    /// A named column; "1" and "intercept" denote the constant column.
    pub fn column(&self, name: &str) -> Result<Cow<'_, [f64]>> {
        if name == "1" || name.eq_ignore_ascii_case("intercept") {
            return Ok(Cow::Owned(vec![1.0; self.n_obs()]));
        }
        match name {
            "time" | "t" if !self.names.iter().any(|n| n == name) => return Ok(Cow::Borrowed(&self.time)),
            _ => {}
        }
        self.names
            .iter()
            .position(|n| n == name)
            .map(|k| Cow::Borrowed(self.columns[k].as_slice()))
            .ok_or_else(|| SorError::config(format!("column '{name}' not found in data")))
    }

    pub fn matrix(&self, names: &[String]) -> Result<DMatrix<f64>> {
        let cols = names.iter().map(|n| self.column(n)).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_fn(self.n_obs(), names.len(), |i, k| cols[k][i]))
    }

    /// Responses rescaled by `c`; used by equivariance checks.
    pub fn with_scaled_response(&self, c: f64) -> Self {
        let mut d = self.clone();
        d.y.iter_mut().for_each(|y| *y *= c);
        d
    }
}

/// Column choices for a fit.
#[derive(Debug, Clone, Default)]
pub struct FrameSpec {
    pub mean: Vec<String>,
    pub w1: Vec<String>,
    pub w2: Vec<String>,
}

/// The numeric view of a dataset under a design: matrices, ratios and clusters.
#[derive(Debug, Clone)]
pub struct ModelFrame {
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub x: DMatrix<f64>,
    pub x_names: Vec<String>,
    pub w1: DMatrix<f64>,
    pub w1_names: Vec<String>,
    pub w2: DMatrix<f64>,
    pub w2_names: Vec<String>,
    /// Design ratio r of each row.
    pub r: Vec<f64>,
    /// π(Z, X1) of each row when absolute probabilities are known.
    pub pi: Option<Vec<f64>>,
    pub offsets: Vec<usize>,
    pub subject_ids: Vec<String>,
    pub level: DesignLevel,
}

impl ModelFrame {
    pub fn build(data: &LongitudinalDataset, spec: &FrameSpec, design: &SamplingDesign) -> Result<Self> {
        if data.n_obs() == 0 {
            return Err(SorError::config("dataset has no rows"));
        }
        for (i, y) in data.y.iter().enumerate() {
            if !y.is_finite() {
                return Err(SorError::Parse { row: data.source_row(i), message: format!("response {y} is not finite") });
            }
        }
        let (r, pi) = design.resolve(data)?;
        Ok(Self {
            y: data.y.clone(),
            z: data.z.clone(),
            x: data.matrix(&spec.mean)?,
            x_names: spec.mean.clone(),
            w1: data.matrix(&spec.w1)?,
            w1_names: spec.w1.clone(),
            w2: data.matrix(&spec.w2)?,
            w2_names: spec.w2.clone(),
            r,
            pi,
            offsets: data.offsets().to_vec(),
            subject_ids: data.subject_ids().to_vec(),
            level: design.level,
        })
    }

    pub fn n_obs(&self) -> usize {
        self.y.len()
    }

    pub fn n_subjects(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn subject_rows(&self, k: usize) -> Range<usize> {
        self.offsets[k]..self.offsets[k + 1]
    }

    pub fn max_cluster_size(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    /// Subject-level designs sample whole subjects, so Z must not vary within one.
    pub fn check_z_constant_within_subject(&self) -> Result<()> {
        if self.level != DesignLevel::Subject {
            return Ok(());
        }
        for k in 0..self.n_subjects() {
            let rows = self.subject_rows(k);
            let z0 = self.z[rows.start];
            if self.z[rows].iter().any(|&z| z != z0) {
                return Err(SorError::domain(format!(
                    "subject '{}' has a varying auxiliary indicator under a subject-level design",
                    self.subject_ids[k]
                )));
            }
        }
        Ok(())
    }

    /// Copy with every ratio set to one and probabilities removed.
    pub fn with_unit_ratio(&self) -> Self {
        let mut f = self.clone();
        f.r.iter_mut().for_each(|r| *r = 1.0);
        f.pi = None;
        f
    }

    /// Median of the observed responses.
    pub fn response_median(&self) -> f64 {
        let mut v = self.y.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}
