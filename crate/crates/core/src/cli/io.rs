//! Long-format CSV ingestion.

use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::FitConfig;
use crate::data::{LongitudinalDataset, Record};
use crate::error::{Result, SorError};

/// A parsed input file together with the SHA-256 of its bytes.
pub struct LoadedData {
    pub dataset: LongitudinalDataset,
    pub sha256: String,
}

pub fn read_long_csv(path: &Path, config: &FitConfig) -> Result<LoadedData> {
    let bytes = std::fs::read(path)
        .map_err(|e| SorError::Io(std::io::Error::new(e.kind(), format!("cannot read '{}': {e}", path.display()))))?;
    let sha256 = hex::encode(Sha256::digest(&bytes));
    let dataset = parse_long_csv(&bytes, config)?;
    Ok(LoadedData { dataset, sha256 })
}

/// Parses CSV bytes. Row numbers in errors count the header as row 1.
pub fn parse_long_csv(bytes: &[u8], config: &FitConfig) -> Result<LongitudinalDataset> {
    let text = std::str::from_utf8(bytes).map_err(|e| SorError::Parse { row: 1, message: format!("input is not UTF-8: {e}") })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| SorError::Parse { row: 1, message: e.to_string() })?
        .clone();
    let locate = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| SorError::Parse {
            row: 1,
            message: format!("missing column '{name}' (header has: {})", header.iter().collect::<Vec<_>>().join(", ")),
        })
    };
    let id_col = locate(&config.id)?;
    let time_col = locate(&config.time)?;
    let y_col = locate(&config.response)?;
    let z_col = locate(&config.aux)?;
    let names = config.covariate_columns();
    let cov_cols = names.iter().map(|n| locate(n)).collect::<Result<Vec<_>>>()?;

    let mut records = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(|e| SorError::Parse { row, message: e.to_string() })?;
        let cell = |c: usize| -> Result<&str> {
            match rec.get(c) {
                Some(v) if !v.is_empty() => Ok(v),
                _ => Err(SorError::Parse { row, message: format!("missing value in column '{}'", &header[c]) }),
            }
        };
        let num = |c: usize| -> Result<f64> {
            let v = cell(c)?;
            match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(SorError::Parse { row, message: format!("column '{}' has non-numeric value '{v}'", &header[c]) }),
            }
        };
        records.push(Record {
            id: cell(id_col)?.to_string(),
            time: num(time_col)?,
            y: num(y_col)?,
            z: num(z_col)?,
            values: cov_cols.iter().map(|&c| num(c)).collect::<Result<_>>()?,
            source_row: row,
        });
    }
    if records.is_empty() {
        return Err(SorError::Parse { row: 2, message: "no data rows".into() });
    }
    LongitudinalDataset::from_records(names, records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::family::FamilyKind;

    fn cfg() -> FitConfig {
        let mut c = FitConfig::skeleton(FamilyKind::Poisson);
        c.mean = vec!["1".into(), "x".into()];
        c
    }

    #[test]
    fn toy_file_groups_one_subject() {
        let d = parse_long_csv(b"id,time,y,z,x\na,2,1,0,0.5\na,1,0,0,0.5\na,3,4,0,0.5\n", &cfg()).unwrap();
        assert_eq!(d.n_subjects(), 1);
        assert_eq!(d.n_obs(), 3);
        assert_eq!(d.time, vec![1.0, 2.0, 3.0]);
        assert_eq!(d.y, vec![0.0, 1.0, 4.0]);
    }

    #[test]
    fn errors_carry_row_numbers() {
        let bad_z = parse_long_csv(b"id,time,y,z,x\na,1,1,0,0\na,2,1,2,0\n", &cfg()).unwrap_err();
        assert!(matches!(bad_z, SorError::Parse { row: 3, .. }), "{bad_z}");
        let missing = parse_long_csv(b"id,time,y,z\na,1,1,0\n", &cfg()).unwrap_err();
        assert!(matches!(missing, SorError::Parse { row: 1, .. }) && missing.to_string().contains("'x'"));
        let text = parse_long_csv(b"id,time,y,z,x\na,1,one,0,0\n", &cfg()).unwrap_err();
        assert!(matches!(text, SorError::Parse { row: 2, .. }));
        let empty = parse_long_csv(b"id,time,y,z,x\na,1,1,0,\n", &cfg()).unwrap_err();
        assert!(empty.to_string().contains("missing value"));
        let dup = parse_long_csv(b"id,time,y,z,x\na,1,1,0,0\nb,1,1,0,0\na,1,2,0,0\n", &cfg()).unwrap_err();
        assert!(matches!(dup, SorError::Parse { row: 4, .. }), "{dup}");
    }
}
