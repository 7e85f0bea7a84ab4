//! Feature sets: a JSONL manifest plus an ARFM binary matrix.
//!
//! ARFM layout, all little-endian: the bytes `ARFM`, then `u32` version (1),
//! `u32` rows, `u32` cols, then `rows · cols` `f32` values in row-major
//! order. Features are stored at 32-bit precision and widened to `f64` on
//! read.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{atomic_write, from_jsonl, to_jsonl};
use crate::error::{ArfError, Result};
use crate::numerics::Matrix;

pub const MAGIC: &[u8; 4] = b"ARFM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain_id: Option<u32>,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    manifest: Vec<FeatureRecord>,
    matrix: Matrix,
}

impl FeatureSet {
    pub fn new(manifest: Vec<FeatureRecord>, matrix: Matrix) -> Result<Self> {
        if manifest.len() != matrix.rows() {
            return Err(ArfError::RowCountMismatch {
                manifest: manifest.len(),
                matrix: matrix.rows(),
            });
        }
        let mut seen = HashSet::with_capacity(manifest.len());
        if let Some(r) = manifest.iter().find(|r| !seen.insert(r.id)) {
            return Err(ArfError::Malformed(format!(
                "duplicate id {} in manifest",
                r.id
            )));
        }
        Ok(FeatureSet { manifest, matrix })
    }

    pub fn manifest(&self) -> &[FeatureRecord] {
        &self.manifest
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    pub fn into_parts(self) -> (Vec<FeatureRecord>, Matrix) {
        (self.manifest, self.matrix)
    }
}

pub fn encode_matrix(m: &Matrix) -> Result<Vec<u8>> {
    let dim = |n: usize| {
        u32::try_from(n)
            .map_err(|_| ArfError::InvalidArgument(format!("dimension {n} exceeds u32")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&dim(m.rows())?.to_le_bytes());
    out.extend_from_slice(&dim(m.cols())?.to_le_bytes());
    for &v in m.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parses the header only: `(rows, cols)`.
pub fn decode_header(bytes: &[u8]) -> Result<(usize, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ArfError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(ArfError::Malformed("truncated ARFM header".into()));
    }
    let version = u32_at(bytes, 4);
    if version != VERSION {
        return Err(ArfError::VersionUnsupported(version.into()));
    }
    Ok((u32_at(bytes, 8) as usize, u32_at(bytes, 12) as usize))
}

pub fn decode_matrix(bytes: &[u8]) -> Result<Matrix> {
    let (rows, cols) = decode_header(bytes)?;
    let n = rows
        .checked_mul(cols)
        .ok_or_else(|| ArfError::Malformed("ARFM dimensions overflow".into()))?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n {
        return Err(ArfError::Malformed(format!(
            "ARFM body holds {} bytes, header implies {}",
            body.len(),
            4 * n
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Matrix::from_vec(rows, cols, values)
}

/// `(manifest path, matrix path)` for a feature set stored under `base`.
pub fn feature_paths(base: &Path) -> (PathBuf, PathBuf) {
    (base.with_extension("jsonl"), base.with_extension("arfm"))
}

pub fn write_feature_set(base: &Path, set: &FeatureSet) -> Result<()> {
    let (manifest, matrix) = feature_paths(base);
    atomic_write(&matrix, &encode_matrix(&set.matrix)?)?;
    atomic_write(&manifest, &to_jsonl(&set.manifest)?)
}

pub fn read_feature_set(base: &Path) -> Result<FeatureSet> {
    let (manifest, matrix) = feature_paths(base);
    let bytes = fs::read(matrix)?;
    let records: Vec<FeatureRecord> = from_jsonl(&fs::read_to_string(manifest)?)?;
    let (rows, _) = decode_header(&bytes)?;
    if rows != records.len() {
        return Err(ArfError::RowCountMismatch {
            manifest: records.len(),
            matrix: rows,
        });
    }
    FeatureSet::new(records, decode_matrix(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_set(n: usize) -> FeatureSet {
        let manifest = (0..n as u64)
            .map(|i| FeatureRecord {
                id: 100 + i,
                class_id: (i % 2 == 0).then_some(i as u32),
                domain_id: Some(0),
                kind: "finetune".into(),
            })
            .collect();
        let values = (0..n * 3).map(|i| (i as f64) * 0.1 - 0.7).collect();
        FeatureSet::new(manifest, Matrix::from_vec(n, 3, values).unwrap()).unwrap()
    }

    #[test]
    fn header_bytes() {
        let m = Matrix::from_vec(1, 2, vec![1.0, -2.0]).unwrap();
        let b = encode_matrix(&m).unwrap();
        assert_eq!(&b[..4], b"ARFM");
        assert_eq!(&b[4..16], &[1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24);
    }

    #[test]
    fn manifest_key_order() {
        let s = sample_set(2);
        let text = String::from_utf8(to_jsonl(s.manifest()).unwrap()).unwrap();
        assert_eq!(
            text,
            "{\"id\":100,\"class_id\":0,\"domain_id\":0,\"kind\":\"finetune\"}\n{\"id\":101,\"domain_id\":0,\"kind\":\"finetune\"}\n"
        );
    }

    #[test]
    fn round_trip_within_f32() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("set");
        let s = sample_set(5);
        write_feature_set(&base, &s).unwrap();
        let back = read_feature_set(&base).unwrap();
        assert_eq!(back.manifest(), s.manifest());
        for (a, b) in back.matrix().as_slice().iter().zip(s.matrix().as_slice()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn corrupt_inputs() {
        let m = Matrix::from_vec(1, 1, vec![1.0]).unwrap();
        let mut b = encode_matrix(&m).unwrap();
        b[0] = b'X';
        assert!(matches!(decode_matrix(&b), Err(ArfError::BadMagic)));
        let mut b = encode_matrix(&m).unwrap();
        b[4] = 2;
        assert!(matches!(
            decode_matrix(&b),
            Err(ArfError::VersionUnsupported(2))
        ));
        let b = encode_matrix(&m).unwrap();
        assert!(matches!(
            decode_matrix(&b[..18]),
            Err(ArfError::Malformed(_))
        ));
    }

    #[test]
    fn manifest_longer_than_matrix() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("set");
        let s = sample_set(10);
        write_feature_set(&base, &s).unwrap();
        let nine = Matrix::from_rows(3, s.matrix().row_iter().take(9)).unwrap();
        atomic_write(&feature_paths(&base).1, &encode_matrix(&nine).unwrap()).unwrap();
        assert!(matches!(
            read_feature_set(&base),
            Err(ArfError::RowCountMismatch {
                manifest: 10,
                matrix: 9
            })
        ));
    }

    #[test]
    fn duplicate_ids_rejected() {
        let r = FeatureRecord {
            id: 1,
            class_id: None,
            domain_id: None,
            kind: "x".into(),
        };
        assert!(FeatureSet::new(vec![r.clone(), r], Matrix::zeros(2, 1)).is_err());
    }
}
