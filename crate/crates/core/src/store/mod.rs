//! Tile-embedding matrices, the PEB1 file format, and cohort manifests.
//!
//! A slide is an `n_tiles × dim` matrix of `f32` features. Tile correspondence
//! between two slides of a cohort is positional: row `i` of one slide is the
//! registered counterpart of row `i` of every other slide.

mod manifest;
mod peb;

pub use manifest::{load_manifest, read_manifest_records, CohortManifest, SlideRecord};
pub use peb::{read_embedding_file, write_embedding_file, PEB1_HEADER_LEN, PEB1_MAGIC, PEB1_VERSION};

use std::path::PathBuf;

use thiserror::Error;

/// Tolerance on the row norm of a matrix flagged as normalized.
pub const UNIT_NORM_TOL: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, expected \"PEB1\"")]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported PEB version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("{path}: truncated payload, header declares {expected} bytes but {found} are present")]
    Truncated { path: PathBuf, expected: u64, found: u64 },
    #[error("{path}: {extra} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, extra: u64 },
    #[error("non-finite value at row {row}, col {col}")]
    NonFinite { row: usize, col: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("row {0} is all zeros")]
    ZeroRow(usize),
    #[error("row {row} has norm {norm}, expected 1")]
    NotUnit { row: usize, norm: f64 },
    #[error("empty manifest")]
    EmptyManifest,
    #[error("manifest line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("manifest line {line}: duplicate (staining, scanner) = ({staining}, {scanner})")]
    DuplicatePair { line: usize, staining: String, scanner: String },
    #[error("manifest line {line}: duplicate slide_id {slide_id}")]
    DuplicateSlide { line: usize, slide_id: String },
    #[error("manifest line {line}: {field} = {found} but the cohort uses {expected}")]
    Inconsistent { line: usize, field: &'static str, expected: usize, found: usize },
}

impl StoreError {
    pub fn is_io(&self) -> bool {
        matches!(self, StoreError::Io { .. })
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        StoreError::Io { path: path.into(), source }
    }
}

/// Row-major `n_tiles × dim` matrix of finite `f32` tile features.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_tiles: usize,
    dim: usize,
    values: Vec<f32>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(n_tiles: usize, dim: usize, values: Vec<f32>) -> Result<Self, StoreError> {
        if n_tiles == 0 || dim == 0 {
            return Err(StoreError::Shape(format!("{n_tiles}x{dim} matrix has no entries")));
        }
        if values.len() != n_tiles * dim {
            return Err(StoreError::Shape(format!(
                "{n_tiles}x{dim} matrix needs {} values, got {}",
                n_tiles * dim,
                values.len()
            )));
        }
        if let Some(idx) = values.iter().position(|v| !v.is_finite()) {
            return Err(StoreError::NonFinite { row: idx / dim, col: idx % dim });
        }
        Ok(Self { n_tiles, dim, values, normalized: false })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self, StoreError> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(StoreError::Shape(format!("row {i} has {} columns, expected {dim}", r.len())));
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    /// Marks the matrix as normalized after checking every row has unit norm.
    pub fn into_normalized(mut self) -> Result<Self, StoreError> {
        for i in 0..self.n_tiles {
            let norm = row_norm(self.row(i));
            if norm == 0.0 {
                return Err(StoreError::ZeroRow(i));
            }
            if (norm - 1.0).abs() > UNIT_NORM_TOL {
                return Err(StoreError::NotUnit { row: i, norm });
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.values.chunks_exact(self.dim)
    }
}

/// Euclidean norm with `f64` accumulation in index order.
pub fn row_norm(row: &[f32]) -> f64 {
    row.iter().fold(0.0f64, |acc, &v| (v as f64).mul_add(v as f64, acc)).sqrt()
}

/// Scales every row to unit Euclidean norm.
pub fn normalize_rows(matrix: &EmbeddingMatrix) -> Result<EmbeddingMatrix, StoreError> {
    let mut values = Vec::with_capacity(matrix.values.len());
    for (i, row) in matrix.rows().enumerate() {
        let norm = row_norm(row);
        if norm == 0.0 {
            return Err(StoreError::ZeroRow(i));
        }
        values.extend(row.iter().map(|&v| (v as f64 / norm) as f32));
    }
    Ok(EmbeddingMatrix { n_tiles: matrix.n_tiles, dim: matrix.dim, values, normalized: true })
}

/// Tile embedding built from a ViT output: the class token followed by the
/// column mean of the patch tokens.
pub fn concat_cls_mean<R: AsRef<[f32]>>(cls: &[f32], patch_tokens: &[R]) -> Result<Vec<f32>, StoreError> {
    if patch_tokens.is_empty() {
        return Err(StoreError::Shape("no patch tokens".into()));
    }
    let d = cls.len();
    let mut sums = vec![0.0f64; d];
    for (p, tok) in patch_tokens.iter().enumerate() {
        let tok = tok.as_ref();
        if tok.len() != d {
            return Err(StoreError::Shape(format!("patch token {p} has dimension {}, class token has {d}", tok.len())));
        }
        for (s, &v) in sums.iter_mut().zip(tok) {
            *s += v as f64;
        }
    }
    let count = patch_tokens.len() as f64;
    let mut out = Vec::with_capacity(2 * d);
    out.extend_from_slice(cls);
    out.extend(sums.into_iter().map(|s| (s / count) as f32));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_three_four_five() {
        let m = EmbeddingMatrix::from_rows(&[[3.0f32, 4.0], [1.0, 0.0]]).unwrap();
        let n = normalize_rows(&m).unwrap();
        assert!(n.is_normalized());
        assert!((n.row(0)[0] - 0.6).abs() < 1e-7);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-7);
        assert_eq!(n.row(1), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_rejects_zero_row() {
        let m = EmbeddingMatrix::from_rows(&[[1.0f32, 1.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(normalize_rows(&m), Err(StoreError::ZeroRow(1))));
    }

    #[test]
    fn rejects_non_finite() {
        let err = EmbeddingMatrix::new(2, 2, vec![0.0, 1.0, f32::NAN, 2.0]).unwrap_err();
        assert!(matches!(err, StoreError::NonFinite { row: 1, col: 0 }));
    }

    #[test]
    fn into_normalized_checks_norms() {
        let m = EmbeddingMatrix::from_rows(&[[3.0f32, 4.0]]).unwrap();
        assert!(matches!(m.into_normalized(), Err(StoreError::NotUnit { row: 0, .. })));
        let m = EmbeddingMatrix::from_rows(&[[0.6f32, 0.8]]).unwrap();
        assert!(m.into_normalized().unwrap().is_normalized());
    }

    #[test]
    fn cls_mean_concat() {
        let out = concat_cls_mean(&[1.0, 2.0], &[[0.0f32, 0.0], [2.0, 4.0]]).unwrap();
        assert_eq!(out, vec![1.0, 2.0, 1.0, 2.0]);
        let cls = [0.25f32, -3.0, 7.5];
        assert_eq!(concat_cls_mean(&cls, &[cls]).unwrap(), [cls, cls].concat());
    }

    #[test]
    fn cls_mean_errors() {
        assert!(concat_cls_mean::<[f32; 2]>(&[1.0, 2.0], &[]).is_err());
        assert!(matches!(concat_cls_mean(&[1.0, 2.0], &[[1.0f32, 2.0, 3.0]]), Err(StoreError::Shape(_))));
    }

    fn nonzero_row(d: usize) -> impl Strategy<Value = Vec<f32>> {
        prop::collection::vec(-100.0f32..100.0, d).prop_filter("nonzero", |r| row_norm(r) > 1e-3)
    }

    proptest! {
        #[test]
        fn normalize_is_idempotent(rows in prop::collection::vec(nonzero_row(5), 1..8)) {
            let m = EmbeddingMatrix::from_rows(&rows).unwrap();
            let once = normalize_rows(&m).unwrap();
            let twice = normalize_rows(&once).unwrap();
            for (a, b) in once.values().iter().zip(twice.values()) {
                prop_assert!((a - b).abs() <= 1e-7);
            }
        }

        #[test]
        fn normalized_dot_is_cosine(a in nonzero_row(6), b in nonzero_row(6)) {
            let m = normalize_rows(&EmbeddingMatrix::from_rows(&[a.clone(), b.clone()]).unwrap()).unwrap();
            let dot: f64 = m.row(0).iter().zip(m.row(1)).map(|(&x, &y)| x as f64 * y as f64).sum();
            let cos = crate::metrics::cosine_similarity(&a, &b).unwrap();
            prop_assert!((dot - cos).abs() <= 1e-6);
        }

        #[test]
        fn concat_keeps_cls(cls in prop::collection::vec(-5.0f32..5.0, 1..10), p in 1usize..5) {
            let patches: Vec<Vec<f32>> = (0..p).map(|i| cls.iter().map(|v| v * i as f32).collect()).collect();
            let out = concat_cls_mean(&cls, &patches).unwrap();
            prop_assert_eq!(out.len(), 2 * cls.len());
            prop_assert_eq!(&out[..cls.len()], &cls[..]);
        }
    }
}
