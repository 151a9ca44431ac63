//! Slide-pair robustness metrics: tile cosine similarity, mean cosine over
//! matched tiles, and top-k retrieval accuracy of the matched tile among all
//! tiles of both slides.
//!
//! For query `a_i` the rank of its match `b_i` is the number of tiles
//! `t ∈ A ∪ B, t ≠ a_i` with `cos(a_i, t) >= cos(a_i, b_i)`. The comparison is
//! exact (no epsilon), so the match itself always counts and ties with it
//! count against the query.

mod kernel;

pub use kernel::{pair_ranks, pair_ranks_profiled, PairRanks, WithinSlideProfile};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{row_norm, EmbeddingMatrix};

/// Default top-k cutoffs.
pub const DEFAULT_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
        })
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("zero vector has no cosine similarity")]
    ZeroVector,
    #[error("row {row} of slide {side} is all zeros")]
    ZeroRow { side: Side, row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("query index {index} out of range for {n} tiles")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("k must be at least 1")]
    InvalidK,
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| (x as f64).mul_add(y as f64, acc))
}

/// `cos` without clamping; the value rank comparisons are made on.
fn raw_cosine(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    dot(a, b) / (na * nb)
}

fn clamp_unit(c: f64) -> f64 {
    debug_assert!(c.abs() <= 1.0 + 1e-7, "cosine {c} overshoots by more than rounding");
    c.clamp(-1.0, 1.0)
}

pub fn cosine_similarity(t1: &[f32], t2: &[f32]) -> Result<f64, MetricsError> {
    if t1.len() != t2.len() {
        return Err(MetricsError::Shape(format!("dimensions {} and {}", t1.len(), t2.len())));
    }
    let (n1, n2) = (row_norm(t1), row_norm(t2));
    if n1 == 0.0 || n2 == 0.0 {
        return Err(MetricsError::ZeroVector);
    }
    Ok(clamp_unit(raw_cosine(t1, t2, n1, n2)))
}

fn check_pair(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<(), MetricsError> {
    if a.n_tiles() != b.n_tiles() || a.dim() != b.dim() {
        return Err(MetricsError::Shape(format!("{}x{} vs {}x{}", a.n_tiles(), a.dim(), b.n_tiles(), b.dim())));
    }
    Ok(())
}

fn norms(m: &EmbeddingMatrix, side: Side) -> Result<Vec<f64>, MetricsError> {
    m.rows()
        .enumerate()
        .map(|(row, r)| match row_norm(r) {
            0.0 => Err(MetricsError::ZeroRow { side, row }),
            n => Ok(n),
        })
        .collect()
}

/// Mean over `i` of `cos(a_i, b_i)`, summed in row order.
pub fn mean_cosine_similarity(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    let (na, nb) = (norms(a, Side::A)?, norms(b, Side::B)?);
    let sum: f64 = (0..a.n_tiles()).map(|i| clamp_unit(raw_cosine(a.row(i), b.row(i), na[i], nb[i]))).sum();
    Ok(sum / a.n_tiles() as f64)
}

fn rank_with_norms(i: usize, a: &EmbeddingMatrix, b: &EmbeddingMatrix, na: &[f64], nb: &[f64]) -> usize {
    let q = a.row(i);
    let matched = raw_cosine(q, b.row(i), na[i], nb[i]);
    let within = (0..a.n_tiles()).filter(|&j| j != i && raw_cosine(q, a.row(j), na[i], na[j]) >= matched).count();
    let across = (0..b.n_tiles()).filter(|&j| raw_cosine(q, b.row(j), na[i], nb[j]) >= matched).count();
    within + across
}

/// Rank of `b_i` among all tiles of `a ∪ b` except `a_i`, by similarity to `a_i`.
pub fn matched_rank(i: usize, a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<usize, MetricsError> {
    check_pair(a, b)?;
    if i >= a.n_tiles() {
        return Err(MetricsError::IndexOutOfRange { index: i, n: a.n_tiles() });
    }
    let (na, nb) = (norms(a, Side::A)?, norms(b, Side::B)?);
    Ok(rank_with_norms(i, a, b, &na, &nb))
}

/// Fraction of tiles of `a` whose match in `b` has rank `<= k`.
pub fn top_k_accuracy_directed(a: &EmbeddingMatrix, b: &EmbeddingMatrix, k: usize) -> Result<f64, MetricsError> {
    check_pair(a, b)?;
    if k == 0 {
        return Err(MetricsError::InvalidK);
    }
    let (na, nb) = (norms(a, Side::A)?, norms(b, Side::B)?);
    let hits = (0..a.n_tiles()).filter(|&i| rank_with_norms(i, a, b, &na, &nb) <= k).count();
    Ok(hits as f64 / a.n_tiles() as f64)
}

fn fraction_within(ranks: &[u32], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r as usize <= k).count() as f64 / ranks.len() as f64
}

/// Metrics of one slide pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlidePairMetrics {
    pub slide_a: String,
    pub slide_b: String,
    pub mean_cosine: f64,
    /// Bidirectional accuracy: mean of the two directed values.
    pub topk_accuracy: BTreeMap<usize, f64>,
    pub directed_a_to_b: BTreeMap<usize, f64>,
    pub directed_b_to_a: BTreeMap<usize, f64>,
    pub n_tiles: usize,
}

impl SlidePairMetrics {
    pub fn from_ranks(ranks: &PairRanks, ks: &[usize]) -> Result<Self, MetricsError> {
        if ks.contains(&0) {
            return Err(MetricsError::InvalidK);
        }
        let n = ranks.matched.len();
        let mean_cosine = ranks.matched.iter().map(|&c| clamp_unit(c)).sum::<f64>() / n as f64;
        let mut out = Self {
            slide_a: String::new(),
            slide_b: String::new(),
            mean_cosine,
            topk_accuracy: BTreeMap::new(),
            directed_a_to_b: BTreeMap::new(),
            directed_b_to_a: BTreeMap::new(),
            n_tiles: n,
        };
        for &k in ks {
            let ab = fraction_within(&ranks.a_to_b, k);
            let ba = fraction_within(&ranks.b_to_a, k);
            out.directed_a_to_b.insert(k, ab);
            out.directed_b_to_a.insert(k, ba);
            out.topk_accuracy.insert(k, (ab + ba) / 2.0);
        }
        Ok(out)
    }

    pub fn with_ids(mut self, slide_a: impl Into<String>, slide_b: impl Into<String>) -> Self {
        self.slide_a = slide_a.into();
        self.slide_b = slide_b.into();
        self
    }
}

/// Mean cosine plus directed and bidirectional top-k accuracy for every `k` in `ks`.
pub fn top_k_accuracy(
    a: &EmbeddingMatrix,
    b: &EmbeddingMatrix,
    ks: &[usize],
) -> Result<SlidePairMetrics, MetricsError> {
    if ks.contains(&0) {
        return Err(MetricsError::InvalidK);
    }
    let ranks = pair_ranks(a, b)?;
    SlidePairMetrics::from_ranks(&ranks, ks)
}
