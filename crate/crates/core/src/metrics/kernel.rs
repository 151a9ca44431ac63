//! Tiled rank counting.
//!
//! The reference similarity of rows `u` and `v` is
//! `dot(u, v) / (norm_u * norm_v)` where `dot` is a sequential fused
//! multiply-add over `k = 0..dim` in `f64`, starting from `0.0`. Every count
//! produced here is the count that reference arithmetic gives.
//!
//! Rows are packed in panels of `W` rows, k-major inside a panel, and swept
//! tile by tile. Blocking over `k` interrupts the accumulation chain but never
//! reorders it, so an `f64` tile entry is bit-identical to the reference.
//!
//! The streaming sweeps first run in `f32`. Sequential FMA summation of `d`
//! terms is off by at most `γ_d · Σ|u_k v_k| ≤ γ_d · ‖u‖‖v‖`, with
//! `γ_d = d·ε / (1 - d·ε)`. Both estimates divide by the same `f64` norms, so
//! an `f32` cosine farther than [`screen_band`] from a threshold decides the
//! comparison exactly; the few entries inside the band are recomputed with the
//! reference arithmetic.
//!
//! Two strategies share the sweep:
//!
//! * [`pair_ranks`] streams the symmetric similarity space of `A ∪ B`,
//!   visiting each unordered row pair once and updating the counters of both
//!   endpoints. Memory is `O(N · dim)`.
//! * [`pair_ranks_profiled`] reuses a [`WithinSlideProfile`] per slide (each
//!   row's within-slide similarities, sorted) and only sweeps the `N × N`
//!   cross block. A profile costs `8·N²` bytes, so it suits small `N` where a
//!   slide takes part in many pairs.
//!
//! Counters are integers, so the ranks do not depend on thread count or
//! schedule.

use std::ops::Range;

use rayon::prelude::*;

use crate::store::{row_norm, EmbeddingMatrix};

use super::{MetricsError, Side};

/// Rows per parallel task.
const QUERY_ROWS: usize = 128;
/// Candidate rows whose partial sums are kept while sweeping `k`.
const CAND_ROWS: usize = 128;
/// `k` extent of one pass over a block.
const K_CHUNK: usize = 256;

/// Largest magnitude for which `f32` products and sums of up to 2^24 terms
/// cannot overflow.
const SCREEN_MAX_ABS: f32 = 1.0e15;
/// Smallest row norm for which `f32` underflow stays far below the band.
const SCREEN_MIN_NORM: f64 = 1.0e-6;

pub(crate) trait Lane: Copy + Default + Send + Sync + 'static {
    fn widen(v: f32) -> Self;
    fn fma(self, b: Self, c: Self) -> Self;
    fn to_f64(self) -> f64;

    /// Accumulates `query[k] ⊗ cand[k]` into an `R × C` tile, `k` ascending.
    #[inline(always)]
    fn micro<const R: usize, const C: usize>(acc: &mut [[Self; C]; R], query: &[Self], cand: &[Self]) {
        let mut a = *acc;
        for (q, c) in query.chunks_exact(R).zip(cand.chunks_exact(C)) {
            let q: &[Self; R] = q.try_into().unwrap();
            let c: &[Self; C] = c.try_into().unwrap();
            for r in 0..R {
                for s in 0..C {
                    a[r][s] = q[r].fma(c[s], a[r][s]);
                }
            }
        }
        *acc = a;
    }
}

impl Lane for f64 {
    #[inline(always)]
    fn widen(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn fma(self, b: Self, c: Self) -> Self {
        self.mul_add(b, c)
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
}

impl Lane for f32 {
    #[inline(always)]
    fn widen(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn fma(self, b: Self, c: Self) -> Self {
        self.mul_add(b, c)
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }

    #[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
    #[inline(always)]
    fn micro<const R: usize, const C: usize>(acc: &mut [[f32; C]; R], query: &[f32], cand: &[f32]) {
        if R == 8 && C == 32 {
            // SAFETY: the shapes were just checked, so the cast is an identity.
            let acc = unsafe { &mut *(acc as *mut [[f32; C]; R] as *mut [[f32; 32]; 8]) };
            avx512::micro_8x32(acc, query, cand);
        } else {
            let mut a = *acc;
            for (q, c) in query.chunks_exact(R).zip(cand.chunks_exact(C)) {
                for r in 0..R {
                    for s in 0..C {
                        a[r][s] = q[r].mul_add(c[s], a[r][s]);
                    }
                }
            }
            *acc = a;
        }
    }
}

#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
mod avx512 {
    use std::arch::x86_64::*;

    #[inline(always)]
    pub(super) fn micro_8x32(acc: &mut [[f32; 32]; 8], query: &[f32], cand: &[f32]) {
        let steps = query.len() / 8;
        assert!(query.len() == steps * 8 && cand.len() == steps * 32);
        // SAFETY: avx512f is enabled at compile time and every offset below is
        // within the lengths asserted above.
        unsafe {
            let mut lo = [_mm512_setzero_ps(); 8];
            let mut hi = [_mm512_setzero_ps(); 8];
            for r in 0..8 {
                lo[r] = _mm512_loadu_ps(acc[r].as_ptr());
                hi[r] = _mm512_loadu_ps(acc[r].as_ptr().add(16));
            }
            // `_mm512_loadu_ps` goes through `read_unaligned`, whose overlap
            // check runs on every load in builds with debug assertions; the
            // full-mask load compiles to the same instruction without it.
            let (mut q, mut c) = (query.as_ptr(), cand.as_ptr());
            for _ in 0..steps {
                let c0 = _mm512_maskz_loadu_ps(!0, c);
                let c1 = _mm512_maskz_loadu_ps(!0, c.wrapping_add(16));
                for r in 0..8 {
                    let x = _mm512_set1_ps(*q.wrapping_add(r));
                    lo[r] = _mm512_fmadd_ps(x, c0, lo[r]);
                    hi[r] = _mm512_fmadd_ps(x, c1, hi[r]);
                }
                q = q.wrapping_add(8);
                c = c.wrapping_add(32);
            }
            for r in 0..8 {
                _mm512_storeu_ps(acc[r].as_mut_ptr(), lo[r]);
                _mm512_storeu_ps(acc[r].as_mut_ptr().add(16), hi[r]);
            }
        }
    }
}

pub(crate) struct Packed<T: Lane, const W: usize> {
    rows: usize,
    dim: usize,
    data: Vec<T>,
    norms: Vec<f64>,
}

type Exact = Packed<f64, 8>;
type CoarseQuery = Packed<f32, 8>;
#[cfg(all(target_arch = "x86_64", target_feature = "avx512f"))]
type CoarseCand = Packed<f32, 32>;
#[cfg(not(all(target_arch = "x86_64", target_feature = "avx512f")))]
type CoarseCand = Packed<f32, 8>;

impl<T: Lane, const W: usize> Packed<T, W> {
    #[cfg(test)]
    const WIDTH: usize = W;

    fn pack(slides: &[&EmbeddingMatrix]) -> Self {
        let norms = slides.iter().flat_map(|s| s.rows()).map(row_norm).collect();
        Self::pack_with_norms(slides, norms)
    }

    /// `norms` holds the row norms of the concatenated slides.
    fn pack_with_norms(slides: &[&EmbeddingMatrix], norms: Vec<f64>) -> Self {
        let dim = slides[0].dim();
        let rows: usize = slides.iter().map(|s| s.n_tiles()).sum();
        debug_assert_eq!(norms.len(), rows);
        let mut data = vec![T::default(); rows.div_ceil(W) * W * dim];
        for (r, row) in slides.iter().flat_map(|s| s.rows()).enumerate() {
            let base = (r / W) * W * dim + r % W;
            for (k, &v) in row.iter().enumerate() {
                data[base + k * W] = T::widen(v);
            }
        }
        Self { rows, dim, data, norms }
    }

    fn panels(&self) -> usize {
        self.rows.div_ceil(W)
    }

    fn chunk(&self, p: usize, k: Range<usize>) -> &[T] {
        let base = p * W * self.dim;
        &self.data[base + k.start * W..base + k.end * W]
    }

    fn first_zero_row(&self) -> Option<usize> {
        self.norms.iter().position(|&x| x == 0.0)
    }
}

/// Reference dot product of two rows.
fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |acc, (&x, &y)| (x as f64).mul_add(y as f64, acc))
}

/// Half-width of the band around a threshold inside which an `f32` cosine
/// estimate cannot decide `cos >= threshold`.
pub(crate) fn screen_band(dim: usize) -> f64 {
    let gamma = |eps: f64| {
        let de = dim as f64 * eps;
        de / (1.0 - de)
    };
    1.01 * (gamma(f32::EPSILON as f64 / 2.0) + gamma(f64::EPSILON / 2.0)) + 1e-15
}

fn screenable(slides: &[&EmbeddingMatrix], norms: &[f64]) -> bool {
    let dim = slides[0].dim();
    (dim as f64) * (f32::EPSILON as f64) < 0.01
        && norms.iter().all(|&n| n >= SCREEN_MIN_NORM)
        && slides.iter().all(|s| s.values().iter().all(|v| v.abs() <= SCREEN_MAX_ABS))
}

/// Finished dot-product tiles of query panels `qp` against every candidate
/// panel, handed to `visit(p, q, tile)`. With `upper` (both sides packing the
/// same rows) tiles holding no entry with `v > u` are skipped.
fn for_each_tile<T: Lane, const R: usize, const C: usize>(
    queries: &Packed<T, R>,
    cands: &Packed<T, C>,
    qp: Range<usize>,
    upper: bool,
    mut visit: impl FnMut(usize, usize, &[[T; C]; R]),
) {
    let dim = queries.dim;
    let cand_panels = (CAND_ROWS / C).max(1);
    let zero = [[T::default(); C]; R];
    let mut acc = vec![zero; qp.len() * cand_panels];
    let below = |p: usize, q: usize| upper && q * C + C <= p * R + 1;
    let mut block = if upper { qp.start * R / C } else { 0 };
    while block < cands.panels() {
        let cp = block..(block + cand_panels).min(cands.panels());
        acc.iter_mut().for_each(|t| *t = zero);
        let mut k = 0;
        while k < dim {
            let ks = k..(k + K_CHUNK).min(dim);
            for (pi, p) in qp.clone().enumerate() {
                let qchunk = queries.chunk(p, ks.clone());
                for (ci, q) in cp.clone().enumerate() {
                    if !below(p, q) {
                        T::micro(&mut acc[pi * cand_panels + ci], qchunk, cands.chunk(q, ks.clone()));
                    }
                }
            }
            k = ks.end;
        }
        for (pi, p) in qp.clone().enumerate() {
            for (ci, q) in cp.clone().enumerate() {
                if !below(p, q) {
                    visit(p, q, &acc[pi * cand_panels + ci]);
                }
            }
        }
        block = cp.end;
    }
}

fn query_blocks(panels: usize, width: usize) -> impl IndexedParallelIterator<Item = Range<usize>> {
    let per_block = (QUERY_ROWS / width).max(1);
    (0..panels.div_ceil(per_block)).into_par_iter().map(move |g| g * per_block..((g + 1) * per_block).min(panels))
}

fn add_counts(mut x: Vec<u32>, y: Vec<u32>) -> Vec<u32> {
    x.iter_mut().zip(&y).for_each(|(a, b)| *a += b);
    x
}

/// Row access for the exact fallback over a concatenation of slides.
struct Rows<'a> {
    parts: &'a [&'a EmbeddingMatrix],
    n: usize,
}

impl Rows<'_> {
    fn row(&self, u: usize) -> &[f32] {
        self.parts[u / self.n].row(u % self.n)
    }
}

/// Decides `cos(u, v) >= threshold` for one endpoint. `exact` is computed at
/// most once per entry and shared by both endpoints.
#[inline(always)]
fn screened_hit(
    estimate: f64,
    threshold: f64,
    band: f64,
    exact: &mut Option<f64>,
    reference: impl FnOnce() -> f64,
) -> bool {
    if estimate >= threshold + band {
        true
    } else if estimate <= threshold - band {
        false
    } else {
        *exact.get_or_insert_with(reference) >= threshold
    }
}

/// Counts, for every row `u` of the sweep, the candidates `v` with
/// `cos(u, v) >= thr(u)`, and symmetrically for `v`. `qrows`/`crows` map
/// panel-local rows back to the exact fallback; `offset` shifts candidate
/// counters when the two sides are distinct matrices.
struct CountSpec<'a> {
    q_rows: Rows<'a>,
    c_rows: Rows<'a>,
    q_thr: &'a [f64],
    c_thr: &'a [f64],
    upper: bool,
    c_offset: usize,
    total: usize,
}

fn count_sweep<T: Lane, const R: usize, const C: usize>(
    queries: &Packed<T, R>,
    cands: &Packed<T, C>,
    spec: &CountSpec<'_>,
    screened: bool,
) -> Vec<u32> {
    let band = screen_band(queries.dim);
    let (nq, nc) = (queries.rows, cands.rows);
    query_blocks(queries.panels(), R)
        .fold(
            || vec![0u32; spec.total],
            |mut counts, qp| {
                for_each_tile(queries, cands, qp, spec.upper, |p, q, tile| {
                    for (r, row) in tile.iter().enumerate() {
                        let u = p * R + r;
                        if u >= nq {
                            break;
                        }
                        let (tu, nu) = (spec.q_thr[u], queries.norms[u]);
                        let from = if spec.upper { (u + 1).saturating_sub(q * C) } else { 0 };
                        for (s, &d) in row.iter().enumerate().skip(from) {
                            let v = q * C + s;
                            if v >= nc {
                                break;
                            }
                            let tv = spec.c_thr[v];
                            let nuv = nu * cands.norms[v];
                            let cos = d.to_f64() / nuv;
                            let (hit_u, hit_v) = if screened {
                                let mut exact = None;
                                let reference = || dot(spec.q_rows.row(u), spec.c_rows.row(v)) / nuv;
                                let hu = screened_hit(cos, tu, band, &mut exact, reference);
                                let hv = screened_hit(cos, tv, band, &mut exact, reference);
                                (hu, hv)
                            } else {
                                (cos >= tu, cos >= tv)
                            };
                            counts[u] += hit_u as u32;
                            counts[spec.c_offset + v] += hit_v as u32;
                        }
                    }
                });
                counts
            },
        )
        .reduce(|| vec![0u32; spec.total], add_counts)
}

/// Matched ranks for both directions of a slide pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairRanks {
    /// Rank of `b_i` for query `a_i`, in `1..=2N-1`.
    pub a_to_b: Vec<u32>,
    /// Rank of `a_i` for query `b_i`.
    pub b_to_a: Vec<u32>,
    /// `cos(a_i, b_i)`, unclamped.
    pub matched: Vec<f64>,
}

/// Row norms of `m`, rejecting all-zero rows.
fn nonzero_norms(m: &EmbeddingMatrix, side: Side) -> Result<Vec<f64>, MetricsError> {
    m.rows()
        .enumerate()
        .map(|(row, r)| match row_norm(r) {
            0.0 => Err(MetricsError::ZeroRow { side, row }),
            x => Ok(x),
        })
        .collect()
}

fn matched_cosines(a: &EmbeddingMatrix, b: &EmbeddingMatrix, na: &[f64], nb: &[f64]) -> Vec<f64> {
    (0..a.n_tiles()).map(|i| dot(a.row(i), b.row(i)) / (na[i] * nb[i])).collect()
}

/// Streaming ranks over the symmetric similarity space of `a ∪ b`.
pub fn pair_ranks(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> Result<PairRanks, MetricsError> {
    super::check_pair(a, b)?;
    let n = a.n_tiles();
    let (na, nb) = (nonzero_norms(a, Side::A)?, nonzero_norms(b, Side::B)?);
    let matched = matched_cosines(a, b, &na, &nb);
    let norms: Vec<f64> = na.into_iter().chain(nb).collect();
    let thresholds: Vec<f64> = matched.iter().chain(&matched).copied().collect();
    let parts = [a, b];
    let spec = CountSpec {
        q_rows: Rows { parts: &parts, n },
        c_rows: Rows { parts: &parts, n },
        q_thr: &thresholds,
        c_thr: &thresholds,
        upper: true,
        c_offset: 0,
        total: 2 * n,
    };
    let counts = if screenable(&parts, &norms) {
        let queries = CoarseQuery::pack_with_norms(&parts, norms.clone());
        count_sweep(&queries, &CoarseCand::pack_with_norms(&parts, norms), &spec, true)
    } else {
        let union = Exact::pack_with_norms(&parts, norms);
        count_sweep(&union, &union, &spec, false)
    };
    let (a_to_b, b_to_a) = counts.split_at(n);
    Ok(PairRanks { a_to_b: a_to_b.to_vec(), b_to_a: b_to_a.to_vec(), matched })
}

/// Per-row within-slide cosine similarities of one slide, sorted in
/// descending order, plus the slide itself.
pub struct WithinSlideProfile {
    slide: EmbeddingMatrix,
    norms: Vec<f64>,
    /// Row `i` occupies `sorted[i * (n - 1)..(i + 1) * (n - 1)]`.
    sorted: Vec<f64>,
}

impl WithinSlideProfile {
    pub fn build(slide: &EmbeddingMatrix) -> Result<Self, MetricsError> {
        let n = slide.n_tiles();
        let packed = Exact::pack(&[slide]);
        if let Some(row) = packed.first_zero_row() {
            return Err(MetricsError::ZeroRow { side: Side::A, row });
        }
        const W: usize = 8;
        let width = n - 1;
        let rows_per_block = (QUERY_ROWS / W).max(1) * W;
        let mut sorted = vec![0.0f64; n * width];
        if width > 0 {
            sorted.par_chunks_mut(rows_per_block * width).enumerate().for_each(|(g, out)| {
                let first = g * rows_per_block;
                let qp = first / W..((first + rows_per_block) / W).min(packed.panels());
                for_each_tile(&packed, &packed, qp, false, |p, q, tile| {
                    for (r, row) in tile.iter().enumerate() {
                        let u = p * W + r;
                        if u >= n {
                            break;
                        }
                        let local = (u - first) * width;
                        for (s, &d) in row.iter().enumerate() {
                            let v = q * W + s;
                            if v >= n {
                                break;
                            }
                            if v != u {
                                let slot = if v < u { v } else { v - 1 };
                                out[local + slot] = d / (packed.norms[u] * packed.norms[v]);
                            }
                        }
                    }
                });
                for row in out.chunks_mut(width) {
                    row.sort_unstable_by(|x, y| y.total_cmp(x));
                }
            });
        }
        Ok(Self { slide: slide.clone(), norms: packed.norms, sorted })
    }

    pub fn slide(&self) -> &EmbeddingMatrix {
        &self.slide
    }

    pub fn n_tiles(&self) -> usize {
        self.slide.n_tiles()
    }

    /// Number of other rows of the slide with similarity `>= threshold` to row `i`.
    fn count_at_least(&self, i: usize, threshold: f64) -> u32 {
        let width = self.n_tiles() - 1;
        self.sorted[i * width..(i + 1) * width].partition_point(|&x| x >= threshold) as u32
    }

    pub fn memory_bytes(&self) -> usize {
        (self.sorted.len() + self.norms.len()) * 8 + self.slide.values().len() * 4
    }
}

/// Same ranks as [`pair_ranks`], reusing within-slide profiles so only the
/// cross block `a × b` is swept.
pub fn pair_ranks_profiled(a: &WithinSlideProfile, b: &WithinSlideProfile) -> Result<PairRanks, MetricsError> {
    let (sa, sb) = (a.slide(), b.slide());
    super::check_pair(sa, sb)?;
    let n = sa.n_tiles();
    let matched = matched_cosines(sa, sb, &a.norms, &b.norms);
    let (pa, pb) = ([sa], [sb]);
    let spec = CountSpec {
        q_rows: Rows { parts: &pa, n },
        c_rows: Rows { parts: &pb, n },
        q_thr: &matched,
        c_thr: &matched,
        upper: false,
        c_offset: n,
        total: 2 * n,
    };
    let (na, nb) = (a.norms.clone(), b.norms.clone());
    let counts = if screenable(&[sa], &na) && screenable(&[sb], &nb) {
        count_sweep(&CoarseQuery::pack_with_norms(&pa, na), &CoarseCand::pack_with_norms(&pb, nb), &spec, true)
    } else {
        count_sweep(&Exact::pack_with_norms(&pa, na), &Exact::pack_with_norms(&pb, nb), &spec, false)
    };
    let a_to_b = (0..n).map(|i| counts[i] + a.count_at_least(i, matched[i])).collect();
    let b_to_a = (0..n).map(|i| counts[n + i] + b.count_at_least(i, matched[i])).collect();
    Ok(PairRanks { a_to_b, b_to_a, matched })
}
