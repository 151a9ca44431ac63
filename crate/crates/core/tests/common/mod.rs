#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilerobust_core::store::EmbeddingMatrix;

/// Ranks from the full `2N × 2N` cosine matrix of `A ∪ B`, in `f64`.
pub struct NaiveRanks {
    pub a_to_b: Vec<usize>,
    pub b_to_a: Vec<usize>,
    pub matched: Vec<f64>,
}

fn dot(x: &[f32], y: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (u, v) in x.iter().zip(y) {
        s = (*u as f64).mul_add(*v as f64, s);
    }
    s
}

pub fn naive_ranks(a: &EmbeddingMatrix, b: &EmbeddingMatrix) -> NaiveRanks {
    let n = a.n_tiles();
    let rows: Vec<&[f32]> = (0..n).map(|i| a.row(i)).chain((0..n).map(|i| b.row(i))).collect();
    let norms: Vec<f64> = rows.iter().map(|r| dot(r, r).sqrt()).collect();
    let m = rows.len();
    let mut sim = vec![vec![0.0f64; m]; m];
    for i in 0..m {
        for j in 0..m {
            sim[i][j] = dot(rows[i], rows[j]) / (norms[i] * norms[j]);
        }
    }
    let rank = |q: usize, target: usize| (0..m).filter(|&t| t != q && sim[q][t] >= sim[q][target]).count();
    NaiveRanks {
        a_to_b: (0..n).map(|i| rank(i, n + i)).collect(),
        b_to_a: (0..n).map(|i| rank(n + i, i)).collect(),
        matched: (0..n).map(|i| sim[i][n + i]).collect(),
    }
}

pub fn accuracy(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64
}

/// A random slide pair. Some seeds use small-integer entries, which make
/// exact cosine ties common, and some copy rows to create duplicates.
pub fn random_pair(seed: u64, n: usize, d: usize) -> (EmbeddingMatrix, EmbeddingMatrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let integer = rng.random_bool(0.3);
    let draw = |rng: &mut ChaCha8Rng| -> f32 {
        if integer {
            rng.random_range(-2..=2) as f32
        } else {
            rng.random_range(-1.0f32..1.0)
        }
    };
    let mut a: Vec<f32> = (0..n * d).map(|_| draw(&mut rng)).collect();
    let mut b: Vec<f32> = a.iter().map(|v| if integer { draw(&mut rng) } else { v + 0.5 * draw(&mut rng) }).collect();
    for slide in [&mut a, &mut b] {
        for i in 0..n {
            if slide[i * d..(i + 1) * d].iter().all(|&v| v == 0.0) {
                slide[i * d] = 1.0;
            }
        }
    }
    if rng.random_bool(0.5) {
        for _ in 0..n / 4 {
            let (src, dst) = (rng.random_range(0..n), rng.random_range(0..n));
            let row: Vec<f32> = a[src * d..(src + 1) * d].to_vec();
            if rng.random_bool(0.5) {
                b[dst * d..(dst + 1) * d].copy_from_slice(&row);
            } else {
                a[dst * d..(dst + 1) * d].copy_from_slice(&row);
            }
        }
    }
    (EmbeddingMatrix::new(n, d, a).unwrap(), EmbeddingMatrix::new(n, d, b).unwrap())
}
