//! Seeded synthetic staining × scanner cohorts.
//!
//! Every slide perturbs one shared set of tile directions:
//!
//! ```text
//! slide(s, c) = normalize(base + σ_st · G_s + σ_sc · H_c)
//! ```
//!
//! `base` rows are random unit vectors; `G_s` (per staining) and `H_c` (per
//! scanner) hold `N(0, 1/dim)` entries, so a unit noise scale is comparable to
//! the signal. Each field is drawn from its own ChaCha stream, so fields are
//! regenerated on demand instead of being held in memory, and the same seed
//! gives the same bytes at any noise level.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::store::{normalize_rows, write_embedding_file, CohortManifest, EmbeddingMatrix, SlideRecord, StoreError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_stainings: usize,
    pub n_scanners: usize,
    pub n_tiles: usize,
    pub dim: usize,
    pub staining_noise: f64,
    pub scanner_noise: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.n_stainings == 0 || self.n_scanners == 0 || self.n_tiles == 0 || self.dim == 0 {
            return Err(StoreError::Shape("synthetic cohort counts must all be at least 1".into()));
        }
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !ok(self.staining_noise) || !ok(self.scanner_noise) {
            return Err(StoreError::Shape("noise scales must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn slide_id(&self, staining: usize, scanner: usize) -> String {
        format!("st{staining:02}_sc{scanner:02}")
    }

    fn field(&self, stream: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        let scale = (self.dim as f64).sqrt().recip();
        (0..self.n_tiles * self.dim).map(|_| StandardNormal.sample(&mut rng)).map(|x: f64| x * scale).collect()
    }

    fn base(&self) -> Vec<f64> {
        let mut base = self.field(0);
        for row in base.chunks_mut(self.dim) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= norm);
        }
        base
    }

    /// Embeddings of one slide, given the precomputed base directions.
    fn slide_from_base(&self, base: &[f64], staining: usize, scanner: usize) -> Result<EmbeddingMatrix, StoreError> {
        let mut values = base.to_vec();
        let streams = [
            (self.staining_noise, 1 + staining as u64),
            (self.scanner_noise, 1 + self.n_stainings as u64 + scanner as u64),
        ];
        for (sigma, stream) in streams {
            if sigma > 0.0 {
                for (v, g) in values.iter_mut().zip(self.field(stream)) {
                    *v += sigma * g;
                }
            }
        }
        let raw = EmbeddingMatrix::new(self.n_tiles, self.dim, values.into_iter().map(|v| v as f32).collect())?;
        normalize_rows(&raw)
    }

    /// Embeddings of slide `(staining, scanner)`.
    pub fn slide(&self, staining: usize, scanner: usize) -> Result<EmbeddingMatrix, StoreError> {
        self.validate()?;
        self.slide_from_base(&self.base(), staining, scanner)
    }
}

/// Writes one PEB1 file per slide plus `manifest.jsonl` into `out_dir`.
/// Returns the manifest, whose relative paths resolve against `out_dir`.
pub fn synth_cohort(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<CohortManifest, StoreError> {
    spec.validate()?;
    let dir = out_dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| StoreError::io(dir, e))?;
    let base = spec.base();
    let mut records = Vec::with_capacity(spec.n_stainings * spec.n_scanners);
    for staining in 0..spec.n_stainings {
        for scanner in 0..spec.n_scanners {
            let slide_id = spec.slide_id(staining, scanner);
            let path = PathBuf::from(format!("{slide_id}.peb"));
            let matrix = spec.slide_from_base(&base, staining, scanner)?;
            write_embedding_file(&matrix, dir.join(&path))?;
            records.push(SlideRecord {
                slide_id,
                staining_id: format!("ST{staining:02}"),
                scanner_id: format!("SC{scanner:02}"),
                path,
                n_tiles: spec.n_tiles,
                dim: spec.dim,
            });
        }
    }
    let manifest = CohortManifest::new(records, dir)?;
    manifest.write(dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
