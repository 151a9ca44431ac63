//! Robustness benchmarking for pathology tile-embedding models.
//!
//! * [`store`]: tile-embedding matrices, the PEB1 file format, cohort manifests.
//! * [`metrics`]: cosine similarity and top-k matched-tile retrieval for a slide pair.
//! * [`runner`]: pair families, the cohort benchmark, median/IQR aggregation.
//! * [`report`]: per-pair, aggregate and summary report files.
//! * [`synth`]: seeded synthetic cohorts.
//! * [`stats`]: paired one-sided tests, Holm correction, harmonic-mean p-values.
//! * [`distill`]: self-distillation losses on prototype scores.
//! * [`downstream`]: logistic and ridge probes, AUC, PCA, correlation.

pub mod distill;
pub mod downstream;
pub mod metrics;
pub mod report;
pub mod runner;
pub mod stats;
pub mod store;
pub mod synth;
