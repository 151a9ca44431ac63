//! Pair enumeration by acquisition family, the benchmark driver, and
//! median/IQR aggregation.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};
use std::time::SystemTime;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::{pair_ranks, pair_ranks_profiled, MetricsError, SlidePairMetrics, WithinSlideProfile, DEFAULT_KS};
use crate::store::{read_embedding_file, CohortManifest, EmbeddingMatrix, SlideRecord, StoreError};

/// Slide pair family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Same staining, different scanner.
    FixedStainingCrossScanner,
    /// Same scanner, different staining.
    FixedScannerCrossStaining,
    /// Staining and scanner both differ.
    CrossStainingCrossScanner,
}

impl PairMode {
    pub const ALL: [PairMode; 3] =
        [PairMode::FixedStainingCrossScanner, PairMode::FixedScannerCrossStaining, PairMode::CrossStainingCrossScanner];

    pub fn name(self) -> &'static str {
        match self {
            PairMode::FixedStainingCrossScanner => "fixed_staining_cross_scanner",
            PairMode::FixedScannerCrossStaining => "fixed_scanner_cross_staining",
            PairMode::CrossStainingCrossScanner => "cross_staining_cross_scanner",
        }
    }

    /// Short column heading for report tables.
    pub fn heading(self) -> &'static str {
        match self {
            PairMode::FixedStainingCrossScanner => "Cross-scanner",
            PairMode::FixedScannerCrossStaining => "Cross-staining",
            PairMode::CrossStainingCrossScanner => "Cross-both",
        }
    }

    /// Family of the unordered pair `{a, b}`; `None` for a slide with itself.
    pub fn of(a: &SlideRecord, b: &SlideRecord) -> Option<PairMode> {
        match (a.staining_id == b.staining_id, a.scanner_id == b.scanner_id) {
            (true, false) => Some(PairMode::FixedStainingCrossScanner),
            (false, true) => Some(PairMode::FixedScannerCrossStaining),
            (false, false) => Some(PairMode::CrossStainingCrossScanner),
            (true, true) => None,
        }
    }
}

impl fmt::Display for PairMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PairMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PairMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown pair mode {s:?}, expected one of {}", mode_names()))
    }
}

fn mode_names() -> String {
    PairMode::ALL.map(PairMode::name).join(", ")
}

/// Unordered pairs of the family, as `(a, b)` with `a < b`, sorted.
pub fn enumerate_pairs(manifest: &CohortManifest, mode: PairMode) -> Vec<(String, String)> {
    let slides = manifest.slides();
    let mut pairs = Vec::new();
    for (i, x) in slides.iter().enumerate() {
        for y in &slides[i + 1..] {
            if PairMode::of(x, y) == Some(mode) {
                let (a, b) = if x.slide_id < y.slide_id { (x, y) } else { (y, x) };
                pairs.push((a.slide_id.clone(), b.slide_id.clone()));
            }
        }
    }
    pairs.sort();
    pairs
}

/// Quantile by linear interpolation at position `p·(n-1)` of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median and interquartile range `Q75 - Q25`.
pub fn aggregate_median_iqr(values: &[f64]) -> Result<(f64, f64), RunError> {
    if values.is_empty() {
        return Err(RunError::EmptyAggregate);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    Ok((quantile_sorted(&sorted, 0.5), iqr.max(0.0)))
}

/// Aggregated metric name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    MeanCosine,
    TopK(usize),
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Metric::MeanCosine => f.write_str("mean_cosine"),
            Metric::TopK(k) => write!(f, "top_k@{k}"),
        }
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "mean_cosine" {
            return Ok(Metric::MeanCosine);
        }
        s.strip_prefix("top_k@")
            .and_then(|k| k.parse().ok())
            .filter(|&k| k > 0)
            .map(Metric::TopK)
            .ok_or_else(|| format!("unknown metric {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub mode: PairMode,
    pub metric: Metric,
    pub median: f64,
    pub iqr: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub mode: PairMode,
    pub metrics: SlidePairMetrics,
}

impl PairResult {
    pub fn value(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::MeanCosine => Some(self.metrics.mean_cosine),
            Metric::TopK(k) => self.metrics.topk_accuracy.get(&k).copied(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RobustnessReport {
    pub manifest_digest: String,
    pub ks: Vec<usize>,
    pub modes: Vec<PairMode>,
    /// Sorted by `(mode, slide_a, slide_b)`.
    pub pairs: Vec<PairResult>,
    pub aggregates: Vec<AggregateRow>,
    pub workers: usize,
    pub started_at: SystemTime,
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("slide {slide_id}: {source}")]
    Slide {
        slide_id: String,
        #[source]
        source: StoreError,
    },
    #[error("slide {slide_id}: file holds {found} but the manifest declares {expected}")]
    SlideShape { slide_id: String, expected: String, found: String },
    #[error("pair ({slide_a}, {slide_b}): {source}")]
    Metrics {
        slide_a: String,
        slide_b: String,
        #[source]
        source: MetricsError,
    },
    #[error("cannot aggregate an empty list")]
    EmptyAggregate,
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl RunError {
    pub fn is_io(&self) -> bool {
        matches!(self, RunError::Slide { source, .. } if source.is_io())
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    /// Top-k cutoffs, strictly ascending.
    pub ks: Vec<usize>,
    pub modes: Vec<PairMode>,
    pub workers: usize,
    /// Slides kept in memory between pairs, least recently used evicted first.
    pub max_resident_slides: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { ks: DEFAULT_KS.to_vec(), modes: PairMode::ALL.to_vec(), workers: 1, max_resident_slides: 128 }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), RunError> {
        if self.ks.is_empty() || self.ks[0] == 0 || self.ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(RunError::Config(format!(
                "ks must be nonempty, positive and strictly ascending, got {:?}",
                self.ks
            )));
        }
        if self.modes.is_empty() {
            return Err(RunError::Config("no pair modes requested".into()));
        }
        if self.workers == 0 {
            return Err(RunError::Config("workers must be at least 1".into()));
        }
        if self.max_resident_slides < 2 {
            return Err(RunError::Config("max resident slides must be at least 2".into()));
        }
        Ok(())
    }
}

/// Total bytes of within-slide profiles the cache may hold.
const PROFILE_BUDGET_BYTES: usize = 1 << 30;

enum Resident {
    Plain(EmbeddingMatrix),
    Profiled(WithinSlideProfile),
}

/// LRU cache of loaded slides shared by the workers.
struct SlideCache<'a> {
    manifest: &'a CohortManifest,
    capacity: usize,
    profiled: bool,
    state: Mutex<CacheState>,
}

#[derive(Default)]
struct CacheState {
    clock: u64,
    entries: HashMap<String, (u64, Arc<Resident>)>,
}

impl<'a> SlideCache<'a> {
    fn get(&self, slide_id: &str) -> Result<Arc<Resident>, RunError> {
        {
            let mut st = self.state.lock().unwrap();
            st.clock += 1;
            let now = st.clock;
            if let Some(entry) = st.entries.get_mut(slide_id) {
                entry.0 = now;
                return Ok(entry.1.clone());
            }
        }
        let loaded = Arc::new(self.load(slide_id)?);
        let mut st = self.state.lock().unwrap();
        st.clock += 1;
        let now = st.clock;
        let entry = st.entries.entry(slide_id.to_string()).or_insert((now, loaded)).1.clone();
        while st.entries.len() > self.capacity {
            let oldest = st
                .entries
                .iter()
                .filter(|(id, _)| id.as_str() != slide_id)
                .min_by_key(|(_, (t, _))| *t)
                .map(|(id, _)| id.clone())
                .expect("capacity is at least 2");
            log::debug!("evicting slide {oldest}");
            st.entries.remove(&oldest);
        }
        Ok(entry)
    }

    fn load(&self, slide_id: &str) -> Result<Resident, RunError> {
        let record = self.manifest.slide(slide_id).expect("pairs come from the manifest");
        let path = self.manifest.resolve(record);
        log::debug!("loading slide {slide_id} from {}", path.display());
        let matrix =
            read_embedding_file(&path).map_err(|source| RunError::Slide { slide_id: slide_id.into(), source })?;
        if (matrix.n_tiles(), matrix.dim()) != (record.n_tiles, record.dim) {
            return Err(RunError::SlideShape {
                slide_id: slide_id.into(),
                expected: format!("{}x{}", record.n_tiles, record.dim),
                found: format!("{}x{}", matrix.n_tiles(), matrix.dim()),
            });
        }
        if self.profiled {
            let profile = WithinSlideProfile::build(&matrix).map_err(|source| RunError::Metrics {
                slide_a: slide_id.into(),
                slide_b: slide_id.into(),
                source,
            })?;
            Ok(Resident::Profiled(profile))
        } else {
            Ok(Resident::Plain(matrix))
        }
    }
}

fn compute_pair(cache: &SlideCache<'_>, a: &str, b: &str, ks: &[usize]) -> Result<SlidePairMetrics, RunError> {
    let (ra, rb) = (cache.get(a)?, cache.get(b)?);
    let ranks = match (&*ra, &*rb) {
        (Resident::Profiled(pa), Resident::Profiled(pb)) => pair_ranks_profiled(pa, pb),
        (Resident::Plain(ma), Resident::Plain(mb)) => pair_ranks(ma, mb),
        _ => unreachable!("one cache holds one kind of entry"),
    };
    let metric_err = |source| RunError::Metrics { slide_a: a.into(), slide_b: b.into(), source };
    let ranks = ranks.map_err(metric_err)?;
    Ok(SlidePairMetrics::from_ranks(&ranks, ks).map_err(metric_err)?.with_ids(a, b))
}

/// Visiting order that keeps the working set of consecutive pairs within
/// `block` slides on each side.
fn locality_order(manifest: &CohortManifest, pairs: &mut [(PairMode, String, String)], block: usize) {
    let index: HashMap<&str, usize> =
        manifest.slides().iter().enumerate().map(|(i, s)| (s.slide_id.as_str(), i)).collect();
    pairs.sort_by_cached_key(|(_, a, b)| {
        let (i, j) = (index[a.as_str()], index[b.as_str()]);
        (i.min(j) / block, i.max(j) / block, a.clone(), b.clone())
    });
}

/// Computes every pair of the requested families and aggregates per family
/// and metric. Output does not depend on `workers`.
pub fn run_benchmark(manifest: &CohortManifest, cfg: &RunConfig) -> Result<RobustnessReport, RunError> {
    cfg.validate()?;
    let started_at = SystemTime::now();
    let mut modes = cfg.modes.clone();
    modes.sort();
    modes.dedup();

    let mut work: Vec<(PairMode, String, String)> =
        modes.iter().flat_map(|&m| enumerate_pairs(manifest, m).into_iter().map(move |(a, b)| (m, a, b))).collect();

    let n = manifest.n_tiles();
    let resident = cfg.max_resident_slides.min(manifest.slides().len());
    let profile_bytes = 8 * n * n.saturating_sub(1);
    // A profile costs about one streaming sweep to build and saves half of
    // every later one, so it pays off once a slide is in several pairs.
    let pairs_per_slide = 2 * work.len() / manifest.slides().len().max(1);
    let profiled = pairs_per_slide >= 4 && profile_bytes.saturating_mul(resident) <= PROFILE_BUDGET_BYTES;
    log::info!(
        "{} pairs over {} slides of {}x{}, {} workers, {} resident slides, within-slide profiles {}",
        work.len(),
        manifest.slides().len(),
        n,
        manifest.dim(),
        cfg.workers,
        cfg.max_resident_slides,
        if profiled { "on" } else { "off" }
    );
    locality_order(manifest, &mut work, (cfg.max_resident_slides / 2).max(1));

    let cache =
        SlideCache { manifest, capacity: cfg.max_resident_slides, profiled, state: Mutex::new(CacheState::default()) };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| RunError::Config(e.to_string()))?;
    let mut pairs: Vec<PairResult> = pool.install(|| {
        work.par_iter()
            .with_max_len(1)
            .map(|(mode, a, b)| compute_pair(&cache, a, b, &cfg.ks).map(|metrics| PairResult { mode: *mode, metrics }))
            .collect::<Result<_, _>>()
    })?;
    pairs.sort_by(|x, y| {
        (x.mode, &x.metrics.slide_a, &x.metrics.slide_b).cmp(&(y.mode, &y.metrics.slide_a, &y.metrics.slide_b))
    });

    let aggregates = aggregate(&pairs, &modes, &cfg.ks)?;
    Ok(RobustnessReport {
        manifest_digest: manifest.digest(),
        ks: cfg.ks.clone(),
        modes,
        pairs,
        aggregates,
        workers: cfg.workers,
        started_at,
    })
}

/// Median/IQR rows per mode and metric over sorted per-pair results. Modes
/// without pairs produce no rows.
pub fn aggregate(pairs: &[PairResult], modes: &[PairMode], ks: &[usize]) -> Result<Vec<AggregateRow>, RunError> {
    let metrics: Vec<Metric> = std::iter::once(Metric::MeanCosine).chain(ks.iter().map(|&k| Metric::TopK(k))).collect();
    let mut by_mode: BTreeMap<PairMode, Vec<&PairResult>> = BTreeMap::new();
    for p in pairs {
        by_mode.entry(p.mode).or_default().push(p);
    }
    let mut rows = Vec::new();
    for &mode in modes {
        let Some(group) = by_mode.get(&mode) else {
            log::warn!("no slide pairs for mode {mode}; omitting it from the aggregates");
            continue;
        };
        for &metric in &metrics {
            let values: Vec<f64> = group.iter().filter_map(|p| p.value(metric)).collect();
            if values.len() != group.len() {
                return Err(RunError::Config(format!("metric {metric} missing from some {mode} pairs")));
            }
            let (median, iqr) = aggregate_median_iqr(&values)?;
            rows.push(AggregateRow { mode, metric, median, iqr, n_pairs: values.len() });
        }
    }
    Ok(rows)
}
