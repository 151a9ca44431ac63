//! Model comparison statistics: one-sided Wilcoxon signed-rank test, Holm
//! step-down correction, paired bootstrap on AUC, harmonic-mean p-value.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::Read;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Deserialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::downstream::auc;

/// Largest effective sample size for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 25;
pub const DEFAULT_N_BOOT: usize = 1000;

/// Published per-task scores of eleven tile encoders on 17 tasks: eight
/// classification/segmentation tasks and nine spatial gene-expression tasks.
pub const REFERENCE_SCORES_CSV: &str = include_str!("../fixtures/task_scores.csv");

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("paired samples need equal nonzero lengths, got {0} task ids, {1} and {2} scores")]
    Length(usize, usize, usize),
    #[error("duplicate task id {0}")]
    DuplicateTask(String),
    #[error("non-finite score for task {0}")]
    NonFinite(String),
    #[error("p-value {0} outside (0, 1]")]
    InvalidP(f64),
    #[error("empty input")]
    Empty,
    #[error("bootstrap needs at least 100 resamples, got {0}")]
    TooFewResamples(usize),
    #[error("{0}")]
    Metric(String),
    #[error("bootstrap resample {0} kept drawing a single class")]
    RedrawLimit(usize),
    #[error("score table line {line}: {message}")]
    Table { line: usize, message: String },
    #[error("model {model} has no score for task {task}")]
    MissingScore { model: String, task: String },
    #[error("unknown model {0}")]
    UnknownModel(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSamples {
    pub task_ids: Vec<String>,
    pub scores_a: Vec<f64>,
    pub scores_b: Vec<f64>,
}

impl PairedSamples {
    pub fn new(task_ids: Vec<String>, scores_a: Vec<f64>, scores_b: Vec<f64>) -> Result<Self, StatsError> {
        let (n, na, nb) = (task_ids.len(), scores_a.len(), scores_b.len());
        if n == 0 || na != n || nb != n {
            return Err(StatsError::Length(n, na, nb));
        }
        let mut seen = BTreeSet::new();
        for (i, t) in task_ids.iter().enumerate() {
            if !seen.insert(t) {
                return Err(StatsError::DuplicateTask(t.clone()));
            }
            if !scores_a[i].is_finite() || !scores_b[i].is_finite() {
                return Err(StatsError::NonFinite(t.clone()));
            }
        }
        Ok(Self { task_ids, scores_a, scores_b })
    }

    /// Unnamed tasks `0..n`.
    pub fn from_scores(scores_a: Vec<f64>, scores_b: Vec<f64>) -> Result<Self, StatsError> {
        Self::new((0..scores_a.len()).map(|i| i.to_string()).collect(), scores_a, scores_b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alternative {
    /// A is stochastically greater than B.
    Greater,
    Less,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMethod {
    Exact,
    NormalApprox,
    Bootstrap,
}

impl fmt::Display for TestMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TestMethod::Exact => "exact",
            TestMethod::NormalApprox => "normal-approx",
            TestMethod::Bootstrap => "bootstrap",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestResult {
    /// Wilcoxon: `T+`, the rank sum of positive differences. Bootstrap: the
    /// full-sample metric difference.
    pub statistic: f64,
    pub p_value: f64,
    /// Nonzero differences (Wilcoxon) or resamples (bootstrap).
    pub n_effective: usize,
    pub method: TestMethod,
    /// Every difference was zero; `p_value` is 1.
    pub degenerate: bool,
    /// Bootstrap resamples redrawn because the metric was undefined.
    pub redraws: usize,
}

/// Ranks `1..=n` of `values`, tied values sharing their average rank.
/// Returns the ranks and the tie-group sizes.
fn average_ranks(values: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut ties = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        if end - start > 1 {
            ties.push(end - start);
        }
        start = end;
    }
    (ranks, ties)
}

/// Number of sign patterns of ranks `1..=n` with each positive-rank sum.
fn signed_rank_counts(n: usize) -> Vec<u64> {
    let max = n * (n + 1) / 2;
    let mut counts = vec![0u64; max + 1];
    counts[0] = 1;
    for r in 1..=n {
        for s in (r..=max).rev() {
            counts[s] += counts[s - r];
        }
    }
    counts
}

/// Exact upper and lower tail probabilities `P(T >= t)`, `P(T <= t)` and the
/// point mass `P(T = t)` for an integer rank sum `t`.
pub fn signed_rank_exact_tails(n: usize, t: usize) -> (f64, f64, f64) {
    let counts = signed_rank_counts(n);
    let total = 2f64.powi(n as i32);
    let upper: u64 = counts.iter().skip(t).sum();
    let lower: u64 = counts.iter().take(t + 1).sum();
    let point = counts.get(t).copied().unwrap_or(0);
    (upper as f64 / total, lower as f64 / total, point as f64 / total)
}

/// One-sided Wilcoxon signed-rank test on `a - b`. Zero differences are
/// dropped. Exact when at most [`EXACT_MAX_N`] differences remain and their
/// magnitudes are untied; otherwise the normal approximation with tie and
/// continuity corrections.
pub fn wilcoxon_one_sided(samples: &PairedSamples, alternative: Alternative) -> TestResult {
    let diffs: Vec<f64> =
        samples.scores_a.iter().zip(&samples.scores_b).map(|(a, b)| a - b).filter(|&d| d != 0.0).collect();
    let n = diffs.len();
    if n == 0 {
        return TestResult {
            statistic: 0.0,
            p_value: 1.0,
            n_effective: 0,
            method: TestMethod::Exact,
            degenerate: true,
            redraws: 0,
        };
    }
    let abs: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    let (ranks, ties) = average_ranks(&abs);
    let t_plus: f64 = diffs.iter().zip(&ranks).filter(|(d, _)| **d > 0.0).map(|(_, r)| r).sum();

    if n <= EXACT_MAX_N && ties.is_empty() {
        let (upper, lower, _) = signed_rank_exact_tails(n, t_plus as usize);
        let p = match alternative {
            Alternative::Greater => upper,
            Alternative::Less => lower,
        };
        return TestResult {
            statistic: t_plus,
            p_value: p.min(1.0),
            n_effective: n,
            method: TestMethod::Exact,
            degenerate: false,
            redraws: 0,
        };
    }

    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let sd = (nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term).sqrt();
    let normal = Normal::standard();
    let p = match alternative {
        Alternative::Greater => normal.sf((t_plus - mean - 0.5) / sd),
        Alternative::Less => normal.cdf((t_plus - mean + 0.5) / sd),
    };
    TestResult {
        statistic: t_plus,
        p_value: p.clamp(f64::MIN_POSITIVE, 1.0),
        n_effective: n,
        method: TestMethod::NormalApprox,
        degenerate: false,
        redraws: 0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HolmResult {
    /// Adjusted p-values in input order.
    pub adjusted: Vec<f64>,
    pub reject: Vec<bool>,
}

/// Holm step-down adjustment: in ascending order, `p_(i)` becomes
/// `max_{j<=i} (m - j + 1) p_(j)`, capped at 1.
pub fn holm_correction(p_values: &[f64], alpha: f64) -> Result<HolmResult, StatsError> {
    if let Some(&p) = p_values.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(StatsError::InvalidP(p));
    }
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p_values[i].total_cmp(&p_values[j]));
    let mut adjusted = vec![0.0; m];
    let mut running = 0.0f64;
    for (rank, &i) in order.iter().enumerate() {
        running = running.max(((m - rank) as f64 * p_values[i]).min(1.0));
        adjusted[i] = running;
    }
    let reject = adjusted.iter().map(|&p| p <= alpha).collect();
    Ok(HolmResult { adjusted, reject })
}

/// `L / Σ 1/p_i`.
pub fn harmonic_mean_p(p_values: &[f64]) -> Result<f64, StatsError> {
    if p_values.is_empty() {
        return Err(StatsError::Empty);
    }
    if let Some(&p) = p_values.iter().find(|&&p| !(p > 0.0 && p <= 1.0)) {
        return Err(StatsError::InvalidP(p));
    }
    Ok(p_values.len() as f64 / p_values.iter().map(|p| p.recip()).sum::<f64>())
}

/// Redraws allowed per resample before giving up.
const MAX_REDRAWS: usize = 10_000;

/// One-sided paired bootstrap for `AUC(a) > AUC(b)` on shared labels.
///
/// Resample `b` draws rows (or whole groups, when `groups` is given) with
/// replacement from ChaCha stream `b` of `seed`; draws holding one class only
/// are redrawn. `p = (1 + #{Δ_b <= 0}) / (n_boot + 1)`.
pub fn paired_bootstrap_p(
    scores_a: &[f64],
    scores_b: &[f64],
    labels: &[bool],
    groups: Option<&[String]>,
    n_boot: usize,
    seed: u64,
) -> Result<TestResult, StatsError> {
    let n = labels.len();
    if scores_a.len() != n || scores_b.len() != n || n == 0 {
        return Err(StatsError::Length(n, scores_a.len(), scores_b.len()));
    }
    if n_boot < 100 {
        return Err(StatsError::TooFewResamples(n_boot));
    }
    let metric = |idx: &[usize]| -> Result<f64, String> {
        let pick = |s: &[f64]| idx.iter().map(|&i| s[i]).collect::<Vec<_>>();
        let y: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
        let a = auc(&pick(scores_a), &y).map_err(|e| e.to_string())?;
        let b = auc(&pick(scores_b), &y).map_err(|e| e.to_string())?;
        Ok(a - b)
    };
    let all: Vec<usize> = (0..n).collect();
    let observed = metric(&all).map_err(StatsError::Metric)?;

    let units: Vec<Vec<usize>> = match groups {
        Some(g) => {
            if g.len() != n {
                return Err(StatsError::Length(g.len(), n, n));
            }
            let mut by_group: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, id) in g.iter().enumerate() {
                by_group.entry(id).or_default().push(i);
            }
            by_group.into_values().collect()
        }
        None => all.iter().map(|&i| vec![i]).collect(),
    };

    let outcomes: Vec<(f64, usize)> = (0..n_boot)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(b as u64);
            for redraws in 0..=MAX_REDRAWS {
                let idx: Vec<usize> =
                    (0..units.len()).flat_map(|_| units[rng.random_range(0..units.len())].iter().copied()).collect();
                if let Ok(delta) = metric(&idx) {
                    return Ok((delta, redraws));
                }
            }
            Err(StatsError::RedrawLimit(b))
        })
        .collect::<Result<_, _>>()?;

    let not_greater = outcomes.iter().filter(|(d, _)| *d <= 0.0).count();
    Ok(TestResult {
        statistic: observed,
        p_value: (1 + not_greater) as f64 / (n_boot + 1) as f64,
        n_effective: n_boot,
        method: TestMethod::Bootstrap,
        degenerate: false,
        redraws: outcomes.iter().map(|(_, r)| r).sum(),
    })
}

/// `(model, task, score)` rows, e.g. per-task benchmark results.
#[derive(Debug, Clone, Default)]
pub struct ScoreTable {
    scores: HashMap<String, BTreeMap<String, f64>>,
    /// Tasks in first-appearance order.
    tasks: Vec<String>,
}

#[derive(Deserialize)]
struct ScoreRow {
    model: String,
    task: String,
    score: f64,
}

impl ScoreTable {
    /// Reads comma-separated `model,task,score` with a header line.
    pub fn from_csv(reader: impl Read) -> Result<Self, StatsError> {
        let mut table = ScoreTable::default();
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        for (i, row) in rdr.deserialize::<ScoreRow>().enumerate() {
            let line = i + 2;
            let row = row.map_err(|e| StatsError::Table { line, message: e.to_string() })?;
            if !row.score.is_finite() {
                return Err(StatsError::Table { line, message: "non-finite score".into() });
            }
            if !table.tasks.contains(&row.task) {
                table.tasks.push(row.task.clone());
            }
            let prev = table.scores.entry(row.model.clone()).or_default().insert(row.task.clone(), row.score);
            if prev.is_some() {
                return Err(StatsError::Table {
                    line,
                    message: format!("duplicate score for ({}, {})", row.model, row.task),
                });
            }
        }
        if table.scores.is_empty() {
            return Err(StatsError::Empty);
        }
        Ok(table)
    }

    pub fn reference() -> Self {
        Self::from_csv(REFERENCE_SCORES_CSV.as_bytes()).expect("bundled score table parses")
    }

    pub fn models(&self) -> BTreeSet<&str> {
        self.scores.keys().map(String::as_str).collect()
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    /// Scores of `a` and `b` on every task except `exclude`, in table order.
    pub fn paired(&self, a: &str, b: &str, exclude: &[&str]) -> Result<PairedSamples, StatsError> {
        let get = |m: &str| self.scores.get(m).ok_or_else(|| StatsError::UnknownModel(m.into()));
        let (sa, sb) = (get(a)?, get(b)?);
        let mut ids = Vec::new();
        let (mut xa, mut xb) = (Vec::new(), Vec::new());
        for task in self.tasks.iter().filter(|t| !exclude.contains(&t.as_str())) {
            let missing = |m: &str| StatsError::MissingScore { model: m.into(), task: task.clone() };
            xa.push(*sa.get(task).ok_or_else(|| missing(a))?);
            xb.push(*sb.get(task).ok_or_else(|| missing(b))?);
            ids.push(task.clone());
        }
        PairedSamples::new(ids, xa, xb)
    }
}
