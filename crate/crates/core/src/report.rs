//! Report files: per-pair results, per-family aggregates, and a Markdown
//! summary table.
//!
//! * `pairs.tsv`: `mode slide_a slide_b mean_cosine top{k}...`, one line per pair.
//!   Floats use the shortest representation that parses back to the same value.
//! * `aggregate.tsv`: `mode metric median iqr n_pairs summary`, where
//!   `summary` is `"median (IQR)"` at two decimals.
//! * `table.md`: one column per family × {cosine, top-k}.
//!
//! Run parameters that vary between equivalent runs (worker count, start
//! time) are not written, so identical inputs give identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::metrics::SlidePairMetrics;
use crate::runner::{aggregate, AggregateRow, Metric, PairMode, PairResult, RobustnessReport, RunError};

pub const PAIRS_FILE: &str = "pairs.tsv";
pub const AGGREGATE_FILE: &str = "aggregate.tsv";
pub const TABLE_FILE: &str = "table.md";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error(transparent)]
    Run(#[from] RunError),
}

impl ReportError {
    pub fn is_io(&self) -> bool {
        matches!(self, ReportError::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ReportError + '_ {
    move |source| ReportError::Io { path: path.to_path_buf(), source }
}

/// `"median (IQR)"` at two decimals.
pub fn format_cell(median: f64, iqr: f64) -> String {
    format!("{median:.2} ({iqr:.2})")
}

pub fn pairs_tsv(pairs: &[PairResult], ks: &[usize]) -> String {
    let mut out = String::from("mode\tslide_a\tslide_b\tmean_cosine");
    for k in ks {
        write!(out, "\ttop{k}").unwrap();
    }
    out.push('\n');
    for p in pairs {
        let m = &p.metrics;
        write!(out, "{}\t{}\t{}\t{}", p.mode, m.slide_a, m.slide_b, m.mean_cosine).unwrap();
        for k in ks {
            write!(out, "\t{}", m.topk_accuracy[k]).unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn aggregate_tsv(rows: &[AggregateRow]) -> String {
    let mut out = String::from("mode\tmetric\tmedian\tiqr\tn_pairs\tsummary\n");
    for r in rows {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            r.mode,
            r.metric,
            r.median,
            r.iqr,
            r.n_pairs,
            format_cell(r.median, r.iqr)
        )
        .unwrap();
    }
    out
}

/// The top-k shown in the summary table: 10 when requested, else the largest.
fn table_k(ks: &[usize]) -> usize {
    if ks.contains(&10) {
        10
    } else {
        *ks.iter().max().expect("ks is nonempty")
    }
}

pub fn table_markdown(rows: &[AggregateRow], ks: &[usize], digest: &str) -> String {
    let k = table_k(ks);
    let lookup: BTreeMap<(PairMode, Metric), &AggregateRow> = rows.iter().map(|r| ((r.mode, r.metric), r)).collect();
    let modes: Vec<PairMode> =
        PairMode::ALL.into_iter().filter(|&m| lookup.contains_key(&(m, Metric::MeanCosine))).collect();
    let mut out =
        format!("# Robustness summary\n\nManifest sha256 `{digest}`. Cells are median (IQR) over slide pairs.\n\n");
    if modes.is_empty() {
        out.push_str("No slide pairs.\n");
        return out;
    }
    let mut head = String::from("|");
    let mut rule = String::from("|");
    let mut body = String::from("|");
    for &mode in &modes {
        for metric in [Metric::MeanCosine, Metric::TopK(k)] {
            let label = match metric {
                Metric::MeanCosine => "cosine".to_string(),
                Metric::TopK(k) => format!("top-{k}"),
            };
            write!(head, " {} {label} |", mode.heading()).unwrap();
            rule.push_str(" --- |");
            match lookup.get(&(mode, metric)) {
                Some(r) => write!(body, " {} |", format_cell(r.median, r.iqr)).unwrap(),
                None => body.push_str(" n/a |"),
            }
        }
    }
    writeln!(out, "{head}\n{rule}\n{body}\n").unwrap();
    let counts: Vec<String> =
        modes.iter().map(|&m| format!("{} {}", m.heading(), lookup[&(m, Metric::MeanCosine)].n_pairs)).collect();
    writeln!(out, "Pairs: {}.", counts.join(", ")).unwrap();
    out
}

/// Writes the three report files into `out_dir`, creating it if needed.
pub fn emit_report(report: &RobustnessReport, out_dir: impl AsRef<Path>) -> Result<(), ReportError> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    for &mode in &report.modes {
        if !report.aggregates.iter().any(|r| r.mode == mode) {
            log::warn!("mode {mode} has no slide pairs; its rows are omitted");
        }
    }
    let files = [
        (PAIRS_FILE, pairs_tsv(&report.pairs, &report.ks)),
        (AGGREGATE_FILE, aggregate_tsv(&report.aggregates)),
        (TABLE_FILE, table_markdown(&report.aggregates, &report.ks, &report.manifest_digest)),
    ];
    for (name, text) in files {
        let path = dir.join(name);
        fs::write(&path, text).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Per-pair results and their `ks`, as persisted in `pairs.tsv`.
pub fn read_pairs_tsv(path: impl AsRef<Path>) -> Result<(Vec<PairResult>, Vec<usize>), ReportError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |line: usize, message: String| ReportError::Parse { path: path.to_path_buf(), line, message };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.len() < 5 || cols[..4] != ["mode", "slide_a", "slide_b", "mean_cosine"] {
        return Err(bad(1, format!("unexpected header {header:?}")));
    }
    let ks = cols[4..]
        .iter()
        .map(|c| c.strip_prefix("top").and_then(|k| k.parse::<usize>().ok()).filter(|&k| k > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| bad(1, format!("unexpected header {header:?}")))?;
    let mut pairs = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != cols.len() {
            return Err(bad(lineno, format!("expected {} fields, found {}", cols.len(), f.len())));
        }
        let mode: PairMode = f[0].parse().map_err(|e| bad(lineno, e))?;
        let num = |s: &str| s.parse::<f64>().map_err(|e| bad(lineno, format!("{s:?}: {e}")));
        let mean_cosine = num(f[3])?;
        let mut topk = BTreeMap::new();
        for (k, s) in ks.iter().zip(&f[4..]) {
            topk.insert(*k, num(s)?);
        }
        pairs.push(PairResult {
            mode,
            metrics: SlidePairMetrics {
                slide_a: f[1].to_string(),
                slide_b: f[2].to_string(),
                mean_cosine,
                topk_accuracy: topk,
                directed_a_to_b: BTreeMap::new(),
                directed_b_to_a: BTreeMap::new(),
                n_tiles: 0,
            },
        });
    }
    Ok((pairs, ks))
}

/// Recomputes aggregate rows from a persisted `pairs.tsv`.
pub fn reaggregate(path: impl AsRef<Path>) -> Result<(Vec<AggregateRow>, Vec<usize>), ReportError> {
    let (pairs, ks) = read_pairs_tsv(path)?;
    let mut modes: Vec<PairMode> = pairs.iter().map(|p| p.mode).collect();
    modes.sort();
    modes.dedup();
    Ok((aggregate(&pairs, &modes, &ks)?, ks))
}
