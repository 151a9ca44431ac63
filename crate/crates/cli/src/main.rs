//! `tilerobust`: robustness benchmark, synthetic cohorts, model comparison
//! statistics, downstream probes and the distillation-loss checks.
//!
//! Exit status: 0 on success, 1 on invalid input or usage, 2 on I/O failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tilerobust_core::distill;
use tilerobust_core::downstream::{mean_pool_slide, run_breastbm_protocol, LabeledFeatures, LogisticOptions, Matrix};
use tilerobust_core::report::{self, emit_report, AGGREGATE_FILE, TABLE_FILE};
use tilerobust_core::runner::{run_benchmark, PairMode, RunConfig};
use tilerobust_core::stats::{holm_correction, wilcoxon_one_sided, Alternative, ScoreTable};
use tilerobust_core::store::{load_manifest, read_embedding_file, StoreError};
use tilerobust_core::synth::{synth_cohort, SynthSpec};

#[derive(Parser)]
#[command(name = "tilerobust", version, about = "Robustness benchmark for pathology tile embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute per-pair metrics and per-family aggregates for a cohort.
    Run(RunArgs),
    /// Write a seeded synthetic staining × scanner cohort.
    Synth(SynthArgs),
    /// One-sided Wilcoxon comparisons of models over tasks, Holm-corrected.
    Stats(StatsArgs),
    /// Mean-pool + logistic regression: AUC per subcohort, CCC per subcohort pair.
    Downstream(DownstreamArgs),
    /// Check the distillation-loss properties on seeded random batches.
    DistillCheck(DistillArgs),
    /// Rebuild aggregate and table files from a pairs file.
    Report(ReportArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Cohort manifest (JSON lines).
    #[arg(long, env = "TILEROBUST_MANIFEST")]
    manifest: PathBuf,
    /// Output directory for the report files.
    #[arg(long, env = "TILEROBUST_OUT")]
    out: PathBuf,
    /// Top-k cutoff; repeat for several.
    #[arg(long = "k", env = "TILEROBUST_K", value_delimiter = ',', default_values_t = [1usize, 5, 10])]
    ks: Vec<usize>,
    /// Pair families, comma separated.
    #[arg(long, env = "TILEROBUST_MODES", value_delimiter = ',')]
    modes: Option<Vec<PairMode>>,
    /// Worker threads; results do not depend on it.
    #[arg(long, env = "TILEROBUST_THREADS")]
    threads: Option<usize>,
    #[arg(long, env = "TILEROBUST_MAX_RESIDENT_SLIDES", default_value_t = 128)]
    max_resident_slides: usize,
    /// Accepted for uniformity; the benchmark itself draws no random numbers.
    #[arg(long, env = "TILEROBUST_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, env = "TILEROBUST_OUT")]
    out: PathBuf,
    #[arg(long, default_value_t = 13)]
    stainings: usize,
    #[arg(long, default_value_t = 7)]
    scanners: usize,
    #[arg(long, default_value_t = 256)]
    tiles: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.3)]
    staining_noise: f64,
    #[arg(long, default_value_t = 0.3)]
    scanner_noise: f64,
    #[arg(long, env = "TILEROBUST_SEED", default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct StatsArgs {
    /// Comma-separated `model,task,score` file with a header.
    #[arg(long)]
    scores: PathBuf,
    /// `A:B` tests whether A scores higher than B; repeat for several.
    #[arg(long = "compare", required = true)]
    comparisons: Vec<String>,
    /// Task to leave out; repeatable.
    #[arg(long = "exclude-task")]
    exclude: Vec<String>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

#[derive(Args)]
struct DownstreamArgs {
    /// Cohort manifest holding every labeled slide.
    #[arg(long, env = "TILEROBUST_MANIFEST")]
    manifest: PathBuf,
    /// Manifest of the training slides; defaults to `--manifest`.
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    /// Training labels: comma-separated `slide_id,group_id,endpoint,value`
    /// with a header.
    #[arg(long)]
    train_labels: PathBuf,
    /// Test labels in the same format plus an optional `subcohort` column;
    /// without it a slide's subcohort is its staining/scanner condition.
    #[arg(long)]
    test_labels: PathBuf,
    /// Only this endpoint; default is every endpoint in the label files.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long, default_value_t = 1e-2)]
    l2: f64,
    /// Fit on raw features instead of z-scored ones.
    #[arg(long)]
    no_standardize: bool,
    /// Also write `downstream.tsv` here.
    #[arg(long, env = "TILEROBUST_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    #[arg(long, env = "TILEROBUST_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    batches: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// A `pairs.tsv` written by `run`.
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long, env = "TILEROBUST_OUT")]
    out: PathBuf,
    /// Manifest the pairs came from, for the digest line of the table.
    #[arg(long, env = "TILEROBUST_MANIFEST")]
    manifest: Option<PathBuf>,
}

/// True when the failure came from reading or writing a file.
fn is_io(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<std::io::Error>()
            || e.downcast_ref::<StoreError>().is_some_and(StoreError::is_io)
            || e.downcast_ref::<tilerobust_core::runner::RunError>().is_some_and(|r| r.is_io())
            || e.downcast_ref::<report::ReportError>().is_some_and(|r| r.is_io())
            || e.downcast_ref::<csv::Error>().is_some_and(|c| c.is_io_error())
    })
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest)?;
    let workers = args.threads.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let mut ks = args.ks;
    ks.sort_unstable();
    ks.dedup();
    let cfg = RunConfig {
        ks,
        modes: args.modes.unwrap_or_else(|| PairMode::ALL.to_vec()),
        workers,
        max_resident_slides: args.max_resident_slides,
    };
    let report = run_benchmark(&manifest, &cfg)?;
    emit_report(&report, &args.out)?;
    print!("{}", fs::read_to_string(args.out.join(TABLE_FILE))?);
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        n_stainings: args.stainings,
        n_scanners: args.scanners,
        n_tiles: args.tiles,
        dim: args.dim,
        staining_noise: args.staining_noise,
        scanner_noise: args.scanner_noise,
        seed: args.seed,
    };
    let manifest = synth_cohort(&spec, &args.out)?;
    println!(
        "wrote {} slides of {}x{} and {}",
        manifest.slides().len(),
        spec.n_tiles,
        spec.dim,
        args.out.join(tilerobust_core::synth::MANIFEST_FILE).display()
    );
    Ok(())
}

fn cmd_stats(args: StatsArgs) -> Result<()> {
    let file = fs::File::open(&args.scores).with_context(|| format!("{}", args.scores.display()))?;
    let table = ScoreTable::from_csv(file).with_context(|| format!("{}", args.scores.display()))?;
    let exclude: Vec<&str> = args.exclude.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for spec in &args.comparisons {
        let (a, b) = spec
            .split_once(':')
            .filter(|(a, b)| !a.is_empty() && !b.is_empty())
            .ok_or_else(|| anyhow!("comparison {spec:?} is not of the form A:B"))?;
        let samples = table.paired(a, b, &exclude)?;
        rows.push((a, b, wilcoxon_one_sided(&samples, Alternative::Greater)));
    }
    let raw: Vec<f64> = rows.iter().map(|r| r.2.p_value).collect();
    let holm = holm_correction(&raw, args.alpha)?;
    println!("comparison\tn\tmethod\tstatistic\tp\tp_holm\treject");
    for (i, (a, b, r)) in rows.iter().enumerate() {
        println!(
            "{a}>{b}\t{}\t{}\t{}\t{:.4}\t{:.4}\t{}",
            r.n_effective, r.method, r.statistic, r.p_value, holm.adjusted[i], holm.reject[i]
        );
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    slide_id: String,
    group_id: String,
    endpoint: String,
    value: f64,
    /// Test subcohort; defaults to the slide's staining/scanner condition.
    #[serde(default)]
    subcohort: Option<String>,
}

fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("{}", path.display()))?;
    let rows = rdr
        .deserialize()
        .collect::<std::result::Result<Vec<LabelRow>, _>>()
        .with_context(|| format!("{}", path.display()))?;
    for r in &rows {
        if r.value != 0.0 && r.value != 1.0 {
            bail!(
                "{}: slide {} endpoint {} has label {}, expected 0 or 1",
                path.display(),
                r.slide_id,
                r.endpoint,
                r.value
            );
        }
    }
    Ok(rows)
}

/// Mean-pooled features of every slide in `manifest`, with its condition name.
fn pooled_slides(path: &Path) -> Result<BTreeMap<String, (String, Vec<f64>)>> {
    let manifest = load_manifest(path)?;
    let mut out = BTreeMap::new();
    for rec in manifest.slides() {
        let matrix = read_embedding_file(manifest.resolve(rec)).with_context(|| format!("slide {}", rec.slide_id))?;
        let condition = format!("{}/{}", rec.staining_id, rec.scanner_id);
        out.insert(rec.slide_id.clone(), (condition, mean_pool_slide(&matrix).iter().copied().collect()));
    }
    Ok(out)
}

fn features(rows: &[&LabelRow], slides: &BTreeMap<String, (String, Vec<f64>)>) -> Result<LabeledFeatures> {
    let dim = slides.values().next().map_or(0, |s| s.1.len());
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        let (_, f) = slides.get(&r.slide_id).ok_or_else(|| anyhow!("slide {} is not in the manifest", r.slide_id))?;
        data.extend_from_slice(f);
    }
    let x = Matrix::from_row_slice(rows.len(), dim, &data);
    let labels: Vec<bool> = rows.iter().map(|r| r.value == 1.0).collect();
    let groups = rows.iter().map(|r| r.group_id.clone()).collect();
    Ok(LabeledFeatures::classification(x, &labels, Some(groups))?)
}

fn cmd_downstream(args: DownstreamArgs) -> Result<()> {
    let test_slides = pooled_slides(&args.manifest)?;
    let train_slides = match &args.train_manifest {
        Some(p) => pooled_slides(p)?,
        None => test_slides.clone(),
    };
    let train_rows = read_labels(&args.train_labels)?;
    let test_rows = read_labels(&args.test_labels)?;
    let endpoints: BTreeSet<&str> = match &args.endpoint {
        Some(e) => BTreeSet::from([e.as_str()]),
        None => train_rows.iter().map(|r| r.endpoint.as_str()).collect(),
    };
    let opts = LogisticOptions { l2: args.l2, standardize: !args.no_standardize, ..Default::default() };
    let mut tsv = String::from("endpoint\tkind\tsubcohort_a\tsubcohort_b\tvalue\tn\n");
    for endpoint in endpoints {
        let train: Vec<&LabelRow> = train_rows.iter().filter(|r| r.endpoint == endpoint).collect();
        if train.is_empty() {
            bail!("no training labels for endpoint {endpoint}");
        }
        let mut by_condition: BTreeMap<&str, Vec<&LabelRow>> = BTreeMap::new();
        for r in test_rows.iter().filter(|r| r.endpoint == endpoint) {
            let (cond, _) =
                test_slides.get(&r.slide_id).ok_or_else(|| anyhow!("slide {} is not in the manifest", r.slide_id))?;
            by_condition.entry(r.subcohort.as_deref().unwrap_or(cond)).or_default().push(r);
        }
        let subs = by_condition
            .iter()
            .map(|(c, rows)| Ok((c.to_string(), features(rows, &test_slides)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let result = run_breastbm_protocol(&features(&train, &train_slides)?, &subs, &opts)
            .with_context(|| format!("endpoint {endpoint}"))?;
        if !result.fit.converged {
            log::warn!("endpoint {endpoint}: logistic fit stopped at gradient norm {:e}", result.fit.grad_norm);
        }
        println!("## {endpoint}\n\n| subcohort | AUC | n |\n| --- | --- | --- |");
        for (name, v) in &result.auc {
            let n = subs[name].n();
            println!("| {name} | {v:.3} | {n} |");
            tsv.push_str(&format!("{endpoint}\tauc\t{name}\t\t{v}\t{n}\n"));
        }
        if !result.concordance.is_empty() {
            println!("\n| subcohort A | subcohort B | CCC | shared blocks |\n| --- | --- | --- | --- |");
        }
        for c in &result.concordance {
            println!("| {} | {} | {:.3} | {} |", c.subcohort_a, c.subcohort_b, c.ccc, c.n_shared);
            tsv.push_str(&format!(
                "{endpoint}\tccc\t{}\t{}\t{}\t{}\n",
                c.subcohort_a, c.subcohort_b, c.ccc, c.n_shared
            ));
        }
        println!();
    }
    if let Some(out) = args.out {
        fs::create_dir_all(&out).with_context(|| format!("{}", out.display()))?;
        let path = out.join("downstream.tsv");
        fs::write(&path, tsv).with_context(|| format!("{}", path.display()))?;
    }
    Ok(())
}

fn cmd_distill(args: DistillArgs) -> Result<()> {
    let checks = distill::check(args.seed, args.batches)?;
    let mut failed = 0;
    for c in &checks {
        println!(
            "{}\t{}\tworst {:e}\ttolerance {:e}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance
        );
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} properties failed", checks.len());
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let (rows, ks) = report::reaggregate(&args.pairs)?;
    let digest = match &args.manifest {
        Some(p) => load_manifest(p)?.digest(),
        None => "unknown".to_string(),
    };
    fs::create_dir_all(&args.out).with_context(|| format!("{}", args.out.display()))?;
    let agg = args.out.join(AGGREGATE_FILE);
    fs::write(&agg, report::aggregate_tsv(&rows)).with_context(|| format!("{}", agg.display()))?;
    let table = report::table_markdown(&rows, &ks, &digest);
    let path = args.out.join(TABLE_FILE);
    fs::write(&path, &table).with_context(|| format!("{}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Stats(a) => cmd_stats(a),
        Command::Downstream(a) => cmd_downstream(a),
        Command::DistillCheck(a) => cmd_distill(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_io(&e) { 2 } else { 1 })
        }
    }
}
