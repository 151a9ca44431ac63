use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tilerobust(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilerobust"))
        .args(args)
        .env_remove("TILEROBUST_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixture() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/task_scores.csv")
}

fn synth(dir: &Path, extra: &[&str]) {
    let out = dir.to_str().unwrap();
    let mut args = vec![
        "synth",
        "--out",
        out,
        "--stainings",
        "2",
        "--scanners",
        "3",
        "--tiles",
        "40",
        "--dim",
        "12",
        "--seed",
        "3",
    ];
    args.extend_from_slice(extra);
    let o = tilerobust(&args);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn run_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("cohort"), &[]);
    let manifest = dir.path().join("cohort/manifest.jsonl");
    let out = dir.path().join("r");
    let o = tilerobust(&["run", "--manifest", manifest.to_str().unwrap(), "--k", "10", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["pairs.tsv", "aggregate.tsv", "table.md"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(stdout(&o).contains("Cross-scanner cosine"));
    let pairs = fs::read_to_string(out.join("pairs.tsv")).unwrap();
    assert!(pairs.starts_with("mode\tslide_a\tslide_b\tmean_cosine\ttop10\n"));
    assert_eq!(pairs.lines().count(), 1 + 15);
}

#[test]
fn thread_count_does_not_change_output() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("cohort"), &["--staining-noise", "0.5"]);
    let manifest = dir.path().join("cohort/manifest.jsonl");
    let mut files = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("r{threads}"));
        let o = tilerobust(&[
            "run",
            "--manifest",
            manifest.to_str().unwrap(),
            "--threads",
            threads,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        files.push(["pairs.tsv", "aggregate.tsv", "table.md"].map(|f| fs::read(out.join(f)).unwrap()));
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn env_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("cohort"), &[]);
    let out = dir.path().join("r");
    let o = Command::new(env!("CARGO_BIN_EXE_tilerobust"))
        .args(["run", "--k", "1,3"])
        .env("TILEROBUST_MANIFEST", dir.path().join("cohort/manifest.jsonl"))
        .env("TILEROBUST_OUT", &out)
        .env("TILEROBUST_MODES", "fixed_staining_cross_scanner")
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let agg = fs::read_to_string(out.join("aggregate.tsv")).unwrap();
    assert!(agg.contains("top_k@3"));
    assert!(!agg.contains("cross_staining_cross_scanner"));
}

#[test]
fn missing_manifest_is_io_error() {
    let o = tilerobust(&["run", "--manifest", "/nonexistent/m.jsonl", "--out", "/tmp/x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("/nonexistent/m.jsonl"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(tilerobust(&["run", "--bogus"]).status.code(), Some(1));
    assert_eq!(tilerobust(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(tilerobust(&["synth", "--out", "/tmp/x", "--tiles", "0"]).status.code(), Some(1));
    assert_eq!(tilerobust(&["--help"]).status.code(), Some(0));
}

#[test]
fn stats_reproduces_fixture_comparison() {
    let o = tilerobust(&["stats", "--scores", fixture().to_str().unwrap(), "--compare", "H0:H0-mini"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let line = stdout(&o).lines().find(|l| l.starts_with("H0>H0-mini")).unwrap().to_string();
    let p: f64 = line.split('\t').nth(4).unwrap().parse().unwrap();
    assert!((0.02..=0.06).contains(&p), "{line}");
}

#[test]
fn stats_holm_over_comparisons() {
    let o = tilerobust(&[
        "stats",
        "--scores",
        fixture().to_str().unwrap(),
        "--compare",
        "H0-mini:Phikon",
        "--compare",
        "Virchow2:H0-mini",
        "--exclude-task",
        "Bach",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().any(|l| l.starts_with("H0-mini>Phikon") && l.ends_with("true")), "{text}");
    assert!(text.lines().any(|l| l.starts_with("Virchow2>H0-mini") && l.ends_with("false")), "{text}");
    let bad = tilerobust(&["stats", "--scores", fixture().to_str().unwrap(), "--compare", "H0:Nobody"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn distill_check_passes() {
    let o = tilerobust(&["distill-check", "--seed", "7", "--batches", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.lines().count() >= 9);
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn report_rebuilds_aggregates() {
    let dir = tempfile::tempdir().unwrap();
    synth(&dir.path().join("cohort"), &[]);
    let manifest = dir.path().join("cohort/manifest.jsonl");
    let out = dir.path().join("r");
    let run = tilerobust(&["run", "--manifest", manifest.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(run.status.success());
    let again = dir.path().join("again");
    let o = tilerobust(&[
        "report",
        "--pairs",
        out.join("pairs.tsv").to_str().unwrap(),
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        again.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["aggregate.tsv", "table.md"] {
        assert_eq!(fs::read(out.join(f)).unwrap(), fs::read(again.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn downstream_identical_subcohorts_are_concordant() {
    let dir = tempfile::tempdir().unwrap();
    let cohort = dir.path().join("cohort");
    let o = tilerobust(&[
        "synth",
        "--out",
        cohort.to_str().unwrap(),
        "--stainings",
        "6",
        "--scanners",
        "6",
        "--tiles",
        "20",
        "--dim",
        "8",
        "--staining-noise",
        "0.5",
        "--scanner-noise",
        "0.5",
        "--seed",
        "9",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let slides: Vec<String> = (0..6).flat_map(|s| (0..6).map(move |c| format!("st{s:02}_sc{c:02}"))).collect();
    let train = dir.path().join("train.csv");
    let test = dir.path().join("test.csv");
    let mut t = String::from("slide_id,group_id,endpoint,value\n");
    for (i, s) in slides.iter().enumerate() {
        t.push_str(&format!("{s},g{i},ER,{}\n", (i / 6 + i) % 2));
    }
    fs::write(&train, &t).unwrap();
    let mut u = String::from("slide_id,group_id,endpoint,value,subcohort\n");
    for name in ["HE", "HES"] {
        for (i, s) in slides.iter().take(18).enumerate() {
            u.push_str(&format!("{s},block{i},ER,{},{name}\n", i % 2));
        }
    }
    fs::write(&test, &u).unwrap();
    let out = dir.path().join("ds");
    let o = tilerobust(&[
        "downstream",
        "--manifest",
        cohort.join("manifest.jsonl").to_str().unwrap(),
        "--train-labels",
        train.to_str().unwrap(),
        "--test-labels",
        test.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("| HE | HES | 1.000 | 18 |"), "{text}");
    let tsv = fs::read_to_string(out.join("downstream.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 1 + 2 + 1);

    let one_class = dir.path().join("one.csv");
    fs::write(&one_class, "slide_id,group_id,endpoint,value\nst00_sc00,b,ER,1\nst00_sc01,c,ER,1\n").unwrap();
    let bad = tilerobust(&[
        "downstream",
        "--manifest",
        cohort.join("manifest.jsonl").to_str().unwrap(),
        "--train-labels",
        train.to_str().unwrap(),
        "--test-labels",
        one_class.to_str().unwrap(),
    ]);
    assert_eq!(bad.status.code(), Some(1));
}
