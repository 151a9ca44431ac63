use std::collections::{BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::StoreError;

/// One slide of a cohort. Serialized as a single JSON object per manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlideRecord {
    pub slide_id: String,
    #[serde(rename = "staining")]
    pub staining_id: String,
    #[serde(rename = "scanner")]
    pub scanner_id: String,
    pub path: PathBuf,
    pub n_tiles: usize,
    pub dim: usize,
}

/// A validated staining × scanner cohort where every slide shares `n_tiles` and `dim`.
#[derive(Debug, Clone)]
pub struct CohortManifest {
    slides: Vec<SlideRecord>,
    stainings: BTreeSet<String>,
    scanners: BTreeSet<String>,
    n_tiles: usize,
    dim: usize,
    root: PathBuf,
}

impl CohortManifest {
    /// Validates cohort invariants. Relative slide paths resolve against `root`.
    pub fn new(slides: Vec<SlideRecord>, root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let first = slides.first().ok_or(StoreError::EmptyManifest)?;
        let (n_tiles, dim) = (first.n_tiles, first.dim);
        let mut seen_pairs = HashSet::new();
        let mut seen_ids = HashSet::new();
        for (i, s) in slides.iter().enumerate() {
            let line = i + 1;
            validate_record(s, line)?;
            if s.n_tiles != n_tiles {
                return Err(StoreError::Inconsistent { line, field: "n_tiles", expected: n_tiles, found: s.n_tiles });
            }
            if s.dim != dim {
                return Err(StoreError::Inconsistent { line, field: "dim", expected: dim, found: s.dim });
            }
            if !seen_ids.insert(s.slide_id.as_str()) {
                return Err(StoreError::DuplicateSlide { line, slide_id: s.slide_id.clone() });
            }
            if !seen_pairs.insert((s.staining_id.as_str(), s.scanner_id.as_str())) {
                return Err(StoreError::DuplicatePair {
                    line,
                    staining: s.staining_id.clone(),
                    scanner: s.scanner_id.clone(),
                });
            }
        }
        let stainings = slides.iter().map(|s| s.staining_id.clone()).collect();
        let scanners = slides.iter().map(|s| s.scanner_id.clone()).collect();
        Ok(Self { slides, stainings, scanners, n_tiles, dim, root: root.into() })
    }

    pub fn slides(&self) -> &[SlideRecord] {
        &self.slides
    }

    pub fn stainings(&self) -> &BTreeSet<String> {
        &self.stainings
    }

    pub fn scanners(&self) -> &BTreeSet<String> {
        &self.scanners
    }

    pub fn n_tiles(&self) -> usize {
        self.n_tiles
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn slide(&self, slide_id: &str) -> Option<&SlideRecord> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    pub fn resolve(&self, record: &SlideRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    /// True when every staining was scanned by every scanner.
    pub fn is_complete_grid(&self) -> bool {
        self.slides.len() == self.stainings.len() * self.scanners.len()
    }

    /// Manifest lines in file order, newline-terminated.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.slides {
            out.push_str(&serde_json::to_string(s).expect("slide records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), StoreError> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| StoreError::io(path, e))
    }

    /// Hex SHA-256 of the canonical JSONL encoding.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_jsonl().as_bytes()))
    }
}

fn validate_record(s: &SlideRecord, line: usize) -> Result<(), StoreError> {
    let bad = |message: &str| StoreError::MalformedLine { line, message: message.into() };
    if s.slide_id.is_empty() {
        return Err(bad("empty slide_id"));
    }
    if s.n_tiles == 0 || s.dim == 0 {
        return Err(bad("n_tiles and dim must be positive"));
    }
    Ok(())
}

/// Parses manifest lines without the cohort-grid invariants. Blank lines are skipped.
pub fn read_manifest_records(path: impl AsRef<Path>) -> Result<Vec<SlideRecord>, StoreError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| StoreError::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: SlideRecord = serde_json::from_str(line)
            .map_err(|e| StoreError::MalformedLine { line: i + 1, message: e.to_string() })?;
        validate_record(&record, i + 1)?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(StoreError::EmptyManifest);
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<CohortManifest, StoreError> {
    let path = path.as_ref();
    let records = read_manifest_records(path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    CohortManifest::new(records, root)
}
