//! Append-only run persistence.
//!
//! ```text
//! runs/<run_id>/
//!   manifest.json     config, source, dataset digest, failures, seal flag, checksum
//!   dataset.jsonl     questions the run was graded against
//!   records.jsonl     one GenerationRecord per line
//!   chains.jsonl      one revision step per line
//!   analysis/         <run_id>_<name>.csv and .json
//!   .lock             present while a writer is open
//! ```
//!
//! Keys are `(question id, sample index)` for records and `(question id,
//! sample index, step)` for chain steps; each may be written once. A crash
//! can leave a partial last line, which readers skip with a warning and
//! writers cut off before appending.

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::seed::digest_hex;
use crate::simulator::SimParams;
use crate::types::{
    dataset_to_jsonl, parse_dataset, DatasetError, GenerationRecord, Question, RecordError,
    RevisionChain, RevisionStep,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const RECORDS_FILE: &str = "records.jsonl";
pub const CHAINS_FILE: &str = "chains.jsonl";
pub const ANALYSIS_DIR: &str = "analysis";
const LOCK_FILE: &str = ".lock";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("run {0:?} does not exist")]
    MissingRun(String),
    #[error("run {0:?} already exists")]
    AlreadyExists(String),
    #[error("run {0:?} is locked by another writer (remove {1} if no process owns it)")]
    Locked(String, String),
    #[error("run {0:?} is sealed")]
    Sealed(String),
    #[error("run {0:?} is not sealed; finish or resume it first")]
    NotSealed(String),
    #[error("duplicate {kind} key {key}")]
    DuplicateKey { kind: &'static str, key: String },
    #[error("manifest checksum mismatch for run {0:?}")]
    ManifestChecksum(String),
    #[error("{file} line {line}: {message}")]
    Corrupt {
        file: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid run id {0:?}")]
    InvalidRunId(String),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Where a run's generations came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunSource {
    Provider { endpoint: String },
    Simulated { params: SimParams, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FailureEntry {
    pub question_id: String,
    pub sample_index: u32,
    pub step: u32,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_id: String,
    pub format_version: u32,
    pub config: RunConfig,
    pub dataset_digest: String,
    pub source: RunSource,
    pub sealed: bool,
    pub failures: Vec<FailureEntry>,
    /// SHA-256 of the manifest serialized with this field empty.
    #[serde(default)]
    pub checksum: String,
}

impl Manifest {
    pub fn new(run_id: &str, config: RunConfig, source: RunSource) -> Self {
        Self {
            run_id: run_id.to_string(),
            format_version: FORMAT_VERSION,
            config,
            dataset_digest: String::new(),
            source,
            sealed: false,
            failures: Vec::new(),
            checksum: String::new(),
        }
    }

    fn compute_checksum(&self) -> String {
        let mut body = self.clone();
        body.checksum.clear();
        digest_hex(
            serde_json::to_string(&body)
                .expect("manifest serializes")
                .as_bytes(),
        )
    }

    fn to_json(&self) -> String {
        let mut sealed = self.clone();
        sealed.checksum = self.compute_checksum();
        let mut text = serde_json::to_string_pretty(&sealed).expect("manifest serializes");
        text.push('\n');
        text
    }
}

/// One line of `chains.jsonl`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStepLine {
    pub question_id: String,
    pub sample_index: u32,
    pub step: RevisionStep,
    /// Set on the final line of a chain cut short by the token ceiling.
    #[serde(default)]
    pub chain_truncated: bool,
}

/// A fully materialized run.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub manifest: Manifest,
    pub questions: Vec<Question>,
    pub records: Vec<GenerationRecord>,
    pub chains: Vec<RevisionChain>,
    pub warnings: Vec<String>,
}

impl LoadedRun {
    pub fn question_map(&self) -> BTreeMap<&str, &Question> {
        self.questions.iter().map(|q| (q.id.as_str(), q)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        self.run_dir(run_id).join(MANIFEST_FILE).is_file()
    }

    /// Creates a new run directory and returns its writer.
    pub fn create(
        &self,
        mut manifest: Manifest,
        questions: &[Question],
    ) -> Result<RunWriter, StoreError> {
        let run_id = manifest.run_id.clone();
        check_run_id(&run_id)?;
        let dir = self.run_dir(&run_id);
        if dir.join(MANIFEST_FILE).exists() {
            return Err(StoreError::AlreadyExists(run_id));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let lock = LockGuard::acquire(&dir, &run_id)?;
        let dataset = dataset_to_jsonl(questions);
        manifest.dataset_digest = digest_hex(dataset.as_bytes());
        manifest.sealed = false;
        write_atomic(&dir.join(DATASET_FILE), dataset.as_bytes())?;
        for file in [RECORDS_FILE, CHAINS_FILE] {
            let path = dir.join(file);
            File::create(&path).map_err(io_err(&path))?;
        }
        write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
        RunWriter::open(dir, manifest, lock)
    }

    /// Opens an unsealed run for appending (resume).
    pub fn open_writer(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        let manifest = read_manifest(&dir, run_id)?;
        if manifest.sealed {
            return Err(StoreError::Sealed(run_id.to_string()));
        }
        let lock = LockGuard::acquire(&dir, run_id)?;
        RunWriter::open(dir, manifest, lock)
    }

    /// Clears the seal so more data (e.g. revision chains) can be appended.
    pub fn reopen(&self, run_id: &str) -> Result<RunWriter, StoreError> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        let mut manifest = read_manifest(&dir, run_id)?;
        let lock = LockGuard::acquire(&dir, run_id)?;
        if manifest.sealed {
            manifest.sealed = false;
            write_atomic(&dir.join(MANIFEST_FILE), manifest.to_json().as_bytes())?;
        }
        RunWriter::open(dir, manifest, lock)
    }

    pub fn manifest(&self, run_id: &str) -> Result<Manifest, StoreError> {
        check_run_id(run_id)?;
        read_manifest(&self.run_dir(run_id), run_id)
    }

    pub fn load(&self, run_id: &str) -> Result<LoadedRun, StoreError> {
        check_run_id(run_id)?;
        let dir = self.run_dir(run_id);
        let manifest = read_manifest(&dir, run_id)?;
        let dataset_path = dir.join(DATASET_FILE);
        let dataset = fs::read_to_string(&dataset_path).map_err(io_err(&dataset_path))?;
        let questions = parse_dataset(&dataset)?;
        let by_id: BTreeMap<&str, &Question> =
            questions.iter().map(|q| (q.id.as_str(), q)).collect();

        let mut warnings = Vec::new();
        let records: Vec<GenerationRecord> = read_jsonl(&dir.join(RECORDS_FILE), &mut warnings)?;
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert((r.question_id.as_str(), r.sample_index)) {
                return Err(StoreError::DuplicateKey {
                    kind: "record",
                    key: format!("{}#{}", r.question_id, r.sample_index),
                });
            }
            r.validate(by_id.get(r.question_id.as_str()).copied())?;
        }
        let lines: Vec<ChainStepLine> = read_jsonl(&dir.join(CHAINS_FILE), &mut warnings)?;
        let chains = assemble_chains(lines)?;
        for w in &warnings {
            log::warn!("run {run_id}: {w}");
        }
        Ok(LoadedRun {
            manifest,
            questions,
            records,
            chains,
            warnings,
        })
    }

    /// Loads a run that must be sealed (analysis input).
    pub fn load_sealed(&self, run_id: &str) -> Result<LoadedRun, StoreError> {
        let run = self.load(run_id)?;
        if !run.manifest.sealed {
            return Err(StoreError::NotSealed(run_id.to_string()));
        }
        Ok(run)
    }

    /// Writes `analysis/<run_id>_<name>.csv` and, when given, the JSON summary.
    pub fn write_analysis(
        &self,
        run_id: &str,
        name: &str,
        csv: &str,
        summary: Option<&serde_json::Value>,
    ) -> Result<PathBuf, StoreError> {
        let dir = self.run_dir(run_id).join(ANALYSIS_DIR);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let csv_path = dir.join(format!("{run_id}_{name}.csv"));
        write_atomic(&csv_path, csv.as_bytes())?;
        if let Some(summary) = summary {
            let mut text = serde_json::to_string_pretty(summary).expect("summary serializes");
            text.push('\n');
            write_atomic(&dir.join(format!("{run_id}_{name}.json")), text.as_bytes())?;
        }
        Ok(csv_path)
    }
}

fn check_run_id(run_id: &str) -> Result<(), StoreError> {
    let ok = !run_id.is_empty()
        && run_id != "."
        && run_id != ".."
        && run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(StoreError::InvalidRunId(run_id.to_string()))
    }
}

fn read_manifest(dir: &Path, run_id: &str) -> Result<Manifest, StoreError> {
    let path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(StoreError::MissingRun(run_id.to_string()))
        }
        Err(e) => return Err(io_err(&path)(e)),
    };
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        file: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    if manifest.checksum != manifest.compute_checksum() {
        return Err(StoreError::ManifestChecksum(run_id.to_string()));
    }
    Ok(manifest)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Parses a JSONL file. An unparsable final line without a trailing newline
/// is a crash remnant: skipped with a warning. Anything else is corruption.
fn read_jsonl<T: serde::de::DeserializeOwned>(
    path: &Path,
    warnings: &mut Vec<String>,
) -> Result<Vec<T>, StoreError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let complete = text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::with_capacity(lines.len());
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(v) => out.push(v),
            Err(_) if i + 1 == lines.len() && !complete => {
                warnings.push(format!(
                    "{}: dropped partial trailing line {}",
                    path.display(),
                    i + 1
                ));
            }
            Err(e) => {
                return Err(StoreError::Corrupt {
                    file: path.display().to_string(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

/// Cuts a file back to its last newline so appends start on a fresh line.
fn truncate_partial_tail(path: &Path) -> Result<(), StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(io_err(path)(e)),
    };
    if bytes.is_empty() || bytes.ends_with(b"\n") {
        return Ok(());
    }
    let keep = bytes.iter().rposition(|b| *b == b'\n').map_or(0, |p| p + 1);
    log::warn!(
        "{}: truncating {} bytes of partial trailing line",
        path.display(),
        bytes.len() - keep
    );
    let f = OpenOptions::new()
        .write(true)
        .open(path)
        .map_err(io_err(path))?;
    f.set_len(keep as u64).map_err(io_err(path))?;
    f.sync_all().map_err(io_err(path))
}

fn assemble_chains(lines: Vec<ChainStepLine>) -> Result<Vec<RevisionChain>, StoreError> {
    let mut grouped: BTreeMap<(String, u32), (Vec<RevisionStep>, bool)> = BTreeMap::new();
    let mut order = Vec::new();
    for line in lines {
        let key = (line.question_id.clone(), line.sample_index);
        let entry = grouped.entry(key.clone()).or_insert_with(|| {
            order.push(key.clone());
            (Vec::new(), false)
        });
        entry.0.push(line.step);
        entry.1 |= line.chain_truncated;
    }
    let mut chains = Vec::with_capacity(order.len());
    for key in order {
        let (mut steps, truncated) = grouped.remove(&key).expect("grouped key");
        steps.sort_by_key(|s| s.step_index);
        if steps.windows(2).any(|w| w[0].step_index == w[1].step_index) {
            return Err(StoreError::DuplicateKey {
                kind: "chain step",
                key: format!("{}#{}", key.0, key.1),
            });
        }
        let chain = RevisionChain {
            question_id: key.0,
            sample_index: key.1,
            steps,
            truncated,
        };
        chain.validate()?;
        chains.push(chain);
    }
    Ok(chains)
}

struct LockGuard {
    path: PathBuf,
}

impl LockGuard {
    fn acquire(dir: &Path, run_id: &str) -> Result<Self, StoreError> {
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => Err(StoreError::Locked(
                run_id.to_string(),
                path.display().to_string(),
            )),
            Err(e) => Err(io_err(&path)(e)),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Exclusive appender for one run.
pub struct RunWriter {
    dir: PathBuf,
    manifest: Manifest,
    records: File,
    chains: File,
    record_keys: HashSet<(String, u32)>,
    chain_keys: HashSet<(String, u32, u32)>,
    _lock: LockGuard,
}

impl RunWriter {
    fn open(dir: PathBuf, manifest: Manifest, lock: LockGuard) -> Result<Self, StoreError> {
        let records_path = dir.join(RECORDS_FILE);
        let chains_path = dir.join(CHAINS_FILE);
        truncate_partial_tail(&records_path)?;
        truncate_partial_tail(&chains_path)?;
        let mut ignored = Vec::new();
        let existing: Vec<GenerationRecord> = read_jsonl(&records_path, &mut ignored)?;
        let steps: Vec<ChainStepLine> = read_jsonl(&chains_path, &mut ignored)?;
        let append = |p: &Path| {
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(io_err(p))
        };
        Ok(Self {
            records: append(&records_path)?,
            chains: append(&chains_path)?,
            record_keys: existing
                .into_iter()
                .map(|r| (r.question_id, r.sample_index))
                .collect(),
            chain_keys: steps
                .into_iter()
                .map(|l| (l.question_id, l.sample_index, l.step.step_index))
                .collect(),
            dir,
            manifest,
            _lock: lock,
        })
    }

    pub fn run_id(&self) -> &str {
        &self.manifest.run_id
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn has_record(&self, question_id: &str, sample_index: u32) -> bool {
        self.record_keys
            .contains(&(question_id.to_string(), sample_index))
    }

    pub fn has_chain_step(&self, question_id: &str, sample_index: u32, step: u32) -> bool {
        self.chain_keys
            .contains(&(question_id.to_string(), sample_index, step))
    }

    fn ensure_open(&self) -> Result<(), StoreError> {
        if self.manifest.sealed {
            Err(StoreError::Sealed(self.manifest.run_id.clone()))
        } else {
            Ok(())
        }
    }

    pub fn append_record(&mut self, record: &GenerationRecord) -> Result<(), StoreError> {
        self.ensure_open()?;
        record.validate(None)?;
        let key = (record.question_id.clone(), record.sample_index);
        if self.record_keys.contains(&key) {
            return Err(StoreError::DuplicateKey {
                kind: "record",
                key: format!("{}#{}", key.0, key.1),
            });
        }
        let mut line = serde_json::to_string(record).expect("record serializes");
        line.push('\n');
        let path = self.dir.join(RECORDS_FILE);
        self.records
            .write_all(line.as_bytes())
            .map_err(io_err(&path))?;
        self.record_keys.insert(key);
        Ok(())
    }

    pub fn append_chain_step(&mut self, line: &ChainStepLine) -> Result<(), StoreError> {
        self.ensure_open()?;
        let key = (
            line.question_id.clone(),
            line.sample_index,
            line.step.step_index,
        );
        if self.chain_keys.contains(&key) {
            return Err(StoreError::DuplicateKey {
                kind: "chain step",
                key: format!("{}#{}@{}", key.0, key.1, key.2),
            });
        }
        let mut text = serde_json::to_string(line).expect("chain step serializes");
        text.push('\n');
        let path = self.dir.join(CHAINS_FILE);
        self.chains
            .write_all(text.as_bytes())
            .map_err(io_err(&path))?;
        self.chain_keys.insert(key);
        Ok(())
    }

    /// Flushes appended lines to stable storage.
    pub fn sync(&mut self) -> Result<(), StoreError> {
        let path = self.dir.clone();
        self.records.sync_data().map_err(io_err(&path))?;
        self.chains.sync_data().map_err(io_err(&path))
    }

    pub fn set_config(&mut self, config: RunConfig) -> Result<(), StoreError> {
        self.manifest.config = config;
        self.write_manifest()
    }

    pub fn set_failures(&mut self, mut failures: Vec<FailureEntry>) -> Result<(), StoreError> {
        failures.sort();
        self.manifest.failures = failures;
        self.write_manifest()
    }

    /// Marks the run complete; further appends are rejected.
    pub fn seal(&mut self) -> Result<(), StoreError> {
        self.sync()?;
        self.manifest.sealed = true;
        self.write_manifest()
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        write_atomic(
            &self.dir.join(MANIFEST_FILE),
            self.manifest.to_json().as_bytes(),
        )
    }
}
