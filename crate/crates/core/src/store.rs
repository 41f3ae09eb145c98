//! Plain-directory run store.
//!
//! ```text
//! <root>/runs/<run_id>/manifest.json
//! <root>/runs/<run_id>/journal.jsonl            (only while running)
//! <root>/runs/<run_id>/papers/<paper_id>/phase1_review_1.json ...
//! <root>/runs/<run_id>/papers/<paper_id>/prompts/*.txt
//! ```
//!
//! Every artifact is written to a temp file and renamed into place, then
//! appended to the journal. `finalize` folds the journal into the manifest
//! index and removes it. Reused artifacts are small link stubs pointing at
//! the baseline run's file.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hashing::sha256_hex;
use crate::pipeline::SimulationConfig;
use crate::provider::ProviderIdentity;

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const JOURNAL_FILE: &str = "journal.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt artifact {path}: expected sha256 {expected}, found {actual}")]
    CorruptArtifact {
        path: PathBuf,
        expected: String,
        actual: String,
    },
    #[error("malformed file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error("hash mismatch after writing {0}")]
    HashMismatchOnVerify(PathBuf),
    #[error("run {0} not found")]
    RunNotFound(String),
    #[error("artifact {kind} needs an index in 1..=3")]
    BadIndex { kind: ArtifactKind },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Phase1Review,
    Phase2Rebuttal,
    Phase3Transcript,
    Phase3Updated,
    Phase4Metareview,
    Decision,
}

impl ArtifactKind {
    pub const ALL: [ArtifactKind; 6] = [
        ArtifactKind::Phase1Review,
        ArtifactKind::Phase2Rebuttal,
        ArtifactKind::Phase3Transcript,
        ArtifactKind::Phase3Updated,
        ArtifactKind::Phase4Metareview,
        ArtifactKind::Decision,
    ];

    pub fn stem(self) -> &'static str {
        match self {
            ArtifactKind::Phase1Review => "phase1_review",
            ArtifactKind::Phase2Rebuttal => "phase2_rebuttal",
            ArtifactKind::Phase3Transcript => "phase3_transcript",
            ArtifactKind::Phase3Updated => "phase3_updated",
            ArtifactKind::Phase4Metareview => "phase4_metareview",
            ArtifactKind::Decision => "decision",
        }
    }

    pub fn is_indexed(self) -> bool {
        matches!(
            self,
            ArtifactKind::Phase1Review | ArtifactKind::Phase2Rebuttal | ArtifactKind::Phase3Updated
        )
    }

    pub fn file_name(self, index: Option<u8>) -> Result<String, StoreError> {
        match (self.is_indexed(), index) {
            (true, Some(i @ 1..=3)) => Ok(format!("{}_{i}.json", self.stem())),
            (false, None) => Ok(format!("{}.json", self.stem())),
            _ => Err(StoreError::BadIndex { kind: self }),
        }
    }

    pub fn from_file_name(name: &str) -> Option<(ArtifactKind, Option<u8>)> {
        let stem = name.strip_suffix(".json")?;
        for kind in Self::ALL {
            if kind.is_indexed() {
                if let Some(i) = stem.strip_prefix(kind.stem()).and_then(|r| r.strip_prefix('_')) {
                    if let Ok(i @ 1..=3) = i.parse::<u8>() {
                        return Some((kind, Some(i)));
                    }
                }
            } else if stem == kind.stem() {
                return Some((kind, None));
            }
        }
        None
    }
}

impl std::fmt::Display for ArtifactKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.stem())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

impl Usage {
    pub fn add(&mut self, other: Usage) {
        self.calls += other.calls;
        self.prompt_tokens += other.prompt_tokens;
        self.completion_tokens += other.completion_tokens;
    }
}

/// One persisted artifact: parsed fields, the raw completion and its cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: ArtifactKind,
    pub paper_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub index: Option<u8>,
    pub fields: Value,
    pub raw_text: String,
    pub usage: Usage,
}

impl Artifact {
    pub fn new(
        kind: ArtifactKind,
        paper_id: &str,
        index: Option<u8>,
        fields: &impl Serialize,
        raw_text: impl Into<String>,
        usage: Usage,
    ) -> Self {
        Self {
            kind,
            paper_id: paper_id.to_string(),
            index,
            fields: serde_json::to_value(fields).expect("artifact fields serialize"),
            raw_text: raw_text.into(),
            usage,
        }
    }

    pub fn fields_as<T: DeserializeOwned>(&self) -> Result<T, serde_json::Error> {
        T::deserialize(&self.fields)
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("artifact serializes");
        bytes.push(b'\n');
        bytes
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct LinkStub {
    link: String,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    /// Relative path to the baseline file for reused artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub run_id: String,
    pub setting_name: String,
    pub provider: ProviderIdentity,
    pub corpus_hash: String,
    pub template_checksum: String,
    pub config: SimulationConfig,
    pub papers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_run: Option<String>,
    pub status: RunStatus,
    pub started_at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Relative artifact path -> hash and optional link.
    #[serde(default)]
    pub artifacts: BTreeMap<String, ArtifactEntry>,
    /// Usage of artifacts generated by this run.
    #[serde(default)]
    pub token_totals: Usage,
    /// Usage carried by artifacts reused from the baseline.
    #[serde(default)]
    pub reused_totals: Usage,
}

impl RunManifest {
    pub fn new(
        setting_name: impl Into<String>,
        config: SimulationConfig,
        provider: ProviderIdentity,
        corpus_hash: impl Into<String>,
        template_checksum: impl Into<String>,
        papers: Vec<String>,
        baseline_run: Option<String>,
    ) -> Self {
        Self {
            schema_version: MANIFEST_SCHEMA_VERSION,
            run_id: ulid::Ulid::new().to_string(),
            setting_name: setting_name.into(),
            provider,
            corpus_hash: corpus_hash.into(),
            template_checksum: template_checksum.into(),
            config,
            papers,
            baseline_run,
            status: RunStatus::Running,
            started_at: now(),
            finished_at: None,
            error: None,
            artifacts: BTreeMap::new(),
            token_totals: Usage::default(),
            reused_totals: Usage::default(),
        }
    }

    /// Manifest with run id and timestamps blanked, for determinism checks.
    pub fn normalized(&self) -> RunManifest {
        let mut m = self.clone();
        m.run_id.clear();
        m.started_at.clear();
        m.finished_at = None;
        m
    }

    pub fn artifact_path(paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> Result<String, StoreError> {
        Ok(format!("papers/{paper_id}/{}", kind.file_name(index)?))
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().expect("artifact path has a parent");
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let name = path.file_name().expect("file name").to_string_lossy();
    let tmp = dir.join(format!(
        ".{name}.{}.{}.tmp",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|e| StoreError::Malformed {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Result of [`Store::list_runs`].
#[derive(Debug, Default)]
pub struct RunListing {
    pub runs: Vec<RunManifest>,
    pub warnings: Vec<String>,
}

/// A root directory holding `runs/`.
#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let runs = root.join("runs");
        fs::create_dir_all(&runs).map_err(io_err(&runs))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    /// Creates the run directory and writes the manifest before anything else.
    pub fn create_run(&self, manifest: RunManifest) -> Result<RunHandle, StoreError> {
        let dir = self.run_dir(&manifest.run_id);
        fs::create_dir_all(dir.join("papers")).map_err(io_err(&dir))?;
        let handle = RunHandle::new(dir, manifest, BTreeMap::new())?;
        handle.write_manifest()?;
        Ok(handle)
    }

    /// Reopens a run, replaying its journal and adopting any complete
    /// artifact that reached disk without a journal entry.
    pub fn open_run(&self, run_id: &str) -> Result<RunHandle, StoreError> {
        let dir = self.run_dir(run_id);
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        let manifest: RunManifest = read_json(&manifest_path)?;
        let mut index = manifest.artifacts.clone();
        let journal = dir.join(JOURNAL_FILE);
        if journal.exists() {
            let text = fs::read_to_string(&journal).map_err(io_err(&journal))?;
            for line in text.lines() {
                // A torn final line from a crash is skipped.
                if let Ok(entry) = serde_json::from_str::<JournalLine>(line) {
                    index.insert(entry.path, entry.entry);
                }
            }
        }
        let orphans = scan_unindexed(&dir, &index)?;
        let handle = RunHandle::new(dir, manifest, index)?;
        for (rel, entry) in orphans {
            log::info!("adopting unjournaled artifact {rel}");
            handle.record(rel, entry)?;
        }
        Ok(handle)
    }

    pub fn load_manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        let path = self.run_dir(run_id).join(MANIFEST_FILE);
        if !path.exists() {
            return Err(StoreError::RunNotFound(run_id.to_string()));
        }
        read_json(&path)
    }

    /// All readable manifests sorted by run id. Unreadable manifests and
    /// index entries that do not match the files on disk go to `warnings`.
    pub fn list_runs(&self) -> Result<RunListing, StoreError> {
        let runs_dir = self.root.join("runs");
        let mut listing = RunListing::default();
        let mut ids: Vec<String> = fs::read_dir(&runs_dir)
            .map_err(io_err(&runs_dir))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        ids.sort();
        for id in ids {
            let dir = self.run_dir(&id);
            let manifest: RunManifest = match read_json(&dir.join(MANIFEST_FILE)) {
                Ok(m) => m,
                Err(e) => {
                    listing.warnings.push(format!("run {id}: unreadable manifest: {e}"));
                    continue;
                }
            };
            for (rel, entry) in &manifest.artifacts {
                match verify_entry(&dir, rel, entry) {
                    Ok(()) => {}
                    Err(e) => listing.warnings.push(format!("run {id}: {e}")),
                }
            }
            listing.runs.push(manifest);
        }
        Ok(listing)
    }

    /// Relative path -> sha256 for every file in the run, with the manifest
    /// replaced by its normalized form. Equal maps mean equal runs.
    pub fn fingerprint(&self, run_id: &str) -> Result<BTreeMap<String, String>, StoreError> {
        let dir = self.run_dir(run_id);
        let mut out = BTreeMap::new();
        walk(&dir, &dir, &mut out)?;
        let manifest = self.load_manifest(run_id)?.normalized();
        out.insert(
            MANIFEST_FILE.to_string(),
            sha256_hex(&serde_json::to_vec(&manifest).expect("manifest serializes")),
        );
        Ok(out)
    }
}

fn walk(base: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<(), StoreError> {
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_dir() {
            walk(base, &path, out)?;
        } else {
            let rel = path.strip_prefix(base).expect("under base").to_string_lossy().replace('\\', "/");
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            out.insert(rel, sha256_hex(&bytes));
        }
    }
    Ok(())
}

fn verify_entry(dir: &Path, rel: &str, entry: &ArtifactEntry) -> Result<(), StoreError> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let bytes = match &entry.link {
        Some(link) => {
            let target = path.parent().expect("parent").join(link);
            fs::read(&target).map_err(io_err(&target))?
        }
        None => bytes,
    };
    let actual = sha256_hex(&bytes);
    if actual != entry.sha256 {
        return Err(StoreError::CorruptArtifact {
            path,
            expected: entry.sha256.clone(),
            actual,
        });
    }
    Ok(())
}

fn scan_unindexed(
    dir: &Path,
    index: &BTreeMap<String, ArtifactEntry>,
) -> Result<Vec<(String, ArtifactEntry)>, StoreError> {
    let papers = dir.join("papers");
    let mut out = Vec::new();
    if !papers.exists() {
        return Ok(out);
    }
    let mut paper_dirs: Vec<PathBuf> = fs::read_dir(&papers)
        .map_err(io_err(&papers))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    paper_dirs.sort();
    for paper_dir in paper_dirs {
        let mut files: Vec<PathBuf> = fs::read_dir(&paper_dir)
            .map_err(io_err(&paper_dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for file in files {
            let name = file.file_name().expect("name").to_string_lossy().into_owned();
            if name.ends_with(".tmp") {
                let _ = fs::remove_file(&file);
                continue;
            }
            if ArtifactKind::from_file_name(&name).is_none() {
                continue;
            }
            let rel = file.strip_prefix(dir).expect("under run").to_string_lossy().replace('\\', "/");
            if index.contains_key(&rel) {
                continue;
            }
            let bytes = fs::read(&file).map_err(io_err(&file))?;
            if let Ok(stub) = serde_json::from_slice::<LinkStub>(&bytes) {
                out.push((
                    rel,
                    ArtifactEntry {
                        sha256: stub.sha256,
                        link: Some(stub.link),
                    },
                ));
            } else if serde_json::from_slice::<Artifact>(&bytes).is_ok() {
                out.push((
                    rel,
                    ArtifactEntry {
                        sha256: sha256_hex(&bytes),
                        link: None,
                    },
                ));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct JournalLine {
    path: String,
    #[serde(flatten)]
    entry: ArtifactEntry,
}

struct RunState {
    manifest: RunManifest,
    index: BTreeMap<String, ArtifactEntry>,
    journal: Option<fs::File>,
    dirty: bool,
}

/// An open run. Shared by pipeline workers; writes for one paper come from
/// one worker, and index updates go through a single journal lock.
pub struct RunHandle {
    dir: PathBuf,
    state: Mutex<RunState>,
    writes: AtomicU64,
}

impl std::fmt::Debug for RunHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RunHandle").field("dir", &self.dir).finish()
    }
}

impl RunHandle {
    fn new(dir: PathBuf, manifest: RunManifest, index: BTreeMap<String, ArtifactEntry>) -> Result<Self, StoreError> {
        let dirty = index != manifest.artifacts;
        Ok(Self {
            dir,
            state: Mutex::new(RunState {
                manifest,
                index,
                journal: None,
                dirty,
            }),
            writes: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn run_id(&self) -> String {
        self.state.lock().expect("run lock").manifest.run_id.clone()
    }

    pub fn manifest(&self) -> RunManifest {
        let state = self.state.lock().expect("run lock");
        let mut m = state.manifest.clone();
        m.artifacts = state.index.clone();
        m
    }

    /// Files written through this handle (artifacts, stubs, prompts, manifest).
    pub fn writes(&self) -> u64 {
        self.writes.load(Ordering::Relaxed)
    }

    fn write_manifest(&self) -> Result<(), StoreError> {
        let manifest = self.manifest();
        let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        bytes.push(b'\n');
        write_atomic(&self.dir.join(MANIFEST_FILE), &bytes)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn record(&self, rel: String, entry: ArtifactEntry) -> Result<(), StoreError> {
        let mut state = self.state.lock().expect("run lock");
        if state.journal.is_none() {
            let path = self.dir.join(JOURNAL_FILE);
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            state.journal = Some(file);
        }
        let line = serde_json::to_string(&JournalLine {
            path: rel.clone(),
            entry: entry.clone(),
        })
        .expect("journal line serializes");
        let journal_path = self.dir.join(JOURNAL_FILE);
        let file = state.journal.as_mut().expect("journal open");
        writeln!(file, "{line}").map_err(io_err(&journal_path))?;
        state.index.insert(rel, entry);
        state.dirty = true;
        Ok(())
    }

    pub fn contains(&self, paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> bool {
        RunManifest::artifact_path(paper_id, kind, index)
            .map(|rel| self.state.lock().expect("run lock").index.contains_key(&rel))
            .unwrap_or(false)
    }

    /// Writes `artifact` atomically and records its hash.
    pub fn put_artifact(&self, artifact: &Artifact) -> Result<String, StoreError> {
        let rel = RunManifest::artifact_path(&artifact.paper_id, artifact.kind, artifact.index)?;
        let path = self.dir.join(&rel);
        let bytes = artifact.to_bytes();
        let sha = sha256_hex(&bytes);
        write_atomic(&path, &bytes)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        let written = fs::read(&path).map_err(io_err(&path))?;
        if sha256_hex(&written) != sha {
            return Err(StoreError::HashMismatchOnVerify(path));
        }
        self.record(rel, ArtifactEntry { sha256: sha.clone(), link: None })?;
        Ok(sha)
    }

    /// Points this run's artifact at the same artifact in `baseline`.
    pub fn link_artifact(
        &self,
        baseline: &RunHandle,
        paper_id: &str,
        kind: ArtifactKind,
        index: Option<u8>,
    ) -> Result<String, StoreError> {
        let rel = RunManifest::artifact_path(paper_id, kind, index)?;
        let entry = baseline
            .state
            .lock()
            .expect("run lock")
            .index
            .get(&rel)
            .cloned()
            .ok_or_else(|| StoreError::Io {
                path: baseline.dir.join(&rel),
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            })?;
        let sha = entry.sha256;
        // Runs share the `runs/` parent, so a baseline link is valid as is.
        let link = entry
            .link
            .unwrap_or_else(|| format!("../../../{}/{rel}", baseline.run_id()));
        let stub = LinkStub {
            link: link.clone(),
            sha256: sha.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&stub).expect("stub serializes");
        bytes.push(b'\n');
        write_atomic(&self.dir.join(&rel), &bytes)?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        self.record(rel, ArtifactEntry { sha256: sha.clone(), link: Some(link) })?;
        Ok(sha)
    }

    /// Final file holding the artifact bytes (following a link) and its hash.
    fn resolve(&self, rel: &str) -> Result<(PathBuf, String), StoreError> {
        let entry = self.state.lock().expect("run lock").index.get(rel).cloned();
        let path = self.dir.join(rel);
        let Some(entry) = entry else {
            return Err(StoreError::Io {
                path,
                source: std::io::Error::from(std::io::ErrorKind::NotFound),
            });
        };
        let target = match &entry.link {
            Some(link) => path.parent().expect("parent").join(link),
            None => path,
        };
        Ok((target, entry.sha256))
    }

    /// Reads and hash-verifies an artifact; `Ok(None)` when absent.
    pub fn get_artifact(
        &self,
        paper_id: &str,
        kind: ArtifactKind,
        index: Option<u8>,
    ) -> Result<Option<Artifact>, StoreError> {
        let rel = RunManifest::artifact_path(paper_id, kind, index)?;
        if !self.state.lock().expect("run lock").index.contains_key(&rel) {
            return Ok(None);
        }
        let (target, expected) = self.resolve(&rel)?;
        let bytes = fs::read(&target).map_err(io_err(&target))?;
        let actual = sha256_hex(&bytes);
        if actual != expected {
            return Err(StoreError::CorruptArtifact {
                path: target,
                expected,
                actual,
            });
        }
        serde_json::from_slice(&bytes).map(Some).map_err(|e| StoreError::Malformed {
            path: target,
            message: e.to_string(),
        })
    }

    /// Whether the artifact was linked from a baseline.
    pub fn is_linked(&self, paper_id: &str, kind: ArtifactKind, index: Option<u8>) -> bool {
        RunManifest::artifact_path(paper_id, kind, index)
            .ok()
            .and_then(|rel| self.state.lock().expect("run lock").index.get(&rel).cloned())
            .is_some_and(|e| e.link.is_some())
    }

    pub fn save_prompt(&self, paper_id: &str, name: &str, text: &str) -> Result<(), StoreError> {
        let path = self.dir.join("papers").join(paper_id).join("prompts").join(format!("{name}.txt"));
        write_atomic(&path, text.as_bytes())?;
        self.writes.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    pub fn prompt_path(&self, paper_id: &str, name: &str) -> PathBuf {
        self.dir.join("papers").join(paper_id).join("prompts").join(format!("{name}.txt"))
    }

    /// Folds the journal into the manifest, recomputes token totals and
    /// sets the final status. A complete run with nothing new is left as is.
    pub fn finalize(&self, status: RunStatus, error: Option<String>) -> Result<RunManifest, StoreError> {
        {
            let state = self.state.lock().expect("run lock");
            if !state.dirty && state.manifest.status == status && state.manifest.error == error {
                return Ok(self.manifest_locked(&state));
            }
        }
        let index = self.state.lock().expect("run lock").index.clone();
        let mut fresh = Usage::default();
        let mut reused = Usage::default();
        for (rel, entry) in &index {
            let (target, _) = self.resolve(rel)?;
            let artifact: Artifact = read_json(&target)?;
            if entry.link.is_some() {
                reused.add(artifact.usage);
            } else {
                fresh.add(artifact.usage);
            }
        }
        {
            let mut state = self.state.lock().expect("run lock");
            state.manifest.artifacts = index;
            state.manifest.token_totals = fresh;
            state.manifest.reused_totals = reused;
            state.manifest.status = status;
            state.manifest.error = error;
            if status == RunStatus::Complete {
                state.manifest.finished_at = Some(now());
            }
            state.journal = None;
            state.dirty = false;
        }
        self.write_manifest()?;
        let journal = self.dir.join(JOURNAL_FILE);
        if journal.exists() {
            fs::remove_file(&journal).map_err(io_err(&journal))?;
        }
        Ok(self.manifest())
    }

    fn manifest_locked(&self, state: &RunState) -> RunManifest {
        let mut m = state.manifest.clone();
        m.artifacts = state.index.clone();
        m
    }

    /// Replaces every link stub with a copy of the baseline bytes.
    pub fn materialize(&self) -> Result<usize, StoreError> {
        let linked: Vec<(String, ArtifactEntry)> = self
            .state
            .lock()
            .expect("run lock")
            .index
            .iter()
            .filter(|(_, e)| e.link.is_some())
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        for (rel, entry) in &linked {
            let (target, _) = self.resolve(rel)?;
            let bytes = fs::read(&target).map_err(io_err(&target))?;
            let actual = sha256_hex(&bytes);
            if actual != entry.sha256 {
                return Err(StoreError::CorruptArtifact {
                    path: target,
                    expected: entry.sha256.clone(),
                    actual,
                });
            }
            write_atomic(&self.dir.join(rel), &bytes)?;
            self.writes.fetch_add(1, Ordering::Relaxed);
            let mut state = self.state.lock().expect("run lock");
            state.index.insert(rel.clone(), ArtifactEntry { sha256: actual, link: None });
            state.dirty = true;
        }
        if !linked.is_empty() {
            let mut state = self.state.lock().expect("run lock");
            state.manifest.artifacts = state.index.clone();
            let status = state.manifest.status;
            let error = state.manifest.error.clone();
            drop(state);
            let mut m = self.manifest();
            m.status = status;
            m.error = error;
            let mut bytes = serde_json::to_vec_pretty(&m).expect("manifest serializes");
            bytes.push(b'\n');
            write_atomic(&self.dir.join(MANIFEST_FILE), &bytes)?;
            self.writes.fetch_add(1, Ordering::Relaxed);
            self.state.lock().expect("run lock").dirty = false;
        }
        Ok(linked.len())
    }
}
