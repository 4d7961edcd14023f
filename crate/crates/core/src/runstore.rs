//! Response cache and append-only run transcripts.
//!
//! Layout under the store root:
//!
//! ```text
//! cache.jsonl                 one CacheEntry per line, keyed by digest#replicate
//! <run_id>/manifest.json      RunManifest
//! <run_id>/transcript.jsonl   {"seq": n, "type": kind, "record": {...}} per line
//! ```
//!
//! Both JSONL files are append-only. A line cut short by a crash is dropped
//! (and truncated away) when the store is reopened.

use std::collections::HashMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatProvider, ChatRequest, GatewayError, ProviderConfig};

const CACHE_FILE: &str = "cache.jsonl";
const MANIFEST_FILE: &str = "manifest.json";
const TRANSCRIPT_FILE: &str = "transcript.jsonl";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}:{line}: corrupt record: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("immutable entry: cache key {0} already written")]
    Immutable(String),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{0}` already exists")]
    RunExists(String),
    #[error("invalid run id `{0}`")]
    InvalidRunId(String),
    #[error("run `{run_id}` was created for corpus {expected}, not {found}")]
    CorpusMismatch {
        run_id: String,
        expected: String,
        found: String,
    },
    #[error("record serialization: {0}")]
    Serialize(#[from] serde_json::Error),
    #[error(transparent)]
    Provider(#[from] GatewayError),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheKey {
    pub digest: String,
    pub replicate: u32,
}

impl CacheKey {
    pub fn new(digest: impl Into<String>, replicate: u32) -> Self {
        CacheKey {
            digest: digest.into(),
            replicate,
        }
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", self.digest, self.replicate)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub response_content: String,
    pub created_at: DateTime<Utc>,
    pub provider_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEntry {
    pub command: String,
    pub parameters: serde_json::Value,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub corpus_digest: String,
    /// Provider configs. They name credential variables but never hold
    /// credential values.
    pub providers: Vec<ProviderConfig>,
    pub started_at: DateTime<Utc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finished_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub commands: Vec<CommandEntry>,
}

impl RunManifest {
    pub fn new(run_id: &str, corpus_digest: &str, providers: Vec<ProviderConfig>) -> Self {
        RunManifest {
            run_id: run_id.into(),
            corpus_digest: corpus_digest.into(),
            providers,
            started_at: Utc::now(),
            finished_at: None,
            commands: Vec::new(),
        }
    }
}

/// A record kind that can be appended to a transcript.
pub trait TranscriptRecord: Serialize + DeserializeOwned {
    const KIND: &'static str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub seq: u64,
    #[serde(rename = "type")]
    pub kind: String,
    pub record: serde_json::Value,
}

impl TranscriptLine {
    pub fn decode<T: TranscriptRecord>(&self) -> Option<Result<T, serde_json::Error>> {
        (self.kind == T::KIND).then(|| serde_json::from_value(self.record.clone()))
    }
}

pub fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id != "."
        && id != ".."
        && id.len() <= 128
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
}

/// Reads complete JSONL lines. A final line lacking its newline or failing to
/// parse is treated as torn: it is skipped and the file truncated to the
/// last good byte so later appends start on a fresh line.
fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, StoreError> {
    let file = match File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    let mut reader = BufReader::new(file);
    let mut out = Vec::new();
    let mut good_len: u64 = 0;
    let mut buf = String::new();
    let mut line_no = 0;
    let mut torn = false;
    loop {
        buf.clear();
        let n = reader.read_line(&mut buf).map_err(io_err(path))?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.ends_with('\n');
        if buf.trim().is_empty() {
            if complete {
                good_len += n as u64;
            }
            continue;
        }
        match serde_json::from_str::<T>(buf.trim_end()) {
            Ok(v) if complete => {
                out.push(v);
                good_len += n as u64;
            }
            Ok(_) => {
                torn = true;
                break;
            }
            Err(e) => {
                let mut rest = String::new();
                let more = reader.read_line(&mut rest).map_err(io_err(path))?;
                if more == 0 {
                    torn = true;
                    break;
                }
                return Err(StoreError::Corrupt {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: e.to_string(),
                });
            }
        }
    }
    let actual = fs::metadata(path).map_err(io_err(path))?.len();
    if torn || actual != good_len {
        log::warn!("{}: dropping torn trailing record", path.display());
        let f = OpenOptions::new().write(true).open(path).map_err(io_err(path))?;
        f.set_len(good_len).map_err(io_err(path))?;
    }
    Ok(out)
}

fn open_append(path: &Path) -> Result<File, StoreError> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    Ok(f)
}

fn append_line(file: &mut File, path: &Path, line: &str) -> Result<(), StoreError> {
    let mut bytes = Vec::with_capacity(line.len() + 1);
    bytes.extend_from_slice(line.as_bytes());
    bytes.push(b'\n');
    file.write_all(&bytes).map_err(io_err(path))?;
    file.flush().map_err(io_err(path))
}

fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

struct CacheState {
    entries: HashMap<CacheKey, CacheEntry>,
    file: File,
}

struct RunLog {
    path: PathBuf,
    file: File,
    next_seq: u64,
}

/// Cache plus per-run transcripts. Shareable across threads.
pub struct RunStore {
    root: PathBuf,
    cache: RwLock<CacheState>,
    runs: Mutex<HashMap<String, Arc<Mutex<RunLog>>>>,
    manifest_lock: Mutex<()>,
}

impl fmt::Debug for RunStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RunStore").field("root", &self.root).finish_non_exhaustive()
    }
}

impl RunStore {
    /// Opens (creating if needed) the store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<RunStore, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        let cache_path = root.join(CACHE_FILE);
        let loaded: Vec<CacheEntry> = read_jsonl(&cache_path)?;
        let mut entries = HashMap::with_capacity(loaded.len());
        for e in loaded {
            entries.entry(e.key.clone()).or_insert(e);
        }
        let file = open_append(&cache_path)?;
        Ok(RunStore {
            root,
            cache: RwLock::new(CacheState { entries, file }),
            runs: Mutex::new(HashMap::new()),
            manifest_lock: Mutex::new(()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn cache_len(&self) -> usize {
        self.cache.read().unwrap_or_else(|e| e.into_inner()).entries.len()
    }

    pub fn cache_get(&self, key: &CacheKey) -> Option<String> {
        let state = self.cache.read().unwrap_or_else(|e| e.into_inner());
        state.entries.get(key).map(|e| e.response_content.clone())
    }

    pub fn cache_put(&self, key: CacheKey, content: &str, provider_name: &str) -> Result<(), StoreError> {
        let mut state = self.cache.write().unwrap_or_else(|e| e.into_inner());
        if state.entries.contains_key(&key) {
            return Err(StoreError::Immutable(key.to_string()));
        }
        let entry = CacheEntry {
            key: key.clone(),
            response_content: content.to_string(),
            created_at: Utc::now(),
            provider_name: provider_name.to_string(),
        };
        let line = serde_json::to_string(&entry)?;
        let path = self.root.join(CACHE_FILE);
        append_line(&mut state.file, &path, &line)?;
        state.entries.insert(key, entry);
        Ok(())
    }

    /// Returns the cached response for `(request, replicate)` or asks the
    /// provider and stores the answer. The flag is true on a cache hit.
    pub fn complete_cached(
        &self,
        provider: &dyn ChatProvider,
        request: &ChatRequest,
        replicate: u32,
    ) -> Result<(String, bool), StoreError> {
        let key = CacheKey::new(provider.digest(request), replicate);
        if let Some(hit) = self.cache_get(&key) {
            return Ok((hit, true));
        }
        let resp = provider.complete(request)?;
        match self.cache_put(key.clone(), &resp.content, &resp.provider_name) {
            Ok(()) => Ok((resp.content, false)),
            // another worker stored the same key first; keep its answer
            Err(StoreError::Immutable(_)) => Ok((self.cache_get(&key).unwrap_or(resp.content), false)),
            Err(e) => Err(e),
        }
    }

    /// Creates a new run. Fails if the run already exists.
    pub fn create_run(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        if !valid_run_id(&manifest.run_id) {
            return Err(StoreError::InvalidRunId(manifest.run_id.clone()));
        }
        let _g = self.manifest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.run_dir(&manifest.run_id);
        if dir.join(MANIFEST_FILE).exists() {
            return Err(StoreError::RunExists(manifest.run_id.clone()));
        }
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(manifest)?)
    }

    /// Opens an existing run or creates it. An existing run must have been
    /// created for the same corpus; newly named providers are added.
    pub fn ensure_run(&self, manifest: RunManifest) -> Result<RunManifest, StoreError> {
        match self.manifest(&manifest.run_id) {
            Ok(mut existing) => {
                if existing.corpus_digest != manifest.corpus_digest {
                    return Err(StoreError::CorpusMismatch {
                        run_id: manifest.run_id,
                        expected: existing.corpus_digest,
                        found: manifest.corpus_digest,
                    });
                }
                let mut changed = false;
                for p in manifest.providers {
                    if !existing.providers.iter().any(|q| q.name == p.name) {
                        existing.providers.push(p);
                        changed = true;
                    }
                }
                if changed {
                    self.write_manifest(&existing)?;
                }
                Ok(existing)
            }
            Err(StoreError::UnknownRun(_)) => {
                self.create_run(&manifest)?;
                Ok(manifest)
            }
            Err(e) => Err(e),
        }
    }

    pub fn manifest(&self, run_id: &str) -> Result<RunManifest, StoreError> {
        if !valid_run_id(run_id) {
            return Err(StoreError::InvalidRunId(run_id.into()));
        }
        let path = self.run_dir(run_id).join(MANIFEST_FILE);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::UnknownRun(run_id.into())),
            Err(e) => return Err(io_err(&path)(e)),
        };
        serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> Result<(), StoreError> {
        let _g = self.manifest_lock.lock().unwrap_or_else(|e| e.into_inner());
        let dir = self.run_dir(&manifest.run_id);
        if !dir.join(MANIFEST_FILE).exists() {
            return Err(StoreError::UnknownRun(manifest.run_id.clone()));
        }
        write_atomic(&dir.join(MANIFEST_FILE), &serde_json::to_vec_pretty(manifest)?)
    }

    /// Applies `f` to the stored manifest and writes it back.
    pub fn update_manifest(&self, run_id: &str, f: impl FnOnce(&mut RunManifest)) -> Result<RunManifest, StoreError> {
        let mut m = self.manifest(run_id)?;
        f(&mut m);
        self.write_manifest(&m)?;
        Ok(m)
    }

    fn run_log(&self, run_id: &str) -> Result<Arc<Mutex<RunLog>>, StoreError> {
        let mut runs = self.runs.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(log) = runs.get(run_id) {
            return Ok(log.clone());
        }
        self.manifest(run_id)?;
        let path = self.run_dir(run_id).join(TRANSCRIPT_FILE);
        let lines: Vec<TranscriptLine> = read_jsonl(&path)?;
        let next_seq = lines.last().map_or(1, |l| l.seq + 1);
        let file = open_append(&path)?;
        let log = Arc::new(Mutex::new(RunLog { path, file, next_seq }));
        runs.insert(run_id.to_string(), log.clone());
        Ok(log)
    }

    /// Appends one record and returns its sequence number (1-based, strictly
    /// increasing per run).
    pub fn append_transcript<T: TranscriptRecord>(&self, run_id: &str, record: &T) -> Result<u64, StoreError> {
        let value = serde_json::to_value(record)?;
        self.append_raw(run_id, T::KIND, value)
    }

    pub fn append_raw(&self, run_id: &str, kind: &str, record: serde_json::Value) -> Result<u64, StoreError> {
        let log = self.run_log(run_id)?;
        let mut log = log.lock().unwrap_or_else(|e| e.into_inner());
        let line = TranscriptLine {
            seq: log.next_seq,
            kind: kind.to_string(),
            record,
        };
        let text = serde_json::to_string(&line)?;
        let RunLog { path, file, .. } = &mut *log;
        append_line(file, path, &text)?;
        log.next_seq += 1;
        Ok(line.seq)
    }

    /// Appends several records under one lock so they stay contiguous.
    pub fn append_all<T: TranscriptRecord>(&self, run_id: &str, records: &[T]) -> Result<Vec<u64>, StoreError> {
        let log = self.run_log(run_id)?;
        let mut log = log.lock().unwrap_or_else(|e| e.into_inner());
        let mut seqs = Vec::with_capacity(records.len());
        for r in records {
            let line = TranscriptLine {
                seq: log.next_seq,
                kind: T::KIND.to_string(),
                record: serde_json::to_value(r)?,
            };
            let text = serde_json::to_string(&line)?;
            let RunLog { path, file, .. } = &mut *log;
            append_line(file, path, &text)?;
            log.next_seq += 1;
            seqs.push(line.seq);
        }
        Ok(seqs)
    }

    pub fn read_transcript(&self, run_id: &str) -> Result<Vec<TranscriptLine>, StoreError> {
        let log = self.run_log(run_id)?;
        let log = log.lock().unwrap_or_else(|e| e.into_inner());
        read_jsonl(&log.path)
    }

    /// All records of one kind in sequence order.
    pub fn read_records<T: TranscriptRecord>(&self, run_id: &str) -> Result<Vec<T>, StoreError> {
        let path = self.run_dir(run_id).join(TRANSCRIPT_FILE);
        let mut out = Vec::new();
        for line in self.read_transcript(run_id)? {
            if let Some(r) = line.decode::<T>() {
                out.push(r.map_err(|e| StoreError::Corrupt {
                    path: path.clone(),
                    line: line.seq as usize,
                    message: e.to_string(),
                })?);
            }
        }
        Ok(out)
    }
}
