//! Embedded, append-only metadata store.
//!
//! On-disk layout of a store directory:
//!
//! ```text
//! <dir>/store.log   one committed batch per line (JSON):
//!                   {"revision":N,"created_at":T,"records":[...]}
//! <dir>/LOCK        pid of the process holding the writer role
//! ```
//!
//! A batch becomes visible only once its line is fully written and synced.
//! On open, a torn trailing line is truncated away; any other unreadable line
//! is reported as corruption. Referential integrity (detection → frame →
//! segment → camera, verdict → detection and session, ...) is checked on
//! every commit against the existing store plus the batch itself.

mod export;
mod records;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

pub use export::{
    export_finetune_dataset, parse_annotation, AnnotationDoc, AnnotationObject, ExportFormat, ExportManifest,
    ExportOptions, SCORE_SIGNIFICANT_DIGITS,
};
pub use records::{Envelope, Record, RecordKind, ReportRecord};

use crate::detector_io::Detection;
use crate::sampler::{FrameRecord, Partition};
use crate::util;

const LOG_FILE: &str = "store.log";
const LOCK_FILE: &str = "LOCK";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("dangling references: {}", fmt_refs(.0))]
    DanglingReference(Vec<(RecordKind, String, RecordKind, String)>),
    #[error("duplicate {kind} key {key:?}")]
    DuplicateKey { kind: RecordKind, key: String },
    #[error("store at {path} is locked by process {pid}")]
    Locked { path: PathBuf, pid: String },
    #[error("corrupt store log at line {line}: {detail}")]
    Corrupt { line: usize, detail: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Export(String),
}

fn fmt_refs(v: &[(RecordKind, String, RecordKind, String)]) -> String {
    v.iter()
        .map(|(k, key, rk, rkey)| format!("{k} {key:?} -> missing {rk} {rkey:?}"))
        .collect::<Vec<_>>()
        .join("; ")
}

#[derive(Serialize, Deserialize)]
struct Batch {
    revision: u64,
    created_at: u64,
    records: Vec<Record>,
}

#[derive(Default)]
struct State {
    revision: u64,
    tables: BTreeMap<RecordKind, BTreeMap<String, Envelope>>,
}

impl State {
    fn contains(&self, kind: RecordKind, key: &str) -> bool {
        self.tables.get(&kind).is_some_and(|t| t.contains_key(key))
    }

    fn apply(&mut self, batch: Batch) {
        self.revision = batch.revision;
        for record in batch.records {
            let env = Envelope {
                revision: batch.revision,
                created_at: batch.created_at,
                record,
            };
            self.tables
                .entry(env.record.kind())
                .or_default()
                .insert(env.record.key(), env);
        }
    }

    fn check(&self, batch: &[Record]) -> Result<(), StoreError> {
        let mut in_batch: BTreeSet<(RecordKind, String)> = BTreeSet::new();
        for r in batch {
            let (kind, key) = (r.kind(), r.key());
            let dup_in_batch = !in_batch.insert((kind, key.clone()));
            if !kind.is_versioned() && (dup_in_batch || self.contains(kind, &key)) {
                return Err(StoreError::DuplicateKey { kind, key });
            }
        }
        let mut dangling = Vec::new();
        for r in batch {
            for (rk, rkey) in r.references() {
                if !self.contains(rk, &rkey) && !in_batch.contains(&(rk, rkey.clone())) {
                    dangling.push((r.kind(), r.key(), rk, rkey));
                }
            }
        }
        if dangling.is_empty() {
            Ok(())
        } else {
            Err(StoreError::DanglingReference(dangling))
        }
    }
}

struct Backing {
    dir: PathBuf,
    log: File,
}

struct Inner {
    state: RwLock<State>,
    /// Single writer: commits are serialised through this lock.
    writer: Mutex<Option<Backing>>,
}

impl Drop for Inner {
    fn drop(&mut self) {
        if let Ok(guard) = self.writer.lock() {
            if let Some(b) = guard.as_ref() {
                let _ = fs::remove_file(b.dir.join(LOCK_FILE));
            }
        }
    }
}

/// Handle to a store. Cheap to clone; all clones share one writer.
#[derive(Clone)]
pub struct Store {
    inner: Arc<Inner>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").field("revision", &self.revision()).finish()
    }
}

impl Store {
    /// Volatile store, mainly for tests and one-shot computations.
    pub fn in_memory() -> Self {
        Self {
            inner: Arc::new(Inner {
                state: RwLock::new(State::default()),
                writer: Mutex::new(None),
            }),
        }
    }

    /// Opens (or creates) a file-backed store and takes its writer lock.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir)?;
        acquire_lock(&dir)?;
        let opened = (|| {
            let path = dir.join(LOG_FILE);
            let mut log = OpenOptions::new().create(true).read(true).append(true).open(&path)?;
            let state = replay(&mut log)?;
            Ok::<_, StoreError>((log, state))
        })();
        let (log, state) = match opened {
            Ok(v) => v,
            Err(e) => {
                let _ = fs::remove_file(dir.join(LOCK_FILE));
                return Err(e);
            }
        };
        Ok(Self {
            inner: Arc::new(Inner {
                state: RwLock::new(state),
                writer: Mutex::new(Some(Backing { dir, log })),
            }),
        })
    }

    pub fn dir(&self) -> Option<PathBuf> {
        self.inner.writer.lock().unwrap().as_ref().map(|b| b.dir.clone())
    }

    pub fn revision(&self) -> u64 {
        self.inner.state.read().unwrap().revision
    }

    /// Commits a batch atomically and returns its revision.
    pub fn put_records(&self, batch: Vec<Record>) -> Result<u64, StoreError> {
        let mut writer = self.inner.writer.lock().unwrap();
        let revision = {
            let state = self.inner.state.read().unwrap();
            state.check(&batch)?;
            state.revision + 1
        };
        let batch = Batch {
            revision,
            created_at: util::unix_now(),
            records: batch,
        };
        if let Some(backing) = writer.as_mut() {
            let mut line = serde_json::to_vec(&batch).map_err(|e| StoreError::Corrupt {
                line: 0,
                detail: e.to_string(),
            })?;
            line.push(b'\n');
            let before = backing.log.metadata()?.len();
            let res = backing.log.write_all(&line).and_then(|_| backing.log.sync_data());
            if let Err(e) = res {
                // roll back a partial append so the log stays parseable
                let _ = backing.log.set_len(before);
                return Err(e.into());
            }
        }
        self.inner.state.write().unwrap().apply(batch);
        Ok(revision)
    }

    /// Like [`put_records`](Self::put_records) but drops records that are
    /// already stored with identical content. Returns `None` when nothing
    /// was left to commit.
    pub fn put_new(&self, batch: Vec<Record>) -> Result<Option<u64>, StoreError> {
        let fresh: Vec<Record> = {
            let state = self.inner.state.read().unwrap();
            batch
                .into_iter()
                .filter(|r| {
                    state
                        .tables
                        .get(&r.kind())
                        .and_then(|t| t.get(&r.key()))
                        .is_none_or(|e| &e.record != r)
                })
                .collect()
        };
        if fresh.is_empty() {
            return Ok(None);
        }
        self.put_records(fresh).map(Some)
    }

    pub fn get(&self, kind: RecordKind, key: &str) -> Option<Envelope> {
        self.inner.state.read().unwrap().tables.get(&kind)?.get(key).cloned()
    }

    /// Records matching `pred`, optionally restricted to one kind, from a
    /// single consistent snapshot, ordered by (kind, key).
    pub fn query(&self, kind: Option<RecordKind>, pred: impl Fn(&Record) -> bool) -> Vec<Envelope> {
        let state = self.inner.state.read().unwrap();
        let mut out = Vec::new();
        for (k, table) in &state.tables {
            if kind.is_some_and(|want| want != *k) {
                continue;
            }
            out.extend(table.values().filter(|e| pred(&e.record)).cloned());
        }
        out
    }

    pub fn count(&self, kind: RecordKind) -> usize {
        self.inner.state.read().unwrap().tables.get(&kind).map_or(0, BTreeMap::len)
    }

    pub fn frames(&self) -> Vec<FrameRecord> {
        self.query(Some(RecordKind::Frame), |_| true)
            .into_iter()
            .filter_map(|e| match e.record {
                Record::Frame(f) => Some(f),
                _ => None,
            })
            .collect()
    }

    pub fn frame(&self, frame_id: &str) -> Option<FrameRecord> {
        match self.get(RecordKind::Frame, frame_id)?.record {
            Record::Frame(f) => Some(f),
            _ => None,
        }
    }

    /// Frames currently assigned to `partition`, ordered by frame id.
    pub fn partition_frames(&self, partition: Partition) -> Vec<FrameRecord> {
        let ids: BTreeSet<String> = self
            .query(Some(RecordKind::Split), |r| matches!(r, Record::Split(s) if s.partition == partition))
            .into_iter()
            .map(|e| e.record.key())
            .collect();
        self.frames().into_iter().filter(|f| ids.contains(&f.frame_id)).collect()
    }

    pub fn detections(&self, detector_id: &str) -> Vec<Detection> {
        self.query(Some(RecordKind::Detection), |r| {
            matches!(r, Record::Detection(d) if d.detector_id == detector_id)
        })
        .into_iter()
        .filter_map(|e| match e.record {
            Record::Detection(d) => Some(d),
            _ => None,
        })
        .collect()
    }

    /// Full referential-integrity check over the current snapshot.
    pub fn verify_integrity(&self) -> Result<(), StoreError> {
        let state = self.inner.state.read().unwrap();
        let mut dangling = Vec::new();
        for table in state.tables.values() {
            for env in table.values() {
                for (rk, rkey) in env.record.references() {
                    if !state.contains(rk, &rkey) {
                        dangling.push((env.record.kind(), env.record.key(), rk, rkey));
                    }
                }
            }
        }
        if dangling.is_empty() {
            Ok(())
        } else {
            Err(StoreError::DanglingReference(dangling))
        }
    }
}

fn replay(log: &mut File) -> Result<State, StoreError> {
    log.seek(SeekFrom::Start(0))?;
    let mut reader = BufReader::new(&mut *log);
    let mut state = State::default();
    let mut good_len: u64 = 0;
    let mut line_no = 0usize;
    let mut buf = Vec::new();
    let mut torn = false;
    loop {
        buf.clear();
        let n = reader.read_until(b'\n', &mut buf)?;
        if n == 0 {
            break;
        }
        line_no += 1;
        let complete = buf.last() == Some(&b'\n');
        match serde_json::from_slice::<Batch>(&buf) {
            Ok(batch) if complete => {
                if batch.revision != state.revision + 1 {
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        detail: format!("revision {} follows {}", batch.revision, state.revision),
                    });
                }
                state.apply(batch);
                good_len += n as u64;
            }
            Ok(_) | Err(_) => {
                // only an unterminated or unparsable *last* line is a torn write
                let mut rest = Vec::new();
                std::io::Read::read_to_end(&mut reader, &mut rest)?;
                if !rest.is_empty() {
                    return Err(StoreError::Corrupt {
                        line: line_no,
                        detail: "unreadable batch before end of log".into(),
                    });
                }
                torn = true;
                break;
            }
        }
    }
    if torn {
        warn!(kept = good_len, "truncating torn batch at end of store log");
        log.set_len(good_len)?;
    }
    Ok(state)
}

fn acquire_lock(dir: &Path) -> Result<(), StoreError> {
    let path = dir.join(LOCK_FILE);
    for _ in 0..2 {
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                write!(f, "{}", std::process::id())?;
                return Ok(());
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                let pid = fs::read_to_string(&path).unwrap_or_default().trim().to_string();
                if lock_is_stale(&pid) {
                    warn!(pid, "removing stale store lock");
                    fs::remove_file(&path)?;
                    continue;
                }
                return Err(StoreError::Locked { path, pid });
            }
            Err(e) => return Err(e.into()),
        }
    }
    Err(StoreError::Locked {
        path,
        pid: "unknown".into(),
    })
}

fn lock_is_stale(pid: &str) -> bool {
    let Ok(pid) = pid.parse::<u32>() else {
        return true;
    };
    if pid == std::process::id() {
        // a second handle in this process; the first one still owns it
        return false;
    }
    let proc_root = Path::new("/proc");
    proc_root.is_dir() && !proc_root.join(pid.to_string()).exists()
}
