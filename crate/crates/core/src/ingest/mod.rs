//! Harvesting segmented video from camera sources.
//!
//! Every request goes through [`Harvester::with_retry`], which retries
//! transient faults with capped exponential backoff and records each failure
//! as a [`HarvestFailure`]. Segments are written to disk and committed to the
//! [`Store`] one at a time, so an aborted run leaves the store and the segment
//! directory in agreement.

pub mod fixture;
pub mod segment;
pub mod source;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::label_store::{Record, RecordKind, Store, StoreError};
use crate::util;
use segment::SegmentHeader;
use source::{Fault, SegmentRef, SourceClient, SourceLocator};

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("camera {0:?} is already registered")]
    DuplicateCamera(String),
    #[error("camera {0:?} is not registered")]
    UnknownCamera(String),
    #[error("malformed source url: {0}")]
    MalformedUrl(String),
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("invalid harvest policy: {0}")]
    InvalidPolicy(String),
    #[error("requested duration must be positive, got {0}")]
    InvalidDuration(f64),
    #[error("store: {0}")]
    Store(#[from] StoreError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSource {
    pub camera_id: String,
    pub url: String,
    #[serde(default)]
    pub label: String,
    #[serde(default)]
    pub location: Option<GeoPoint>,
}

impl CameraSource {
    pub fn new(camera_id: impl Into<String>, url: impl Into<String>) -> Self {
        let camera_id = camera_id.into();
        Self {
            label: camera_id.clone(),
            camera_id,
            url: url.into(),
            location: None,
        }
    }

    pub fn locator(&self) -> Result<SourceLocator, IngestError> {
        SourceLocator::parse(&self.url).map_err(IngestError::MalformedUrl)
    }

    pub fn validate(&self) -> Result<(), IngestError> {
        if self.camera_id.trim().is_empty() {
            return Err(IngestError::InvalidCamera("empty camera_id".into()));
        }
        if self.camera_id.contains(['/', '\\', '\t', '\n']) {
            return Err(IngestError::InvalidCamera(format!(
                "camera_id {:?} contains a path separator or control character",
                self.camera_id
            )));
        }
        if let Some(loc) = self.location {
            if !(-90.0..=90.0).contains(&loc.lat) || !(-180.0..=180.0).contains(&loc.lon) {
                return Err(IngestError::InvalidCamera(format!(
                    "location ({}, {}) is not a valid latitude/longitude",
                    loc.lat, loc.lon
                )));
            }
        }
        self.locator().map(|_| ())
    }
}

/// Camera sources keyed by id.
#[derive(Debug, Clone, Default)]
pub struct CameraRegistry {
    cameras: BTreeMap<String, CameraSource>,
}

impl CameraRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Loads every camera record from the store.
    pub fn from_store(store: &Store) -> Self {
        let cameras = store
            .query(Some(RecordKind::Camera), |_| true)
            .into_iter()
            .filter_map(|e| match e.record {
                Record::Camera(c) => Some((c.camera_id.clone(), c)),
                _ => None,
            })
            .collect();
        Self { cameras }
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn get(&self, camera_id: &str) -> Option<&CameraSource> {
        self.cameras.get(camera_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &CameraSource> {
        self.cameras.values()
    }
}

/// Adds `source` to the registry. When a store is given the camera record is
/// committed there too; the registry only changes if the commit succeeds.
pub fn register_camera(
    registry: &mut CameraRegistry,
    source: CameraSource,
    store: Option<&Store>,
) -> Result<String, IngestError> {
    source.validate()?;
    if registry.cameras.contains_key(&source.camera_id) {
        return Err(IngestError::DuplicateCamera(source.camera_id));
    }
    if let Some(store) = store {
        store
            .put_records(vec![Record::Camera(source.clone())])
            .map_err(|e| match e {
                StoreError::DuplicateKey { .. } => IngestError::DuplicateCamera(source.camera_id.clone()),
                other => IngestError::Store(other),
            })?;
    }
    let id = source.camera_id.clone();
    registry.cameras.insert(id.clone(), source);
    Ok(id)
}

/// Failure locus.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FailureKind {
    Client,
    Server,
    Network,
}

impl std::fmt::Display for FailureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Client => "client",
            Self::Server => "server",
            Self::Network => "network",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestFailure {
    pub kind: FailureKind,
    /// 1-based attempt number for the request that failed.
    pub attempt: u32,
    pub detail: String,
    pub request: String,
    /// Set on the failure that ended the harvest.
    #[serde(default)]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StreamStatus {
    Reachable,
    Unreachable(FailureKind),
}

/// One connection attempt against the source; never errors.
pub fn probe(source: &CameraSource) -> StreamStatus {
    let Ok(locator) = source.locator() else {
        return StreamStatus::Unreachable(FailureKind::Client);
    };
    let client = match SourceClient::new(locator, Duration::from_secs(5)) {
        Ok(c) => c,
        Err(f) => return StreamStatus::Unreachable(f.kind),
    };
    match client.list() {
        Ok(_) => StreamStatus::Reachable,
        Err(f) => StreamStatus::Unreachable(f.kind),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarvestPolicy {
    pub max_retries: u32,
    /// Seconds.
    pub backoff_base: f64,
    /// Seconds.
    pub backoff_cap: f64,
    /// Expected seconds per segment, used when a segment announces nothing.
    pub segment_target: f64,
    /// Optional wall-clock limit in seconds. While budget remains, an
    /// exhausted playlist is polled again instead of ending the harvest.
    #[serde(default)]
    pub total_budget: Option<f64>,
    #[serde(default = "default_request_timeout")]
    pub request_timeout: f64,
    #[serde(default)]
    pub jitter_seed: u64,
}

fn default_request_timeout() -> f64 {
    10.0
}

impl Default for HarvestPolicy {
    fn default() -> Self {
        Self {
            max_retries: 5,
            backoff_base: 0.5,
            backoff_cap: 30.0,
            segment_target: 10.0,
            total_budget: None,
            request_timeout: default_request_timeout(),
            jitter_seed: 0,
        }
    }
}

impl HarvestPolicy {
    pub fn validate(&self) -> Result<(), IngestError> {
        let bad = |m: &str| Err(IngestError::InvalidPolicy(m.into()));
        if !(self.backoff_base.is_finite() && self.backoff_base > 0.0) {
            return bad("backoff_base must be > 0");
        }
        if !(self.backoff_cap.is_finite() && self.backoff_cap >= self.backoff_base) {
            return bad("backoff_cap must be >= backoff_base");
        }
        if !(self.segment_target.is_finite() && self.segment_target > 0.0) {
            return bad("segment_target must be > 0");
        }
        if !(self.request_timeout.is_finite() && self.request_timeout > 0.0) {
            return bad("request_timeout must be > 0");
        }
        if let Some(b) = self.total_budget {
            if !(b.is_finite() && b > 0.0) {
                return bad("total_budget must be > 0");
            }
        }
        Ok(())
    }

    /// Delays slept after failed attempts 1..=max_retries of one request.
    ///
    /// Delay k is `min(cap, base * 2^k * (1 + j))` with `j` uniform in
    /// `[0, 1)`; because the jitter stays below one doubling the sequence
    /// is non-decreasing.
    pub fn backoff_schedule(&self, seed: u64) -> Vec<Duration> {
        let mut rng = util::rng(seed);
        (0..self.max_retries)
            .map(|k| {
                let j: f64 = rng.random();
                let raw = self.backoff_base * 2f64.powi(k.min(60) as i32) * (1.0 + j);
                Duration::from_secs_f64(raw.min(self.backoff_cap))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoSegment {
    pub segment_id: String,
    pub camera_id: String,
    /// UTC seconds when the segment was fetched.
    pub started_at: f64,
    pub duration: f64,
    pub path: String,
    pub frame_count: u64,
    pub byte_size: u64,
    /// Where the bytes came from.
    #[serde(default)]
    pub source_uri: String,
}

/// How a harvest ended.
#[derive(Debug, Clone, PartialEq)]
pub enum HarvestOutcome {
    /// Requested duration covered.
    Complete,
    /// Source ran out of segments before the duration was covered.
    SourceExhausted,
    /// Wall-clock budget ran out.
    BudgetExhausted,
    /// A request failed past its retry allowance.
    RetriesExhausted(HarvestFailure),
    /// Writing a segment failed; completed segments are intact.
    StorageFull(String),
}

#[derive(Debug, Clone)]
pub struct HarvestReport {
    pub camera_id: String,
    pub segments: Vec<VideoSegment>,
    pub failures: Vec<HarvestFailure>,
    /// Total request attempts, successful or not.
    pub attempts: u32,
    pub outcome: HarvestOutcome,
}

impl HarvestReport {
    pub fn total_duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn is_complete(&self) -> bool {
        self.outcome == HarvestOutcome::Complete
    }
}

/// Harvests cameras into `out_dir/<camera_id>/` and commits segment records
/// to the store.
pub struct Harvester<'a> {
    store: &'a Store,
    out_dir: PathBuf,
    policy: HarvestPolicy,
    quota_bytes: Option<u64>,
}

impl<'a> Harvester<'a> {
    pub fn new(store: &'a Store, out_dir: impl Into<PathBuf>, policy: HarvestPolicy) -> Result<Self, IngestError> {
        policy.validate()?;
        Ok(Self {
            store,
            out_dir: out_dir.into(),
            policy,
            quota_bytes: None,
        })
    }

    /// Caps the bytes this harvester may write; exceeding it behaves like a
    /// full disk.
    pub fn with_quota(mut self, bytes: u64) -> Self {
        self.quota_bytes = Some(bytes);
        self
    }

    pub fn policy(&self) -> &HarvestPolicy {
        &self.policy
    }

    pub fn camera_dir(&self, camera_id: &str) -> PathBuf {
        self.out_dir.join(camera_id)
    }

    pub fn harvest(&self, source: &CameraSource, duration: f64) -> Result<HarvestReport, IngestError> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(IngestError::InvalidDuration(duration));
        }
        if self.store.get(RecordKind::Camera, &source.camera_id).is_none() {
            return Err(IngestError::UnknownCamera(source.camera_id.clone()));
        }
        let locator = source.locator()?;
        let cam_dir = self.camera_dir(&source.camera_id);
        fs::create_dir_all(&cam_dir)?;
        reconcile_camera_dir(self.store, &source.camera_id, &cam_dir)?;

        let mut report = HarvestReport {
            camera_id: source.camera_id.clone(),
            segments: Vec::new(),
            failures: Vec::new(),
            attempts: 0,
            outcome: HarvestOutcome::Complete,
        };
        let client = match SourceClient::new(locator, Duration::from_secs_f64(self.policy.request_timeout)) {
            Ok(c) => c,
            Err(f) => {
                let failure = HarvestFailure {
                    kind: f.kind,
                    attempt: 1,
                    detail: f.detail,
                    request: source.url.clone(),
                    terminal: true,
                };
                report.failures.push(failure.clone());
                report.outcome = HarvestOutcome::RetriesExhausted(failure);
                self.write_failure_log(&cam_dir, &report.failures)?;
                return Ok(report);
            }
        };

        let started = Instant::now();
        let existing = self.store.query(Some(RecordKind::Segment), |r| {
            matches!(r, Record::Segment(s) if s.camera_id == source.camera_id)
        });
        let mut next_seq = existing.len() as u64;
        // segments already harvested from this source are never fetched twice
        let mut seen: HashSet<String> = existing
            .into_iter()
            .filter_map(|e| match e.record {
                Record::Segment(s) => Some(s.source_uri),
                _ => None,
            })
            .collect();
        let mut used_bytes: u64 = 0;
        let mut covered = 0.0;
        let mut request_no: u64 = 0;

        info!(camera = %source.camera_id, duration, "harvest started");
        'outer: while covered < duration {
            if self.budget_spent(started) {
                report.outcome = HarvestOutcome::BudgetExhausted;
                break;
            }
            request_no += 1;
            let listing = match self.with_retry(&mut report, &source.url, request_no, || client.list()) {
                Ok(l) => l,
                Err(f) => {
                    report.outcome = HarvestOutcome::RetriesExhausted(f);
                    break;
                }
            };
            let fresh: Vec<SegmentRef> = listing.into_iter().filter(|r| !seen.contains(&r.uri)).collect();
            if fresh.is_empty() {
                if self.policy.total_budget.is_some() && !self.budget_spent(started) {
                    std::thread::sleep(Duration::from_secs_f64((self.policy.segment_target / 2.0).min(1.0)));
                    continue;
                }
                report.outcome = HarvestOutcome::SourceExhausted;
                break;
            }
            for seg in fresh {
                if covered >= duration {
                    break 'outer;
                }
                if self.budget_spent(started) {
                    report.outcome = HarvestOutcome::BudgetExhausted;
                    break 'outer;
                }
                seen.insert(seg.uri.clone());
                request_no += 1;
                let bytes = match self.with_retry(&mut report, &seg.uri, request_no, || client.fetch(&seg)) {
                    Ok(b) => b,
                    Err(f) => {
                        report.outcome = HarvestOutcome::RetriesExhausted(f);
                        break 'outer;
                    }
                };
                let (seg_duration, frame_count) = match SegmentHeader::parse(&bytes) {
                    Ok((h, _)) => (h.duration(), h.frame_count),
                    Err(_) => (seg.duration_hint.unwrap_or(self.policy.segment_target), 0),
                };
                if let Some(q) = self.quota_bytes {
                    if used_bytes + bytes.len() as u64 > q {
                        report.outcome = HarvestOutcome::StorageFull(format!(
                            "quota of {q} bytes reached after {} segments",
                            report.segments.len()
                        ));
                        break 'outer;
                    }
                }
                let segment_id = format!("{}-{:06}", source.camera_id, next_seq);
                let ext = Path::new(&seg.uri)
                    .extension()
                    .and_then(|e| e.to_str())
                    .filter(|e| e.len() <= 8 && e.chars().all(|c| c.is_ascii_alphanumeric()))
                    .unwrap_or("seg");
                let path = cam_dir.join(format!("{segment_id}.{ext}"));
                let record = VideoSegment {
                    segment_id,
                    camera_id: source.camera_id.clone(),
                    started_at: util::unix_now_f64(),
                    duration: seg_duration,
                    path: path.to_string_lossy().into_owned(),
                    frame_count,
                    byte_size: bytes.len() as u64,
                    source_uri: seg.uri.clone(),
                };
                if let Err(e) = self.commit_segment(&path, &bytes, &record) {
                    report.outcome = HarvestOutcome::StorageFull(e.to_string());
                    break 'outer;
                }
                used_bytes += bytes.len() as u64;
                next_seq += 1;
                covered += seg_duration;
                debug!(segment = %record.segment_id, covered, "segment stored");
                report.segments.push(record);
            }
        }
        if let HarvestOutcome::RetriesExhausted(f) = &report.outcome {
            warn!(camera = %source.camera_id, kind = %f.kind, "harvest stopped: retries exhausted");
        }
        self.write_failure_log(&cam_dir, &report.failures)?;
        info!(camera = %source.camera_id, segments = report.segments.len(), covered, "harvest finished");
        Ok(report)
    }

    fn budget_spent(&self, started: Instant) -> bool {
        self.policy
            .total_budget
            .is_some_and(|b| started.elapsed().as_secs_f64() >= b)
    }

    /// Runs `op` up to `max_retries + 1` times. Returns the terminal failure
    /// once the allowance is used up or the fault is not retryable.
    fn with_retry<T>(
        &self,
        report: &mut HarvestReport,
        request: &str,
        request_no: u64,
        mut op: impl FnMut() -> Result<T, Fault>,
    ) -> Result<T, HarvestFailure> {
        let delays = self.policy.backoff_schedule(util::derive_seed(self.policy.jitter_seed, request, request_no));
        let mut attempt = 0u32;
        loop {
            attempt += 1;
            report.attempts += 1;
            match op() {
                Ok(v) => return Ok(v),
                Err(fault) => {
                    let last = attempt > self.policy.max_retries || !fault.retryable;
                    let failure = HarvestFailure {
                        kind: fault.kind,
                        attempt,
                        detail: fault.detail,
                        request: request.to_string(),
                        terminal: last,
                    };
                    debug!(request, attempt, kind = %failure.kind, "request failed");
                    report.failures.push(failure.clone());
                    if last {
                        return Err(failure);
                    }
                    std::thread::sleep(delays[(attempt - 1) as usize]);
                }
            }
        }
    }

    fn commit_segment(&self, path: &Path, bytes: &[u8], record: &VideoSegment) -> Result<(), IngestError> {
        let partial = path.with_extension("partial");
        let write = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&partial)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&partial, path)
        })();
        if let Err(e) = write {
            let _ = fs::remove_file(&partial);
            return Err(e.into());
        }
        if let Err(e) = self.store.put_records(vec![Record::Segment(record.clone())]) {
            let _ = fs::remove_file(path);
            return Err(e.into());
        }
        Ok(())
    }

    fn write_failure_log(&self, cam_dir: &Path, failures: &[HarvestFailure]) -> Result<(), IngestError> {
        if failures.is_empty() {
            return Ok(());
        }
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(cam_dir.join("failures.jsonl"))?;
        for failure in failures {
            writeln!(f, "{}", serde_json::to_string(failure).expect("failure serialises"))?;
        }
        Ok(())
    }
}

/// Result of matching segment files against segment records.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Reconciliation {
    /// Files with no record; removed.
    pub removed_orphans: Vec<PathBuf>,
    /// Records whose file is missing.
    pub missing_files: Vec<String>,
}

/// Restores the store/filesystem bijection for one camera directory. Orphan
/// files (a crash between write and commit) are deleted; records without a
/// file are reported.
pub fn reconcile_camera_dir(store: &Store, camera_id: &str, cam_dir: &Path) -> Result<Reconciliation, IngestError> {
    let records: Vec<VideoSegment> = store
        .query(Some(RecordKind::Segment), |r| matches!(r, Record::Segment(s) if s.camera_id == camera_id))
        .into_iter()
        .filter_map(|e| match e.record {
            Record::Segment(s) => Some(s),
            _ => None,
        })
        .collect();
    let known: BTreeSet<PathBuf> = records.iter().map(|s| PathBuf::from(&s.path)).collect();
    let mut out = Reconciliation::default();
    if cam_dir.exists() {
        for entry in fs::read_dir(cam_dir)? {
            let p = entry?.path();
            if !p.is_file() || p.file_name().is_some_and(|n| n == "failures.jsonl") {
                continue;
            }
            if !known.contains(&p) {
                fs::remove_file(&p)?;
                out.removed_orphans.push(p);
            }
        }
    }
    for s in &records {
        if Path::new(&s.path).parent() == Some(cam_dir) && !Path::new(&s.path).exists() {
            out.missing_files.push(s.segment_id.clone());
        }
    }
    if !out.removed_orphans.is_empty() {
        warn!(camera = camera_id, n = out.removed_orphans.len(), "removed orphan segment files");
    }
    Ok(out)
}
