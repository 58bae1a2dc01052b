//! Human quality-control sessions.
//!
//! A session fixes a sample of detections up front. Annotators judge them in
//! sample order (TP/FP), may correct earlier judgements, and may mark missed
//! objects on the session's frames. All state is derived from append-only
//! records in the [`Store`]; nothing here mutates detections or frames.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;
use crate::detector_io::Detection;
use crate::label_store::{Record, RecordKind, Store, StoreError};
use crate::qc_stats::{self, ProportionEstimate, QcCounts, QcError, QcPlan};
use crate::sampler::Partition;

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("unknown {what} {id:?}")]
    NotFound { what: &'static str, id: String },
    #[error("{0}")]
    OutOfSample(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{requested} items requested but only {available} available")]
    Insufficient { requested: u64, available: u64 },
    #[error("invalid box: {0}")]
    InvalidBox(String),
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Qc(#[from] QcError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Judgement {
    TP,
    FP,
}

impl std::str::FromStr for Judgement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "TP" => Ok(Self::TP),
            "FP" => Ok(Self::FP),
            _ => Err(format!("judgement must be TP or FP, got {s:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub verdict_id: String,
    pub session_id: String,
    pub detection_id: String,
    pub judgement: Judgement,
    pub annotator: String,
    /// The verdict this one corrects.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supersedes: Option<String>,
}

/// An object the detector missed, drawn by an annotator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FnMark {
    pub mark_id: String,
    pub session_id: String,
    pub frame_id: String,
    pub bbox: BBox,
    pub annotator: String,
}

/// Records that an annotator inspected a session frame for misses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameVisit {
    pub session_id: String,
    pub frame_id: String,
    pub annotator: String,
    /// Marks submitted on this frame so far.
    pub marks: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionScope {
    /// `required_n` detections drawn from the detector's test detections.
    Detections,
    /// `required_n` test frames drawn; every detection on them is judged.
    Frames,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub detector_id: String,
    pub plan: QcPlan,
    pub scope: SessionScope,
    pub seed: u64,
    /// Detection ids in judging order.
    pub sample: Vec<String>,
    /// Frames on which misses may be marked.
    pub frames: Vec<String>,
}

/// Frozen counts of a completed session. Rewritten under the same key when a
/// later correction or FN mark changes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QcRunRecord {
    pub session_id: String,
    pub counts: QcCounts,
    pub judged: u64,
    pub frames_visited: u64,
    pub frames_total: u64,
    pub precision: ProportionEstimate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionState {
    Open,
    Complete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRequest {
    pub plan: QcPlan,
    pub detector_id: String,
    pub seed: u64,
    pub scope: SessionScope,
    /// Defaults to a name derived from the request.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
}

impl SessionRequest {
    pub fn new(plan: QcPlan, detector_id: impl Into<String>, seed: u64) -> Self {
        Self {
            plan,
            detector_id: detector_id.into(),
            seed,
            scope: SessionScope::Detections,
            session_id: None,
        }
    }
}

/// Current state of a session, derived from the store.
#[derive(Debug, Clone, PartialEq)]
pub struct QcSession {
    pub record: SessionRecord,
    /// Index of the next unjudged sample item.
    pub cursor: usize,
    /// Effective (non-superseded) verdict per detection.
    pub verdicts: BTreeMap<String, Verdict>,
    pub tp: u64,
    pub fp: u64,
    pub marks: u64,
    pub visited: BTreeSet<String>,
    pub state: SessionState,
    verdict_seq: usize,
}

impl QcSession {
    /// FN count, available once every session frame has been visited.
    pub fn fn_count(&self) -> Option<u64> {
        (self.visited.len() == self.record.frames.len()).then_some(self.marks)
    }

    pub fn counts(&self) -> QcCounts {
        QcCounts::new(self.record.detector_id.clone(), self.tp, self.fp, self.fn_count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub session_id: String,
    pub state: SessionState,
    pub judged: u64,
    pub required_n: u64,
    pub sample_size: u64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: Option<u64>,
    pub frames_visited: u64,
    pub frames_total: u64,
    /// Absent (and `precision_undefined` set) before the first verdict.
    pub precision: Option<ProportionEstimate>,
    pub precision_undefined: bool,
    pub recall: Option<ProportionEstimate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub index: usize,
    pub detection: Detection,
    pub image_path: String,
    pub frame_width: u32,
    pub frame_height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum NextItem {
    Item(ReviewItem),
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub detector_id: String,
    pub state: SessionState,
    pub counts: QcCounts,
    pub progress: Progress,
    /// Share of session frames inspected for misses.
    pub frame_coverage: f64,
    pub frozen: Option<QcRunRecord>,
}

/// Session operations over a store. Submissions are serialised.
pub struct ReviewDesk {
    store: Store,
    submit: Mutex<()>,
}

impl ReviewDesk {
    pub fn new(store: Store) -> Self {
        Self {
            store,
            submit: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    /// Opens a detection-sample session.
    pub fn open_session(&self, plan: QcPlan, detector_id: &str, seed: u64) -> Result<QcSession, ReviewError> {
        self.open(SessionRequest::new(plan, detector_id, seed))
    }

    pub fn open(&self, req: SessionRequest) -> Result<QcSession, ReviewError> {
        let _guard = self.submit.lock().unwrap();
        let test_frames = self.store.partition_frames(Partition::Test);
        let test_ids: BTreeSet<&str> = test_frames.iter().map(|f| f.frame_id.as_str()).collect();
        let dets: Vec<Detection> = self
            .store
            .detections(&req.detector_id)
            .into_iter()
            .filter(|d| test_ids.contains(d.frame_id.as_str()))
            .collect();
        let n = req.plan.required_n;
        let (sample, frames) = match req.scope {
            SessionScope::Detections => {
                let ids: Vec<String> = dets.iter().map(|d| d.detection_id.clone()).collect();
                let sample = qc_stats::draw_qc_sample(&ids, n as usize, req.seed).map_err(|_| ReviewError::Insufficient {
                    requested: n,
                    available: ids.len() as u64,
                })?;
                let chosen: BTreeSet<&String> = sample.iter().collect();
                let frames: BTreeSet<String> = dets
                    .iter()
                    .filter(|d| chosen.contains(&d.detection_id))
                    .map(|d| d.frame_id.clone())
                    .collect();
                (sample, frames.into_iter().collect())
            }
            SessionScope::Frames => {
                let ids: Vec<String> = test_frames.iter().map(|f| f.frame_id.clone()).collect();
                let frames = qc_stats::draw_qc_sample(&ids, n as usize, req.seed).map_err(|_| ReviewError::Insufficient {
                    requested: n,
                    available: ids.len() as u64,
                })?;
                let chosen: BTreeSet<&String> = frames.iter().collect();
                let mut sample: Vec<String> = dets
                    .iter()
                    .filter(|d| chosen.contains(&d.frame_id))
                    .map(|d| d.detection_id.clone())
                    .collect();
                sample.sort();
                (sample, frames)
            }
        };
        let session_id = match req.session_id {
            Some(id) => id,
            None => {
                let k = self.store.count(RecordKind::Session) + 1;
                let scope = match req.scope {
                    SessionScope::Detections => "d",
                    SessionScope::Frames => "f",
                };
                format!("qc-{}-{scope}{n}-s{}-{k}", req.detector_id, req.seed)
            }
        };
        if session_id.is_empty() || session_id.contains('/') {
            return Err(ReviewError::Invalid(format!("bad session id {session_id:?}")));
        }
        let record = SessionRecord {
            session_id: session_id.clone(),
            detector_id: req.detector_id,
            plan: req.plan,
            scope: req.scope,
            seed: req.seed,
            sample,
            frames,
        };
        self.store.put_records(vec![Record::Session(record)]).map_err(|e| match e {
            StoreError::DuplicateKey { key, .. } => ReviewError::Conflict(format!("session {key:?} already exists")),
            other => other.into(),
        })?;
        let session = self.session(&session_id)?;
        if session.record.sample.is_empty() {
            self.store.put_records(vec![Record::QcRun(self.freeze(&session)?)])?;
        }
        Ok(session)
    }

    pub fn sessions(&self) -> Vec<SessionRecord> {
        self.store
            .query(Some(RecordKind::Session), |_| true)
            .into_iter()
            .filter_map(|e| match e.record {
                Record::Session(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    /// Derives the session state from its records.
    pub fn session(&self, session_id: &str) -> Result<QcSession, ReviewError> {
        let record = match self.store.get(RecordKind::Session, session_id).map(|e| e.record) {
            Some(Record::Session(s)) => s,
            _ => {
                return Err(ReviewError::NotFound {
                    what: "session",
                    id: session_id.into(),
                })
            }
        };
        let mut envs = self.store.query(Some(RecordKind::Verdict), |r| {
            matches!(r, Record::Verdict(v) if v.session_id == session_id)
        });
        let verdict_seq = envs.len();
        envs.sort_by(|a, b| (a.revision, a.record.key()).cmp(&(b.revision, b.record.key())));
        let mut verdicts = BTreeMap::new();
        for e in envs {
            if let Record::Verdict(v) = e.record {
                verdicts.insert(v.detection_id.clone(), v);
            }
        }
        let (tp, fp) = verdicts.values().fold((0, 0), |(tp, fp), v| match v.judgement {
            Judgement::TP => (tp + 1, fp),
            Judgement::FP => (tp, fp + 1),
        });
        let cursor = record.sample.iter().take_while(|id| verdicts.contains_key(*id)).count();
        let marks = self
            .store
            .query(Some(RecordKind::FnMark), |r| matches!(r, Record::FnMark(m) if m.session_id == session_id))
            .len() as u64;
        let visited = self
            .store
            .query(Some(RecordKind::FrameVisit), |r| {
                matches!(r, Record::FrameVisit(v) if v.session_id == session_id)
            })
            .into_iter()
            .filter_map(|e| match e.record {
                Record::FrameVisit(v) => Some(v.frame_id),
                _ => None,
            })
            .collect();
        let state = if cursor == record.sample.len() {
            SessionState::Complete
        } else {
            SessionState::Open
        };
        Ok(QcSession {
            record,
            cursor,
            verdicts,
            tp,
            fp,
            marks,
            visited,
            state,
            verdict_seq,
        })
    }

    /// The item at the cursor; reading does not advance it.
    pub fn next_item(&self, session_id: &str) -> Result<NextItem, ReviewError> {
        let s = self.session(session_id)?;
        let Some(id) = s.record.sample.get(s.cursor) else {
            return Ok(NextItem::Done);
        };
        let detection = self.detection(id)?;
        let frame = self.store.frame(&detection.frame_id).ok_or_else(|| ReviewError::NotFound {
            what: "frame",
            id: detection.frame_id.clone(),
        })?;
        Ok(NextItem::Item(ReviewItem {
            index: s.cursor,
            detection,
            image_path: frame.image_path,
            frame_width: frame.width,
            frame_height: frame.height,
        }))
    }

    fn detection(&self, id: &str) -> Result<Detection, ReviewError> {
        match self.store.get(RecordKind::Detection, id).map(|e| e.record) {
            Some(Record::Detection(d)) => Ok(d),
            _ => Err(ReviewError::NotFound {
                what: "detection",
                id: id.into(),
            }),
        }
    }

    pub fn submit_verdict(
        &self,
        session_id: &str,
        detection_id: &str,
        judgement: Judgement,
        annotator: &str,
    ) -> Result<Progress, ReviewError> {
        self.submit_verdicts(session_id, &[(detection_id.to_string(), judgement)], annotator)
    }

    /// Applies several verdicts in order as one atomic commit. Each must be
    /// for the item at the cursor or a correction of an earlier item.
    pub fn submit_verdicts(
        &self,
        session_id: &str,
        items: &[(String, Judgement)],
        annotator: &str,
    ) -> Result<Progress, ReviewError> {
        let _guard = self.submit.lock().unwrap();
        let mut s = self.session(session_id)?;
        let position: BTreeMap<&str, usize> =
            s.record.sample.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
        let mut records = Vec::new();
        for (detection_id, judgement) in items {
            self.detection(detection_id)?;
            let Some(&idx) = position.get(detection_id.as_str()) else {
                return Err(ReviewError::OutOfSample(format!(
                    "detection {detection_id:?} is not in session {session_id:?}"
                )));
            };
            if idx > s.cursor {
                return Err(ReviewError::Conflict(format!(
                    "expected a verdict for item {} ({:?}), got item {idx}",
                    s.cursor, s.record.sample[s.cursor]
                )));
            }
            let previous = s.verdicts.get(detection_id.as_str());
            s.verdict_seq += 1;
            let verdict = Verdict {
                verdict_id: format!("{session_id}-v{:06}", s.verdict_seq),
                session_id: session_id.to_string(),
                detection_id: detection_id.clone(),
                judgement: *judgement,
                annotator: annotator.to_string(),
                supersedes: previous.map(|v| v.verdict_id.clone()),
            };
            match (previous.map(|v| v.judgement), judgement) {
                (Some(Judgement::TP), Judgement::FP) => {
                    s.tp -= 1;
                    s.fp += 1;
                }
                (Some(Judgement::FP), Judgement::TP) => {
                    s.fp -= 1;
                    s.tp += 1;
                }
                (None, Judgement::TP) => s.tp += 1,
                (None, Judgement::FP) => s.fp += 1,
                _ => {}
            }
            s.verdicts.insert(detection_id.clone(), verdict.clone());
            if idx == s.cursor {
                s.cursor += 1;
                while s.cursor < s.record.sample.len() && s.verdicts.contains_key(&s.record.sample[s.cursor]) {
                    s.cursor += 1;
                }
            }
            records.push(Record::Verdict(verdict));
        }
        if s.cursor == s.record.sample.len() {
            s.state = SessionState::Complete;
            records.push(Record::QcRun(self.freeze(&s)?));
        }
        self.store.put_records(records)?;
        self.progress_of(&s)
    }

    fn freeze(&self, s: &QcSession) -> Result<QcRunRecord, ReviewError> {
        let counts = s.counts();
        let precision = if counts.tp + counts.fp > 0 {
            qc_stats::precision_estimate(&counts, s.record.plan.confidence)?
        } else {
            // an empty sample freezes as an undefined (zero-width) estimate
            ProportionEstimate {
                value: 0.0,
                ci_low: 0.0,
                ci_high: 0.0,
                n: 0,
                successes: 0,
                z: s.record.plan.z_value,
            }
        };
        Ok(QcRunRecord {
            session_id: s.record.session_id.clone(),
            judged: s.verdicts.len() as u64,
            frames_visited: s.visited.len() as u64,
            frames_total: s.record.frames.len() as u64,
            counts,
            precision,
        })
    }

    /// Records missed objects on a session frame. Zero boxes still marks the
    /// frame as visited.
    pub fn submit_fn_marks(
        &self,
        session_id: &str,
        frame_id: &str,
        boxes: &[BBox],
        annotator: &str,
    ) -> Result<usize, ReviewError> {
        let _guard = self.submit.lock().unwrap();
        let mut s = self.session(session_id)?;
        let frame = self.store.frame(frame_id).ok_or_else(|| ReviewError::NotFound {
            what: "frame",
            id: frame_id.into(),
        })?;
        if !s.record.frames.iter().any(|f| f == frame_id) {
            return Err(ReviewError::OutOfSample(format!(
                "frame {frame_id:?} is not among the frames of session {session_id:?}"
            )));
        }
        for b in boxes {
            b.check_within(frame.width, frame.height)
                .map_err(|e| ReviewError::InvalidBox(e.to_string()))?;
        }
        let prior = match self
            .store
            .get(RecordKind::FrameVisit, &format!("{session_id}/{frame_id}"))
            .map(|e| e.record)
        {
            Some(Record::FrameVisit(v)) => v.marks,
            _ => 0,
        };
        let mut records: Vec<Record> = boxes
            .iter()
            .enumerate()
            .map(|(i, b)| {
                Record::FnMark(FnMark {
                    mark_id: format!("{session_id}-m{:06}", s.marks as usize + i + 1),
                    session_id: session_id.into(),
                    frame_id: frame_id.into(),
                    bbox: *b,
                    annotator: annotator.into(),
                })
            })
            .collect();
        records.push(Record::FrameVisit(FrameVisit {
            session_id: session_id.into(),
            frame_id: frame_id.into(),
            annotator: annotator.into(),
            marks: prior + boxes.len() as u64,
        }));
        s.marks += boxes.len() as u64;
        s.visited.insert(frame_id.to_string());
        if s.state == SessionState::Complete {
            records.push(Record::QcRun(self.freeze(&s)?));
        }
        self.store.put_records(records)?;
        Ok(boxes.len())
    }

    pub fn progress(&self, session_id: &str) -> Result<Progress, ReviewError> {
        let s = self.session(session_id)?;
        self.progress_of(&s)
    }

    fn progress_of(&self, s: &QcSession) -> Result<Progress, ReviewError> {
        let counts = s.counts();
        let conf = s.record.plan.confidence;
        let precision = match qc_stats::precision_estimate(&counts, conf) {
            Ok(p) => Some(p),
            Err(QcError::PrecisionUndefined) => None,
            Err(e) => return Err(e.into()),
        };
        let recall = match qc_stats::recall_estimate(&counts, conf) {
            Ok(r) => Some(r),
            Err(QcError::RecallUnavailable | QcError::RecallUndefined) => None,
            Err(e) => return Err(e.into()),
        };
        Ok(Progress {
            session_id: s.record.session_id.clone(),
            state: s.state,
            judged: s.verdicts.len() as u64,
            required_n: s.record.plan.required_n,
            sample_size: s.record.sample.len() as u64,
            tp: s.tp,
            fp: s.fp,
            fn_: counts.fn_,
            frames_visited: s.visited.len() as u64,
            frames_total: s.record.frames.len() as u64,
            precision_undefined: precision.is_none(),
            precision,
            recall,
        })
    }

    /// The latest frozen counts of a completed session.
    pub fn frozen(&self, session_id: &str) -> Option<QcRunRecord> {
        match self.store.get(RecordKind::QcRun, session_id)?.record {
            Record::QcRun(q) => Some(q),
            _ => None,
        }
    }

    pub fn report(&self, session_id: &str) -> Result<SessionReport, ReviewError> {
        let s = self.session(session_id)?;
        let progress = self.progress_of(&s)?;
        let total = s.record.frames.len();
        Ok(SessionReport {
            session_id: s.record.session_id.clone(),
            detector_id: s.record.detector_id.clone(),
            state: s.state,
            counts: s.counts(),
            frame_coverage: if total == 0 {
                1.0
            } else {
                s.visited.len() as f64 / total as f64
            },
            frozen: self.frozen(session_id),
            progress,
        })
    }
}
