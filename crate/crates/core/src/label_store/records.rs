use serde::{Deserialize, Serialize};

use crate::detector_io::Detection;
use crate::ingest::{CameraSource, VideoSegment};
use crate::pipeline::RunManifest;
use crate::qc_stats::QcReport;
use crate::review::{FnMark, FrameVisit, QcRunRecord, SessionRecord, Verdict};
use crate::sampler::{FrameRecord, SplitAssignment};

/// Every record type the store holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Record {
    Camera(CameraSource),
    Segment(VideoSegment),
    Frame(FrameRecord),
    Split(SplitAssignment),
    Detection(Detection),
    Verdict(Verdict),
    FnMark(FnMark),
    FrameVisit(FrameVisit),
    Session(SessionRecord),
    QcRun(QcRunRecord),
    Manifest(RunManifest),
    Report(ReportRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub run_id: String,
    pub report: QcReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    Camera,
    Segment,
    Frame,
    Split,
    Detection,
    Verdict,
    FnMark,
    FrameVisit,
    Session,
    QcRun,
    Manifest,
    Report,
}

impl RecordKind {
    /// Versioned kinds accept a new record under an existing key; the latest
    /// revision supersedes. All other kinds reject duplicate keys.
    pub fn is_versioned(self) -> bool {
        matches!(self, Self::Split | Self::FrameVisit | Self::QcRun | Self::Manifest | Self::Report)
    }
}

impl std::fmt::Display for RecordKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl Record {
    pub fn kind(&self) -> RecordKind {
        match self {
            Self::Camera(_) => RecordKind::Camera,
            Self::Segment(_) => RecordKind::Segment,
            Self::Frame(_) => RecordKind::Frame,
            Self::Split(_) => RecordKind::Split,
            Self::Detection(_) => RecordKind::Detection,
            Self::Verdict(_) => RecordKind::Verdict,
            Self::FnMark(_) => RecordKind::FnMark,
            Self::FrameVisit(_) => RecordKind::FrameVisit,
            Self::Session(_) => RecordKind::Session,
            Self::QcRun(_) => RecordKind::QcRun,
            Self::Manifest(_) => RecordKind::Manifest,
            Self::Report(_) => RecordKind::Report,
        }
    }

    pub fn key(&self) -> String {
        match self {
            Self::Camera(c) => c.camera_id.clone(),
            Self::Segment(s) => s.segment_id.clone(),
            Self::Frame(f) => f.frame_id.clone(),
            Self::Split(s) => s.frame_id.clone(),
            Self::Detection(d) => d.detection_id.clone(),
            Self::Verdict(v) => v.verdict_id.clone(),
            Self::FnMark(m) => m.mark_id.clone(),
            Self::FrameVisit(v) => format!("{}/{}", v.session_id, v.frame_id),
            Self::Session(s) => s.session_id.clone(),
            Self::QcRun(q) => q.session_id.clone(),
            Self::Manifest(m) => m.run_id.clone(),
            Self::Report(r) => r.run_id.clone(),
        }
    }

    /// Records this one points at, as `(kind, key)`.
    pub fn references(&self) -> Vec<(RecordKind, String)> {
        match self {
            Self::Camera(_) | Self::Session(_) | Self::Manifest(_) | Self::Report(_) => vec![],
            Self::Segment(s) => vec![(RecordKind::Camera, s.camera_id.clone())],
            Self::Frame(f) => vec![
                (RecordKind::Segment, f.segment_id.clone()),
                (RecordKind::Camera, f.camera_id.clone()),
            ],
            Self::Split(s) => vec![(RecordKind::Frame, s.frame_id.clone())],
            Self::Detection(d) => vec![(RecordKind::Frame, d.frame_id.clone())],
            Self::Verdict(v) => vec![
                (RecordKind::Detection, v.detection_id.clone()),
                (RecordKind::Session, v.session_id.clone()),
            ],
            Self::FnMark(m) => vec![
                (RecordKind::Frame, m.frame_id.clone()),
                (RecordKind::Session, m.session_id.clone()),
            ],
            Self::FrameVisit(v) => vec![
                (RecordKind::Frame, v.frame_id.clone()),
                (RecordKind::Session, v.session_id.clone()),
            ],
            Self::QcRun(q) => vec![(RecordKind::Session, q.session_id.clone())],
        }
    }
}

/// A committed record with its commit metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub revision: u64,
    /// UTC seconds of the commit.
    pub created_at: u64,
    pub record: Record,
}
