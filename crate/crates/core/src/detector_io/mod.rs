//! Detector abstraction: built-in parts-model detector, external process
//! plugins, a noisy oracle for synthetic scenes, and IoU matching against
//! ground truth.

mod external;
mod synth;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::{iou, BBox, BBoxError};
use crate::parts_model::{self, FeatureMap, ModelError, PartsModel};
use crate::sampler::FrameRecord;

pub use external::{
    format_request_line, format_response_line, parse_response_line, run_external_detector, CommandSpec, ExternalRun,
    LineError, WireResponse,
};
pub use synth::{
    noisy_oracle_detect, synthesize_scene, write_synthetic_segments, FrameSize, NoisyOracleConfig, Scene, SceneSpec,
    SyntheticWorld,
};

/// Default IoU needed for a detection to count as a true positive.
pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum DetectorError {
    #[error("cannot start detector {command:?}: {detail}")]
    Spawn { command: String, detail: String },
    #[error("detector exited with {status}; stderr: {stderr}")]
    Exit { status: String, stderr: String },
    #[error("frame {0:?} has no readable image")]
    Unreadable(String),
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("box: {0}")]
    BBox(#[from] BBoxError),
    #[error("detections span several frames ({0:?} and {1:?})")]
    MixedFrames(String, String),
    #[error("IoU threshold must lie in (0, 1], got {0}")]
    BadThreshold(f64),
    #[error("scene: {0}")]
    Scene(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub detection_id: String,
    pub frame_id: String,
    pub class_label: String,
    pub bbox: BBox,
    pub score: f64,
    pub detector_id: String,
}

/// Canonical id of the `rank`-th detection of a detector on a frame.
pub fn detection_id(detector_id: &str, frame_id: &str, rank: usize) -> String {
    format!("{detector_id}:{frame_id}:{rank:03}")
}

/// Descending score, then box coordinates, then class; a total order used to
/// rank detections within a frame.
fn rank_order(a: &(BBox, f64, String), b: &(BBox, f64, String)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then(a.0.y.total_cmp(&b.0.y))
        .then(a.0.x.total_cmp(&b.0.x))
        .then(a.0.w.total_cmp(&b.0.w))
        .then(a.0.h.total_cmp(&b.0.h))
        .then(a.2.cmp(&b.2))
}

/// Builds detections for one frame from raw `(bbox, score, class)` triples,
/// assigning ids by rank.
pub fn assign_ids(detector_id: &str, frame_id: &str, mut raw: Vec<(BBox, f64, String)>) -> Vec<Detection> {
    raw.sort_by(rank_order);
    raw.into_iter()
        .enumerate()
        .map(|(k, (bbox, score, class_label))| Detection {
            detection_id: detection_id(detector_id, frame_id, k),
            frame_id: frame_id.to_string(),
            class_label,
            bbox,
            score,
            detector_id: detector_id.to_string(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub frame_id: String,
    pub class_label: String,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// `(detection_id, ground-truth index)` for every true positive.
    pub pairs: Vec<(String, usize)>,
}

impl MatchResult {
    pub fn is_tp(&self, detection_id: &str) -> bool {
        self.pairs.iter().any(|(d, _)| d == detection_id)
    }

    /// Ground-truth indices left unmatched.
    pub fn missed(&self, gt_len: usize) -> Vec<usize> {
        (0..gt_len).filter(|i| !self.pairs.iter().any(|(_, g)| g == i)).collect()
    }
}

/// Greedy matching on one frame. Detections are visited by descending score
/// (ties by id); each takes the unmatched ground-truth object with the highest
/// IoU (ties by index) if that IoU reaches `iou_threshold`.
pub fn match_detections(
    dets: &[Detection],
    gt: &[GroundTruthObject],
    iou_threshold: f64,
) -> Result<MatchResult, DetectorError> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(DetectorError::BadThreshold(iou_threshold));
    }
    let mut frame: Option<&str> = None;
    for id in dets.iter().map(|d| d.frame_id.as_str()).chain(gt.iter().map(|g| g.frame_id.as_str())) {
        match frame {
            None => frame = Some(id),
            Some(f) if f != id => return Err(DetectorError::MixedFrames(f.to_string(), id.to_string())),
            _ => {}
        }
    }
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.detection_id.cmp(&b.detection_id)));

    let mut taken = vec![false; gt.len()];
    let mut result = MatchResult::default();
    for d in order {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in gt.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let v = iou(&d.bbox, &g.bbox)?;
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        match best {
            Some((i, v)) if v >= iou_threshold => {
                taken[i] = true;
                result.tp += 1;
                result.pairs.push((d.detection_id.clone(), i));
            }
            _ => result.fp += 1,
        }
    }
    result.fn_ = taken.iter().filter(|t| !**t).count() as u64;
    Ok(result)
}

/// Runs [`match_detections`] frame by frame. Frames present only in `gt`
/// contribute false negatives, frames present only in `dets` false positives.
pub fn match_by_frame(
    dets: &[Detection],
    gt: &[GroundTruthObject],
    iou_threshold: f64,
) -> Result<BTreeMap<String, MatchResult>, DetectorError> {
    let mut frames: BTreeMap<String, (Vec<Detection>, Vec<GroundTruthObject>)> = BTreeMap::new();
    for d in dets {
        frames.entry(d.frame_id.clone()).or_default().0.push(d.clone());
    }
    for g in gt {
        frames.entry(g.frame_id.clone()).or_default().1.push(g.clone());
    }
    frames
        .into_iter()
        .map(|(f, (d, g))| Ok((f, match_detections(&d, &g, iou_threshold)?)))
        .collect()
}

/// Greedy non-maximum suppression: keeps detections in rank order, dropping
/// any whose IoU with an already kept one exceeds `iou_threshold`.
pub fn nms(dets: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order = dets;
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.detection_id.cmp(&b.detection_id)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| iou(&k.bbox, &d.bbox).map(|v| v > iou_threshold).unwrap_or(false));
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// The parts-model weak classifier applied to frame images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuiltinDetector {
    pub model: PartsModel,
    pub nms_iou: f64,
    pub class_label: String,
}

impl BuiltinDetector {
    pub fn new(model: PartsModel) -> Self {
        Self {
            model,
            nms_iou: 0.3,
            class_label: "car".into(),
        }
    }

    /// Detections on a precomputed feature map of a `width`×`height` frame.
    pub fn detect_features(
        &self,
        detector_id: &str,
        frame_id: &str,
        width: u32,
        height: u32,
        features: &FeatureMap,
    ) -> Result<Vec<Detection>, DetectorError> {
        let raw: Vec<(BBox, f64, String)> = parts_model::detect(&self.model, features)?
            .into_iter()
            .filter_map(|d| d.bbox.clamp_to(width, height).map(|b| (b, d.score, self.class_label.clone())))
            .collect();
        // rank first so that suppression ties resolve the same way every run
        let ranked = assign_ids(detector_id, frame_id, raw);
        let kept = nms(ranked, self.nms_iou);
        Ok(assign_ids(
            detector_id,
            frame_id,
            kept.into_iter().map(|d| (d.bbox, d.score, d.class_label)).collect(),
        ))
    }

    pub fn detect_frame(&self, detector_id: &str, frame: &FrameRecord) -> Result<Vec<Detection>, DetectorError> {
        let features = parts_model::cell_features_from_image(std::path::Path::new(&frame.image_path), self.model.cell_size)
            .map_err(|_| DetectorError::Unreadable(frame.frame_id.clone()))?;
        self.detect_features(detector_id, &frame.frame_id, frame.width, frame.height, &features)
    }
}
