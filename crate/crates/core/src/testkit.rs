//! Store fixtures for tests and demos: one camera, one segment, a set of
//! frames split into train/test and a detector's boxes on them.

use crate::bbox::BBox;
use crate::detector_io::{assign_ids, Detection};
use crate::ingest::{CameraSource, VideoSegment};
use crate::label_store::{Record, Store, StoreError};
use crate::sampler::{frame_id, FrameRecord, Partition, SplitAssignment};

pub const FIXTURE_CAMERA: &str = "cam";
pub const FIXTURE_SIZE: u32 = 96;

#[derive(Debug, Clone)]
pub struct FixtureSpec {
    pub detector_id: String,
    pub test_frames: usize,
    pub train_frames: usize,
    /// Spread round-robin over the test frames, then the train frames.
    pub test_detections: usize,
    pub train_detections: usize,
    /// Prefix of `image_path`; frames are `<dir>/<frame_id>.png`.
    pub image_dir: String,
}

impl FixtureSpec {
    pub fn new(detector_id: &str, test_frames: usize, test_detections: usize) -> Self {
        Self {
            detector_id: detector_id.into(),
            test_frames,
            train_frames: 0,
            test_detections,
            train_detections: 0,
            image_dir: "frames".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub test_frames: Vec<FrameRecord>,
    pub train_frames: Vec<FrameRecord>,
    pub detections: Vec<Detection>,
}

/// Box number `k` on a frame; distinct for `k < 64`.
pub fn fixture_box(k: usize) -> BBox {
    let k = k % 64;
    BBox::new((k % 8) as f64 * 10.0, (k / 8) as f64 * 10.0, 16.0, 16.0)
}

fn spread(frames: &[FrameRecord], n: usize, detector_id: &str) -> Vec<Detection> {
    if frames.is_empty() {
        return Vec::new();
    }
    let mut per_frame = vec![0usize; frames.len()];
    for k in 0..n {
        per_frame[k % frames.len()] += 1;
    }
    let mut out = Vec::new();
    for (f, &m) in frames.iter().zip(&per_frame) {
        let raw = (0..m)
            .map(|k| (fixture_box(k), 0.99 - k as f64 / 128.0, "car".to_string()))
            .collect();
        out.extend(assign_ids(detector_id, &f.frame_id, raw));
    }
    out
}

/// Writes the fixture into `store` and returns what was written.
pub fn seed_fixture(store: &Store, spec: &FixtureSpec) -> Result<Fixture, StoreError> {
    let total = (spec.test_frames + spec.train_frames) as u64;
    let segment = VideoSegment {
        segment_id: format!("{FIXTURE_CAMERA}-seg-00000"),
        camera_id: FIXTURE_CAMERA.into(),
        started_at: 0.0,
        duration: total as f64,
        path: "segments/cam/seg-00000.wlfp".into(),
        frame_count: total,
        byte_size: 0,
        source_uri: String::new(),
    };
    let frame = |i: u64| {
        let id = frame_id(FIXTURE_CAMERA, i);
        FrameRecord {
            image_path: format!("{}/{id}.png", spec.image_dir),
            frame_id: id,
            segment_id: segment.segment_id.clone(),
            camera_id: FIXTURE_CAMERA.into(),
            index_in_segment: i,
            global_index: i,
            sampled: true,
            width: FIXTURE_SIZE,
            height: FIXTURE_SIZE,
        }
    };
    let test_frames: Vec<FrameRecord> = (0..spec.test_frames as u64).map(frame).collect();
    let train_frames: Vec<FrameRecord> = (spec.test_frames as u64..total).map(frame).collect();
    let mut detections = spread(&test_frames, spec.test_detections, &spec.detector_id);
    detections.extend(spread(&train_frames, spec.train_detections, &spec.detector_id));

    let mut batch = vec![
        Record::Camera(CameraSource::new(FIXTURE_CAMERA, "file:///dev/null")),
        Record::Segment(segment.clone()),
    ];
    for (frames, partition) in [(&test_frames, Partition::Test), (&train_frames, Partition::Train)] {
        for f in frames.iter() {
            batch.push(Record::Frame(f.clone()));
            batch.push(Record::Split(SplitAssignment {
                frame_id: f.frame_id.clone(),
                partition,
                split_seed: 0,
                test_fraction: spec.test_frames as f64 / total.max(1) as f64,
            }));
        }
    }
    batch.extend(detections.iter().cloned().map(Record::Detection));
    store.put_records(batch)?;
    Ok(Fixture {
        test_frames,
        train_frames,
        detections,
    })
}

/// Adds another detector's boxes to frames already in the store.
pub fn seed_detections(store: &Store, detector_id: &str, frames: &[FrameRecord], n: usize) -> Result<Vec<Detection>, StoreError> {
    let dets = spread(frames, n, detector_id);
    store.put_records(dets.iter().cloned().map(Record::Detection).collect())?;
    Ok(dets)
}
