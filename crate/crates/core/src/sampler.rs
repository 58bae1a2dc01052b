//! Frame extraction, systematic 1/N sampling and train/test splitting.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::ingest::segment::FramePack;
use crate::ingest::VideoSegment;
use crate::util;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampling rate denominator must be >= 1")]
    ZeroRate,
    #[error("offset {offset} must be below the rate denominator {rate}")]
    OffsetOutOfRange { offset: u64, rate: u64 },
    #[error("test fraction {0} must lie strictly between 0 and 1")]
    BadFraction(f64),
    #[error("test count {count} is not below the number of frames {frames}")]
    BadCount { count: usize, frames: usize },
    #[error("cannot split an empty frame set")]
    NoFrames,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame_id: String,
    pub segment_id: String,
    pub camera_id: String,
    pub index_in_segment: u64,
    /// Position in the camera's full frame sequence.
    pub global_index: u64,
    pub sampled: bool,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
}

pub fn frame_id(camera_id: &str, global_index: u64) -> String {
    format!("{camera_id}-{global_index:09}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Test,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Test => "test",
        })
    }
}

impl std::str::FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(format!("unknown partition {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub frame_id: String,
    pub partition: Partition,
    pub split_seed: u64,
    pub test_fraction: f64,
}

/// Position of one sampled frame inside the segment list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampledIndex {
    pub segment: usize,
    pub index_in_segment: u64,
    pub global_index: u64,
}

/// Selects the frames whose per-camera global index is `offset (mod rate)`.
///
/// `segments` holds `(camera_id, frame_count)` in time order per camera;
/// segments of different cameras may be interleaved.
pub fn select_indices(segments: &[(&str, u64)], rate: u64, offset: u64) -> Result<Vec<SampledIndex>, SamplerError> {
    if rate == 0 {
        return Err(SamplerError::ZeroRate);
    }
    if offset >= rate {
        return Err(SamplerError::OffsetOutOfRange { offset, rate });
    }
    let mut next_global: HashMap<&str, u64> = HashMap::new();
    let mut out = Vec::new();
    for (seg_idx, (camera, count)) in segments.iter().enumerate() {
        let start = *next_global.get(camera).unwrap_or(&0);
        // first global index >= start congruent to offset
        let rem = start % rate;
        let mut g = start - rem + offset;
        if g < start {
            g += rate;
        }
        while g < start + count {
            out.push(SampledIndex {
                segment: seg_idx,
                index_in_segment: g - start,
                global_index: g,
            });
            g += rate;
        }
        next_global.insert(camera, start + count);
    }
    Ok(out)
}

/// A segment that could not be decoded; its frames are skipped but still
/// advance the camera's global index.
#[derive(Debug, Clone, PartialEq)]
pub struct SkippedSegment {
    pub segment_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct SampleOutcome {
    pub frames: Vec<FrameRecord>,
    pub skipped: Vec<SkippedSegment>,
}

/// Decodes `segments`, keeps every `rate`-th frame starting at `offset`, and
/// writes the kept frames as PNG files under `frames_dir/<camera_id>/`.
pub fn sample_frames(
    segments: &[VideoSegment],
    rate: u64,
    offset: u64,
    frames_dir: &Path,
) -> Result<SampleOutcome, SamplerError> {
    let counts: Vec<(&str, u64)> = segments.iter().map(|s| (s.camera_id.as_str(), s.frame_count)).collect();
    let picks = select_indices(&counts, rate, offset)?;
    let mut by_segment: BTreeMap<usize, Vec<SampledIndex>> = BTreeMap::new();
    for p in picks {
        by_segment.entry(p.segment).or_default().push(p);
    }

    let mut outcome = SampleOutcome::default();
    for (seg_idx, picks) in by_segment {
        let seg = &segments[seg_idx];
        let pack = match fs::read(&seg.path)
            .map_err(|e| e.to_string())
            .and_then(|b| FramePack::decode(&b).map_err(|e| e.to_string()))
        {
            Ok(p) if p.frames.len() as u64 == seg.frame_count => p,
            Ok(p) => {
                skip(&mut outcome, seg, format!("decoded {} frames, record says {}", p.frames.len(), seg.frame_count));
                continue;
            }
            Err(e) => {
                skip(&mut outcome, seg, e);
                continue;
            }
        };
        let cam_dir = frames_dir.join(&seg.camera_id);
        fs::create_dir_all(&cam_dir)?;
        let (w, h) = (pack.header.width, pack.header.height);
        for p in picks {
            let id = frame_id(&seg.camera_id, p.global_index);
            let path: PathBuf = cam_dir.join(format!("{id}.png"));
            let img = GrayImage::from_raw(w, h, pack.frames[p.index_in_segment as usize].clone())
                .expect("frame buffer matches header");
            img.save(&path).map_err(|e| std::io::Error::other(e.to_string()))?;
            outcome.frames.push(FrameRecord {
                frame_id: id,
                segment_id: seg.segment_id.clone(),
                camera_id: seg.camera_id.clone(),
                index_in_segment: p.index_in_segment,
                global_index: p.global_index,
                sampled: true,
                image_path: path.to_string_lossy().into_owned(),
                width: w,
                height: h,
            });
        }
    }
    outcome
        .frames
        .sort_by(|a, b| (&a.camera_id, a.global_index).cmp(&(&b.camera_id, b.global_index)));
    Ok(outcome)
}

fn skip(outcome: &mut SampleOutcome, seg: &VideoSegment, reason: String) {
    warn!(segment = %seg.segment_id, %reason, "skipping unreadable segment");
    outcome.skipped.push(SkippedSegment {
        segment_id: seg.segment_id.clone(),
        reason,
    });
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSize {
    Fraction(f64),
    Count(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Uniform random subset.
    #[default]
    Random,
    /// The latest frames (highest global index) form the test set.
    Chronological,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub size: SplitSize,
    pub seed: u64,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default)]
    pub stratify_by_camera: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitResult {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub assignments: Vec<SplitAssignment>,
}

fn test_size(size: SplitSize, n: usize) -> Result<usize, SamplerError> {
    match size {
        SplitSize::Fraction(f) => {
            if !(f > 0.0 && f < 1.0) {
                return Err(SamplerError::BadFraction(f));
            }
            Ok(util::round_half_up(f * n as f64) as usize)
        }
        SplitSize::Count(k) => {
            if k >= n {
                return Err(SamplerError::BadCount { count: k, frames: n });
            }
            Ok(k)
        }
    }
}

/// Splits frames into train and test. Results depend only on the frame set
/// and the spec, never on input order.
pub fn split(frames: &[FrameRecord], spec: &SplitSpec) -> Result<SplitResult, SamplerError> {
    if frames.is_empty() {
        return Err(SamplerError::NoFrames);
    }
    let k = test_size(spec.size, frames.len())?;
    let mut ordered: Vec<&FrameRecord> = frames.iter().collect();
    ordered.sort_by(|a, b| a.frame_id.cmp(&b.frame_id));
    ordered.dedup_by(|a, b| a.frame_id == b.frame_id);

    let test: Vec<String> = if spec.stratify_by_camera {
        let mut groups: BTreeMap<&str, Vec<&FrameRecord>> = BTreeMap::new();
        for f in &ordered {
            groups.entry(f.camera_id.as_str()).or_default().push(f);
        }
        let sizes: Vec<usize> = groups.values().map(Vec::len).collect();
        let quotas = apportion(k, &sizes);
        groups
            .iter()
            .zip(quotas)
            .flat_map(|((camera, group), q)| {
                pick_test(group, q, util::derive_seed(spec.seed, camera, 0), spec.mode)
            })
            .collect()
    } else {
        pick_test(&ordered, k, spec.seed, spec.mode)
    };

    let test_set: std::collections::HashSet<&str> = test.iter().map(String::as_str).collect();
    let fraction = k as f64 / ordered.len() as f64;
    let mut train = Vec::new();
    let mut assignments = Vec::with_capacity(ordered.len());
    for f in &ordered {
        let partition = if test_set.contains(f.frame_id.as_str()) {
            Partition::Test
        } else {
            train.push(f.frame_id.clone());
            Partition::Train
        };
        assignments.push(SplitAssignment {
            frame_id: f.frame_id.clone(),
            partition,
            split_seed: spec.seed,
            test_fraction: fraction,
        });
    }
    let mut test = test;
    test.sort();
    Ok(SplitResult {
        train,
        test,
        assignments,
    })
}

fn pick_test(group: &[&FrameRecord], k: usize, seed: u64, mode: SplitMode) -> Vec<String> {
    match mode {
        SplitMode::Random => {
            let mut ids: Vec<&str> = group.iter().map(|f| f.frame_id.as_str()).collect();
            ids.shuffle(&mut util::rng(seed));
            ids.into_iter().take(k).map(str::to_string).collect()
        }
        SplitMode::Chronological => {
            let mut by_time: Vec<&&FrameRecord> = group.iter().collect();
            by_time.sort_by(|a, b| (a.global_index, &a.camera_id).cmp(&(b.global_index, &b.camera_id)));
            by_time.iter().rev().take(k).map(|f| f.frame_id.clone()).collect()
        }
    }
}

/// Largest-remainder apportionment of `total` over groups of the given sizes.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut quotas: Vec<usize> = sizes.iter().map(|s| total * s / n).collect();
    let mut rema: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, s)| ((total * s) % n, i)).collect();
    // larger remainder first, then lower index
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quotas.iter().sum::<usize>();
    for (_, i) in rema {
        if left == 0 {
            break;
        }
        if quotas[i] < sizes[i] {
            quotas[i] += 1;
            left -= 1;
        }
    }
    quotas
}

/// Writes `frame_id \t camera_id \t global_index \t partition`, one line per
/// frame. Frames without an assignment get partition `-`.
pub fn write_frame_manifest(
    path: &Path,
    frames: &[FrameRecord],
    partitions: &HashMap<String, Partition>,
) -> Result<(), SamplerError> {
    let mut out = String::new();
    for f in frames {
        let part = partitions.get(&f.frame_id).map_or("-".to_string(), Partition::to_string);
        out.push_str(&format!("{}\t{}\t{}\t{}\n", f.frame_id, f.camera_id, f.global_index, part));
    }
    fs::write(path, out)?;
    Ok(())
}
