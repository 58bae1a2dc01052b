//! Synthetic scenes with ground truth, and the noisy oracle detector.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{assign_ids, Detection, DetectorError, GroundTruthObject};
use crate::bbox::BBox;
use crate::ingest::segment::{FramePack, SegmentHeader};
use crate::parts_model::{cell_features, FeatureMap};
use crate::sampler::{frame_id, FrameRecord};
use crate::util;

/// Background pixels are drawn from `0..=BACKGROUND_MAX`.
const BACKGROUND_MAX: u8 = 25;
/// Object and distractor brightness range, as a fraction of white.
const BRIGHTNESS: (f64, f64) = (0.3, 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    pub n_objects: usize,
    /// Object side lengths are multiples of `cell_size` in `[min_size, max_size]`.
    pub min_size: u32,
    pub max_size: u32,
    pub cell_size: u32,
    /// Expected number of bright patches that are not objects.
    #[serde(default)]
    pub clutter: f64,
    #[serde(default = "default_class")]
    pub class_label: String,
}

fn default_class() -> String {
    "car".into()
}

impl SceneSpec {
    pub fn new(width: u32, height: u32, n_objects: usize, min_size: u32, max_size: u32) -> Self {
        Self {
            width,
            height,
            n_objects,
            min_size,
            max_size,
            cell_size: 8,
            clutter: 0.0,
            class_label: default_class(),
        }
    }

    fn side_choices(&self) -> Vec<u32> {
        let c = self.cell_size.max(1);
        (1..=self.max_size / c).map(|k| k * c).filter(|s| *s >= self.min_size).collect()
    }
}

/// A rendered frame: 8-bit grayscale pixels, its ground truth and features.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
    pub objects: Vec<GroundTruthObject>,
    pub distractors: Vec<BBox>,
    pub pixels: Vec<u8>,
    pub features: FeatureMap,
}

/// Renders a scene deterministically from `seed`. Objects and distractors
/// are cell-aligned, fully inside the frame and never overlap.
pub fn synthesize_scene(seed: u64, spec: &SceneSpec, frame_id: &str) -> Result<Scene, DetectorError> {
    let cell = spec.cell_size;
    if cell == 0 || spec.min_size > spec.max_size {
        return Err(DetectorError::Scene("invalid size range".into()));
    }
    let sides = spec.side_choices();
    if sides.is_empty() {
        return Err(DetectorError::Scene(format!(
            "no multiple of the {cell}px cell lies in [{}, {}]",
            spec.min_size, spec.max_size
        )));
    }
    if !(spec.clutter.is_finite() && spec.clutter >= 0.0) {
        return Err(DetectorError::Scene("clutter must be >= 0".into()));
    }
    let (cols, rows) = ((spec.width / cell) as usize, (spec.height / cell) as usize);
    let mut rng = util::rng(seed);
    let mut occupied = vec![false; cols * rows];

    let mut place = |rng: &mut rand_chacha::ChaCha8Rng| -> Option<(BBox, f64)> {
        let wc = (sides[rng.random_range(0..sides.len())] / cell) as usize;
        let hc = (sides[rng.random_range(0..sides.len())] / cell) as usize;
        if wc > cols || hc > rows {
            return None;
        }
        let mut free = Vec::new();
        for y in 0..=rows - hc {
            for x in 0..=cols - wc {
                if (y..y + hc).all(|yy| (x..x + wc).all(|xx| !occupied[yy * cols + xx])) {
                    free.push((x, y));
                }
            }
        }
        if free.is_empty() {
            return None;
        }
        let (x, y) = free[rng.random_range(0..free.len())];
        for yy in y..y + hc {
            for xx in x..x + wc {
                occupied[yy * cols + xx] = true;
            }
        }
        let b = BBox::new((x as u32 * cell) as f64, (y as u32 * cell) as f64, (wc as u32 * cell) as f64, (hc as u32 * cell) as f64);
        Some((b, rng.random_range(BRIGHTNESS.0..=BRIGHTNESS.1)))
    };

    let mut patches = Vec::new();
    for i in 0..spec.n_objects {
        let p = place(&mut rng).ok_or_else(|| {
            DetectorError::Scene(format!(
                "object {} of {} does not fit in a {}x{} frame",
                i + 1,
                spec.n_objects,
                spec.width,
                spec.height
            ))
        })?;
        patches.push(p);
    }
    let n_clutter = if spec.clutter > 0.0 {
        Poisson::new(spec.clutter).map(|d| d.sample(&mut rng) as usize).unwrap_or(0)
    } else {
        0
    };
    let mut distractors = Vec::new();
    for _ in 0..n_clutter {
        if let Some(p) = place(&mut rng) {
            distractors.push(p);
        }
    }

    let (w, h) = (spec.width as usize, spec.height as usize);
    let mut pixels: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..=BACKGROUND_MAX)).collect();
    for (b, brightness) in patches.iter().chain(&distractors) {
        let base = brightness * 255.0;
        for y in b.y as usize..b.y_max() as usize {
            for x in b.x as usize..b.x_max() as usize {
                let noise: f64 = rng.random_range(-6.0..=6.0);
                pixels[y * w + x] = (base + noise).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    let features = cell_features(&pixels, spec.width, spec.height, cell)?;
    Ok(Scene {
        frame_id: frame_id.to_string(),
        width: spec.width,
        height: spec.height,
        objects: patches
            .into_iter()
            .map(|(bbox, _)| GroundTruthObject {
                frame_id: frame_id.to_string(),
                class_label: spec.class_label.clone(),
                bbox,
            })
            .collect(),
        distractors: distractors.into_iter().map(|(b, _)| b).collect(),
        pixels,
        features,
    })
}

/// A world of synthetic cameras: the scene of every frame is a pure function
/// of `(seed, camera_id, global_index)`, so ground truth can be regenerated
/// for any harvested frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub seed: u64,
    pub scene: SceneSpec,
    pub objects_min: usize,
    pub objects_max: usize,
}

impl SyntheticWorld {
    pub fn scene(&self, camera_id: &str, global_index: u64) -> Result<Scene, DetectorError> {
        let seed = util::derive_seed(self.seed, camera_id, global_index);
        let mut rng = util::rng(seed ^ 0x5ce7e);
        let n = rng.random_range(self.objects_min..=self.objects_max.max(self.objects_min));
        let spec = SceneSpec {
            n_objects: n,
            ..self.scene.clone()
        };
        synthesize_scene(seed, &spec, &frame_id(camera_id, global_index))
    }

    pub fn ground_truth(&self, frame: &FrameRecord) -> Result<Vec<GroundTruthObject>, DetectorError> {
        let mut gt = self.scene(&frame.camera_id, frame.global_index)?.objects;
        for g in &mut gt {
            g.frame_id = frame.frame_id.clone();
        }
        Ok(gt)
    }
}

/// Writes `segments` frame packs of `frames_per_segment` frames each for one
/// camera into `dir`, named so that name order is time order.
pub fn write_synthetic_segments(
    world: &SyntheticWorld,
    dir: &Path,
    camera_id: &str,
    segments: usize,
    frames_per_segment: u64,
    fps: f64,
) -> Result<Vec<PathBuf>, DetectorError> {
    fs::create_dir_all(dir)?;
    let mut out = Vec::new();
    for s in 0..segments as u64 {
        let frames = (0..frames_per_segment)
            .map(|i| world.scene(camera_id, s * frames_per_segment + i).map(|sc| sc.pixels))
            .collect::<Result<Vec<_>, _>>()?;
        let pack = FramePack {
            header: SegmentHeader {
                width: world.scene.width,
                height: world.scene.height,
                fps,
                frame_count: frames_per_segment,
            },
            frames,
        };
        let path = dir.join(format!("seg-{s:05}.wlfp"));
        fs::write(&path, pack.encode())?;
        out.push(path);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyOracleConfig {
    /// Probability that a ground-truth object is not reported.
    pub miss_rate: f64,
    /// Expected number of spurious boxes per frame.
    pub fp_per_frame: f64,
    /// Standard deviation, in pixels, of the noise added to reported boxes.
    pub jitter: f64,
    pub seed: u64,
    #[serde(default = "default_class")]
    pub class_label: String,
}

impl NoisyOracleConfig {
    pub fn new(miss_rate: f64, fp_per_frame: f64, jitter: f64, seed: u64) -> Self {
        Self {
            miss_rate,
            fp_per_frame,
            jitter,
            seed,
            class_label: default_class(),
        }
    }

    pub fn validate(&self) -> Result<(), DetectorError> {
        if !(0.0..=1.0).contains(&self.miss_rate) {
            return Err(DetectorError::Scene(format!("miss_rate {} outside [0, 1]", self.miss_rate)));
        }
        if !(self.fp_per_frame.is_finite() && self.fp_per_frame >= 0.0) {
            return Err(DetectorError::Scene("fp_per_frame must be >= 0".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(DetectorError::Scene("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

/// Frame identity and size, all the oracle needs to know about a frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSize {
    pub frame_id: String,
    pub width: u32,
    pub height: u32,
}

impl From<&FrameRecord> for FrameSize {
    fn from(f: &FrameRecord) -> Self {
        Self {
            frame_id: f.frame_id.clone(),
            width: f.width,
            height: f.height,
        }
    }
}

impl From<&Scene> for FrameSize {
    fn from(s: &Scene) -> Self {
        Self {
            frame_id: s.frame_id.clone(),
            width: s.width,
            height: s.height,
        }
    }
}

/// Reports each ground-truth object with probability `1 − miss_rate` (box
/// jittered and clamped to the frame) and adds `Poisson(fp_per_frame)`
/// random boxes per frame. Each frame draws from its own stream seeded by
/// `(cfg.seed, frame_id)`, so results do not depend on frame order.
pub fn noisy_oracle_detect(
    frames: &[FrameSize],
    gt: &[GroundTruthObject],
    cfg: &NoisyOracleConfig,
    detector_id: &str,
) -> Result<Vec<Detection>, DetectorError> {
    cfg.validate()?;
    let mut by_frame: BTreeMap<&str, Vec<&GroundTruthObject>> = BTreeMap::new();
    for g in gt {
        if !frames.iter().any(|f| f.frame_id == g.frame_id) {
            return Err(DetectorError::Scene(format!("ground truth for unknown frame {:?}", g.frame_id)));
        }
        by_frame.entry(g.frame_id.as_str()).or_default().push(g);
    }
    let jitter = (cfg.jitter > 0.0).then(|| Normal::new(0.0, cfg.jitter).expect("finite positive sigma"));
    let spurious = (cfg.fp_per_frame > 0.0).then(|| Poisson::new(cfg.fp_per_frame).expect("positive rate"));

    let mut out = Vec::new();
    for f in frames {
        let mut rng = util::rng(util::derive_seed(cfg.seed, &f.frame_id, 0));
        let mut raw = Vec::new();
        for g in by_frame.get(f.frame_id.as_str()).into_iter().flatten() {
            let u: f64 = rng.random();
            if u < cfg.miss_rate {
                continue;
            }
            let mut b = g.bbox;
            if let Some(n) = &jitter {
                let moved = BBox::new(
                    b.x + n.sample(&mut rng),
                    b.y + n.sample(&mut rng),
                    b.w + n.sample(&mut rng),
                    b.h + n.sample(&mut rng),
                );
                if moved.w > 0.0 && moved.h > 0.0 {
                    b = moved.clamp_to(f.width, f.height).unwrap_or(g.bbox);
                }
            }
            raw.push((b, rng.random_range(0.5..1.0), cfg.class_label.clone()));
        }
        let k = spurious.as_ref().map(|p| p.sample(&mut rng) as usize).unwrap_or(0);
        for _ in 0..k {
            let max_w = (f.width / 4).max(1);
            let max_h = (f.height / 4).max(1);
            let w = rng.random_range(max_w.min(8)..=max_w);
            let h = rng.random_range(max_h.min(8)..=max_h);
            let x = rng.random_range(0..=f.width - w);
            let y = rng.random_range(0..=f.height - h);
            let b = BBox::new(x as f64, y as f64, w as f64, h as f64);
            raw.push((b, rng.random_range(0.05..0.9), cfg.class_label.clone()));
        }
        out.extend(assign_ids(detector_id, &f.frame_id, raw));
    }
    Ok(out)
}
