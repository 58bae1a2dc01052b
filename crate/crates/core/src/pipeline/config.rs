//! Pipeline configuration document (TOML, `version = 1`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::detector_io::{CommandSpec, NoisyOracleConfig, SceneSpec, SyntheticWorld};
use crate::ingest::{CameraSource, HarvestPolicy};
use crate::label_store::ExportFormat;
use crate::review::SessionScope;
use crate::sampler::{SplitMode, SplitSize, SplitSpec};

pub const CONFIG_VERSION: u32 = 1;

/// Environment variables that may replace configured paths.
pub const PATH_OVERRIDES: [(&str, PathKind); 4] = [
    ("WEAKLABEL_STORE", PathKind::Store),
    ("WEAKLABEL_DATA", PathKind::Data),
    ("WEAKLABEL_EXPORTS", PathKind::Exports),
    ("WEAKLABEL_LOGS", PathKind::Logs),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PathKind {
    Store,
    Data,
    Exports,
    Logs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    #[serde(default = "default_run_id")]
    pub run_id: String,
    pub paths: Paths,
    pub cameras: Vec<CameraSource>,
    pub harvest: HarvestConfig,
    pub sampling: SamplingConfig,
    pub split: SplitConfig,
    pub weak_detector: DetectorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong_detector: Option<DetectorConfig>,
    pub qc: QcConfig,
    #[serde(default)]
    pub export: ExportConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

fn default_run_id() -> String {
    "run".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub store: PathBuf,
    /// Harvested segments and sampled frames.
    pub data: PathBuf,
    pub exports: PathBuf,
    pub logs: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarvestConfig {
    /// Seconds of video to collect per camera.
    pub duration: f64,
    #[serde(flatten)]
    pub policy: HarvestPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingConfig {
    /// Keep every `rate`-th frame.
    pub rate: u64,
    #[serde(default)]
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_count: Option<usize>,
    pub seed: u64,
    #[serde(default)]
    pub mode: SplitMode,
    #[serde(default)]
    pub stratify_by_camera: bool,
}

impl SplitConfig {
    pub fn spec(&self) -> Result<SplitSpec, PipelineError> {
        let size = match (self.test_fraction, self.test_count) {
            (Some(f), None) => SplitSize::Fraction(f),
            (None, Some(n)) => SplitSize::Count(n),
            _ => return Err(PipelineError::Config("split needs exactly one of test_fraction, test_count".into())),
        };
        Ok(SplitSpec {
            size,
            seed: self.seed,
            mode: self.mode,
            stratify_by_camera: self.stratify_by_camera,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub detector_id: String,
    #[serde(flatten)]
    pub kind: DetectorKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorKind {
    /// The parts-model detector; `model` is `"toy"` or a model file path.
    Builtin {
        model: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        threshold: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        nms_iou: Option<f64>,
    },
    External(CommandSpec),
    /// Simulated detector over the synthetic world's ground truth.
    NoisyOracle(NoisyOracleConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMode {
    /// Verdicts from IoU matching against synthetic ground truth.
    Auto,
    /// Sessions wait for annotators on the review service.
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QcConfig {
    pub pilot_p_hat: f64,
    pub epsilon: f64,
    pub confidence: f64,
    pub seed: u64,
    #[serde(default = "default_scope")]
    pub scope: SessionScope,
    #[serde(default = "default_judge")]
    pub judge: JudgeMode,
    #[serde(default = "default_iou")]
    pub iou_threshold: f64,
}

fn default_scope() -> SessionScope {
    SessionScope::Frames
}

fn default_judge() -> JudgeMode {
    JudgeMode::Manual
}

fn default_iou() -> f64 {
    crate::detector_io::DEFAULT_IOU_THRESHOLD
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportConfig {
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default)]
    pub include_fn_marks: bool,
}

fn default_format() -> String {
    "voc".into()
}

impl Default for ExportConfig {
    fn default() -> Self {
        Self {
            format: default_format(),
            include_fn_marks: false,
        }
    }
}

/// Synthetic cameras: segment fixtures are rendered into each camera's
/// directory before harvesting, and ground truth is available for the
/// noisy oracle and automatic judging.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub world: SyntheticWorld,
    pub segments: usize,
    pub frames_per_segment: u64,
    pub fps: f64,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, PipelineError> {
        let c: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Reads a config file. Relative paths, including directory camera
    /// sources, resolve against the file's directory; path overrides from the
    /// environment are applied last.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut c = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        c.resolve(&base);
        c.apply_env(|k| std::env::var(k).ok());
        Ok(c)
    }

    pub fn resolve(&mut self, base: &Path) {
        for p in [
            &mut self.paths.store,
            &mut self.paths.data,
            &mut self.paths.exports,
            &mut self.paths.logs,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for cam in &mut self.cameras {
            if !cam.url.contains("://") && Path::new(&cam.url).is_relative() {
                cam.url = base.join(&cam.url).to_string_lossy().into_owned();
            }
        }
    }

    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) {
        for (var, kind) in PATH_OVERRIDES {
            if let Some(v) = get(var).filter(|v| !v.is_empty()) {
                let slot = match kind {
                    PathKind::Store => &mut self.paths.store,
                    PathKind::Data => &mut self.paths.data,
                    PathKind::Exports => &mut self.paths.exports,
                    PathKind::Logs => &mut self.paths.logs,
                };
                *slot = PathBuf::from(v);
            }
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("unsupported config version {} (expected {CONFIG_VERSION})", self.version));
        }
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return bad(format!("invalid run_id {:?}", self.run_id));
        }
        if self.cameras.is_empty() {
            return bad("at least one camera is required".into());
        }
        for c in &self.cameras {
            c.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        }
        self.harvest.policy.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
        if !(self.harvest.duration.is_finite() && self.harvest.duration > 0.0) {
            return bad("harvest.duration must be > 0".into());
        }
        if self.sampling.rate == 0 || self.sampling.offset >= self.sampling.rate {
            return bad("sampling needs rate >= 1 and offset < rate".into());
        }
        self.split.spec()?;
        crate::qc_stats::required_sample_size(self.qc.pilot_p_hat, self.qc.epsilon, self.qc.confidence)
            .map_err(|e| PipelineError::Config(format!("qc: {e}")))?;
        if !(self.qc.iou_threshold > 0.0 && self.qc.iou_threshold <= 1.0) {
            return bad("qc.iou_threshold must lie in (0, 1]".into());
        }
        ExportFormat::parse(&self.export.format).map_err(|e| PipelineError::Config(e.to_string()))?;
        let mut ids = vec![&self.weak_detector];
        ids.extend(self.strong_detector.as_ref());
        for d in &ids {
            if d.detector_id.is_empty() || d.detector_id.contains(['/', ':']) {
                return bad(format!("invalid detector_id {:?}", d.detector_id));
            }
            if let DetectorKind::NoisyOracle(o) = &d.kind {
                o.validate().map_err(|e| PipelineError::Config(e.to_string()))?;
                if self.synthetic.is_none() {
                    return bad(format!("detector {:?} is a noisy oracle but no [synthetic] world is configured", d.detector_id));
                }
            }
        }
        if let Some(s) = &self.strong_detector {
            if s.detector_id == self.weak_detector.detector_id {
                return bad("weak and strong detectors need distinct detector_id values".into());
            }
        }
        if self.qc.judge == JudgeMode::Auto && self.synthetic.is_none() {
            return bad("qc.judge = \"auto\" needs a [synthetic] world for ground truth".into());
        }
        Ok(())
    }

    /// A self-contained configuration over synthetic cameras: a toy
    /// parts-model weak detector at a high threshold, a noisy-oracle strong
    /// detector, and automatic judging. All paths are relative.
    pub fn synthetic() -> Self {
        let cameras = ["cam-a", "cam-b"]
            .iter()
            .map(|id| CameraSource::new(*id, format!("origin/{id}")))
            .collect();
        Self {
            version: CONFIG_VERSION,
            run_id: "synthetic".into(),
            paths: Paths {
                store: "store".into(),
                data: "data".into(),
                exports: "exports".into(),
                logs: "logs".into(),
            },
            cameras,
            harvest: HarvestConfig {
                duration: 80.0,
                policy: HarvestPolicy {
                    max_retries: 3,
                    backoff_base: 0.05,
                    backoff_cap: 0.5,
                    jitter_seed: 1,
                    ..HarvestPolicy::default()
                },
            },
            sampling: SamplingConfig { rate: 2, offset: 0 },
            split: SplitConfig {
                test_fraction: Some(0.5),
                test_count: None,
                seed: 7,
                mode: SplitMode::Random,
                stratify_by_camera: true,
            },
            weak_detector: DetectorConfig {
                detector_id: "wc-toy".into(),
                kind: DetectorKind::Builtin {
                    model: "toy".into(),
                    threshold: Some(1.3),
                    nms_iou: None,
                },
            },
            strong_detector: Some(DetectorConfig {
                detector_id: "sc-oracle".into(),
                kind: DetectorKind::NoisyOracle(NoisyOracleConfig::new(0.15, 1.0, 1.0, 99)),
            }),
            qc: QcConfig {
                pilot_p_hat: 0.8,
                epsilon: 0.1,
                confidence: 0.95,
                seed: 11,
                scope: SessionScope::Frames,
                judge: JudgeMode::Auto,
                iou_threshold: default_iou(),
            },
            export: ExportConfig::default(),
            synthetic: Some(SyntheticConfig {
                world: SyntheticWorld {
                    seed: 2024,
                    scene: SceneSpec {
                        clutter: 0.3,
                        ..SceneSpec::new(96, 96, 0, 16, 16)
                    },
                    objects_min: 2,
                    objects_max: 5,
                },
                segments: 8,
                frames_per_segment: 20,
                fps: 2.0,
            }),
        }
    }
}
