//! Staged, resumable orchestration of the whole flow:
//!
//! ```text
//! ingest → sample → split → weak_detect → export ─┬→ strong_detect → qc_sc ─┐
//!                                      └→ qc_wc ──┼───────────────────────────┴→ report
//! ```
//!
//! Each stage commits its outputs to the store and records its status in a
//! [`RunManifest`] (itself a store record). A done stage is skipped unless
//! forced. The strong classifier is trained outside this tool: a config
//! without `[strong_detector]` stops after `export`.

mod config;
mod stages;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{error, info};

use crate::label_store::{Record, RecordKind, Store, StoreError};
use crate::util;

pub use config::{
    DetectorConfig, DetectorKind, ExportConfig, HarvestConfig, JudgeMode, Paths, PipelineConfig, QcConfig,
    SamplingConfig, SplitConfig, SyntheticConfig, CONFIG_VERSION, PATH_OVERRIDES,
};
pub use stages::auto_judge;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("stage {stage} needs {missing} to be done first")]
    Dependency { stage: Stage, missing: Stage },
    #[error("stage {stage} failed: {detail}")]
    Stage { stage: Stage, detail: String },
    #[error("storage: {0}")]
    Storage(String),
    /// The run cannot continue without an operator action.
    #[error("{0}")]
    Handoff(String),
}

impl PipelineError {
    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 10,
            Self::Dependency { .. } => 11,
            Self::Stage { .. } => 12,
            Self::Storage(_) => 13,
            Self::Handoff(_) => 20,
        }
    }
}

impl From<StoreError> for PipelineError {
    fn from(e: StoreError) -> Self {
        Self::Storage(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Sample,
    Split,
    WeakDetect,
    Export,
    StrongDetect,
    QcWc,
    QcSc,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Sample,
        Stage::Split,
        Stage::WeakDetect,
        Stage::Export,
        Stage::StrongDetect,
        Stage::QcWc,
        Stage::QcSc,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Sample => "sample",
            Stage::Split => "split",
            Stage::WeakDetect => "weak_detect",
            Stage::Export => "export",
            Stage::StrongDetect => "strong_detect",
            Stage::QcWc => "qc_wc",
            Stage::QcSc => "qc_sc",
            Stage::Report => "report",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Ingest => &[],
            Stage::Sample => &[Stage::Ingest],
            Stage::Split => &[Stage::Sample],
            Stage::WeakDetect => &[Stage::Split],
            Stage::Export => &[Stage::WeakDetect],
            Stage::StrongDetect => &[Stage::Export],
            Stage::QcWc => &[Stage::WeakDetect],
            Stage::QcSc => &[Stage::StrongDetect],
            Stage::Report => &[Stage::QcWc, Stage::QcSc],
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| format!("unknown stage {s:?}; expected one of {}", Stage::ALL.map(|s| s.name()).join(", ")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Running,
    Done,
    Failed,
    /// Waiting for annotators to finish a QC session.
    AwaitingReview,
}

impl fmt::Display for StageStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Pending => "pending",
            Self::Running => "running",
            Self::Done => "done",
            Self::Failed => "failed",
            Self::AwaitingReview => "awaiting_review",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    /// Store revision when the stage started.
    pub input_revision: Option<u64>,
    /// Store revision after the stage's last commit.
    pub output_revision: Option<u64>,
    pub seeds: BTreeMap<String, u64>,
    /// Stage-specific facts: counts, ids, relative output paths.
    pub outputs: BTreeMap<String, String>,
    pub diagnostics: Option<String>,
    pub started_at: Option<f64>,
    pub finished_at: Option<f64>,
    pub elapsed_secs: Option<f64>,
    /// How many times the stage has executed in this run.
    pub executions: u32,
}

impl StageRecord {
    fn pending(stage: Stage) -> Self {
        Self {
            stage,
            status: StageStatus::Pending,
            input_revision: None,
            output_revision: None,
            seeds: BTreeMap::new(),
            outputs: BTreeMap::new(),
            diagnostics: None,
            started_at: None,
            finished_at: None,
            elapsed_secs: None,
            executions: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub stages: Vec<StageRecord>,
}

impl RunManifest {
    pub fn new(run_id: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            stages: Stage::ALL.into_iter().map(StageRecord::pending).collect(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageRecord {
        self.stages.iter().find(|s| s.stage == stage).expect("every stage present")
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageRecord {
        self.stages.iter_mut().find(|s| s.stage == stage).expect("every stage present")
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.stage(stage).status == StageStatus::Done
    }

    /// Copy with wall-clock fields cleared, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let mut m = self.clone();
        for s in &mut m.stages {
            s.started_at = None;
            s.finished_at = None;
            s.elapsed_secs = None;
        }
        m
    }

    pub fn render(&self) -> String {
        let mut out = format!("run {}\n", self.run_id);
        for s in &self.stages {
            out.push_str(&format!(
                "  {:<14} {:<16} rev {:>5}",
                s.stage.name(),
                s.status.to_string(),
                s.output_revision.map(|r| r.to_string()).unwrap_or_else(|| "-".into())
            ));
            if let Some(d) = &s.diagnostics {
                out.push_str(&format!("  ({d})"));
            }
            out.push('\n');
        }
        out
    }
}

/// What `run_stage` did.
#[derive(Debug, Clone, PartialEq)]
pub enum StageOutcome {
    Executed,
    /// Already done; nothing changed.
    Skipped,
}

/// Manifests stored in `store`, by run id.
pub fn manifests(store: &Store) -> Vec<RunManifest> {
    store
        .query(Some(RecordKind::Manifest), |_| true)
        .into_iter()
        .filter_map(|e| match e.record {
            Record::Manifest(m) => Some(m),
            _ => None,
        })
        .collect()
}

pub struct Pipeline {
    config: PipelineConfig,
    store: Store,
}

impl Pipeline {
    /// Opens (creating if needed) the configured store, taking its writer
    /// lock for the lifetime of the pipeline.
    pub fn open(config: PipelineConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let store = Store::open(&config.paths.store)?;
        Ok(Self { config, store })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn manifest(&self) -> RunManifest {
        match self.store.get(RecordKind::Manifest, &self.config.run_id).map(|e| e.record) {
            Some(Record::Manifest(m)) => m,
            _ => RunManifest::new(self.config.run_id.clone()),
        }
    }

    fn save(&self, manifest: &RunManifest) -> Result<u64, PipelineError> {
        Ok(self.store.put_records(vec![Record::Manifest(manifest.clone())])?)
    }

    /// Runs one stage. Upstream stages must be done; a done stage is a no-op
    /// unless `force` is set.
    pub fn run_stage(&self, stage: Stage, force: bool) -> Result<StageOutcome, PipelineError> {
        let mut manifest = self.manifest();
        for up in stage.upstream() {
            if !manifest.is_done(*up) {
                return Err(PipelineError::Dependency { stage, missing: *up });
            }
        }
        if manifest.is_done(stage) && !force {
            info!(%stage, "stage already done");
            return Ok(StageOutcome::Skipped);
        }
        let started = Instant::now();
        {
            let rec = manifest.stage_mut(stage);
            rec.status = StageStatus::Running;
            rec.input_revision = Some(self.store.revision());
            rec.started_at = Some(util::unix_now_f64());
            rec.finished_at = None;
            rec.elapsed_secs = None;
            rec.diagnostics = None;
            rec.executions += 1;
        }
        self.save(&manifest)?;
        info!(%stage, "stage started");

        let result = stages::execute(self, stage);
        let rec = manifest.stage_mut(stage);
        rec.finished_at = Some(util::unix_now_f64());
        rec.elapsed_secs = Some(started.elapsed().as_secs_f64());
        match result {
            Ok(facts) => {
                rec.status = StageStatus::Done;
                rec.seeds = facts.seeds;
                rec.outputs = facts.outputs;
                rec.diagnostics = facts.note;
                rec.output_revision = Some(self.store.revision());
                self.save(&manifest)?;
                info!(%stage, "stage done");
                Ok(StageOutcome::Executed)
            }
            Err(e) => {
                rec.status = match e {
                    PipelineError::Handoff(_) => StageStatus::AwaitingReview,
                    _ => StageStatus::Failed,
                };
                rec.diagnostics = Some(e.to_string());
                rec.output_revision = Some(self.store.revision());
                // keep the original error even if recording it fails
                if let Err(save_err) = self.save(&manifest) {
                    error!(%stage, error = %save_err, "could not record stage failure");
                }
                error!(%stage, error = %e, "stage did not complete");
                Err(e)
            }
        }
    }

    /// Runs every stage in order, skipping done ones. Without a strong
    /// detector the run stops after `export` and `qc_wc` with a handoff
    /// message.
    pub fn run_all(&self) -> Result<RunManifest, PipelineError> {
        let needs_strong = [Stage::StrongDetect, Stage::QcSc, Stage::Report];
        for stage in Stage::ALL {
            if self.config.strong_detector.is_none() && needs_strong.contains(&stage) {
                continue;
            }
            self.run_stage(stage, false)?;
        }
        if self.config.strong_detector.is_none() {
            let export = self.manifest().stage(Stage::Export).outputs.get("path").cloned().unwrap_or_default();
            return Err(PipelineError::Handoff(format!(
                "pseudo-labels exported to {}; fine-tune a strong classifier on them, add a \
                 [strong_detector] section to the config, then run the pipeline again to resume at strong_detect",
                self.config.paths.exports.join(export).display()
            )));
        }
        Ok(self.manifest())
    }
}

/// Facts a stage reports for the manifest.
#[derive(Debug, Default)]
struct StageFacts {
    seeds: BTreeMap<String, u64>,
    outputs: BTreeMap<String, String>,
    note: Option<String>,
}
