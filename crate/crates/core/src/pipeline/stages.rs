//! Stage bodies.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use tracing::warn;

use super::{DetectorConfig, DetectorKind, JudgeMode, Pipeline, PipelineError, Stage, StageFacts};
use crate::bbox::BBox;
use crate::detector_io::{
    self, match_detections, noisy_oracle_detect, run_external_detector, BuiltinDetector, Detection, FrameSize,
    SyntheticWorld,
};
use crate::ingest::source::SourceLocator;
use crate::ingest::{HarvestOutcome, Harvester, VideoSegment};
use crate::label_store::{export_finetune_dataset, ExportFormat, ExportOptions, Record, RecordKind, ReportRecord};
use crate::parts_model::PartsModel;
use crate::qc_stats::{self, format_percent};
use crate::review::{Judgement, Progress, ReviewDesk, ReviewError, SessionRequest, SessionState};
use crate::sampler::{self, FrameRecord, Partition};

pub(super) fn execute(p: &Pipeline, stage: Stage) -> Result<StageFacts, PipelineError> {
    let fail = |detail: String| PipelineError::Stage { stage, detail };
    match stage {
        Stage::Ingest => ingest(p, &fail),
        Stage::Sample => sample(p, &fail),
        Stage::Split => split(p, &fail),
        Stage::WeakDetect => {
            let mut frames = p.store.partition_frames(Partition::Train);
            frames.extend(p.store.partition_frames(Partition::Test));
            detect(p, &p.config.weak_detector, &frames, &fail)
        }
        Stage::Export => export(p, &fail),
        Stage::StrongDetect => {
            let Some(strong) = &p.config.strong_detector else {
                return Err(PipelineError::Handoff(
                    "no [strong_detector] configured; fine-tune one on the exported pseudo-labels first".into(),
                ));
            };
            let frames = p.store.partition_frames(Partition::Test);
            detect(p, strong, &frames, &fail)
        }
        Stage::QcWc => qc(p, stage, &p.config.weak_detector.detector_id, &fail),
        Stage::QcSc => {
            let Some(strong) = &p.config.strong_detector else {
                return Err(fail("no [strong_detector] configured".into()));
            };
            qc(p, stage, &strong.detector_id, &fail)
        }
        Stage::Report => report(p, &fail),
    }
}

type Fail<'a> = dyn Fn(String) -> PipelineError + 'a;

fn segments_of(p: &Pipeline, camera_id: &str) -> Vec<VideoSegment> {
    let mut v: Vec<VideoSegment> = p
        .store
        .query(Some(RecordKind::Segment), |r| matches!(r, Record::Segment(s) if s.camera_id == camera_id))
        .into_iter()
        .filter_map(|e| match e.record {
            Record::Segment(s) => Some(s),
            _ => None,
        })
        .collect();
    v.sort_by(|a, b| a.segment_id.cmp(&b.segment_id));
    v
}

fn ingest(p: &Pipeline, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let cfg = &p.config;
    let mut facts = StageFacts::default();
    if let Some(syn) = &cfg.synthetic {
        for cam in &cfg.cameras {
            let dir = match cam.locator() {
                Ok(SourceLocator::Directory(d)) => d,
                _ => return Err(PipelineError::Config(format!("synthetic camera {:?} needs a directory source", cam.camera_id))),
            };
            let populated = fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false);
            if !populated {
                detector_io::write_synthetic_segments(&syn.world, &dir, &cam.camera_id, syn.segments, syn.frames_per_segment, syn.fps)
                    .map_err(|e| fail(format!("rendering synthetic segments for {}: {e}", cam.camera_id)))?;
            }
        }
        facts.seeds.insert("synthetic_world".into(), syn.world.seed);
    }
    let cameras: Vec<Record> = cfg.cameras.iter().cloned().map(Record::Camera).collect();
    p.store.put_new(cameras).map_err(|e| fail(format!("registering cameras: {e}")))?;

    let harvester = Harvester::new(&p.store, cfg.paths.data.join("segments"), cfg.harvest.policy.clone())
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let mut notes = Vec::new();
    for cam in &cfg.cameras {
        let have: f64 = segments_of(p, &cam.camera_id).iter().map(|s| s.duration).sum();
        let remaining = cfg.harvest.duration - have;
        if remaining <= 1e-9 {
            continue;
        }
        let report = harvester.harvest(cam, remaining).map_err(|e| fail(format!("{}: {e}", cam.camera_id)))?;
        match report.outcome {
            HarvestOutcome::Complete => {}
            HarvestOutcome::SourceExhausted | HarvestOutcome::BudgetExhausted if have + report.total_duration() > 0.0 => {
                notes.push(format!("{}: source ended after {:.1}s", cam.camera_id, have + report.total_duration()));
            }
            HarvestOutcome::SourceExhausted | HarvestOutcome::BudgetExhausted => {
                return Err(fail(format!("{}: no segments available", cam.camera_id)))
            }
            HarvestOutcome::RetriesExhausted(f) => {
                return Err(fail(format!(
                    "{}: {} failure on {} after {} attempt(s): {}",
                    cam.camera_id, f.kind, f.request, f.attempt, f.detail
                )))
            }
            HarvestOutcome::StorageFull(m) => return Err(PipelineError::Storage(format!("{}: {m}", cam.camera_id))),
        }
    }
    let all: Vec<VideoSegment> = cfg.cameras.iter().flat_map(|c| segments_of(p, &c.camera_id)).collect();
    facts.outputs.insert("segments".into(), all.len().to_string());
    facts.outputs.insert("seconds".into(), format!("{:.1}", all.iter().map(|s| s.duration).sum::<f64>()));
    facts.seeds.insert("backoff_jitter".into(), cfg.harvest.policy.jitter_seed);
    if !notes.is_empty() {
        facts.note = Some(notes.join("; "));
    }
    Ok(facts)
}

fn sample(p: &Pipeline, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let cfg = &p.config;
    let segments: Vec<VideoSegment> = cfg.cameras.iter().flat_map(|c| segments_of(p, &c.camera_id)).collect();
    let outcome = sampler::sample_frames(&segments, cfg.sampling.rate, cfg.sampling.offset, &cfg.paths.data.join("frames"))
        .map_err(|e| fail(e.to_string()))?;
    let n = outcome.frames.len();
    p.store.put_new(outcome.frames.into_iter().map(Record::Frame).collect())?;
    let mut facts = StageFacts::default();
    facts.outputs.insert("frames".into(), n.to_string());
    facts.outputs.insert("skipped_segments".into(), outcome.skipped.len().to_string());
    if !outcome.skipped.is_empty() {
        facts.note = Some(
            outcome
                .skipped
                .iter()
                .map(|s| format!("{}: {}", s.segment_id, s.reason))
                .collect::<Vec<_>>()
                .join("; "),
        );
    }
    Ok(facts)
}

fn split(p: &Pipeline, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let cfg = &p.config;
    let cams: BTreeSet<&str> = cfg.cameras.iter().map(|c| c.camera_id.as_str()).collect();
    let frames: Vec<FrameRecord> = p.store.frames().into_iter().filter(|f| cams.contains(f.camera_id.as_str())).collect();
    let spec = cfg.split.spec()?;
    let res = sampler::split(&frames, &spec).map_err(|e| fail(e.to_string()))?;
    let parts: HashMap<String, Partition> =
        res.assignments.iter().map(|a| (a.frame_id.clone(), a.partition)).collect();
    p.store.put_new(res.assignments.into_iter().map(Record::Split).collect())?;
    fs::create_dir_all(&cfg.paths.data)?;
    sampler::write_frame_manifest(&cfg.paths.data.join("frames.tsv"), &frames, &parts).map_err(|e| fail(e.to_string()))?;
    let mut facts = StageFacts::default();
    facts.seeds.insert("split".into(), cfg.split.seed);
    facts.outputs.insert("train".into(), res.train.len().to_string());
    facts.outputs.insert("test".into(), res.test.len().to_string());
    Ok(facts)
}

impl From<std::io::Error> for PipelineError {
    fn from(e: std::io::Error) -> Self {
        PipelineError::Storage(e.to_string())
    }
}

fn world(p: &Pipeline) -> Result<&SyntheticWorld, PipelineError> {
    p.config
        .synthetic
        .as_ref()
        .map(|s| &s.world)
        .ok_or_else(|| PipelineError::Config("a [synthetic] world is required here".into()))
}

fn builtin_model(model: &str, threshold: Option<f64>) -> Result<PartsModel, PipelineError> {
    let mut m = if model == "toy" {
        PartsModel::toy_default()
    } else {
        PartsModel::load(Path::new(model)).map_err(|e| PipelineError::Config(format!("model {model}: {e}")))?
    };
    if let Some(t) = threshold {
        m.threshold = t;
    }
    Ok(m)
}

fn run_detector(p: &Pipeline, dc: &DetectorConfig, frames: &[FrameRecord], fail: &Fail) -> Result<(Vec<Detection>, Option<String>), PipelineError> {
    let id = &dc.detector_id;
    match &dc.kind {
        DetectorKind::Builtin { model, threshold, nms_iou } => {
            let mut det = BuiltinDetector::new(builtin_model(model, *threshold)?);
            if let Some(n) = nms_iou {
                det.nms_iou = *n;
            }
            let mut out = Vec::new();
            for f in frames {
                out.extend(det.detect_frame(id, f).map_err(|e| fail(format!("{}: {e}", f.frame_id)))?);
            }
            Ok((out, None))
        }
        DetectorKind::External(spec) => {
            let run = run_external_detector(spec, frames, id).map_err(|e| fail(e.to_string()))?;
            if !run.failed_frames.is_empty() {
                return Err(fail(format!(
                    "{} frame(s) timed out, first {:?}",
                    run.failed_frames.len(),
                    run.failed_frames[0]
                )));
            }
            let note = (!run.line_errors.is_empty()).then(|| format!("{} malformed response line(s) skipped", run.line_errors.len()));
            Ok((run.detections, note))
        }
        DetectorKind::NoisyOracle(cfg) => {
            let w = world(p)?;
            let mut gt = Vec::new();
            for f in frames {
                gt.extend(w.ground_truth(f).map_err(|e| fail(e.to_string()))?);
            }
            let sizes: Vec<FrameSize> = frames.iter().map(FrameSize::from).collect();
            let d = noisy_oracle_detect(&sizes, &gt, cfg, id).map_err(|e| fail(e.to_string()))?;
            Ok((d, None))
        }
    }
}

fn detect(p: &Pipeline, dc: &DetectorConfig, frames: &[FrameRecord], fail: &Fail) -> Result<StageFacts, PipelineError> {
    let (dets, note) = run_detector(p, dc, frames, fail)?;
    let n = dets.len();
    p.store.put_new(dets.into_iter().map(Record::Detection).collect())?;
    let mut facts = StageFacts::default();
    facts.outputs.insert("detector_id".into(), dc.detector_id.clone());
    facts.outputs.insert("frames".into(), frames.len().to_string());
    facts.outputs.insert("detections".into(), n.to_string());
    if let DetectorKind::NoisyOracle(c) = &dc.kind {
        facts.seeds.insert("oracle".into(), c.seed);
    }
    facts.note = note;
    Ok(facts)
}

fn export_rel(p: &Pipeline) -> PathBuf {
    Path::new(&p.config.run_id).join(format!("{}-train", p.config.weak_detector.detector_id))
}

fn export(p: &Pipeline, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let cfg = &p.config;
    let rel = export_rel(p);
    let out_dir = cfg.paths.exports.join(&rel);
    if out_dir.exists() {
        fs::remove_dir_all(&out_dir)?;
    }
    let opts = ExportOptions {
        partition: Partition::Train,
        detector_id: cfg.weak_detector.detector_id.clone(),
        format: ExportFormat::parse(&cfg.export.format).map_err(|e| PipelineError::Config(e.to_string()))?,
        out_dir,
        include_fn_marks: cfg.export.include_fn_marks,
    };
    let m = export_finetune_dataset(&p.store, &opts).map_err(|e| fail(e.to_string()))?;
    let mut facts = StageFacts::default();
    facts.outputs.insert("path".into(), rel.to_string_lossy().into_owned());
    facts.outputs.insert("export_id".into(), m.export_id);
    facts.outputs.insert("frames".into(), m.frame_count.to_string());
    facts.outputs.insert("boxes".into(), m.box_count.to_string());
    if m.box_count == 0 {
        facts.note = Some("export contains no boxes".into());
    }
    Ok(facts)
}

fn session_id(p: &Pipeline, stage: Stage) -> String {
    format!("{}-{}", p.config.run_id, stage.name())
}

fn qc(p: &Pipeline, stage: Stage, detector_id: &str, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let q = &p.config.qc;
    let desk = ReviewDesk::new(p.store.clone());
    let sid = session_id(p, stage);
    if p.store.get(RecordKind::Session, &sid).is_none() {
        let plan = qc_stats::required_sample_size(q.pilot_p_hat, q.epsilon, q.confidence)
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        desk.open(SessionRequest {
            plan,
            detector_id: detector_id.to_string(),
            seed: q.seed,
            scope: q.scope,
            session_id: Some(sid.clone()),
        })
        .map_err(|e| fail(e.to_string()))?;
    }
    if q.judge == JudgeMode::Auto {
        auto_judge(&desk, &sid, world(p)?, q.iou_threshold).map_err(|e| fail(e.to_string()))?;
    }
    let progress = desk.progress(&sid).map_err(|e| fail(e.to_string()))?;
    if progress.state != SessionState::Complete {
        return Err(PipelineError::Handoff(format!(
            "QC session {sid} awaits review ({} of {} judged); serve it with `weaklabel serve --store {}` and rerun the pipeline when done",
            progress.judged,
            progress.sample_size,
            p.config.paths.store.display()
        )));
    }
    let mut facts = StageFacts::default();
    facts.seeds.insert("qc_sample".into(), q.seed);
    facts.outputs.insert("session_id".into(), sid);
    facts.outputs.insert("required_n".into(), progress.required_n.to_string());
    facts.outputs.insert("judged".into(), progress.judged.to_string());
    facts.outputs.insert("tp".into(), progress.tp.to_string());
    facts.outputs.insert("fp".into(), progress.fp.to_string());
    facts.outputs.insert(
        "fn".into(),
        progress.fn_.map(|f| f.to_string()).unwrap_or_else(|| "-".into()),
    );
    facts.outputs.insert("frames".into(), format!("{}/{}", progress.frames_visited, progress.frames_total));
    Ok(facts)
}

/// Judges a session against synthetic ground truth: every sampled detection
/// gets a TP/FP verdict from IoU matching on its frame, and unmatched ground
/// truth on each session frame becomes FN marks.
pub fn auto_judge(
    desk: &ReviewDesk,
    session_id: &str,
    world: &SyntheticWorld,
    iou_threshold: f64,
) -> Result<Progress, ReviewError> {
    let s = desk.session(session_id)?;
    let store = desk.store();
    let mut by_frame: BTreeMap<String, Vec<Detection>> = BTreeMap::new();
    for d in store.detections(&s.record.detector_id) {
        by_frame.entry(d.frame_id.clone()).or_default().push(d);
    }
    let mut judged: HashMap<String, Judgement> = HashMap::new();
    let mut misses: Vec<(String, Vec<BBox>)> = Vec::new();
    for frame_id in &s.record.frames {
        let frame = store.frame(frame_id).ok_or_else(|| ReviewError::NotFound {
            what: "frame",
            id: frame_id.clone(),
        })?;
        let gt = world.ground_truth(&frame).map_err(|e| ReviewError::Invalid(e.to_string()))?;
        let dets = by_frame.remove(frame_id).unwrap_or_default();
        let m = match_detections(&dets, &gt, iou_threshold).map_err(|e| ReviewError::Invalid(e.to_string()))?;
        for d in &dets {
            let j = if m.is_tp(&d.detection_id) { Judgement::TP } else { Judgement::FP };
            judged.insert(d.detection_id.clone(), j);
        }
        misses.push((frame_id.clone(), m.missed(gt.len()).into_iter().map(|i| gt[i].bbox).collect()));
    }
    let items: Vec<(String, Judgement)> = s.record.sample[s.cursor..]
        .iter()
        .map(|id| {
            judged
                .get(id)
                .map(|j| (id.clone(), *j))
                .ok_or_else(|| ReviewError::Invalid(format!("sampled detection {id:?} lies outside the session frames")))
        })
        .collect::<Result<_, _>>()?;
    if !items.is_empty() {
        desk.submit_verdicts(session_id, &items, "auto")?;
    }
    for (frame_id, boxes) in misses {
        if !s.visited.contains(&frame_id) {
            desk.submit_fn_marks(session_id, &frame_id, &boxes, "auto")?;
        }
    }
    if s.state == SessionState::Complete && items.is_empty() && s.visited.len() < s.record.frames.len() {
        warn!(session = session_id, "session was complete before FN marking finished");
    }
    desk.progress(session_id)
}

fn report(p: &Pipeline, fail: &Fail) -> Result<StageFacts, PipelineError> {
    let desk = ReviewDesk::new(p.store.clone());
    let frozen = |stage: Stage| {
        let sid = session_id(p, stage);
        desk.frozen(&sid)
            .map(|q| q.counts)
            .ok_or_else(|| fail(format!("session {sid} has no frozen counts")))
    };
    let wc = frozen(Stage::QcWc)?;
    let sc = frozen(Stage::QcSc)?;
    let report = qc_stats::build_report(&wc, &sc, p.config.qc.confidence).map_err(|e| fail(e.to_string()))?;
    p.store.put_records(vec![Record::Report(ReportRecord {
        run_id: p.config.run_id.clone(),
        report: report.clone(),
    })])?;
    let dir = p.config.paths.exports.join(&p.config.run_id);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("report.txt"), report.to_text())?;
    fs::write(dir.join("report.json"), report.to_json() + "\n")?;
    let mut facts = StageFacts::default();
    facts.outputs.insert("path".into(), Path::new(&p.config.run_id).join("report.txt").to_string_lossy().into_owned());
    facts.outputs.insert("rc_recall".into(), format_percent(report.rc_recall, true));
    facts.outputs.insert("rc_precision".into(), format_percent(report.rc_precision, true));
    facts.outputs.insert("population_flag".into(), report.population_flag.to_string());
    Ok(facts)
}
