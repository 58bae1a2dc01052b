use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use weaklabel_core::detector_io::{run_external_detector, BuiltinDetector, CommandSpec, Detection};
use weaklabel_core::ingest::{
    probe, register_camera, CameraRegistry, CameraSource, GeoPoint, HarvestOutcome, HarvestPolicy, Harvester,
    StreamStatus, VideoSegment,
};
use weaklabel_core::label_store::{export_finetune_dataset, ExportFormat, ExportOptions, Record, RecordKind, Store};
use weaklabel_core::parts_model::PartsModel;
use weaklabel_core::pipeline::{self, Pipeline, PipelineConfig, PipelineError, Stage};
use weaklabel_core::qc_stats::{self, QcCounts, QcPlan, ReferenceFigures};
use weaklabel_core::review::{ReviewDesk, SessionRequest, SessionScope};
use weaklabel_core::sampler::{self, FrameRecord, Partition, SplitMode, SplitSize, SplitSpec};

use crate::{
    CameraCmd, Command, DetectArgs, ExportArgs, HarvestArgs, PartitionArg, PipelineCmd, PlanArgs, QcCmd, SampleArgs,
    ServeArgs, SplitArgs,
};

type Result<T = ()> = std::result::Result<T, PipelineError>;

fn config<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Config(e.to_string())
}

fn failed<E: std::fmt::Display>(stage: Stage) -> impl Fn(E) -> PipelineError {
    move |e| PipelineError::Stage {
        stage,
        detail: e.to_string(),
    }
}

fn storage<E: std::fmt::Display>(e: E) -> PipelineError {
    PipelineError::Storage(e.to_string())
}

fn open_store(dir: &Path) -> Result<Store> {
    Ok(Store::open(dir)?)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(storage)
}

pub fn dispatch(cmd: Command) -> Result {
    match cmd {
        Command::Camera(c) => camera(c),
        Command::Harvest(a) => harvest(a),
        Command::Sample(a) => sample(a),
        Command::Split(a) => split(a),
        Command::Detect(a) => detect(a),
        Command::Export(a) => export(a),
        Command::Qc(c) => qc(c),
        Command::Pipeline(c) => pipeline_cmd(c),
        Command::Serve(a) => serve(a),
    }
}

fn camera(cmd: CameraCmd) -> Result {
    match cmd {
        CameraCmd::Add {
            store,
            id,
            url,
            label,
            lat,
            lon,
        } => {
            let store = open_store(&store.store)?;
            let url = if url.contains("://") { url } else { absolute(Path::new(&url))?.to_string_lossy().into_owned() };
            let mut source = CameraSource::new(id, url);
            if let Some(l) = label {
                source.label = l;
            }
            if let (Some(lat), Some(lon)) = (lat, lon) {
                source.location = Some(GeoPoint { lat, lon });
            }
            let mut registry = CameraRegistry::from_store(&store);
            let id = register_camera(&mut registry, source, Some(&store)).map_err(config)?;
            println!("registered {id}");
        }
        CameraCmd::List { store } => {
            let store = open_store(&store.store)?;
            for c in CameraRegistry::from_store(&store).iter() {
                println!("{}\t{}\t{}", c.camera_id, c.url, c.label);
            }
        }
        CameraCmd::Probe { store, id } => {
            let store = open_store(&store.store)?;
            let registry = CameraRegistry::from_store(&store);
            let source = registry.get(&id).ok_or_else(|| config(format!("camera {id:?} is not registered")))?;
            match probe(source) {
                StreamStatus::Reachable => println!("{id}\treachable"),
                StreamStatus::Unreachable(kind) => println!("{id}\tunreachable ({kind})"),
            }
        }
    }
    Ok(())
}

fn harvest(a: HarvestArgs) -> Result {
    let store = open_store(&a.store.store)?;
    let registry = CameraRegistry::from_store(&store);
    let source = registry
        .get(&a.camera)
        .ok_or_else(|| config(format!("camera {:?} is not registered (see `weaklabel camera add`)", a.camera)))?;
    let policy = HarvestPolicy {
        max_retries: a.retries,
        backoff_base: a.backoff_base,
        backoff_cap: a.backoff_cap,
        segment_target: a.segment_target,
        total_budget: a.budget,
        request_timeout: a.request_timeout,
        ..HarvestPolicy::default()
    };
    let harvester = Harvester::new(&store, absolute(&a.out)?, policy).map_err(config)?;
    let report = harvester.harvest(source, a.duration).map_err(failed(Stage::Ingest))?;
    println!(
        "{}: {} segment(s), {:.1} s, {} attempt(s), {} failure(s)",
        report.camera_id,
        report.segments.len(),
        report.total_duration(),
        report.attempts,
        report.failures.len()
    );
    for f in &report.failures {
        println!("  {} attempt {} {}: {}", f.kind, f.attempt, f.request, f.detail);
    }
    match report.outcome {
        HarvestOutcome::Complete => Ok(()),
        HarvestOutcome::SourceExhausted => {
            println!("source ran out before the requested duration");
            Ok(())
        }
        HarvestOutcome::BudgetExhausted => {
            println!("time budget ran out before the requested duration");
            Ok(())
        }
        HarvestOutcome::RetriesExhausted(f) => Err(PipelineError::Stage {
            stage: Stage::Ingest,
            detail: format!("retries exhausted on {}: {} ({})", f.request, f.detail, f.kind),
        }),
        HarvestOutcome::StorageFull(detail) => Err(PipelineError::Storage(detail)),
    }
}

fn segments(store: &Store, cameras: &[String]) -> Vec<VideoSegment> {
    let wanted: BTreeSet<&str> = cameras.iter().map(String::as_str).collect();
    let mut v: Vec<VideoSegment> = store
        .query(Some(RecordKind::Segment), |_| true)
        .into_iter()
        .filter_map(|e| match e.record {
            Record::Segment(s) if wanted.is_empty() || wanted.contains(s.camera_id.as_str()) => Some(s),
            _ => None,
        })
        .collect();
    v.sort_by(|a, b| (&a.camera_id, &a.segment_id).cmp(&(&b.camera_id, &b.segment_id)));
    v
}

fn sample(a: SampleArgs) -> Result {
    let store = open_store(&a.store.store)?;
    let segs = segments(&store, &a.camera);
    if segs.is_empty() {
        return Err(PipelineError::Dependency {
            stage: Stage::Sample,
            missing: Stage::Ingest,
        });
    }
    let outcome =
        sampler::sample_frames(&segs, a.rate, a.offset, &absolute(&a.frames_dir)?).map_err(failed(Stage::Sample))?;
    for s in &outcome.skipped {
        eprintln!("skipped {}: {}", s.segment_id, s.reason);
    }
    let n = outcome.frames.len();
    store.put_new(outcome.frames.into_iter().map(Record::Frame).collect())?;
    println!("{n} frame(s) sampled from {} segment(s)", segs.len());
    Ok(())
}

fn split(a: SplitArgs) -> Result {
    let store = open_store(&a.store.store)?;
    let frames = store.frames();
    if frames.is_empty() {
        return Err(PipelineError::Dependency {
            stage: Stage::Split,
            missing: Stage::Sample,
        });
    }
    let size = match (a.test_fraction, a.test_count) {
        (Some(f), _) => SplitSize::Fraction(f),
        (None, Some(k)) => SplitSize::Count(k),
        (None, None) => unreachable!("clap requires one of the two"),
    };
    let spec = SplitSpec {
        size,
        seed: a.seed,
        mode: if a.chronological { SplitMode::Chronological } else { SplitMode::Random },
        stratify_by_camera: a.stratify_by_camera,
    };
    let res = sampler::split(&frames, &spec).map_err(config)?;
    let parts: HashMap<String, Partition> = res.assignments.iter().map(|x| (x.frame_id.clone(), x.partition)).collect();
    store.put_new(res.assignments.into_iter().map(Record::Split).collect())?;
    if let Some(path) = &a.manifest {
        sampler::write_frame_manifest(path, &frames, &parts).map_err(storage)?;
    }
    println!("train {} / test {}", res.train.len(), res.test.len());
    Ok(())
}

fn frames_of(store: &Store, p: PartitionArg) -> Vec<FrameRecord> {
    match p {
        PartitionArg::Train => store.partition_frames(Partition::Train),
        PartitionArg::Test => store.partition_frames(Partition::Test),
        PartitionArg::All => store.frames(),
    }
}

fn detect(a: DetectArgs) -> Result {
    let store = open_store(&a.store.store)?;
    let frames = frames_of(&store, a.partition);
    if frames.is_empty() {
        return Err(PipelineError::Dependency {
            stage: Stage::WeakDetect,
            missing: Stage::Split,
        });
    }
    let fail = |e: String| PipelineError::Stage {
        stage: Stage::WeakDetect,
        detail: e,
    };
    let dets: Vec<Detection> = if let Some(model) = &a.model {
        let mut m = if model == "toy" {
            PartsModel::toy_default()
        } else {
            PartsModel::load(Path::new(model)).map_err(config)?
        };
        if let Some(t) = a.threshold {
            m.threshold = t;
        }
        let mut det = BuiltinDetector::new(m);
        if let Some(n) = a.nms_iou {
            det.nms_iou = n;
        }
        let mut out = Vec::new();
        for f in &frames {
            out.extend(det.detect_frame(&a.detector_id, f).map_err(|e| fail(format!("{}: {e}", f.frame_id)))?);
        }
        out
    } else {
        let program = a.command.clone().expect("clap requires --model or --command");
        let spec = CommandSpec {
            program,
            args: a.args.clone(),
            per_frame_timeout: a.per_frame_timeout,
        };
        let run = run_external_detector(&spec, &frames, &a.detector_id).map_err(|e| fail(e.to_string()))?;
        for e in &run.line_errors {
            eprintln!("skipped response line {}: {}", e.line, e.reason);
        }
        if !run.failed_frames.is_empty() {
            return Err(fail(format!("{} frame(s) got no response in time", run.failed_frames.len())));
        }
        run.detections
    };
    let n = dets.len();
    store.put_new(dets.into_iter().map(Record::Detection).collect())?;
    println!("{}: {n} detection(s) on {} frame(s)", a.detector_id, frames.len());
    Ok(())
}

fn export(a: ExportArgs) -> Result {
    let store = open_store(&a.store.store)?;
    let partition = match a.partition {
        PartitionArg::Train => Partition::Train,
        PartitionArg::Test => Partition::Test,
        PartitionArg::All => return Err(config("export needs --partition train or test")),
    };
    let opts = ExportOptions {
        partition,
        detector_id: a.detector_id,
        format: ExportFormat::parse(&a.format).map_err(config)?,
        out_dir: a.out,
        include_fn_marks: a.include_fn_marks,
    };
    let m = export_finetune_dataset(&store, &opts).map_err(failed(Stage::Export))?;
    println!(
        "{}: {} frame(s), {} box(es) ({} from FN marks) in {}",
        m.export_id, m.frame_count, m.box_count, m.fn_supplement, m.output_path
    );
    Ok(())
}

fn plan(p: &PlanArgs) -> Result<QcPlan> {
    let r = if p.rounded_z {
        if p.confidence != 0.95 {
            return Err(config("--rounded-z only applies at confidence 0.95"));
        }
        qc_stats::plan_with_z(p.pilot_p, p.epsilon, p.confidence, qc_stats::Z_95_ROUNDED)
    } else {
        qc_stats::required_sample_size(p.pilot_p, p.epsilon, p.confidence)
    };
    r.map_err(config)
}

fn write_or_print(text: &str, out: Option<&Path>) -> Result {
    print!("{text}");
    if let Some(path) = out {
        fs::write(path, text).map_err(storage)?;
    }
    Ok(())
}

fn qc(cmd: QcCmd) -> Result {
    match cmd {
        QcCmd::Plan { plan: args, unrounded, json } => {
            let p = plan(&args)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&p).expect("plan serialises"));
                return Ok(());
            }
            println!("pilot_p     {}", p.pilot_p_hat);
            println!("epsilon     {}", p.epsilon);
            println!("confidence  {}", p.confidence);
            println!("z           {:.6}", p.z_value);
            if unrounded {
                println!("formula     {:.4}", p.formula_value);
            }
            println!("n           {}", p.required_n);
        }
        QcCmd::Draw {
            n,
            seed,
            population,
            detector_id,
            store,
        } => {
            let ids: Vec<String> = match (population, detector_id, store) {
                (Some(path), _, _) => fs::read_to_string(&path)
                    .map_err(|e| config(format!("{}: {e}", path.display())))?
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(String::from)
                    .collect(),
                (None, Some(det), Some(dir)) => {
                    let store = open_store(&dir)?;
                    let test: BTreeSet<String> =
                        store.partition_frames(Partition::Test).into_iter().map(|f| f.frame_id).collect();
                    store
                        .detections(&det)
                        .into_iter()
                        .filter(|d| test.contains(&d.frame_id))
                        .map(|d| d.detection_id)
                        .collect()
                }
                _ => return Err(config("give --population or --detector-id with --store")),
            };
            for id in qc_stats::draw_qc_sample(&ids, n, seed).map_err(config)? {
                println!("{id}");
            }
        }
        QcCmd::Open {
            store,
            detector_id,
            plan: args,
            seed,
            frames,
            session_id,
        } => {
            let desk = ReviewDesk::new(open_store(&store.store)?);
            let req = SessionRequest {
                plan: plan(&args)?,
                detector_id,
                seed,
                scope: if frames { SessionScope::Frames } else { SessionScope::Detections },
                session_id,
            };
            let s = desk.open(req).map_err(config)?;
            println!(
                "{}\t{} item(s) on {} frame(s)",
                s.record.session_id,
                s.record.sample.len(),
                s.record.frames.len()
            );
        }
        QcCmd::Counts { store, session, out } => {
            let desk = ReviewDesk::new(open_store(&store.store)?);
            let r = desk.report(&session).map_err(config)?;
            write_or_print(&r.counts.to_toml(), out.as_deref())?;
        }
        QcCmd::Report {
            wc,
            sc,
            confidence,
            ref_rc_recall,
            ref_rc_precision,
            json,
            out,
        } => {
            let wc = QcCounts::load(&wc).map_err(config)?;
            let sc = QcCounts::load(&sc).map_err(config)?;
            let mut r = qc_stats::build_report(&wc, &sc, confidence).map_err(config)?;
            if ref_rc_recall.is_some() || ref_rc_precision.is_some() {
                r = r.with_reference(ReferenceFigures {
                    rc_recall: ref_rc_recall,
                    rc_precision: ref_rc_precision,
                });
            }
            let text = if json { format!("{}\n", r.to_json()) } else { r.to_text() };
            write_or_print(&text, out.as_deref())?;
        }
    }
    Ok(())
}

fn pipeline_cmd(cmd: PipelineCmd) -> Result {
    match cmd {
        PipelineCmd::Init { dir, force } => {
            fs::create_dir_all(&dir).map_err(storage)?;
            let path = dir.join("pipeline.toml");
            if path.exists() && !force {
                return Err(config(format!("{} exists; pass --force to overwrite", path.display())));
            }
            fs::write(&path, PipelineConfig::synthetic().to_toml()).map_err(storage)?;
            println!("wrote {}", path.display());
        }
        PipelineCmd::Run { config: path } => {
            let p = Pipeline::open(PipelineConfig::load(&path)?)?;
            let res = p.run_all();
            print!("{}", p.manifest().render());
            res?;
            let report = p.config().paths.exports.join(&p.config().run_id).join("report.txt");
            if let Ok(text) = fs::read_to_string(&report) {
                print!("\n{text}");
            }
        }
        PipelineCmd::Stage { name, config: path, force } => {
            let p = Pipeline::open(PipelineConfig::load(&path)?)?;
            let res = p.run_stage(name, force);
            print!("{}", p.manifest().render());
            match res? {
                pipeline::StageOutcome::Executed => println!("{name}: executed"),
                pipeline::StageOutcome::Skipped => println!("{name}: already done (use --force to re-run)"),
            }
        }
        PipelineCmd::Status { store, run, json } => {
            if !store.store.exists() {
                return Err(PipelineError::Storage(format!("no store at {}", store.store.display())));
            }
            let store = open_store(&store.store)?;
            let ms: Vec<_> = pipeline::manifests(&store)
                .into_iter()
                .filter(|m| run.as_ref().is_none_or(|r| &m.run_id == r))
                .collect();
            if let Some(r) = &run {
                if ms.is_empty() {
                    return Err(config(format!("no run {r:?} in this store")));
                }
            }
            if json {
                println!("{}", serde_json::to_string_pretty(&ms).expect("manifests serialise"));
            } else if ms.is_empty() {
                println!("no runs");
            } else {
                for m in ms {
                    print!("{}", m.render());
                }
            }
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result {
    let desk = ReviewDesk::new(open_store(&a.store.store)?);
    let app = weaklabel_review_server::router(
        desk,
        weaklabel_review_server::ServerOptions {
            image_root: a.image_root,
            static_dir: a.ui_dir,
        },
    );
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(storage)?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(a.addr).await?;
        println!("listening on http://{}", listener.local_addr()?);
        weaklabel_review_server::serve(listener, app).await
    })
    .map_err(storage)
}
