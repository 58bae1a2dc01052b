//! `weaklabel`: command-line entry point.
//!
//! Exit codes: 0 ok, 2 usage, 10 config, 11 dependency, 12 stage failure,
//! 13 storage, 20 operator handoff (the run waits for an external step).

mod commands;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tracing_subscriber::EnvFilter;
use weaklabel_core::pipeline::Stage;

#[derive(Parser, Debug)]
#[command(name = "weaklabel", version, about = "Weakly supervised dataset building from camera streams")]
struct Cli {
    /// More log output on stderr (-v info, -vv debug). `WEAKLABEL_LOG` overrides.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct StoreArg {
    /// Label store directory.
    #[arg(long, env = "WEAKLABEL_STORE", default_value = "store")]
    store: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Register, list and probe camera sources.
    #[command(subcommand)]
    Camera(CameraCmd),
    /// Fetch segments from one registered camera.
    Harvest(HarvestArgs),
    /// Keep every N-th frame of the harvested segments.
    Sample(SampleArgs),
    /// Assign sampled frames to train and test.
    Split(SplitArgs),
    /// Run a built-in or external detector over stored frames.
    Detect(DetectArgs),
    /// Write a fine-tuning dataset from a detector's boxes.
    Export(ExportArgs),
    /// Sample sizes, QC samples and precision/recall reports.
    #[command(subcommand)]
    Qc(QcCmd),
    /// Staged runs driven by one config file.
    #[command(subcommand)]
    Pipeline(PipelineCmd),
    /// Start the review HTTP service.
    Serve(ServeArgs),
}

#[derive(Subcommand, Debug)]
enum CameraCmd {
    Add {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        id: String,
        /// Playlist URL (`http://…`) or a directory of segment files.
        #[arg(long)]
        url: String,
        #[arg(long)]
        label: Option<String>,
        #[arg(long, requires = "lon", allow_negative_numbers = true)]
        lat: Option<f64>,
        #[arg(long, requires = "lat", allow_negative_numbers = true)]
        lon: Option<f64>,
    },
    List {
        #[command(flatten)]
        store: StoreArg,
    },
    Probe {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        id: String,
    },
}

#[derive(Args, Debug)]
struct HarvestArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long)]
    camera: String,
    /// Seconds of video to collect.
    #[arg(long)]
    duration: f64,
    #[arg(long, default_value_t = 5)]
    retries: u32,
    /// Segments go to `<out>/<camera>/`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    segment_target: f64,
    #[arg(long, default_value_t = 0.5)]
    backoff_base: f64,
    #[arg(long, default_value_t = 30.0)]
    backoff_cap: f64,
    /// Wall-clock limit in seconds; the playlist is re-polled until it runs out.
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long, default_value_t = 10.0)]
    request_timeout: f64,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, default_value_t = 20)]
    rate: u64,
    #[arg(long, default_value_t = 0)]
    offset: u64,
    /// PNG frames go to `<frames-dir>/<camera>/`.
    #[arg(long)]
    frames_dir: PathBuf,
    /// Limit to these cameras (repeatable); default all.
    #[arg(long)]
    camera: Vec<String>,
}

#[derive(Args, Debug)]
struct SplitArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, conflicts_with = "test_count", required_unless_present = "test_count")]
    test_fraction: Option<f64>,
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Latest frames become the test set instead of a random subset.
    #[arg(long)]
    chronological: bool,
    #[arg(long)]
    stratify_by_camera: bool,
    /// Frame manifest: frame_id, camera_id, global_index, partition.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PartitionArg {
    Train,
    Test,
    All,
}

#[derive(Args, Debug)]
struct DetectArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long)]
    detector_id: String,
    /// Built-in parts model: `toy` or a model file.
    #[arg(long, conflicts_with = "command", required_unless_present = "command")]
    model: Option<String>,
    #[arg(long, requires = "model", allow_negative_numbers = true)]
    threshold: Option<f64>,
    #[arg(long, requires = "model")]
    nms_iou: Option<f64>,
    /// External detector program speaking the line protocol.
    #[arg(long)]
    command: Option<String>,
    #[arg(long = "arg", requires = "command", allow_hyphen_values = true)]
    args: Vec<String>,
    #[arg(long, requires = "command", default_value_t = 30.0)]
    per_frame_timeout: f64,
    #[arg(long, value_enum, default_value_t = PartitionArg::All)]
    partition: PartitionArg,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long)]
    detector_id: String,
    #[arg(long)]
    out: PathBuf,
    /// `voc` or `json`.
    #[arg(long, default_value = "voc")]
    format: String,
    #[arg(long, value_enum, default_value_t = PartitionArg::Train)]
    partition: PartitionArg,
    /// Append annotator FN marks on exported frames.
    #[arg(long)]
    include_fn_marks: bool,
}

#[derive(Args, Debug, Clone)]
struct PlanArgs {
    #[arg(long)]
    pilot_p: f64,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Use z = 1.96 instead of the exact 95% quantile (only at 0.95).
    #[arg(long)]
    rounded_z: bool,
}

#[derive(Subcommand, Debug)]
enum QcCmd {
    /// Required QC sample size.
    Plan {
        #[command(flatten)]
        plan: PlanArgs,
        /// Also print the formula value before the ceiling.
        #[arg(long)]
        unrounded: bool,
        #[arg(long)]
        json: bool,
    },
    /// Draw a QC sample; prints one id per line.
    Draw {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Population file, one id per line.
        #[arg(long, conflicts_with_all = ["store", "detector_id"], required_unless_present = "detector_id")]
        population: Option<PathBuf>,
        /// Draw from this detector's test-partition detections.
        #[arg(long, requires = "store")]
        detector_id: Option<String>,
        #[arg(long, env = "WEAKLABEL_STORE")]
        store: Option<PathBuf>,
    },
    /// Open a review session in the store.
    Open {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        detector_id: String,
        #[command(flatten)]
        plan: PlanArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Judge whole frames instead of individual detections.
        #[arg(long)]
        frames: bool,
        #[arg(long)]
        session_id: Option<String>,
    },
    /// Write a session's counts as a counts file.
    Counts {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        session: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two detectors' counts files.
    Report {
        #[arg(long)]
        wc: PathBuf,
        #[arg(long)]
        sc: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        confidence: f64,
        /// Externally reported relative recall change, shown for comparison.
        #[arg(long, allow_negative_numbers = true)]
        ref_rc_recall: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        ref_rc_precision: Option<f64>,
        #[arg(long)]
        json: bool,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_stage(s: &str) -> Result<Stage, String> {
    s.parse()
}

#[derive(Subcommand, Debug)]
enum PipelineCmd {
    /// Write a self-contained synthetic config into a directory.
    Init {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run every stage that is not done yet.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one stage.
    Stage {
        #[arg(value_parser = parse_stage)]
        name: Stage,
        #[arg(long)]
        config: PathBuf,
        /// Re-run even when already done.
        #[arg(long)]
        force: bool,
    },
    /// Show run manifests.
    Status {
        #[command(flatten)]
        store: StoreArg,
        #[arg(long)]
        run: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Args, Debug)]
struct ServeArgs {
    #[command(flatten)]
    store: StoreArg,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Base for relative frame image paths.
    #[arg(long, default_value = ".")]
    image_root: PathBuf,
    /// Static review UI bundle.
    #[arg(long)]
    ui_dir: Option<PathBuf>,
}

fn init_logging(verbose: u8) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = EnvFilter::try_from_env("WEAKLABEL_LOG").unwrap_or_else(|_| EnvFilter::new(default));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_target(false)
        .init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    init_logging(cli.verbose);
    match commands::dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
