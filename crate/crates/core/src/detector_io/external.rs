//! External detector plugins speaking newline-delimited JSON.
//!
//! Requests, one per frame, on the child's stdin:
//!
//! ```text
//! {"frame_id": "...", "image_path": "..."}
//! ```
//!
//! Responses on stdout, zero or more per frame, in any order:
//!
//! ```text
//! {"frame_id": "...", "class": "car", "bbox": [x, y, w, h], "score": s}
//! ```
//!
//! The child signals completion by closing stdout and exiting.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Read, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{assign_ids, Detection, DetectorError};
use crate::bbox::BBox;
use crate::sampler::FrameRecord;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Seconds allowed per frame; the whole run gets `frames × this`.
    #[serde(default = "default_timeout")]
    pub per_frame_timeout: f64,
}

fn default_timeout() -> f64 {
    30.0
}

impl CommandSpec {
    pub fn new(program: impl Into<String>, args: &[&str]) -> Self {
        Self {
            program: program.into(),
            args: args.iter().map(|s| s.to_string()).collect(),
            per_frame_timeout: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireResponse {
    pub frame_id: String,
    pub class: String,
    pub bbox: [f64; 4],
    pub score: f64,
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialise")
}

pub fn format_request_line(frame_id: &str, image_path: &str) -> String {
    format!("{{\"frame_id\": {}, \"image_path\": {}}}", json_str(frame_id), json_str(image_path))
}

pub fn format_response_line(r: &WireResponse) -> String {
    let [x, y, w, h] = r.bbox;
    format!(
        "{{\"frame_id\": {}, \"class\": {}, \"bbox\": [{x}, {y}, {w}, {h}], \"score\": {}}}",
        json_str(&r.frame_id),
        json_str(&r.class),
        r.score
    )
}

pub fn parse_response_line(line: &str) -> Result<WireResponse, String> {
    let r: WireResponse = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if !r.score.is_finite() {
        return Err("score must be finite".into());
    }
    BBox::from(r.bbox).validate().map_err(|e| e.to_string())?;
    Ok(r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    /// 1-based line number in the detector's output.
    pub line: usize,
    pub content: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExternalRun {
    pub detections: Vec<Detection>,
    pub line_errors: Vec<LineError>,
    /// Frames left without any response when the time allowance ran out.
    pub failed_frames: Vec<String>,
    pub stderr: String,
}

/// Runs an external detector over `frames`. Malformed or out-of-frame
/// response lines are reported in [`ExternalRun::line_errors`] and skipped.
pub fn run_external_detector(
    spec: &CommandSpec,
    frames: &[FrameRecord],
    detector_id: &str,
) -> Result<ExternalRun, DetectorError> {
    let mut child = Command::new(&spec.program)
        .args(&spec.args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .map_err(|e| DetectorError::Spawn {
            command: spec.program.clone(),
            detail: e.to_string(),
        })?;

    let requests: Vec<String> = frames
        .iter()
        .map(|f| format_request_line(&f.frame_id, &f.image_path))
        .collect();
    let mut stdin = child.stdin.take().expect("piped stdin");
    let writer = thread::spawn(move || {
        for r in requests {
            // a detector may stop reading early; that is not our error
            if writeln!(stdin, "{r}").is_err() {
                break;
            }
        }
    });
    let mut stderr_pipe = child.stderr.take().expect("piped stderr");
    let stderr_reader = thread::spawn(move || {
        let mut s = String::new();
        let _ = stderr_pipe.read_to_string(&mut s);
        s
    });
    let stdout = child.stdout.take().expect("piped stdout");
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stdout).lines() {
            if tx.send(line).is_err() {
                break;
            }
        }
    });

    let budget = Duration::from_secs_f64(spec.per_frame_timeout.max(0.0) * frames.len().max(1) as f64);
    let deadline = Instant::now() + budget;
    let mut lines = Vec::new();
    let mut timed_out = false;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(Ok(l)) => lines.push(l),
            Ok(Err(e)) => {
                lines.push(String::new());
                warn!(error = %e, "unreadable detector output line");
            }
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
            Err(mpsc::RecvTimeoutError::Timeout) => {
                timed_out = true;
                let _ = child.kill();
                break;
            }
        }
    }
    let status = child.wait()?;
    let _ = writer.join();
    let stderr = stderr_reader.join().unwrap_or_default();

    if !timed_out && !status.success() {
        return Err(DetectorError::Exit {
            status: status.to_string(),
            stderr,
        });
    }

    let sizes: BTreeMap<&str, (u32, u32)> = frames.iter().map(|f| (f.frame_id.as_str(), (f.width, f.height))).collect();
    let mut raw: BTreeMap<String, Vec<(BBox, f64, String)>> = BTreeMap::new();
    let mut run = ExternalRun {
        stderr,
        ..Default::default()
    };
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |reason: String| LineError {
            line: i + 1,
            content: line.clone(),
            reason,
        };
        let parsed = match parse_response_line(line) {
            Ok(r) => r,
            Err(e) => {
                run.line_errors.push(err(e));
                continue;
            }
        };
        let Some(&(w, h)) = sizes.get(parsed.frame_id.as_str()) else {
            run.line_errors.push(err(format!("unknown frame {:?}", parsed.frame_id)));
            continue;
        };
        let Some(b) = BBox::from(parsed.bbox).clamp_to(w, h) else {
            run.line_errors.push(err("box lies outside the frame".into()));
            continue;
        };
        raw.entry(parsed.frame_id).or_default().push((b, parsed.score, parsed.class));
    }
    for e in &run.line_errors {
        warn!(line = e.line, reason = %e.reason, "malformed detector response");
    }
    if timed_out {
        let answered: BTreeSet<&String> = raw.keys().collect();
        run.failed_frames = frames
            .iter()
            .map(|f| &f.frame_id)
            .filter(|id| !answered.contains(id))
            .cloned()
            .collect();
        warn!(failed = run.failed_frames.len(), "detector timed out");
    }
    for f in frames {
        if let Some(r) = raw.remove(&f.frame_id) {
            run.detections.extend(assign_ids(detector_id, &f.frame_id, r));
        }
    }
    Ok(run)
}
