use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::Path;
use std::process::{Command, Output, Stdio};

use weaklabel_core::detector_io::write_synthetic_segments;
use weaklabel_core::pipeline::PipelineConfig;
use weaklabel_core::qc_stats::{QcCounts, QcPlan, QcReport};

fn weaklabel(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_weaklabel"))
        .args(args)
        .current_dir(dir)
        .env_remove("WEAKLABEL_STORE")
        .env_remove("WEAKLABEL_LOG")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = weaklabel(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    weaklabel(dir, args).status.code().unwrap()
}

fn write_counts(dir: &Path, name: &str, c: &QcCounts) -> String {
    fs::write(dir.join(name), c.to_toml()).unwrap();
    name.to_string()
}

#[test]
fn qc_plan_prints_the_ceiling() {
    let d = tempfile::tempdir().unwrap();
    let out = ok(d.path(), &["qc", "plan", "--pilot-p", "0.8", "--epsilon", "0.027", "--confidence", "0.95"]);
    assert!(out.lines().any(|l| l.split_whitespace().collect::<Vec<_>>() == ["n", "844"]), "{out}");
    assert!(!out.contains("formula"));

    let out = ok(d.path(), &["qc", "plan", "--pilot-p", "0.8", "--epsilon", "0.027", "--rounded-z", "--unrounded"]);
    assert!(out.contains("formula     843.1495"), "{out}");

    let json = ok(d.path(), &["qc", "plan", "--pilot-p", "0.5", "--epsilon", "0.05", "--json"]);
    let plan: QcPlan = serde_json::from_str(&json).unwrap();
    assert_eq!(plan.required_n, 385);
}

#[test]
fn qc_plan_rejections() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(d.path(), &["qc", "plan", "--pilot-p", "1.2", "--epsilon", "0.05"]), 10);
    assert_eq!(code(d.path(), &["qc", "plan", "--pilot-p", "0.5", "--epsilon", "0"]), 10);
    assert_eq!(
        code(d.path(), &["qc", "plan", "--pilot-p", "0.5", "--epsilon", "0.05", "--confidence", "0.9", "--rounded-z"]),
        10
    );
    assert_eq!(code(d.path(), &["qc", "plan", "--pilot-p", "0.5"]), 2);
}

#[test]
fn qc_report_from_counts_files() {
    let d = tempfile::tempdir().unwrap();
    let wc = write_counts(d.path(), "wc.toml", &QcCounts::new("wc", 914, 115, Some(2703)));
    let sc = write_counts(d.path(), "sc.toml", &QcCounts::new("sc", 1512, 449, Some(2105)));
    let text = ok(
        d.path(),
        &["qc", "report", "--wc", &wc, "--sc", &sc, "--ref-rc-recall", "0.658", "--ref-rc-precision", "-0.125", "--out", "r.txt"],
    );
    assert!(text.contains("88.8%") && text.contains("77.1%"), "{text}");
    assert!(text.contains("25.3%") && text.contains("41.8%"), "{text}");
    assert!(text.contains("rc(recall)    +65.4%  (reference +65.8%)"), "{text}");
    assert!(text.contains("rc(precision) -13.2%  (reference -12.5%)"), "{text}");
    assert!(text.contains("3617 = 3617"), "{text}");
    assert_eq!(fs::read_to_string(d.path().join("r.txt")).unwrap(), text);

    let json = ok(d.path(), &["qc", "report", "--wc", &wc, "--sc", &sc, "--json"]);
    let r: QcReport = serde_json::from_str(&json).unwrap();
    assert!(!r.population_flag);
    assert!((r.rc_recall - 598.0 / 914.0).abs() < 1e-12);
}

#[test]
fn qc_report_flags_unequal_populations_and_bad_files() {
    let d = tempfile::tempdir().unwrap();
    let wc = write_counts(d.path(), "wc.toml", &QcCounts::new("wc", 1366, 127, Some(2205)));
    let sc = write_counts(d.path(), "sc.toml", &QcCounts::new("sc", 2638, 345, Some(1060)));
    let text = ok(d.path(), &["qc", "report", "--wc", &wc, "--sc", &sc]);
    assert!(text.contains("3571") && text.contains("3698"), "{text}");

    fs::write(d.path().join("bad.toml"), "tp = \"many\"").unwrap();
    assert_eq!(code(d.path(), &["qc", "report", "--wc", "bad.toml", "--sc", &sc]), 10);
    assert_eq!(code(d.path(), &["qc", "report", "--wc", "missing.toml", "--sc", &sc]), 10);
    let zero = write_counts(d.path(), "zero.toml", &QcCounts::new("wc", 0, 5, None));
    assert_eq!(code(d.path(), &["qc", "report", "--wc", &zero, "--sc", &sc]), 10);
}

#[test]
fn qc_draw_is_seeded() {
    let d = tempfile::tempdir().unwrap();
    let ids: String = (0..2983).map(|i| format!("det-{i:05}\n")).collect();
    fs::write(d.path().join("pop.txt"), ids).unwrap();
    let a = ok(d.path(), &["qc", "draw", "--n", "850", "--seed", "7", "--population", "pop.txt"]);
    let b = ok(d.path(), &["qc", "draw", "--n", "850", "--seed", "7", "--population", "pop.txt"]);
    let c = ok(d.path(), &["qc", "draw", "--n", "850", "--seed", "8", "--population", "pop.txt"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    let lines: std::collections::BTreeSet<&str> = a.lines().collect();
    assert_eq!(lines.len(), 850);
    assert_eq!(code(d.path(), &["qc", "draw", "--n", "2984", "--seed", "7", "--population", "pop.txt"]), 10);
}

#[test]
fn pipeline_commands_and_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    ok(p, &["pipeline", "init", "--dir", "run"]);
    assert_eq!(code(p, &["pipeline", "init", "--dir", "run"]), 10);
    let cfg = "run/pipeline.toml";

    assert_eq!(code(p, &["pipeline", "stage", "sample", "--config", cfg]), 11);
    let out = ok(p, &["pipeline", "stage", "ingest", "--config", cfg]);
    assert!(out.contains("ingest: executed"), "{out}");
    let out = ok(p, &["pipeline", "stage", "ingest", "--config", cfg]);
    assert!(out.contains("already done"), "{out}");

    let out = ok(p, &["pipeline", "run", "--config", cfg]);
    assert!(out.contains("rc(recall)"), "{out}");
    assert!(p.join("run/exports/synthetic/report.json").exists());
    let report1 = fs::read(p.join("run/exports/synthetic/report.json")).unwrap();

    let status = ok(p, &["pipeline", "status", "--store", "run/store"]);
    assert_eq!(status.matches(" done ").count(), 9, "{status}");
    let json = ok(p, &["pipeline", "status", "--store", "run/store", "--json"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v[0]["run_id"], "synthetic");
    assert_eq!(code(p, &["pipeline", "status", "--store", "run/store", "--run", "other"]), 10);
    assert_eq!(code(p, &["pipeline", "status", "--store", "nowhere"]), 13);

    // forcing the report stage rewrites identical bytes
    ok(p, &["pipeline", "stage", "report", "--config", cfg, "--force"]);
    assert_eq!(fs::read(p.join("run/exports/synthetic/report.json")).unwrap(), report1);

    assert_eq!(code(p, &["pipeline", "run", "--config", "missing.toml"]), 10);
    assert_eq!(code(p, &["pipeline", "stage", "bogus", "--config", cfg]), 2);
}

#[test]
fn pipeline_without_strong_detector_hands_off() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::synthetic();
    cfg.strong_detector = None;
    fs::write(d.path().join("pipeline.toml"), cfg.to_toml()).unwrap();
    let out = weaklabel(d.path(), &["pipeline", "run", "--config", "pipeline.toml"]);
    assert_eq!(out.status.code(), Some(20));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[strong_detector]"), "{stderr}");
    assert!(stderr.contains("wc-toy-train"), "{stderr}");
}

#[test]
fn second_run_on_a_locked_store_is_a_storage_error() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir_all(d.path().join("store")).unwrap();
    // a live pid (this test process) holds the lock
    fs::write(d.path().join("store/LOCK"), std::process::id().to_string()).unwrap();
    assert_eq!(code(d.path(), &["camera", "list", "--store", "store"]), 13);
}

#[test]
fn step_by_step_workflow() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let world = PipelineConfig::synthetic().synthetic.unwrap().world;
    write_synthetic_segments(&world, &p.join("origin/cam1"), "cam1", 4, 50, 5.0).unwrap();

    ok(p, &["camera", "add", "--store", "st", "--id", "cam1", "--url", "origin/cam1", "--lat", "45.1", "--lon", "-7.6"]);
    assert_eq!(code(p, &["camera", "add", "--store", "st", "--id", "cam1", "--url", "origin/cam1"]), 10);
    assert!(ok(p, &["camera", "list", "--store", "st"]).starts_with("cam1\t"));
    assert!(ok(p, &["camera", "probe", "--store", "st", "--id", "cam1"]).contains("reachable"));
    assert_eq!(code(p, &["harvest", "--store", "st", "--camera", "nope", "--duration", "5", "--out", "seg"]), 10);

    assert_eq!(code(p, &["sample", "--store", "st", "--frames-dir", "frames"]), 11);
    let out = ok(p, &["harvest", "--store", "st", "--camera", "cam1", "--duration", "30", "--retries", "2", "--out", "seg"]);
    assert!(out.starts_with("cam1: 3 segment(s), 30.0 s"), "{out}");

    let out = ok(p, &["sample", "--store", "st", "--rate", "5", "--offset", "2", "--frames-dir", "frames"]);
    assert!(out.starts_with("30 frame(s)"), "{out}");
    let out = ok(p, &["split", "--store", "st", "--test-count", "10", "--seed", "3", "--manifest", "frames.tsv"]);
    assert_eq!(out.trim(), "train 20 / test 10");
    let manifest = fs::read_to_string(p.join("frames.tsv")).unwrap();
    assert_eq!(manifest.lines().count(), 30);
    assert_eq!(manifest.lines().filter(|l| l.ends_with("\ttest")).count(), 10);
    assert!(manifest.lines().next().unwrap().split('\t').nth(2) == Some("2"));

    let out = ok(p, &["detect", "--store", "st", "--detector-id", "toy", "--model", "toy", "--threshold", "0.5"]);
    assert!(out.contains("on 30 frame(s)"), "{out}");
    let out = ok(p, &["export", "--store", "st", "--detector-id", "toy", "--out", "export", "--format", "json"]);
    assert!(out.contains("20 frame(s)"), "{out}");
    assert!(p.join("export/index.tsv").exists());

    let out = ok(
        p,
        &["qc", "open", "--store", "st", "--detector-id", "toy", "--pilot-p", "0.5", "--epsilon", "0.3", "--session-id", "s1"],
    );
    assert!(out.starts_with("s1\t11 item(s)"), "{out}");
    let counts = ok(p, &["qc", "counts", "--store", "st", "--session", "s1"]);
    assert!(counts.contains("tp = 0"), "{counts}");
    let drawn = ok(p, &["qc", "draw", "--n", "5", "--seed", "1", "--store", "st", "--detector-id", "toy"]);
    assert_eq!(drawn.lines().count(), 5);
}

#[test]
fn detect_with_external_command() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path();
    let world = PipelineConfig::synthetic().synthetic.unwrap().world;
    write_synthetic_segments(&world, &p.join("origin/c"), "c", 1, 10, 1.0).unwrap();
    ok(p, &["camera", "add", "--store", "st", "--id", "c", "--url", "origin/c"]);
    ok(p, &["harvest", "--store", "st", "--camera", "c", "--duration", "10", "--out", "seg"]);
    ok(p, &["sample", "--store", "st", "--rate", "1", "--frames-dir", "frames"]);
    // one fixed box per requested frame
    let script = r#"while IFS= read -r line; do id=$(printf '%s' "$line" | sed 's/.*"frame_id": *"\([^"]*\)".*/\1/'); printf '{"frame_id": "%s", "class": "car", "bbox": [1, 2, 3, 4], "score": 0.5}\n' "$id"; done"#;
    let out = ok(
        p,
        &["detect", "--store", "st", "--detector-id", "ext", "--command", "sh", "--arg", "-c", "--arg", script],
    );
    assert!(out.contains("ext: 10 detection(s) on 10 frame(s)"), "{out}");
    assert_eq!(code(p, &["detect", "--store", "st", "--detector-id", "bad", "--command", "/no/such/program"]), 12);
}

#[test]
fn serve_answers_http() {
    let d = tempfile::tempdir().unwrap();
    let mut child = Command::new(env!("CARGO_BIN_EXE_weaklabel"))
        .args(["serve", "--store", "st", "--addr", "127.0.0.1:0"])
        .current_dir(d.path())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on http://").expect(&line).to_string();

    let mut s = TcpStream::connect(&addr).unwrap();
    write!(s, "GET /sessions HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n").unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    child.kill().unwrap();
    child.wait().unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
    assert!(resp.ends_with("[]"), "{resp}");
}
