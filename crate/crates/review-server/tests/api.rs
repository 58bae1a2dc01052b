use axum::body::Body;
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use weaklabel_core::label_store::Store;
use weaklabel_core::review::ReviewDesk;
use weaklabel_core::testkit::{seed_fixture, Fixture, FixtureSpec};
use weaklabel_review_server::{router, ServerOptions};

struct App {
    router: Router,
    fixture: Fixture,
    _dir: tempfile::TempDir,
}

fn app(test_frames: usize, detections: usize) -> App {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::in_memory();
    let mut spec = FixtureSpec::new("sc", test_frames, detections);
    spec.train_frames = 2;
    spec.train_detections = 4;
    let fixture = seed_fixture(&store, &spec).unwrap();
    let opts = ServerOptions {
        image_root: dir.path().to_path_buf(),
        static_dir: None,
    };
    App {
        router: router(ReviewDesk::new(store), opts),
        fixture,
        _dir: dir,
    }
}

async fn send(router: &Router, method: Method, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(b) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(b.to_string())
        }
        None => Body::empty(),
    };
    let resp = router.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes, ctype)
}

async fn get(router: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = send(router, Method::GET, uri, None).await;
    (s, serde_json::from_slice(&b).unwrap())
}

async fn post(router: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let (s, b, _) = send(router, Method::POST, uri, Some(&body.to_string())).await;
    (s, serde_json::from_slice(&b).unwrap())
}

fn open_body(session_id: &str) -> Value {
    json!({
        "detector_id": "sc",
        "seed": 7,
        "session_id": session_id,
        "pilot_p_hat": 0.5,
        "epsilon": 0.2,
        "confidence": 0.95
    })
}

#[tokio::test]
async fn full_session_over_http() {
    let a = app(20, 60);
    let (s, opened) = post(&a.router, "/sessions", open_body("s1")).await;
    assert_eq!(s, StatusCode::OK, "{opened}");
    // 1.96² · 0.25 / 0.2² = 24.01
    assert_eq!(opened["plan"]["required_n"], 25);
    assert_eq!(opened["sample_size"], 25);
    assert_eq!(opened["state"], "open");

    let mut judged = 0;
    loop {
        let (s, next) = get(&a.router, "/sessions/s1/next").await;
        assert_eq!(s, StatusCode::OK);
        if next["status"] == "done" {
            break;
        }
        assert_eq!(next["status"], "item");
        assert_eq!(next["index"], judged);
        assert!(next["image_path"].as_str().unwrap().starts_with("frames/"));
        let judgement = if judged < 18 { "TP" } else { "FP" };
        let body = json!({"detection_id": next["detection"]["detection_id"], "judgement": judgement, "annotator": "ann"});
        let (s, prog) = post(&a.router, "/sessions/s1/verdicts", body).await;
        assert_eq!(s, StatusCode::OK, "{prog}");
        judged += 1;
        assert_eq!(prog["judged"], judged);
    }
    assert_eq!(judged, 25);

    let (_, report) = get(&a.router, "/sessions/s1/report").await;
    assert_eq!(report["state"], "complete");
    assert_eq!(report["counts"]["tp"], 18);
    assert_eq!(report["counts"]["fp"], 7);
    let p = report["progress"]["precision"]["value"].as_f64().unwrap();
    assert!((p - 18.0 / 25.0).abs() < 1e-12);
    assert_eq!(report["frozen"]["counts"]["tp"], 18);

    let (_, detail) = get(&a.router, "/sessions/s1").await;
    assert_eq!(detail["state"], "complete");
    assert_eq!(detail["sample"].as_array().unwrap().len(), 25);
    let (_, list) = get(&a.router, "/sessions").await;
    assert_eq!(list.as_array().unwrap().len(), 1);
    assert_eq!(list[0]["session_id"], "s1");
}

#[tokio::test]
async fn explicit_plan_is_accepted() {
    let a = app(10, 30);
    let plan = json!({
        "pilot_p_hat": 0.8, "epsilon": 0.1, "confidence": 0.95,
        "z_value": 1.96, "formula_value": 61.4656, "required_n": 25
    });
    let (s, v) = post(&a.router, "/sessions", json!({"detector_id": "sc", "plan": plan})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["sample_size"], 25);
    assert_eq!(v["scope"], "detections");
}

#[tokio::test]
async fn open_rejections() {
    let a = app(10, 30);
    let cases = [
        json!({"detector_id": "sc"}),
        json!({"detector_id": "sc", "pilot_p_hat": 0.5, "epsilon": 0.1}),
        json!({"detector_id": "sc", "pilot_p_hat": 1.5, "epsilon": 0.1, "confidence": 0.95}),
        json!({"detector_id": "sc", "pilot_p_hat": 0.5, "epsilon": 0.01, "confidence": 0.95}),
        json!({"detector_id": "sc", "pilot_p_hat": 0.5, "epsilon": 0.1, "confidence": 0.95, "bogus": 1}),
        json!({"pilot_p_hat": 0.5, "epsilon": 0.1, "confidence": 0.95}),
    ];
    for body in cases {
        let (s, v) = post(&a.router, "/sessions", body.clone()).await;
        assert_eq!(s, StatusCode::BAD_REQUEST, "{body} -> {v}");
        assert!(v["error"].is_string());
    }
    let (s, _, _) = send(&a.router, Method::POST, "/sessions", Some("{not json")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    assert_eq!(post(&a.router, "/sessions", open_body("dup")).await.0, StatusCode::OK);
    let (s, v) = post(&a.router, "/sessions", open_body("dup")).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(v["error"].as_str().unwrap().contains("dup"));
}

#[tokio::test]
async fn unknown_ids_are_404() {
    let a = app(4, 8);
    for uri in [
        "/sessions/nope",
        "/sessions/nope/next",
        "/sessions/nope/progress",
        "/sessions/nope/report",
        "/frames/nope/image",
    ] {
        let (s, v) = get(&a.router, uri).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert!(v["error"].as_str().unwrap().contains("nope"));
    }
    let (s, _) = post(&a.router, "/sessions/nope/verdicts", json!({"detection_id": "x", "judgement": "TP"})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn verdict_rejections_and_correction() {
    let a = app(10, 30);
    post(&a.router, "/sessions", open_body("s")).await;
    let (_, detail) = get(&a.router, "/sessions/s").await;
    let sample: Vec<String> = serde_json::from_value(detail["sample"].clone()).unwrap();

    // skipping ahead of the cursor
    let (s, _) = post(&a.router, "/sessions/s/verdicts", json!({"detection_id": sample[1], "judgement": "TP"})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    // bad judgement label
    let (s, _) = post(&a.router, "/sessions/s/verdicts", json!({"detection_id": sample[0], "judgement": "maybe"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    // a train-partition detection is never in a session
    let train_det = a
        .fixture
        .detections
        .iter()
        .find(|d| a.fixture.train_frames.iter().any(|f| f.frame_id == d.frame_id))
        .unwrap();
    let (s, _) = post(&a.router, "/sessions/s/verdicts", json!({"detection_id": train_det.detection_id, "judgement": "TP"})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let (_, p) = post(&a.router, "/sessions/s/verdicts", json!({"detection_id": sample[0], "judgement": "TP"})).await;
    assert_eq!((p["tp"].as_u64(), p["fp"].as_u64()), (Some(1), Some(0)));
    let (s, p) = post(&a.router, "/sessions/s/verdicts", json!({"detection_id": sample[0], "judgement": "FP"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!((p["tp"].as_u64(), p["fp"].as_u64(), p["judged"].as_u64()), (Some(0), Some(1), Some(1)));
    let (_, next) = get(&a.router, "/sessions/s/next").await;
    assert_eq!(next["index"], 1);
}

#[tokio::test]
async fn fn_marks_over_http() {
    let a = app(10, 30);
    post(&a.router, "/sessions", open_body("s")).await;
    let (_, detail) = get(&a.router, "/sessions/s").await;
    let frames: Vec<String> = serde_json::from_value(detail["frames"].clone()).unwrap();

    let (s, v) = post(
        &a.router,
        "/sessions/s/fn-marks",
        json!({"frame_id": frames[0], "boxes": [[1.0, 2.0, 10.0, 10.0], [40.0, 40.0, 5.0, 5.0]]}),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["count"], 2);
    assert_eq!(v["progress"]["frames_visited"], 1);
    // the FN count stays unknown until every session frame is visited
    assert!(v["progress"]["fn"].is_null());

    let (s, v) = post(&a.router, "/sessions/s/fn-marks", json!({"frame_id": frames[1], "boxes": []})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["count"], 0);
    assert_eq!(v["progress"]["frames_visited"], 2);

    let (s, _) = post(&a.router, "/sessions/s/fn-marks", json!({"frame_id": frames[2], "boxes": [[0.0, 0.0, -3.0, 4.0]]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&a.router, "/sessions/s/fn-marks", json!({"frame_id": frames[2], "boxes": [[90.0, 90.0, 20.0, 20.0]]})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let train = &a.fixture.train_frames[0].frame_id;
    let (s, _) = post(&a.router, "/sessions/s/fn-marks", json!({"frame_id": train, "boxes": []})).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    let (s, _) = post(&a.router, "/sessions/s/fn-marks", json!({"frame_id": "ghost", "boxes": []})).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn frame_images_are_served_with_their_type() {
    let a = app(3, 3);
    let frame = &a.fixture.test_frames[0];
    let path = a._dir.path().join(&frame.image_path);
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    let bytes = b"\x89PNG\r\n\x1a\nnot really".to_vec();
    std::fs::write(&path, &bytes).unwrap();

    let (s, body, ctype) = send(&a.router, Method::GET, &format!("/frames/{}/image", frame.frame_id), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert_eq!(body, bytes);

    // known frame, file never written
    let other = &a.fixture.test_frames[1];
    let (s, _) = get(&a.router, &format!("/frames/{}/image", other.frame_id)).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn static_dir_serves_unclaimed_paths() {
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<html>review</html>").unwrap();
    let store = Store::in_memory();
    seed_fixture(&store, &FixtureSpec::new("sc", 2, 2)).unwrap();
    let r = router(
        ReviewDesk::new(store),
        ServerOptions {
            image_root: ui.path().to_path_buf(),
            static_dir: Some(ui.path().to_path_buf()),
        },
    );
    let (s, body, _) = send(&r, Method::GET, "/index.html", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body, b"<html>review</html>");
    let (s, _) = get(&r, "/sessions").await;
    assert_eq!(s, StatusCode::OK);
}

#[tokio::test]
async fn concurrent_requests_share_one_desk() {
    let a = app(20, 60);
    post(&a.router, "/sessions", open_body("s")).await;
    let (_, detail) = get(&a.router, "/sessions/s").await;
    let frames: Vec<String> = serde_json::from_value(detail["frames"].clone()).unwrap();
    let mut tasks = Vec::new();
    for f in frames.clone() {
        let r = a.router.clone();
        tasks.push(tokio::spawn(async move {
            post(&r, "/sessions/s/fn-marks", json!({"frame_id": f, "boxes": [[0.0, 0.0, 4.0, 4.0]]})).await.0
        }));
    }
    for t in tasks {
        assert_eq!(t.await.unwrap(), StatusCode::OK);
    }
    let (_, p) = get(&a.router, "/sessions/s/progress").await;
    assert_eq!(p["frames_visited"].as_u64().unwrap() as usize, frames.len());
    assert_eq!(p["fn"].as_u64().unwrap() as usize, frames.len());
}
