use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use avsync::datakit::RatingsStore;
use avsync::media::save_bundle;
use avsync::synth::SynthConfig;
use avsync_annot::{router, tasks_from_pairs, AppState, Ledger, DEFAULT_GUIDELINES};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn json_call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, if b.is_empty() { Value::Null } else { serde_json::from_slice(&b).unwrap() })
}

fn app_with(n_tasks: usize, store: Option<RatingsStore>, media: &std::path::Path) -> Router {
    let pairs: Vec<(String, String)> = (0..n_tasks).map(|i| (format!("v{i}l"), format!("v{i}r"))).collect();
    let ledger = Ledger::new(tasks_from_pairs(&pairs), store, 3).unwrap();
    router(AppState::new(ledger, media, DEFAULT_GUIDELINES))
}

async fn register(app: &Router, who: &str) {
    let (s, _) = call(app, "POST", "/annotators", Some(json!({ "annotator_id": who }))).await;
    assert_eq!(s, StatusCode::CREATED);
}

async fn rate_both(app: &Router, who: &str, left: i64, right: i64) -> Value {
    let (s, task) = json_call(app, "GET", &format!("/task?annotator={who}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let id = task["task_id"].as_str().unwrap().to_string();
    let mut ack = Value::Null;
    for (slot, score) in [("left", left), ("right", right)] {
        let (s, body) = json_call(app, "POST", "/rating", Some(json!({ "annotator_id": who, "task_id": id, "slot": slot, "score": score }))).await;
        assert_eq!(s, StatusCode::OK);
        ack = body;
    }
    ack
}

#[tokio::test]
async fn scripted_session_reopens_for_qa() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(1, None, dir.path());
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!(p["open"], 1);
    assert_eq!(p["total_ratings"], 0);

    for a in ["a", "b", "c", "d", "e", "f"] {
        register(&app, a).await;
    }
    let (_, task) = json_call(&app, "GET", "/task?annotator=a", None).await;
    assert_eq!(task["left"]["audio"], "/media/v0l/audio.wav");
    assert_eq!(task["revision"], 0);

    for (who, score) in [("a", 1), ("b", 4)] {
        rate_both(&app, who, score, 3).await;
    }
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!(p["open"], 1);
    rate_both(&app, "c", 5, 3).await;
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!((p["open"].as_u64(), p["qa_reopened"].as_u64()), (Some(0), Some(1)));

    // original raters are done; fresh ones get the reopened task at revision 1
    let (s, _) = call(&app, "GET", "/task?annotator=a", None).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    for who in ["d", "e", "f"] {
        let (_, t) = json_call(&app, "GET", &format!("/task?annotator={who}"), None).await;
        assert_eq!((t["revision"].as_u64(), t["state"].as_str()), (Some(1), Some("qa_reopened")));
        rate_both(&app, who, 2, 2).await;
    }
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!(p["complete"], 1);
    assert_eq!(p["total_ratings"], 12);
    assert_eq!(p["ratings_per_revision"], json!({ "0": 6, "1": 6 }));
    assert_eq!(p["ratings_per_video"], json!({ "6": 2 }));
}

#[tokio::test]
async fn one_complete_task_counts_six_ratings() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(1, None, dir.path());
    for a in ["a", "b", "c"] {
        register(&app, a).await;
        rate_both(&app, a, 4, 4).await;
    }
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!((p["complete"].as_u64(), p["total_ratings"].as_u64()), (Some(1), Some(6)));
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let app = app_with(2, None, dir.path());
    let (s, _) = call(&app, "GET", "/task?annotator=ghost", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    register(&app, "a").await;
    let (s, _) = call(&app, "POST", "/annotators", Some(json!({ "annotator_id": "a" }))).await;
    assert_eq!(s, StatusCode::OK);
    register(&app, "b").await;
    let (_, t) = json_call(&app, "GET", "/task?annotator=a", None).await;
    let id = t["task_id"].as_str().unwrap();
    let post = |who: &str, slot: &str, score: i64| json!({ "annotator_id": who, "task_id": id, "slot": slot, "score": score });
    assert_eq!(json_call(&app, "POST", "/rating", Some(post("a", "left", 6))).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(json_call(&app, "POST", "/rating", Some(post("a", "left", 2))).await.0, StatusCode::OK);
    let (s, body) = json_call(&app, "POST", "/rating", Some(post("a", "left", 2))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(body["error"].as_str().unwrap().contains("already rated"));
    assert_eq!(json_call(&app, "POST", "/rating", Some(post("b", "left", 2))).await.0, StatusCode::FORBIDDEN);
    let (s, body) = json_call(&app, "POST", "/rating", Some(post("a", "middle", 2))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(body["error"].is_string());
    assert_eq!(call(&app, "GET", "/task", None).await.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn concurrent_duplicates_are_recorded_once() {
    let dir = tempfile::tempdir().unwrap();
    let store = RatingsStore::open(dir.path().join("ratings.jsonl"));
    let app = app_with(1, Some(store.clone()), dir.path());
    register(&app, "a").await;
    let (_, t) = json_call(&app, "GET", "/task?annotator=a", None).await;
    let id = t["task_id"].as_str().unwrap().to_string();
    let mut handles = Vec::new();
    for _ in 0..16 {
        let app = app.clone();
        let body = json!({ "annotator_id": "a", "task_id": id, "slot": "left", "score": 3 });
        handles.push(tokio::spawn(async move { call(&app, "POST", "/rating", Some(body)).await.0 }));
    }
    let mut ok = 0;
    for h in handles {
        match h.await.unwrap() {
            StatusCode::OK => ok += 1,
            s => assert_eq!(s, StatusCode::CONFLICT),
        }
    }
    assert_eq!(ok, 1);
    assert_eq!(store.load().unwrap().len(), 1);

    // a restarted service sees the stored rating and keeps rejecting repeats
    let app = app_with(1, Some(store), dir.path());
    let (_, p) = json_call(&app, "GET", "/progress", None).await;
    assert_eq!(p["total_ratings"], 1);
    let body = json!({ "annotator_id": "a", "task_id": id, "slot": "left", "score": 4 });
    assert_eq!(call(&app, "POST", "/rating", Some(body)).await.0, StatusCode::CONFLICT);
}

#[tokio::test]
async fn serves_media_and_guidelines() {
    let dir = tempfile::tempdir().unwrap();
    let clip = SynthConfig { duration_seconds: 1.0, width: 8, height: 8, ..Default::default() }.generate("v0l", 1);
    save_bundle(&clip, dir.path().join("v0l")).unwrap();
    let app = app_with(1, None, dir.path());
    let (s, wav) = call(&app, "GET", "/media/v0l/audio.wav", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(&wav[..4], b"RIFF");
    let (s, y4m) = call(&app, "GET", "/media/v0l/video.y4m", None).await;
    assert_eq!(s, StatusCode::OK);
    assert!(y4m.starts_with(b"YUV4MPEG2"));
    let (s, meta) = json_call(&app, "GET", "/media/v0l/meta.json", None).await;
    assert_eq!((s, meta["clip_id"].as_str()), (StatusCode::OK, Some("v0l")));
    for bad in ["/media/v0l/missing.wav", "/media/unknown/audio.wav", "/media/v0l/..%2Fx", "/media/v0r/audio.wav"] {
        assert_eq!(call(&app, "GET", bad, None).await.0, StatusCode::NOT_FOUND, "{bad}");
    }
    let (s, text) = call(&app, "GET", "/guidelines", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(String::from_utf8(text).unwrap(), DEFAULT_GUIDELINES);
}
