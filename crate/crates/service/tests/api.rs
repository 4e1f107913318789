use std::path::Path;
use std::time::Duration;

use atal_core::engine::experiments::run_experiment;
use atal_core::engine::{load_data, Engine, ExperimentConfig, ExperimentState, OracleMode, Phase, StrategyKind};
use atal_core::labels::Class;
use atal_core::oracle::AnswerSource;
use atal_service::{router, AppState, Status};
use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn toy() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.data.train_count = 3;
    c.data.test_count = 3;
    c.data.size = 16;
    c.ccls.total_iterations = 20;
    c.ccls.cycles = 4;
    c.superpixel.target_count = 16;
    c.max_budget = 4;
    c.full_supervision = false;
    c.probe_images = 2;
    c.den_members = 2;
    c.oracle = OracleMode::External;
    c
}

fn fresh_experiment(dir: &Path, seed: u64) -> std::path::PathBuf {
    let path = dir.join("exp");
    drop(Engine::create(&path, toy(), StrategyKind::Atal, seed).unwrap());
    path
}

async fn call(app: &AppState, method: &str, uri: &str, body: String) -> (StatusCode, String) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(Body::from(body))
        .unwrap();
    let resp = router(app.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, String::from_utf8(bytes.to_vec()).unwrap())
}

async fn create(app: &AppState, path: &Path, advance: bool) -> (StatusCode, Value) {
    let body = json!({ "experiment": path, "advance": advance }).to_string();
    let (s, b) = call(app, "POST", "/sessions", body).await;
    (s, serde_json::from_str(&b).unwrap())
}

async fn status(app: &AppState, id: &str) -> Status {
    let (s, b) = call(app, "GET", &format!("/sessions/{id}/status"), String::new()).await;
    assert_eq!(s, StatusCode::OK);
    serde_json::from_str(&b).unwrap()
}

async fn queries(app: &AppState, id: &str, limit: Option<usize>) -> Vec<Value> {
    let uri = match limit {
        Some(n) => format!("/sessions/{id}/queries?limit={n}"),
        None => format!("/sessions/{id}/queries"),
    };
    let (s, b) = call(app, "GET", &uri, String::new()).await;
    assert_eq!(s, StatusCode::OK);
    b.lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

async fn settle(app: &AppState, id: &str) -> Status {
    app.idle().await;
    for _ in 0..500 {
        let st = status(app, id).await;
        if !st.running {
            return st;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("session never settled");
}

#[tokio::test]
async fn fresh_session_has_nothing_pending_and_is_exclusive() {
    let dir = tempfile::tempdir().unwrap();
    let path = fresh_experiment(dir.path(), 1);
    let app = AppState::default();
    let (s, body) = create(&app, &path, false).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["pending"], 0);
    assert_eq!(body["phase"], "fresh");
    let id = body["session_id"].as_str().unwrap().to_string();
    assert!(queries(&app, &id, None).await.is_empty());

    let (s, body) = create(&app, &path, false).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"], "conflict");
    let other = AppState::default();
    let (s, _) = create(&other, &path, false).await;
    assert_eq!(s, StatusCode::CONFLICT);
}

#[tokio::test]
async fn unknown_ids_are_not_found() {
    let app = AppState::default();
    let (s, b) = call(&app, "GET", "/sessions/nope/status", String::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert!(b.contains("not_found"));
    let (s, _) = call(&app, "GET", "/sessions/nope/queries", String::new()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", "/sessions/nope/labels", r#"{"query_id":0,"class":"salient"}"#.into()).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let dir = tempfile::tempdir().unwrap();
    let (s, _) = create(&app, &dir.path().join("missing"), false).await;
    assert_ne!(s, StatusCode::CREATED);
}

#[tokio::test]
async fn queries_are_served_idempotently_and_answers_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    let path = fresh_experiment(dir.path(), 2);
    let app = AppState::default();
    let (s, body) = create(&app, &path, true).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["pending"], 6);
    let id = body["session_id"].as_str().unwrap().to_string();

    let first = queries(&app, &id, Some(2)).await;
    let again = queries(&app, &id, Some(2)).await;
    assert_eq!(first.len(), 2);
    assert_eq!(first, again);
    assert_eq!(status(&app, &id).await.served, 2);
    let card = &first[0];
    for key in ["query_id", "image_id", "row", "col", "crop", "outline", "png_base64", "superpixel_id"] {
        assert!(card.get(key).is_some(), "missing {key}");
    }
    assert!(!card["outline"].as_array().unwrap().is_empty());
    assert!(card["png_base64"].as_str().unwrap().starts_with("iVBORw0KGgo"));

    let qid = card["query_id"].as_u64().unwrap();
    let ans = json!({ "query_id": qid, "class": "background" }).to_string();
    let (s, b) = call(&app, "POST", &format!("/sessions/{id}/labels"), ans.clone()).await;
    assert_eq!(s, StatusCode::OK);
    let ack: Value = serde_json::from_str(&b).unwrap();
    assert_eq!(ack["remaining"], 5);
    assert_eq!(ack["resumed"], false);

    let (s, b) = call(&app, "POST", &format!("/sessions/{id}/labels"), ans).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert!(b.contains("conflict"));
    let unknown = json!({ "query_id": 9999, "class": "salient" }).to_string();
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/labels"), unknown).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "POST", &format!("/sessions/{id}/labels"), "{oops".into()).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);

    let rest = queries(&app, &id, None).await;
    assert_eq!(rest.len(), 5);
    assert!(rest.iter().all(|q| q["query_id"].as_u64() != Some(qid)));
    let st = status(&app, &id).await;
    assert_eq!((st.pending, st.answered, st.round, st.budget_spent), (5, 1, 0, 0));
}

fn gt_class(cfg: &ExperimentConfig, seed: u64, image_id: &str, row: usize, col: usize) -> Class {
    let (train, _) = load_data(cfg, seed).unwrap();
    let item = train.items.iter().find(|it| it.id == image_id).unwrap();
    Class::from_bit(item.mask.get(row, col))
}

#[tokio::test]
async fn human_answers_reproduce_the_ground_truth_run() {
    let seed = 5;
    let mut gt_cfg = toy();
    gt_cfg.oracle = OracleMode::GroundTruth;
    let gt = run_experiment(&gt_cfg, StrategyKind::Atal, seed, None, None).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = fresh_experiment(dir.path(), seed);
    let app = AppState::default();
    let (_, body) = create(&app, &path, true).await;
    let id = body["session_id"].as_str().unwrap().to_string();

    let mut batches = Vec::new();
    loop {
        let st = settle(&app, &id).await;
        assert_eq!(st.last_error, None);
        if st.phase == Phase::Finished {
            break;
        }
        let cards = queries(&app, &id, None).await;
        assert_eq!(cards.len(), st.pending);
        batches.push(cards.len());
        let lines: Vec<String> = cards
            .iter()
            .map(|c| {
                let (img, r, col) = (c["image_id"].as_str().unwrap(), c["row"].as_u64().unwrap(), c["col"].as_u64().unwrap());
                let class = gt_class(&toy(), seed, img, r as usize, col as usize);
                json!({ "query_id": c["query_id"], "class": class }).to_string()
            })
            .collect();
        let (s, b) = call(&app, "POST", &format!("/sessions/{id}/labels"), lines.join("\n")).await;
        assert_eq!(s, StatusCode::OK);
        let acks: Vec<Value> = b.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(acks.len(), cards.len());
        assert_eq!(acks.last().unwrap()["remaining"], 0);
        assert_eq!(acks.last().unwrap()["resumed"], true);
    }
    assert_eq!(batches, vec![6, 6]);
    let st = status(&app, &id).await;
    assert_eq!(st.budget_spent, 4);
    assert_eq!(st.metric_history.len(), gt.metric_history.len());
    assert!(st.final_metrics.is_some());

    let saved = ExperimentState::load(&path).unwrap();
    assert!(saved.answers.iter().all(|a| a.source == AnswerSource::Human));
    assert_eq!(saved.without_provenance(), gt.without_provenance());
}

#[tokio::test]
async fn answers_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let path = fresh_experiment(dir.path(), 3);
    let qid;
    {
        let app = AppState::default();
        let (_, body) = create(&app, &path, true).await;
        let id = body["session_id"].as_str().unwrap().to_string();
        let cards = queries(&app, &id, Some(1)).await;
        qid = cards[0]["query_id"].as_u64().unwrap();
        let ans = json!({ "query_id": qid, "class": "salient" }).to_string();
        let (s, _) = call(&app, "POST", &format!("/sessions/{id}/labels"), ans).await;
        assert_eq!(s, StatusCode::OK);
    }
    let app = AppState::default();
    let (s, body) = create(&app, &path, false).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(body["pending"], 5);
    assert_eq!(body["answered"], 1);
    let id = body["session_id"].as_str().unwrap().to_string();
    let ids: Vec<u64> = queries(&app, &id, None).await.iter().map(|c| c["query_id"].as_u64().unwrap()).collect();
    assert!(!ids.contains(&qid));
}
