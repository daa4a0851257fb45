use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use fthnet_core::dataset::ratings::{aggregate_mos, rating_sd_stats, AggregationWeights, Level, RaterTier, RatingRecord};
use fthnet_core::model::{Fthnet, FthnetConfig};
use fthnet_service::{router, AggregateResponse, AnnotationStore, AppState, ScoreResponse, ServiceConfig};
use http_body_util::BodyExt;
use image::{Rgb, RgbImage};
use serde_json::{json, Value};
use tower::ServiceExt;

fn png(w: u32, h: u32, seed: u32) -> Vec<u8> {
    let img = RgbImage::from_fn(w, h, |x, y| {
        Rgb([
            ((x * 7 + seed * 13) % 256) as u8,
            ((y * 5 + seed * 3) % 256) as u8,
            ((x + y + seed) % 256) as u8,
        ])
    });
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).unwrap();
    out.into_inner()
}

fn state(dir: &std::path::Path, with_model: bool) -> Arc<AppState> {
    let mut models = HashMap::new();
    if with_model {
        models.insert("s".to_string(), Fthnet::new(FthnetConfig::tiny(), 3).unwrap());
    }
    AppState::new(models, AnnotationStore::open(dir).unwrap(), ServiceConfig::default())
}

async fn call(app: &axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

fn post_bytes(uri: &str, body: Vec<u8>) -> Request<Body> {
    Request::post(uri).body(Body::from(body)).unwrap()
}

fn post_json(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

#[tokio::test]
async fn score_has_all_fields_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), true));
    let img = png(96, 80, 1);
    let (s1, b1) = call(&app, post_bytes("/v1/score?model=s", img.clone())).await;
    let (s2, b2) = call(&app, post_bytes("/v1/score", img)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    let v: Value = serde_json::from_slice(&b1).unwrap();
    for key in ["score", "level", "latency_ms", "model"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    let r1: ScoreResponse = serde_json::from_slice(&b1).unwrap();
    let r2: ScoreResponse = serde_json::from_slice(&b2).unwrap();
    assert_eq!(r1.score.to_bits(), r2.score.to_bits());
    assert!((0.0..=100.0).contains(&r1.score));
    assert!(r1.latency_ms > 0.0);
    assert_eq!(r1.model, "s");
}

#[tokio::test]
async fn score_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), true));
    let (s, b) = call(&app, post_bytes("/v1/score", png(1, 1, 0))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&b).contains("64x64"));
    let (s, b) = call(&app, post_bytes("/v1/score", b"not an image".to_vec())).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&b).contains("undecodable"));
    let (s, _) = call(&app, post_bytes("/v1/score?model=l", png(96, 96, 0))).await;
    assert_eq!(s, StatusCode::SERVICE_UNAVAILABLE);
    let (s, _) = call(&app, post_bytes("/v1/score?model=xl", png(96, 96, 0))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_scores_match_sequential() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), true));
    let images: Vec<Vec<u8>> = (0..16).map(|i| png(80, 80, i)).collect();
    let mut sequential = Vec::new();
    for img in &images {
        let (s, b) = call(&app, post_bytes("/v1/score", img.clone())).await;
        assert_eq!(s, StatusCode::OK);
        sequential.push(serde_json::from_slice::<ScoreResponse>(&b).unwrap().score);
    }
    let handles: Vec<_> = images
        .into_iter()
        .map(|img| {
            let app = app.clone();
            tokio::spawn(async move { call(&app, post_bytes("/v1/score", img)).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&sequential) {
        let (s, b) = h.await.unwrap();
        assert_eq!(s, StatusCode::OK);
        let got = serde_json::from_slice::<ScoreResponse>(&b).unwrap().score;
        assert_eq!(got.to_bits(), want.to_bits());
    }
}

async fn setup_project(app: &axum::Router, images: usize) -> String {
    let (s, b) = call(app, post_json("/v1/projects", json!({ "name": "batch-1" }))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = serde_json::from_slice::<Value>(&b).unwrap()["id"].as_str().unwrap().to_string();
    for i in 0..images {
        let uri = format!("/v1/projects/{id}/images{}", if i == 0 { "?reference=true" } else { "" });
        let (s, _) = call(app, post_bytes(&uri, png(64, 64, i as u32))).await;
        assert_eq!(s, StatusCode::CREATED);
    }
    id
}

async fn register(app: &axum::Router, id: &str, tier: &str) {
    let (s, _) = call(app, post_json("/v1/raters", json!({ "id": id, "tier": tier }))).await;
    assert_eq!(s, StatusCode::CREATED);
}

async fn rate(app: &axum::Router, project: &str, image: &str, rater: &str, score: u8) -> StatusCode {
    let body = json!({ "project_id": project, "image_id": image, "rater_id": rater, "score": score, "level": "Good" });
    call(app, post_json("/v1/ratings", body)).await.0
}

#[tokio::test]
async fn six_raters_aggregate_to_weighted_sum() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), false));
    let p = setup_project(&app, 1).await;
    for (r, tier, score) in [
        ("e1", "experienced", 80),
        ("e2", "experienced", 80),
        ("e3", "experienced", 80),
        ("j1", "junior", 70),
        ("j2", "junior", 70),
        ("j3", "junior", 70),
    ] {
        register(&app, r, tier).await;
        assert_eq!(rate(&app, &p, "i00001", r, score).await, StatusCode::CREATED);
    }
    let (s, b) = call(&app, get(&format!("/v1/projects/{p}/aggregate"))).await;
    assert_eq!(s, StatusCode::OK);
    let agg: AggregateResponse = serde_json::from_slice(&b).unwrap();
    let mos = agg.images[0].mos.unwrap();
    // 0.22 * 240 + 0.11 * 210
    assert!((mos - 75.9).abs() < 1e-9, "{mos}");
    // population SD of three 80s and three 70s
    assert!((agg.images[0].sd.unwrap() - 5.0).abs() < 1e-12);
    assert!(!agg.images[0].discuss);

    let offline = aggregate_mos(&agg.images[0].ratings, &AggregationWeights::default()).unwrap();
    assert_eq!(offline.to_bits(), mos.to_bits());
}

#[tokio::test]
async fn two_ratings_sd_and_discussion_flag() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), false));
    let p = setup_project(&app, 2).await;
    register(&app, "e1", "experienced").await;
    register(&app, "j1", "junior").await;
    assert_eq!(rate(&app, &p, "i00001", "e1", 70).await, StatusCode::CREATED);
    assert_eq!(rate(&app, &p, "i00001", "j1", 80).await, StatusCode::CREATED);
    assert_eq!(rate(&app, &p, "i00002", "e1", 40).await, StatusCode::CREATED);
    assert_eq!(rate(&app, &p, "i00002", "j1", 90).await, StatusCode::CREATED);
    let (_, b) = call(&app, get(&format!("/v1/projects/{p}/aggregate"))).await;
    let agg: AggregateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(agg.images[0].sd, Some(5.0));
    assert!(!agg.images[0].discuss);
    assert_eq!(agg.images[1].sd, Some(25.0));
    assert!(agg.images[1].discuss);
    let offline = rating_sd_stats(&[vec![70.0, 80.0], vec![40.0, 90.0]]);
    assert_eq!(agg.sd_quartiles, offline.quartiles);
}

#[tokio::test]
async fn rating_errors_and_next_exhaustion() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), false));
    let p = setup_project(&app, 2).await;
    register(&app, "e1", "experienced").await;

    let (s, b) = call(&app, get(&format!("/v1/projects/{p}/next?rater=e1"))).await;
    assert_eq!(s, StatusCode::OK);
    let first: Value = serde_json::from_slice(&b).unwrap();
    assert_eq!(first["id"], "i00001");
    assert_eq!(first["reference"], true);

    let (s, _) = call(&app, get(&format!("/v1/projects/{p}/aggregate"))).await;
    assert_eq!(s, StatusCode::OK);

    assert_eq!(rate(&app, &p, "i00001", "ghost", 50).await, StatusCode::UNAUTHORIZED);
    assert_eq!(rate(&app, &p, "i00001", "e1", 50).await, StatusCode::CREATED);
    assert_eq!(rate(&app, &p, "i00001", "e1", 60).await, StatusCode::CONFLICT);
    assert_eq!(rate(&app, &p, "i00002", "e1", 101).await, StatusCode::BAD_REQUEST);
    let bad = post_json("/v1/ratings", json!({ "project_id": p, "image_id": "i00002", "rater_id": "e1", "score": 50.5, "level": "Good" }));
    assert_eq!(call(&app, bad).await.0, StatusCode::BAD_REQUEST);

    let (_, b) = call(&app, get(&format!("/v1/projects/{p}/next?rater=e1"))).await;
    assert_eq!(serde_json::from_slice::<Value>(&b).unwrap()["id"], "i00002");
    assert_eq!(rate(&app, &p, "i00002", "e1", 55).await, StatusCode::CREATED);
    let (s, _) = call(&app, get(&format!("/v1/projects/{p}/next?rater=e1"))).await;
    assert_eq!(s, StatusCode::NO_CONTENT);
    let (s, _) = call(&app, get(&format!("/v1/projects/{p}/next?rater=ghost"))).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);

    let (s, b) = call(&app, get(&format!("/v1/projects/{p}/images/i00002"))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(b, png(64, 64, 1));
}

#[tokio::test]
async fn empty_aggregate_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), false));
    let p = setup_project(&app, 3).await;
    let (s, b) = call(&app, get(&format!("/v1/projects/{p}/aggregate"))).await;
    assert_eq!(s, StatusCode::OK);
    let agg: AggregateResponse = serde_json::from_slice(&b).unwrap();
    assert!(agg.images.is_empty());
    assert_eq!(agg.sd_quartiles, None);
}

#[tokio::test]
async fn ratings_survive_restart() {
    let dir = tempfile::tempdir().unwrap();
    let p = {
        let app = router(state(dir.path(), false));
        let p = setup_project(&app, 1).await;
        register(&app, "e1", "experienced").await;
        register(&app, "j1", "junior").await;
        assert_eq!(rate(&app, &p, "i00001", "e1", 80).await, StatusCode::CREATED);
        assert_eq!(rate(&app, &p, "i00001", "j1", 70).await, StatusCode::CREATED);
        p
    };
    let app = router(state(dir.path(), false));
    let (_, b) = call(&app, get(&format!("/v1/projects/{p}/aggregate"))).await;
    let agg: AggregateResponse = serde_json::from_slice(&b).unwrap();
    assert_eq!(agg.images[0].n_ratings, 2);
    let offline = aggregate_mos(
        &[
            RatingRecord {
                rater_id: "e1".into(),
                tier: RaterTier::Experienced,
                score: 80,
                level: Level::Good,
            },
            RatingRecord {
                rater_id: "j1".into(),
                tier: RaterTier::Junior,
                score: 70,
                level: Level::Good,
            },
        ],
        &AggregationWeights::default(),
    )
    .unwrap();
    assert_eq!(agg.images[0].mos, Some(offline));
    assert_eq!(rate(&app, &p, "i00001", "e1", 10).await, StatusCode::CONFLICT);
}

#[tokio::test]
async fn openapi_lists_every_route() {
    let dir = tempfile::tempdir().unwrap();
    let app = router(state(dir.path(), false));
    let (s, b) = call(&app, get("/v1/spec")).await;
    assert_eq!(s, StatusCode::OK);
    let doc: Value = serde_json::from_slice(&b).unwrap();
    for path in [
        "/v1/score",
        "/v1/projects",
        "/v1/projects/{id}/images",
        "/v1/projects/{id}/next",
        "/v1/ratings",
        "/v1/projects/{id}/aggregate",
    ] {
        assert!(doc["paths"].get(path).is_some(), "{path}");
    }
}
