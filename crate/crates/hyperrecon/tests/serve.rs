mod common;

use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use common::train_tiny;
use http_body_util::BodyExt;
use hyperrecon::io::load_checkpoint;
use hyperrecon::pipeline::checkpoint_test_set;
use hyperrecon::serve::{router, ServeState};
use hyperrecon_core::evaluation::{landscape, Landscape, Metric};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    _dir: tempfile::TempDir,
    state: Arc<ServeState>,
    ckpt: hyperrecon_core::checkpoint::Checkpoint,
}

const LIMIT: usize = 3;

fn fixture(three_terms: bool) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = load_checkpoint(&train_tiny(dir.path(), three_terms)).unwrap();
    let state = Arc::new(ServeState::from_checkpoint(&ckpt, Some(LIMIT)).unwrap());
    Fixture { _dir: dir, state, ckpt }
}

async fn call(state: &Arc<ServeState>, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::post(uri).header("content-type", "application/json").body(Body::from(body.to_string())).unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::get(uri).body(Body::empty()).unwrap()
}

fn parse(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[tokio::test]
async fn reconstruct_is_deterministic_and_validated() {
    let f = fixture(true);
    let req = json!({"image_id": 1, "lambda": [0.0, 0.0]});
    let (s1, b1) = call(&f.state, post("/api/reconstruct", req.clone())).await;
    let (s2, b2) = call(&f.state, post("/api/reconstruct", req)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(b1, b2);

    let v = parse(&b1);
    let png = B64.decode(v["image"].as_str().unwrap()).unwrap();
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    for k in ["psnr", "rpsnr", "ssim", "dc_loss"] {
        assert!(v["metrics"][k].as_f64().unwrap().is_finite(), "{k}");
    }

    let (s, b) = call(&f.state, post("/api/reconstruct", json!({"image_id": 0, "lambda": [1.5, 0.0]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["field"], "lambda[0]");

    let (s, b) = call(&f.state, post("/api/reconstruct", json!({"image_id": 0, "lambda": [0.5]}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(parse(&b)["field"], "lambda");

    let (s, b) = call(&f.state, post("/api/reconstruct", json!({"image_id": 99, "lambda": [0.5, 0.5]}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(parse(&b)["field"], "image_id");
}

#[tokio::test]
async fn reconstruct_matches_the_model() {
    let f = fixture(true);
    let (_, b) = call(&f.state, post("/api/reconstruct", json!({"image_id": 2, "lambda": [0.3, 0.6]}))).await;
    let v = parse(&b);
    let test = checkpoint_test_set(&f.ckpt, Some(LIMIT)).unwrap();
    let xhat = f.ckpt.model().unwrap().reconstruct(&[0.3f32, 0.6], &test.samples[2].input).unwrap();
    let psnr = Metric::Psnr.evaluate(&xhat, &test.samples[2]).unwrap();
    assert_eq!(v["metrics"]["psnr"].as_f64().unwrap(), psnr);
    assert_eq!(B64.decode(v["image"].as_str().unwrap()).unwrap(), hyperrecon::io::png_bytes(&xhat).unwrap());
}

#[tokio::test]
async fn landscape_corners_match_offline_computation() {
    let f = fixture(true);
    let (s, b) = call(&f.state, get("/api/landscape?metric=rpsnr&n=2")).await;
    assert_eq!(s, StatusCode::OK);
    let api: Landscape = serde_json::from_slice(&b).unwrap();
    let test = checkpoint_test_set(&f.ckpt, Some(LIMIT)).unwrap();
    let direct = landscape(&f.ckpt.model().unwrap(), &test, Metric::Rpsnr, 2).unwrap();
    assert_eq!(api, direct);
    assert_eq!(api.x_axis, vec![0.0, 1.0]);

    let (s, b) = call(&f.state, get("/api/landscape?metric=nope&n=2")).await;
    assert_eq!((s, parse(&b)["field"].clone()), (StatusCode::BAD_REQUEST, json!("metric")));
    let (s, _) = call(&f.state, get("/api/landscape?n=0")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn landscape_on_two_term_model_is_an_arity_error() {
    let f = fixture(false);
    let (s, b) = call(&f.state, get("/api/landscape?n=2")).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert!(parse(&b)["error"].as_str().unwrap().contains("three-term"));
}

#[tokio::test]
async fn diverse_images_and_model_endpoints() {
    let f = fixture(true);
    let (s, b) = call(&f.state, post("/api/diverse", json!({"image_id": 0, "percentile": 50.0, "n": 4}))).await;
    assert_eq!(s, StatusCode::OK, "{}", String::from_utf8_lossy(&b));
    let v = parse(&b);
    assert_ne!(v["lambda_a"], v["lambda_b"]);
    assert!(v["score_a"].as_f64().unwrap() >= v["threshold"].as_f64().unwrap());
    assert_eq!(v["score"], "psnr");

    let (s, b) = call(&f.state, post("/api/diverse", json!({"image_id": 0, "percentile": 100.0, "n": 4}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{}", String::from_utf8_lossy(&b));
    let (s, _) = call(&f.state, post("/api/diverse", json!({"image_id": 7, "percentile": 50.0}))).await;
    assert_eq!(s, StatusCode::NOT_FOUND);

    let (s, b) = call(&f.state, get("/api/images")).await;
    assert_eq!(s, StatusCode::OK);
    let imgs = parse(&b);
    assert_eq!(imgs.as_array().unwrap().len(), LIMIT);
    assert_eq!(imgs[2]["id"], 2);

    let (s, b) = call(&f.state, get("/api/model")).await;
    assert_eq!(s, StatusCode::OK);
    let m = parse(&b);
    assert_eq!(m["kind"], "hyper");
    assert_eq!(m["lambda_dim"], 2);
    assert_eq!(m["meta"]["loss"]["alphas"].as_array().unwrap().len(), 3);
    assert_eq!(m["test_images"], LIMIT);
    assert_eq!(f.state.requests(), 5);
}

#[tokio::test]
async fn concurrent_identical_requests_agree() {
    let f = fixture(true);
    let req = || post("/api/reconstruct", json!({"image_id": 0, "lambda": [0.2, 0.7]}));
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let s = f.state.clone();
            let r = req();
            tokio::spawn(async move { call(&s, r).await })
        })
        .collect();
    let mut bodies = Vec::new();
    for h in handles {
        bodies.push(h.await.unwrap().1);
    }
    assert!(bodies.windows(2).all(|w| w[0] == w[1]));
    let before = f.ckpt.encode().unwrap();
    let after = load_checkpoint(&f._dir.path().join("checkpoint.hrc")).unwrap().encode().unwrap();
    assert_eq!(before, after);
}
