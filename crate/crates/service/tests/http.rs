mod common;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use magnet::experts::ExpertRegistry;
use magnet_service::server::router;
use tower::ServiceExt;

async fn call(app: axum::Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn post(body: Vec<u8>) -> Request<Body> {
    Request::post("/predict").header("content-type", "application/json").body(Body::from(body)).unwrap()
}

#[tokio::test]
async fn predict_is_byte_equal_to_in_process_prediction() {
    let state = common::state();
    let app = router(state.clone());
    let ds = common::dataset(9);
    for trial in ds.trials.iter().take(50) {
        let (status, body) = call(app.clone(), post(serde_json::to_vec(trial).unwrap())).await;
        assert_eq!(status, StatusCode::OK);
        let direct = serde_json::to_vec(&state.model.predict(trial).unwrap()).unwrap();
        assert_eq!(body, direct, "trial {}", trial.trial_id);
    }
}

#[tokio::test]
async fn predict_rejects_bad_payloads() {
    let app = router(common::state());
    let (status, body) = call(app.clone(), post(b"{\"trial_id\":1}".to_vec())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["type"], "error");
    assert_eq!(v["code"], "malformed");

    let mut trial = common::dataset(2).trials[0].clone();
    trial.endpoint = vec![1.0, 2.0, 3.0];
    let (status, body) = call(app, post(serde_json::to_vec(&trial).unwrap())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["code"], "invalid");
}

#[tokio::test]
async fn health_reports_hashes() {
    let state = common::state();
    let (status, body) = call(router(state.clone()), Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["checkpoint_hash"], "test");
    assert_eq!(v["config_hash"], state.config_hash.as_str());
    assert_eq!(v["experts"], serde_json::json!(["s-f", "s-h", "w-h"]));
}

#[tokio::test]
async fn experts_endpoint_returns_the_registry() {
    let (status, body) = call(router(common::state()), Request::get("/experts").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    let reg = ExpertRegistry::from_json(std::str::from_utf8(&body).unwrap()).unwrap();
    assert_eq!(reg, common::registry());
}

#[tokio::test]
async fn unknown_route_is_not_found() {
    let (status, _) = call(router(common::state()), Request::get("/nope").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}
