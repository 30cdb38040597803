mod common;

use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{header, Method, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use lcx::imageio;
use lcx::nets;
use lcx::service::{self, AppState, Catalog, GridMode, ServiceConfig, DIGEST_HEADER};
use lcx::ImageTensor;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Catalog images quantized to 8 bits so PNG uploads round-trip exactly.
fn catalog_images(n: usize) -> Vec<(String, u8, ImageTensor)> {
    (0..n)
        .map(|i| {
            let pixels = (0..256)
                .map(|p| imageio::from_u8(((p * 7 + i * 31) % 251) as u8))
                .collect();
            (format!("img_{i}"), (i % 2) as u8, ImageTensor::new(16, pixels).unwrap())
        })
        .collect()
}

fn state_with(config: ServiceConfig) -> Arc<AppState> {
    let bundle = common::tiny_bundle(21);
    let catalog = Catalog::new(&bundle, catalog_images(4)).unwrap();
    Arc::new(AppState::new(bundle, "ab".repeat(32), catalog, config).unwrap())
}

fn app(config: ServiceConfig) -> (Router, Arc<AppState>) {
    let state = state_with(config);
    (service::router(state.clone()), state)
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let body = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, body)
}

fn post(uri: &str, body: Value) -> Request<Body> {
    Request::builder()
        .method(Method::POST)
        .uri(uri)
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

fn get(uri: &str) -> Request<Body> {
    Request::builder().uri(uri).body(Body::empty()).unwrap()
}

fn json_of(body: &[u8]) -> Value {
    serde_json::from_slice(body).unwrap()
}

#[tokio::test]
async fn meta_and_images_report_the_bundle() {
    let (app, state) = app(ServiceConfig::default());
    let (status, headers, body) = call(&app, get("/meta")).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[DIGEST_HEADER], state.digest.as_str());
    let meta = json_of(&body);
    assert_eq!(meta["bundle_digest"], json!(state.digest));
    assert_eq!(meta["latent_dim"], json!(8));
    assert_eq!(meta["resolution"], json!(16));
    assert_eq!(meta["grid_mode"], json!("strict"));
    assert_eq!(meta["image_count"], json!(4));

    let (_, _, body) = call(&app, get("/images")).await;
    let images = json_of(&body);
    let list = images["images"].as_array().unwrap();
    assert_eq!(list.len(), 4);
    assert_eq!(list[1]["id"], json!("img_1"));
    assert!(list[0].get("image").is_none());
}

#[tokio::test]
async fn unknown_routes_and_ids_are_404_with_the_digest() {
    let (app, state) = app(ServiceConfig::default());
    let (status, headers, body) = call(&app, get("/nope")).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(headers[DIGEST_HEADER], state.digest.as_str());
    assert_eq!(json_of(&body)["bundle_digest"], json!(state.digest));

    let (status, _, body) = call(&app, post("/traverse", json!({"image_id": "missing", "lambdas": [0.0]}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(json_of(&body)["error"].as_str().unwrap().contains("missing"));
    let (status, _, _) = call(&app, post("/gradcam", json!({"image_id": "missing"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn strict_grid_requires_zero() {
    let (strict, _) = app(ServiceConfig::default());
    let req = json!({"image_id": "img_0", "lambdas": [-1.0, 1.0]});
    let (status, _, body) = call(&strict, post("/traverse", req.clone())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert!(json_of(&body)["error"].as_str().unwrap().contains("0"));
    // 0.0004 quantizes to the identity frame.
    let (status, _, _) = call(&strict, post("/traverse", json!({"image_id": "img_0", "lambdas": [0.0004, 1.0]}))).await;
    assert_eq!(status, StatusCode::OK);

    let (free, _) = app(ServiceConfig {
        grid_mode: GridMode::Free,
        ..ServiceConfig::default()
    });
    let (status, _, _) = call(&free, post("/traverse", req)).await;
    assert_eq!(status, StatusCode::OK);

    for bad in [json!([]), json!(vec![0.0; 65]), json!([0.0, 1e9])] {
        let (status, _, _) = call(&free, post("/traverse", json!({"image_id": "img_0", "lambdas": bad}))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
}

#[tokio::test]
async fn oversized_bodies_are_413() {
    let (app, _) = app(ServiceConfig {
        body_limit: 1024,
        ..ServiceConfig::default()
    });
    let big = "A".repeat(4096);
    let (status, headers, _) = call(&app, post("/encode", json!({ "png_base64": big }))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert!(headers.contains_key(DIGEST_HEADER));
}

#[tokio::test]
async fn cors_is_permissive() {
    let (app, _) = app(ServiceConfig::default());
    let preflight = Request::builder()
        .method(Method::OPTIONS)
        .uri("/traverse")
        .header(header::ORIGIN, "http://localhost:5173")
        .header(header::ACCESS_CONTROL_REQUEST_METHOD, "POST")
        .header(header::ACCESS_CONTROL_REQUEST_HEADERS, "content-type")
        .body(Body::empty())
        .unwrap();
    let (status, headers, _) = call(&app, preflight).await;
    assert!(status.is_success());
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");

    let req = Request::builder()
        .uri("/meta")
        .header(header::ORIGIN, "http://example.test")
        .body(Body::empty())
        .unwrap();
    let (_, headers, _) = call(&app, req).await;
    assert_eq!(headers[header::ACCESS_CONTROL_ALLOW_ORIGIN], "*");
}

#[tokio::test]
async fn identity_frame_over_the_wire_is_the_reconstruction() {
    let (app, state) = app(ServiceConfig::default());
    let b = &state.bundle;
    for entry in state.catalog.entries() {
        let (status, _, body) = call(&app, post("/traverse", json!({"image_id": entry.id, "lambdas": [0.0]}))).await;
        assert_eq!(status, StatusCode::OK);
        let frame = &json_of(&body)["frames"][0];
        assert_eq!(frame["rendered_lambda"], json!(0.0));
        let png = B64.decode(frame["png_base64"].as_str().unwrap()).unwrap();
        let expected = nets::synthesis_forward(&b.synthesis, &b.generator_spec, &entry.latent).unwrap();
        assert_eq!(png, imageio::encode_gray_png(&expected).unwrap());
        let score = nets::classifier_forward(&b.classifier, &b.classifier_spec, &expected).unwrap();
        assert_eq!(frame["image_score"], json!(score));
    }
}

#[tokio::test]
async fn encode_matches_the_catalog_by_id_and_by_upload() {
    let (app, state) = app(ServiceConfig::default());
    let entry = &state.catalog.entries()[2];
    let (status, _, by_id) = call(&app, post("/encode", json!({"image_id": entry.id}))).await;
    assert_eq!(status, StatusCode::OK);
    let by_id = json_of(&by_id);
    assert_eq!(by_id["f_score"], json!(entry.f_score));
    assert_eq!(by_id["latent"], serde_json::to_value(&entry.latent).unwrap());

    let png = imageio::encode_gray_png(&entry.image).unwrap();
    let (status, _, uploaded) = call(&app, post("/encode", json!({"png_base64": B64.encode(png)}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&uploaded), by_id);

    let (status, _, _) = call(&app, post("/encode", json!({}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _, _) = call(&app, post("/encode", json!({"png_base64": "!!"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn frames_keep_request_order_and_report_quantization() {
    let (app, _) = app(ServiceConfig::default());
    let req = json!({"image_id": "img_1", "lambdas": [1.0, 0.0, -1.0, 0.12345]});
    let (_, _, body) = call(&app, post("/traverse", req)).await;
    let frames = json_of(&body)["frames"].as_array().unwrap().clone();
    let lambdas: Vec<f64> = frames.iter().map(|f| f["lambda"].as_f64().unwrap()).collect();
    assert_eq!(lambdas, vec![1.0, 0.0, -1.0, 0.12345]);
    let rendered = frames[3]["rendered_lambda"].as_f64().unwrap();
    assert!((rendered - 0.123).abs() < 1e-12);
}

#[tokio::test]
async fn cache_never_changes_responses() {
    let (cold, cold_state) = app(ServiceConfig {
        cache_bytes: 0,
        ..ServiceConfig::default()
    });
    let (warm, warm_state) = app(ServiceConfig::default());
    let req = json!({"image_id": "img_3", "lambdas": [-2.0, -0.5, 0.0, 0.5, 2.0]});
    let (_, _, a) = call(&cold, post("/traverse", req.clone())).await;
    let (_, _, b) = call(&warm, post("/traverse", req.clone())).await;
    let (_, _, c) = call(&warm, post("/traverse", req)).await;
    assert_eq!(a, b);
    assert_eq!(b, c);
    assert_eq!(cold_state.cached_frames(), 0);
    assert_eq!(warm_state.cached_frames(), 5);

    // A nearby lambda is served from the same cached frame.
    let (_, _, d) = call(&warm, post("/traverse", json!({"image_id": "img_3", "lambdas": [0.0004]}))).await;
    let (_, _, e) = call(&warm, post("/traverse", json!({"image_id": "img_3", "lambdas": [0.0]}))).await;
    let (d, e) = (json_of(&d), json_of(&e));
    assert_eq!(d["frames"][0]["png_base64"], e["frames"][0]["png_base64"]);
    assert_eq!(d["frames"][0]["lambda"], json!(0.0004));
    assert_eq!(warm_state.cached_frames(), 5);
}

#[tokio::test]
async fn cache_respects_its_byte_cap() {
    let cap = 4096;
    let (app, state) = app(ServiceConfig {
        cache_bytes: cap,
        grid_mode: GridMode::Free,
        ..ServiceConfig::default()
    });
    let lambdas: Vec<f64> = (0..40).map(|k| k as f64 * 0.05).collect();
    let (status, _, _) = call(&app, post("/traverse", json!({"image_id": "img_0", "lambdas": lambdas}))).await;
    assert_eq!(status, StatusCode::OK);
    assert!(state.cached_bytes() <= cap);
    assert!(state.cached_frames() < 40);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_sequential_ones() {
    let requests: Vec<Value> = (0..50)
        .map(|i| {
            let id = format!("img_{}", i % 4);
            let shift = (i % 7) as f64 * 0.25;
            json!({"image_id": id, "lambdas": [-shift, 0.0, shift + 0.5]})
        })
        .collect();
    let (seq_app, _) = app(ServiceConfig::default());
    let mut sequential = Vec::new();
    for r in &requests {
        sequential.push(call(&seq_app, post("/traverse", r.clone())).await.2);
    }
    let (par_app, _) = app(ServiceConfig::default());
    let handles: Vec<_> = requests
        .iter()
        .map(|r| {
            let app = par_app.clone();
            let r = r.clone();
            tokio::spawn(async move { call(&app, post("/traverse", r)).await })
        })
        .collect();
    for (h, want) in handles.into_iter().zip(&sequential) {
        let (status, _, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&body, want);
    }
}

#[tokio::test]
async fn gradcam_endpoint_returns_a_png_overlay() {
    let (app, _) = app(ServiceConfig::default());
    let (status, headers, body) = call(&app, post("/gradcam", json!({"image_id": "img_0"}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers[header::CONTENT_TYPE], "image/png");
    let reader = png::Decoder::new(std::io::Cursor::new(body)).read_info().unwrap();
    assert_eq!((reader.info().width, reader.info().height), (16, 16));
}

#[test]
fn unknown_gradcam_layer_is_rejected_at_startup() {
    let bundle = common::tiny_bundle(1);
    let catalog = Catalog::new(&bundle, Vec::new()).unwrap();
    let config = ServiceConfig {
        gradcam_layer: Some("nope".into()),
        ..ServiceConfig::default()
    };
    assert!(matches!(
        AppState::new(bundle, "00".into(), catalog, config),
        Err(lcx::LcxError::LayerLookup(_))
    ));
}

#[tokio::test]
async fn load_state_serves_the_exported_test_split() {
    let out = tempfile::tempdir().unwrap();
    let mut cfg = common::smoke_config();
    cfg.data.export_png = true;
    drop(common::run_smoke(cfg, out.path()));
    let state = service::load_state(&out.path().join("bundle"), ServiceConfig::default(), 5).unwrap();
    let ids: Vec<&str> = state.catalog.entries().iter().map(|e| e.id.as_str()).collect();
    assert_eq!(ids, ["test_00000", "test_00001", "test_00002", "test_00003", "test_00004"]);
    let app = service::router(Arc::new(state));
    let (status, _, body) = call(&app, post("/traverse", json!({"image_id": "test_00000", "lambdas": [0.0, 1.0]}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["frames"].as_array().unwrap().len(), 2);
}
