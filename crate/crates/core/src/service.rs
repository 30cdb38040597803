//! Read-only HTTP API over a loaded bundle.
//!
//! Requested lambdas are quantized to 1e-3 before rendering, so a cached
//! frame is byte-identical to a freshly rendered one.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, HeaderName, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use lru::LruCache;
use serde::{Deserialize, Serialize};
use tower_http::cors::CorsLayer;
use tower_http::set_header::SetResponseHeaderLayer;

use crate::bundle::{load_bundle, ModelBundle, BUNDLE_FORMAT_VERSION};
use crate::error::{LcxError, Result};
use crate::gradcam;
use crate::imageio;
use crate::latent::{self, StepMode};
use crate::metrics;
use crate::nets;
use crate::synthdata::{self, DatasetSplit, GapEstimate};
use crate::tensor::{ImageTensor, LatentVector};

pub const DIGEST_HEADER: &str = "x-bundle-digest";
pub const LAMBDA_QUANTUM: f64 = 1e-3;
pub const MAX_LAMBDAS: usize = 64;
pub const DEFAULT_BODY_LIMIT: usize = 1 << 20;
/// Bookkeeping bytes charged per cache entry on top of the PNG.
const ENTRY_OVERHEAD: usize = 96;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridMode {
    /// Every lambda list must contain 0.
    Strict,
    Free,
}

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub cache_bytes: usize,
    pub grid_mode: GridMode,
    pub body_limit: usize,
    pub gradcam_layer: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            cache_bytes: 64 << 20,
            grid_mode: GridMode::Strict,
            body_limit: DEFAULT_BODY_LIMIT,
            gradcam_layer: None,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CatalogEntry {
    pub id: String,
    pub label: u8,
    pub f_score: f64,
    #[serde(skip)]
    pub image: ImageTensor,
    #[serde(skip)]
    pub latent: LatentVector,
}

pub struct Catalog {
    entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn new(bundle: &ModelBundle, images: Vec<(String, u8, ImageTensor)>) -> Result<Self> {
        let pics: Vec<ImageTensor> = images.iter().map(|(_, _, im)| im.clone()).collect();
        let scores = nets::classifier_forward_batch(&bundle.classifier, &bundle.classifier_spec, &pics)?;
        let latents = nets::encoder_forward_batch(&bundle.encoder, &bundle.encoder_spec, &pics)?;
        let entries = images
            .into_iter()
            .zip(scores)
            .zip(latents)
            .map(|(((id, label, image), f_score), latent)| CatalogEntry {
                id,
                label,
                f_score,
                image,
                latent,
            })
            .collect();
        Ok(Catalog { entries })
    }

    /// Test images of an in-memory split, ids `test_00000`, ...
    pub fn from_split(bundle: &ModelBundle, split: &DatasetSplit, limit: usize) -> Result<Self> {
        let images = split
            .test
            .iter()
            .take(limit)
            .enumerate()
            .map(|(i, s)| (format!("test_{i:05}"), s.label, s.image.clone()))
            .collect();
        Catalog::new(bundle, images)
    }

    /// Test images from a dataset directory written by the data stage.
    pub fn from_export(bundle: &ModelBundle, dir: &Path, limit: usize) -> Result<Self> {
        let manifest = synthdata::read_manifest(dir)?;
        let mut images = Vec::new();
        for e in manifest.samples.iter().filter(|e| e.split == "test").take(limit) {
            let path = dir.join(&e.filename);
            let bytes = std::fs::read(&path).map_err(|err| LcxError::io(&path, err))?;
            let id = e.filename.trim_end_matches(".png").to_string();
            images.push((id, e.label, imageio::decode_gray_png(&bytes)?));
        }
        Catalog::new(bundle, images)
    }

    pub fn get(&self, id: &str) -> Option<&CatalogEntry> {
        self.entries.iter().find(|e| e.id == id)
    }

    pub fn entries(&self) -> &[CatalogEntry] {
        &self.entries
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RenderedFrame {
    pub lambda: f64,
    pub rendered_lambda: f64,
    pub png_base64: String,
    pub latent_score: f64,
    pub image_score: f64,
    pub gap_estimate: GapEstimate,
}

struct FrameCache {
    map: LruCache<(String, i64), Arc<RenderedFrame>>,
    bytes: usize,
    cap: usize,
}

impl FrameCache {
    fn cost(f: &RenderedFrame) -> usize {
        f.png_base64.len() + ENTRY_OVERHEAD
    }

    fn get(&mut self, key: &(String, i64)) -> Option<Arc<RenderedFrame>> {
        self.map.get(key).cloned()
    }

    fn put(&mut self, key: (String, i64), frame: Arc<RenderedFrame>) {
        let cost = Self::cost(&frame);
        if cost > self.cap {
            return;
        }
        if let Some(old) = self.map.put(key, frame) {
            self.bytes -= Self::cost(&old);
        }
        self.bytes += cost;
        while self.bytes > self.cap {
            match self.map.pop_lru() {
                Some((_, old)) => self.bytes -= Self::cost(&old),
                None => break,
            }
        }
    }
}

pub struct AppState {
    pub bundle: ModelBundle,
    pub digest: String,
    pub catalog: Catalog,
    pub config: ServiceConfig,
    cache: Mutex<FrameCache>,
}

impl AppState {
    pub fn new(bundle: ModelBundle, digest: String, catalog: Catalog, config: ServiceConfig) -> Result<Self> {
        if let Some(layer) = &config.gradcam_layer {
            if !bundle.classifier_spec.feature_layers().contains(layer) {
                return Err(LcxError::LayerLookup(layer.clone()));
            }
        }
        Ok(AppState {
            cache: Mutex::new(FrameCache {
                map: LruCache::unbounded(),
                bytes: 0,
                cap: config.cache_bytes,
            }),
            bundle,
            digest,
            catalog,
            config,
        })
    }

    pub fn cached_bytes(&self) -> usize {
        self.cache.lock().expect("cache lock").bytes
    }

    pub fn cached_frames(&self) -> usize {
        self.cache.lock().expect("cache lock").map.len()
    }

    fn gradcam_layer(&self) -> String {
        self.config
            .gradcam_layer
            .clone()
            .unwrap_or_else(|| self.bundle.classifier_spec.last_block())
    }

    /// Renders `G(w + q(lambda) * step)`, consulting the cache first.
    pub fn frame(&self, image_id: &str, w: &LatentVector, lambda: f64) -> Result<Arc<RenderedFrame>> {
        let q = quantize(lambda);
        let key = (image_id.to_string(), q);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(Arc::new(RenderedFrame {
                lambda,
                ..(*hit).clone()
            }));
        }
        let rendered_lambda = q as f64 * LAMBDA_QUANTUM;
        let wk = latent::shifted_latent(&self.bundle.direction, w, rendered_lambda, StepMode::Unit);
        let image = nets::synthesis_forward(&self.bundle.synthesis, &self.bundle.generator_spec, &wk)?;
        let frame = Arc::new(RenderedFrame {
            lambda,
            rendered_lambda,
            png_base64: B64.encode(imageio::encode_gray_png(&image)?),
            latent_score: latent::latent_predict(&self.bundle.direction, &wk)?,
            image_score: nets::classifier_forward(&self.bundle.classifier, &self.bundle.classifier_spec, &image)?,
            gap_estimate: synthdata::measure_gap(&image),
        });
        self.cache.lock().expect("cache lock").put(key, frame.clone());
        Ok(frame)
    }
}

/// `lambda` in units of [`LAMBDA_QUANTUM`], rounded half away from zero.
pub fn quantize(lambda: f64) -> i64 {
    (lambda / LAMBDA_QUANTUM).round() as i64
}

// --- handlers --------------------------------------------------------------

type Shared = Arc<AppState>;

struct ApiError {
    status: StatusCode,
    message: String,
    digest: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (
            self.status,
            Json(serde_json::json!({ "error": self.message, "bundle_digest": self.digest })),
        )
            .into_response()
    }
}

fn api_error(state: &AppState, status: StatusCode, message: impl Into<String>) -> ApiError {
    ApiError {
        status,
        message: message.into(),
        digest: state.digest.clone(),
    }
}

fn internal(state: &AppState, e: LcxError) -> ApiError {
    let status = match e {
        LcxError::Shape(_) | LcxError::Contract(_) | LcxError::Image(_) => StatusCode::UNPROCESSABLE_ENTITY,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    api_error(state, status, e.to_string())
}

async fn blocking<T: Send + 'static>(
    state: Shared,
    f: impl FnOnce(&AppState) -> std::result::Result<T, ApiError> + Send + 'static,
) -> std::result::Result<T, ApiError> {
    let s = state.clone();
    tokio::task::spawn_blocking(move || f(&s))
        .await
        .map_err(|e| api_error(&state, StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn meta(State(state): State<Shared>) -> Json<serde_json::Value> {
    let b = &state.bundle;
    Json(serde_json::json!({
        "bundle_digest": state.digest,
        "format_version": BUNDLE_FORMAT_VERSION,
        "latent_dim": b.latent_dim(),
        "resolution": b.resolution(),
        "default_lambdas": latent::default_lambdas(),
        "lambda_quantum": LAMBDA_QUANTUM,
        "grid_mode": state.config.grid_mode,
        "direction": {
            "train_auc": b.direction.train_auc,
            "projection_std": b.direction.projection_std,
            "l2_strength": b.direction.l2_strength,
        },
        "gradcam_layer": state.gradcam_layer(),
        "image_count": state.catalog.entries().len(),
    }))
}

async fn images(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "bundle_digest": state.digest,
        "images": state.catalog.entries(),
    }))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EncodeRequest {
    #[serde(default)]
    image_id: Option<String>,
    #[serde(default)]
    png_base64: Option<String>,
}

async fn encode(State(state): State<Shared>, Json(req): Json<EncodeRequest>) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    blocking(state, move |s| {
        let image = match (&req.image_id, &req.png_base64) {
            (Some(id), None) => s
                .catalog
                .get(id)
                .ok_or_else(|| api_error(s, StatusCode::NOT_FOUND, format!("unknown image_id `{id}`")))?
                .image
                .clone(),
            (None, Some(data)) => {
                let bytes = B64
                    .decode(data)
                    .map_err(|e| api_error(s, StatusCode::UNPROCESSABLE_ENTITY, format!("png_base64: {e}")))?;
                let im = imageio::decode_gray_png(&bytes).map_err(|e| internal(s, e))?;
                if im.resolution() != s.bundle.resolution() {
                    return Err(api_error(
                        s,
                        StatusCode::UNPROCESSABLE_ENTITY,
                        format!("image is {0}x{0}, bundle expects {1}x{1}", im.resolution(), s.bundle.resolution()),
                    ));
                }
                im
            }
            _ => {
                return Err(api_error(
                    s,
                    StatusCode::UNPROCESSABLE_ENTITY,
                    "provide exactly one of image_id or png_base64",
                ))
            }
        };
        let b = &s.bundle;
        let w = nets::encoder_forward(&b.encoder, &b.encoder_spec, &image).map_err(|e| internal(s, e))?;
        let rebuilt = nets::synthesis_forward(&b.synthesis, &b.generator_spec, &w).map_err(|e| internal(s, e))?;
        let f = nets::classifier_forward(&b.classifier, &b.classifier_spec, &image).map_err(|e| internal(s, e))?;
        let ft = latent::latent_predict(&b.direction, &w).map_err(|e| internal(s, e))?;
        let psnr = metrics::psnr(&image, &rebuilt);
        Ok(Json(serde_json::json!({
            "bundle_digest": s.digest,
            "latent": w,
            "f_score": f,
            "f_tilde_score": ft,
            "reconstruction_psnr": if psnr.is_finite() { serde_json::json!(psnr) } else { serde_json::Value::Null },
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TraverseRequest {
    image_id: String,
    lambdas: Vec<f64>,
}

async fn traverse(State(state): State<Shared>, Json(req): Json<TraverseRequest>) -> std::result::Result<Json<serde_json::Value>, ApiError> {
    blocking(state, move |s| {
        let entry = s
            .catalog
            .get(&req.image_id)
            .ok_or_else(|| api_error(s, StatusCode::NOT_FOUND, format!("unknown image_id `{}`", req.image_id)))?;
        let unprocessable = |m: &str| api_error(s, StatusCode::UNPROCESSABLE_ENTITY, m);
        if req.lambdas.is_empty() || req.lambdas.len() > MAX_LAMBDAS {
            return Err(unprocessable(&format!("lambdas must hold 1..={MAX_LAMBDAS} values")));
        }
        if req.lambdas.iter().any(|l| !l.is_finite() || l.abs() > 1e6) {
            return Err(unprocessable("lambdas must be finite and within +-1e6"));
        }
        if s.config.grid_mode == GridMode::Strict && !req.lambdas.iter().any(|&l| quantize(l) == 0) {
            return Err(unprocessable("lambda list must contain 0 in strict grid mode"));
        }
        let frames = req
            .lambdas
            .iter()
            .map(|&l| s.frame(&entry.id, &entry.latent, l).map(|f| (*f).clone()))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| internal(s, e))?;
        Ok(Json(serde_json::json!({
            "bundle_digest": s.digest,
            "image_id": entry.id,
            "frames": frames,
        })))
    })
    .await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GradcamRequest {
    image_id: String,
}

async fn gradcam_overlay(State(state): State<Shared>, Json(req): Json<GradcamRequest>) -> std::result::Result<Response, ApiError> {
    blocking(state, move |s| {
        let entry = s
            .catalog
            .get(&req.image_id)
            .ok_or_else(|| api_error(s, StatusCode::NOT_FOUND, format!("unknown image_id `{}`", req.image_id)))?;
        let b = &s.bundle;
        let heatmap = gradcam::gradcam(&b.classifier, &b.classifier_spec, &entry.image, &s.gradcam_layer()).map_err(|e| internal(s, e))?;
        let png = gradcam::overlay_png(&entry.image, &heatmap).map_err(|e| internal(s, e))?;
        Ok(([(header::CONTENT_TYPE, HeaderValue::from_static("image/png"))], png).into_response())
    })
    .await
}

async fn not_found(State(state): State<Shared>) -> ApiError {
    api_error(&state, StatusCode::NOT_FOUND, "no such route")
}

pub fn router(state: Shared) -> Router {
    let digest = HeaderValue::from_str(&state.digest).expect("hex digest is a valid header");
    let limit = state.config.body_limit;
    Router::new()
        .route("/meta", get(meta))
        .route("/images", get(images))
        .route("/encode", post(encode))
        .route("/traverse", post(traverse))
        .route("/gradcam", post(gradcam_overlay))
        .fallback(not_found)
        .with_state(state)
        .layer(DefaultBodyLimit::max(limit))
        .layer(SetResponseHeaderLayer::overriding(HeaderName::from_static(DIGEST_HEADER), digest))
        .layer(CorsLayer::permissive())
}

/// Loads the bundle at `bundle_dir` and its sibling `data/` export.
pub fn load_state(bundle_dir: &Path, config: ServiceConfig, catalog_limit: usize) -> Result<AppState> {
    let (bundle, digest) = load_bundle(bundle_dir)?;
    let data_dir = bundle_dir.parent().map(|p| p.join("data")).filter(|p| p.join("manifest.json").exists());
    let catalog = match data_dir {
        Some(dir) => Catalog::from_export(&bundle, &dir, catalog_limit)?,
        None => Catalog::new(&bundle, Vec::new())?,
    };
    AppState::new(bundle, digest, catalog, config)
}

pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(Arc::new(state))).await
}
