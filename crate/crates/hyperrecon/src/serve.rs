//! JSON-over-HTTP inference service for interactive exploration.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use hyperrecon_core::checkpoint::{Checkpoint, CheckpointMeta};
use hyperrecon_core::evaluation::{diverse_pair, landscape, Landscape, Metric};
use hyperrecon_core::forward::ForwardModel;
use hyperrecon_core::training::{Dataset, Model};
use hyperrecon_core::Error as CoreError;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::io::png_bytes;
use crate::pipeline::checkpoint_test_set;

/// Environment variable holding the bind address.
pub const ADDR_ENV: &str = "HYPERRECON_ADDR";
pub const DEFAULT_ADDR: &str = "127.0.0.1:8080";
/// Largest landscape side and diverse-pair grid accepted per request.
pub const MAX_GRID: usize = 101;

/// Read-only model and data behind every request.
pub struct ServeState {
    meta: CheckpointMeta,
    model: Model<f32>,
    forward: ForwardModel,
    test: Dataset<f32>,
    requests: AtomicU64,
}

impl ServeState {
    pub fn new(ckpt: &Checkpoint, test: Dataset<f32>) -> anyhow::Result<Self> {
        Ok(Self {
            meta: ckpt.meta.clone(),
            model: ckpt.model()?,
            forward: test.forward.clone(),
            test,
            requests: AtomicU64::new(0),
        })
    }

    /// Rebuilds the checkpoint's test set, keeping the first `limit` images.
    pub fn from_checkpoint(ckpt: &Checkpoint, limit: Option<usize>) -> anyhow::Result<Self> {
        Self::new(ckpt, checkpoint_test_set(ckpt, limit)?)
    }

    pub fn requests(&self) -> u64 {
        self.requests.load(Ordering::Relaxed)
    }
}

pub fn router(state: Arc<ServeState>) -> Router {
    Router::new()
        .route("/api/model", get(model_info))
        .route("/api/images", get(images))
        .route("/api/reconstruct", post(reconstruct))
        .route("/api/landscape", get(get_landscape))
        .route("/api/diverse", post(diverse))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: Arc<ServeState>, addr: SocketAddr) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

pub fn bind_addr() -> anyhow::Result<SocketAddr> {
    let s = std::env::var(ADDR_ENV).unwrap_or_else(|_| DEFAULT_ADDR.into());
    s.parse().map_err(|e| anyhow::anyhow!("{ADDR_ENV}={s}: {e}"))
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: None }
    }

    fn field(status: StatusCode, field: impl Into<String>, message: impl Into<String>) -> Self {
        Self { status, message: message.into(), field: Some(field.into()) }
    }
}

impl From<CoreError> for ApiError {
    fn from(e: CoreError) -> Self {
        let status = match &e {
            CoreError::OutOfRange { .. } | CoreError::Config(_) | CoreError::Shape { .. } => StatusCode::BAD_REQUEST,
            CoreError::Degenerate(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let field = match &e {
            CoreError::OutOfRange { field, .. } => Some(field.clone()),
            _ => None,
        };
        Self { status, message: e.to_string(), field }
    }
}

impl From<anyhow::Error> for ApiError {
    fn from(e: anyhow::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let Some(f) = self.field {
            body["field"] = json!(f);
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

fn b64_png(x: &hyperrecon_core::NdArray<f32>) -> Result<String, ApiError> {
    Ok(B64.encode(png_bytes(x)?))
}

impl ServeState {
    fn count(&self) {
        self.requests.fetch_add(1, Ordering::Relaxed);
    }

    fn sample(&self, id: usize) -> Result<&hyperrecon_core::training::Sample<f32>, ApiError> {
        self.test.samples.get(id).ok_or_else(|| {
            ApiError::field(
                StatusCode::NOT_FOUND,
                "image_id",
                format!("unknown image_id {id}; {} test images are loaded", self.test.len()),
            )
        })
    }

    fn check_lambda(&self, lambda: &[f64]) -> Result<(), ApiError> {
        let k1 = self.model.lambda_dim();
        if lambda.len() != k1 {
            return Err(ApiError::field(
                StatusCode::BAD_REQUEST,
                "lambda",
                format!("lambda has {} entries, the model takes {k1}", lambda.len()),
            ));
        }
        for (i, &l) in lambda.iter().enumerate() {
            if !(0.0..=1.0).contains(&l) {
                return Err(ApiError::field(
                    StatusCode::BAD_REQUEST,
                    format!("lambda[{i}]"),
                    format!("lambda[{i}] = {l} is outside [0, 1]"),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Serialize)]
struct ModelInfo {
    kind: &'static str,
    lambda_dim: usize,
    meta: CheckpointMeta,
    test_images: usize,
    requests: u64,
}

async fn model_info(State(s): State<Arc<ServeState>>) -> ApiResult<ModelInfo> {
    s.count();
    let mut meta = s.meta.clone();
    // per-epoch lambda draws are bulky and useless to a client
    for h in &mut meta.history {
        h.lambdas.clear();
    }
    Ok(Json(ModelInfo {
        kind: match s.model {
            Model::Hyper(_) => "hyper",
            Model::Baseline(_) => "baseline",
        },
        lambda_dim: s.model.lambda_dim(),
        meta,
        test_images: s.test.len(),
        requests: s.requests(),
    }))
}

#[derive(Debug, Serialize)]
struct ImageEntry {
    id: usize,
    /// Zero-filled reconstruction, base64 PNG.
    preview: String,
}

async fn images(State(s): State<Arc<ServeState>>) -> ApiResult<Vec<ImageEntry>> {
    s.count();
    let out = blocking(move || {
        s.test
            .samples
            .iter()
            .enumerate()
            .map(|(id, smp)| Ok(ImageEntry { id, preview: b64_png(&smp.zero_filled()?)? }))
            .collect::<Result<Vec<_>, ApiError>>()
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct ReconstructRequest {
    pub image_id: usize,
    pub lambda: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ReconMetrics {
    pub psnr: Option<f64>,
    pub rpsnr: Option<f64>,
    pub ssim: Option<f64>,
    pub dc_loss: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ReconstructResponse {
    pub image_id: usize,
    pub lambda: Vec<f64>,
    pub image: String,
    pub metrics: ReconMetrics,
}

async fn reconstruct(
    State(s): State<Arc<ServeState>>,
    Json(req): Json<ReconstructRequest>,
) -> ApiResult<ReconstructResponse> {
    s.count();
    s.sample(req.image_id)?;
    s.check_lambda(&req.lambda)?;
    let out = blocking(move || {
        let smp = s.sample(req.image_id)?;
        let lt: Vec<f32> = req.lambda.iter().map(|&v| v as f32).collect();
        let xhat = s.model.reconstruct(&lt, &smp.input)?;
        let with_target = |m: Metric| -> Result<Option<f64>, ApiError> {
            Ok(match smp.target {
                Some(_) => Some(m.evaluate(&xhat, smp)?),
                None => None,
            })
        };
        let metrics = ReconMetrics {
            psnr: with_target(Metric::Psnr)?,
            rpsnr: with_target(Metric::Rpsnr)?,
            ssim: with_target(Metric::Ssim)?,
            dc_loss: s.forward.data_consistency_value(&xhat, &smp.measurement)? as f64,
        };
        Ok(ReconstructResponse { image_id: req.image_id, lambda: req.lambda, image: b64_png(&xhat)?, metrics })
    })
    .await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct LandscapeQuery {
    #[serde(default = "default_metric")]
    pub metric: String,
    #[serde(default = "default_n")]
    pub n: usize,
}

fn default_metric() -> String {
    "rpsnr".into()
}

fn default_n() -> usize {
    50
}

async fn get_landscape(State(s): State<Arc<ServeState>>, Query(q): Query<LandscapeQuery>) -> ApiResult<Landscape> {
    s.count();
    let metric =
        Metric::parse(&q.metric).map_err(|e| ApiError::field(StatusCode::BAD_REQUEST, "metric", e.to_string()))?;
    if q.n == 0 || q.n > MAX_GRID {
        return Err(ApiError::field(StatusCode::BAD_REQUEST, "n", format!("n must lie in 1..={MAX_GRID}")));
    }
    let out = blocking(move || Ok(landscape(&s.model, &s.test, metric, q.n)?)).await?;
    Ok(Json(out))
}

#[derive(Debug, Deserialize)]
pub struct DiverseRequest {
    pub image_id: usize,
    pub percentile: f64,
    /// Points per lambda axis.
    #[serde(default = "default_diverse_n")]
    pub n: usize,
}

fn default_diverse_n() -> usize {
    11
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct DiverseResponse {
    pub image_id: usize,
    pub lambda_a: Vec<f64>,
    pub lambda_b: Vec<f64>,
    pub image_a: String,
    pub image_b: String,
    pub score_a: f64,
    pub score_b: f64,
    pub threshold: f64,
    pub distance: f64,
    /// "psnr", or "neg_dc" without ground truth.
    pub score: String,
}

async fn diverse(State(s): State<Arc<ServeState>>, Json(req): Json<DiverseRequest>) -> ApiResult<DiverseResponse> {
    s.count();
    s.sample(req.image_id)?;
    if !(0.0..=100.0).contains(&req.percentile) {
        return Err(ApiError::field(StatusCode::BAD_REQUEST, "percentile", "percentile must lie in [0, 100]"));
    }
    if req.n == 0 || req.n > MAX_GRID {
        return Err(ApiError::field(StatusCode::BAD_REQUEST, "n", format!("n must lie in 1..={MAX_GRID}")));
    }
    let out = blocking(move || {
        let smp = s.sample(req.image_id)?;
        let d = diverse_pair(&s.model, &s.forward, smp, req.n, req.percentile)?;
        Ok(DiverseResponse {
            image_id: req.image_id,
            image_a: b64_png(&d.image_a)?,
            image_b: b64_png(&d.image_b)?,
            lambda_a: d.lambda_a,
            lambda_b: d.lambda_b,
            score_a: d.score_a,
            score_b: d.score_b,
            threshold: d.threshold,
            distance: d.distance,
            score: if d.by_psnr { "psnr" } else { "neg_dc" }.into(),
        })
    })
    .await?;
    Ok(Json(out))
}
