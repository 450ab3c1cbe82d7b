//! HTTP front end: prediction, saliency and oracle endpoints over a shared
//! read-only model, plus background PBIL design jobs.

mod jobs;
mod payload;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::services::ServeDir;

use dlsp_core::design::PbilParams;
use dlsp_core::interpret::saliency;
use dlsp_core::morpho::{parse_sidecar, BinningSpec, Morphology};
use dlsp_core::nn::{decode_weights, ArchSpec, CnnModel};
use dlsp_core::oracle::{self, OracleError, OracleParams};
use dlsp_core::presets;

pub use jobs::{DesignJob, JobStatus};
pub use payload::GridPayload;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot load model {path}: {message}")]
    Model { path: PathBuf, message: String },
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub model_path: Option<PathBuf>,
    /// Bin edges for the oracle endpoint's `class` field. Defaults to the
    /// `<model>.binning` sidecar when present.
    pub binning_path: Option<PathBuf>,
    pub ui_dir: Option<PathBuf>,
    pub max_jobs: usize,
    pub oracle: OracleParams,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            model_path: None,
            binning_path: None,
            ui_dir: None,
            max_jobs: 4,
            oracle: OracleParams::default(),
        }
    }
}

pub struct AppState {
    model: Option<Arc<CnnModel<f32>>>,
    digest: Option<String>,
    binning: Option<BinningSpec>,
    oracle: OracleParams,
    max_jobs: usize,
    jobs: Arc<jobs::JobStore>,
}

fn read(path: &std::path::Path) -> Result<Vec<u8>, ServerError> {
    std::fs::read(path).map_err(|source| ServerError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl AppState {
    pub fn load(cfg: &ServerConfig) -> Result<Self, ServerError> {
        let (model, digest) = match &cfg.model_path {
            Some(path) => {
                let bytes = read(path)?;
                let model = decode_weights(&bytes, &ArchSpec::default_classifier()).map_err(|e| ServerError::Model {
                    path: path.clone(),
                    message: e.to_string(),
                })?;
                let digest = Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect::<String>();
                (Some(Arc::new(model)), Some(digest))
            }
            None => (None, None),
        };
        let binning_path = cfg
            .binning_path
            .clone()
            .or_else(|| cfg.model_path.as_ref().map(|p| p.with_extension("binning")).filter(|p| p.exists()));
        let binning = match binning_path {
            Some(p) => {
                let text = String::from_utf8_lossy(&read(&p)?).into_owned();
                parse_sidecar(&text)
                    .map_err(|e| ServerError::Model {
                        path: p.clone(),
                        message: e.to_string(),
                    })?
                    .0
            }
            None => None,
        };
        Ok(Self {
            model,
            digest,
            binning,
            oracle: cfg.oracle.clone(),
            max_jobs: cfg.max_jobs,
            jobs: Arc::default(),
        })
    }
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

fn bad_request(msg: impl Into<String>) -> ApiError {
    ApiError(StatusCode::BAD_REQUEST, msg.into())
}

type Shared = Arc<AppState>;

fn model_of(state: &AppState) -> Result<Arc<CnnModel<f32>>, ApiError> {
    state
        .model
        .clone()
        .ok_or_else(|| ApiError(StatusCode::SERVICE_UNAVAILABLE, "no model loaded".into()))
}

fn model_input(model: &CnnModel<f32>, grid: &GridPayload) -> Result<Morphology, ApiError> {
    if grid.height != model.arch.height || grid.width != model.arch.width {
        return Err(bad_request(format!(
            "grid is {}x{}, model expects {}x{}",
            grid.height, grid.width, model.arch.height, model.arch.width
        )));
    }
    grid.to_morphology().map_err(bad_request)
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Prediction {
    pub class: u8,
    pub probs: Vec<f64>,
}

async fn predict(State(state): State<Shared>, Json(grid): Json<GridPayload>) -> Result<Json<Prediction>, ApiError> {
    let model = model_of(&state)?;
    let m = model_input(&model, &grid)?;
    blocking(move || {
        let x: Vec<f32> = m.values().iter().map(|&v| v as f32).collect();
        let (class, probs) = model.predict(&x).map_err(|e| bad_request(e.to_string()))?;
        Ok(Json(Prediction {
            class,
            probs: probs.iter().map(|&p| p as f64).collect(),
        }))
    })
    .await
}

#[derive(Debug, Deserialize)]
struct SaliencyRequest {
    #[serde(flatten)]
    grid: GridPayload,
    target: Option<u8>,
}

async fn saliency_map(State(state): State<Shared>, Json(req): Json<SaliencyRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    let model = model_of(&state)?;
    let m = model_input(&model, &req.grid)?;
    blocking(move || {
        let s = saliency(model.as_ref(), &m, req.target).map_err(|e| bad_request(e.to_string()))?;
        let g = GridPayload::from_values(s.height, s.width, &s.values);
        Ok(Json(json!({
            "map_b64": g.grid_b64,
            "height": s.height,
            "width": s.width,
            "target_class": s.target_class,
        })))
    })
    .await
}

async fn oracle_eval(State(state): State<Shared>, Json(grid): Json<GridPayload>) -> Result<Json<serde_json::Value>, ApiError> {
    let m = grid.to_morphology().map_err(bad_request)?;
    let p = state.oracle.clone();
    let binning = state.binning.clone();
    blocking(move || match oracle::evaluate(&m, &p) {
        Ok(r) => Ok(Json(json!({
            "jsc": r.jsc,
            "proxy": r.proxy,
            "eta_diss": r.eta_diss,
            "eta_transport": r.eta_transport,
            "class": binning.map(|b| b.assign_class(r.jsc)),
        }))),
        Err(e @ OracleError::SolverDiverged { .. }) => Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())),
        Err(e) => Err(ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())),
    })
    .await
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum InitSpec {
    Named(String),
    Grid(GridPayload),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamOverrides {
    n: Option<usize>,
    n_b: Option<usize>,
    l_r: Option<f64>,
    mutation_prob: Option<f64>,
    mutation_shift: Option<f64>,
    p_min: Option<f64>,
    p_max: Option<f64>,
    smoothing_radius: Option<usize>,
    max_iters: Option<usize>,
    improvement_tol: Option<f64>,
    improvement_window: Option<usize>,
    seed: Option<u64>,
    delta: Option<f64>,
    /// "cnn" (default) or "oracle"
    fitness: Option<String>,
}

#[derive(Debug, Deserialize)]
struct StartRequest {
    init: InitSpec,
    #[serde(default)]
    params: ParamOverrides,
}

async fn design_start(State(state): State<Shared>, Json(req): Json<StartRequest>) -> Result<Json<serde_json::Value>, ApiError> {
    let o = req.params;
    let d = PbilParams::default();
    let params = PbilParams {
        n: o.n.unwrap_or(d.n),
        n_b: o.n_b.unwrap_or(d.n_b),
        l_r: o.l_r.unwrap_or(d.l_r),
        mutation_prob: o.mutation_prob.unwrap_or(d.mutation_prob),
        mutation_shift: o.mutation_shift.unwrap_or(d.mutation_shift),
        p_min: o.p_min.unwrap_or(d.p_min),
        p_max: o.p_max.unwrap_or(d.p_max),
        smoothing_radius: o.smoothing_radius.unwrap_or(d.smoothing_radius),
        max_iters: o.max_iters.unwrap_or(d.max_iters),
        improvement_tol: o.improvement_tol.unwrap_or(d.improvement_tol),
        improvement_window: o.improvement_window.unwrap_or(d.improvement_window),
        seed: o.seed.unwrap_or(d.seed),
        serial: false,
    };
    params.validate().map_err(|e| bad_request(e.to_string()))?;
    let delta = o.delta.unwrap_or(0.1);
    if !(delta > 0.0 && delta < 0.5) {
        return Err(bad_request("delta must lie in (0, 0.5)"));
    }
    let fitness = match o.fitness.as_deref().unwrap_or("cnn") {
        "cnn" => jobs::Fitness::Cnn(model_of(&state)?),
        "oracle" => jobs::Fitness::Oracle(state.oracle.clone()),
        other => return Err(bad_request(format!("unknown fitness {other:?}"))),
    };
    let (h, w) = match &fitness {
        jobs::Fitness::Cnn(m) => (m.arch.height, m.arch.width),
        jobs::Fitness::Oracle(_) => (dlsp_core::morpho::DEFAULT_SIDE, dlsp_core::morpho::DEFAULT_SIDE),
    };
    let init = match req.init {
        InitSpec::Named(name) if name == "uniform" => Morphology::filled(h, w, 0.5).map_err(|e| bad_request(e.to_string()))?,
        InitSpec::Named(name) => {
            let b = presets::by_name(&name).ok_or_else(|| bad_request(format!("unknown init {name:?}")))?;
            Morphology::from(&b)
        }
        InitSpec::Grid(g) => g.to_morphology().map_err(bad_request)?,
    };
    if (init.height(), init.width()) != (h, w) {
        return Err(bad_request(format!("init is {}x{}, expected {h}x{w}", init.height(), init.width())));
    }
    let spec = jobs::JobSpec {
        init,
        delta,
        params,
        fitness,
    };
    match state.jobs.start(spec, state.max_jobs) {
        Ok(id) => Ok(Json(json!({ "job_id": id }))),
        Err(jobs::StartError::TooMany) => Err(ApiError(
            StatusCode::TOO_MANY_REQUESTS,
            format!("{} design jobs already running", state.max_jobs),
        )),
    }
}

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("no design job {id:?}"))
}

async fn design_get(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<DesignJob>, ApiError> {
    state.jobs.get(&id).map(Json).ok_or_else(|| not_found(&id))
}

async fn design_cancel(State(state): State<Shared>, Path(id): Path<String>) -> Result<Json<DesignJob>, ApiError> {
    state.jobs.cancel(&id).map(Json).ok_or_else(|| not_found(&id))
}

async fn health(State(state): State<Shared>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_digest": state.digest }))
}

pub fn router(state: AppState, ui_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/predict", post(predict))
        .route("/api/saliency", post(saliency_map))
        .route("/api/oracle", post(oracle_eval))
        .route("/api/design/start", post(design_start))
        .route("/api/design/{id}", get(design_get).delete(design_cancel))
        .route("/api/health", get(health))
        .with_state(Arc::new(state));
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

/// Loads the model and serves until the process is stopped.
pub async fn serve(cfg: ServerConfig, addr: SocketAddr) -> Result<(), ServerError> {
    let state = AppState::load(&cfg)?;
    let app = router(state, cfg.ui_dir.clone());
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|source| ServerError::Bind { addr, source })?;
    eprintln!("listening on http://{}", listener.local_addr().unwrap_or(addr));
    axum::serve(listener, app).await.map_err(|source| ServerError::Bind { addr, source })
}

/// [`serve`] on a fresh multi-threaded runtime.
pub fn serve_blocking(cfg: ServerConfig, addr: SocketAddr) -> Result<(), ServerError> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|source| ServerError::Bind { addr, source })?
        .block_on(serve(cfg, addr))
}
