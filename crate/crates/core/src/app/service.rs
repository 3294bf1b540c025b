//! HTTP/JSON service: slice images, click-prompt segmentation and online
//! adaptation sessions.
//!
//! Volumes are the manifests directly inside the data directory; checkpoint
//! paths in requests are resolved relative to it.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::app::checkpoint::load_checkpoint;
use crate::app::rle::Rle;
use crate::config::{Config, PromptMode};
use crate::data::{dsc, load_volume, make_episodes, slice_png, ChunkedVolume, Mask};
use crate::error::Error;
use crate::eval::{eval_shots, mean_dsc};
use crate::metaopt::online::{make_shots, online_optimize};
use crate::model::{segment, Pair};
use crate::params::ParamSet;
use crate::prompt::PointPrompt;

pub const DEFAULT_PORT: u16 = 8787;
pub const DEFAULT_DATA_DIR: &str = "data";
pub const PORT_VAR: &str = "METASEG_PORT";
pub const DATA_DIR_VAR: &str = "METASEG_DATA_DIR";

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub port: u16,
    pub data_dir: PathBuf,
}

impl ServiceConfig {
    /// Port and data directory from the environment, with defaults.
    pub fn from_env() -> crate::error::Result<Self> {
        let port = match std::env::var(PORT_VAR) {
            Ok(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{PORT_VAR}=`{v}` is not a port number")))?,
            Err(_) => DEFAULT_PORT,
        };
        let data_dir = std::env::var_os(DATA_DIR_VAR)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_DATA_DIR));
        Ok(Self { port, data_dir })
    }
}

/// Error body: `{"error": message, "field": name-or-null}`.
#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
    pub field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
            field: None,
        }
    }

    fn field(field: &str, message: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            message: message.into(),
            field: Some(field.to_string()),
        }
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match e {
            Error::Lookup(_) => StatusCode::NOT_FOUND,
            Error::Task(_) | Error::Config(_) | Error::Shape(_) => StatusCode::BAD_REQUEST,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message, "field": self.field }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Parses a JSON body, naming the offending field on failure.
fn parse_body<T: DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    let de = &mut serde_json::Deserializer::from_slice(body);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let msg = inner.to_string();
        let field = if path != "." {
            path
        } else {
            // Missing and unknown fields are reported at the parent.
            msg.split('`').nth(1).unwrap_or("body").to_string()
        };
        ApiError::field(&field, format!("malformed body: {msg}"))
    })
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, format!("worker failed: {e}")))?
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptRecord {
    pub volume: String,
    pub organ: String,
    pub chunk: usize,
    pub steps: usize,
    pub alpha: f64,
    pub loss_trace: Vec<f64>,
    pub dsc_before: f64,
    pub dsc_after: f64,
}

struct Session {
    checkpoint: String,
    config: Config,
    params: RwLock<Arc<ParamSet>>,
    adapting: AtomicBool,
    organ: Mutex<Option<String>>,
    history: Mutex<Vec<AdaptRecord>>,
}

/// Shared service state.
pub struct AppState {
    data_dir: PathBuf,
    volumes: Mutex<BTreeMap<String, Arc<ChunkedVolume>>>,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(data_dir: impl Into<PathBuf>) -> Arc<Self> {
        Arc::new(Self {
            data_dir: data_dir.into(),
            volumes: Mutex::new(BTreeMap::new()),
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
        })
    }

    fn volume(&self, id: &str) -> ApiResult<Arc<ChunkedVolume>> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(ApiError::not_found(format!("no volume `{id}`")));
        }
        if let Some(v) = self.volumes.lock().expect("volume cache").get(id) {
            return Ok(v.clone());
        }
        let path = self.data_dir.join(format!("{id}.json"));
        let is_volume = std::fs::read(&path)
            .ok()
            .is_some_and(|b| serde_json::from_slice::<crate::data::VolumeManifest>(&b).is_ok());
        if !is_volume {
            return Err(ApiError::not_found(format!("no volume `{id}`")));
        }
        let v = Arc::new(load_volume(&path)?);
        self.volumes
            .lock()
            .expect("volume cache")
            .insert(id.to_string(), v.clone());
        Ok(v)
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        self.sessions
            .lock()
            .expect("session table")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))
    }

    fn checkpoint_path(&self, rel: &str) -> ApiResult<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
            return Err(ApiError::field(
                "checkpoint",
                "checkpoint must be a relative path inside the data directory",
            ));
        }
        let full = self.data_dir.join(p);
        if !full.is_file() {
            return Err(ApiError::not_found(format!("no checkpoint `{rel}`")));
        }
        Ok(full)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/volumes", get(volumes))
        .route("/volumes/{id}/slices/{file}", get(slice_image))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_info).delete(delete_session))
        .route("/sessions/{id}/adapt", post(adapt))
        .route("/sessions/{id}/segment", post(segment_slice))
        .with_state(state)
}

/// Binds `0.0.0.0:port` and serves until interrupted.
pub async fn serve(cfg: ServiceConfig) -> crate::error::Result<()> {
    let addr = SocketAddr::from(([0, 0, 0, 0], cfg.port));
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::io(format!("port {}", cfg.port), e))?;
    tracing::info!(%addr, data_dir = %cfg.data_dir.display(), "serving");
    axum::serve(listener, router(AppState::new(cfg.data_dir)))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io("http service", e))
}

async fn health() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "version": env!("CARGO_PKG_VERSION") }))
}

#[derive(Debug, Serialize)]
struct VolumeInfo {
    id: String,
    shape: [usize; 3],
    organs: Vec<String>,
    chunks: usize,
}

async fn volumes(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<VolumeInfo>>> {
    blocking(move || {
        let mut out = Vec::new();
        for path in crate::data::list_volumes(&st.data_dir)? {
            let Some(id) = path.file_stem().map(|s| s.to_string_lossy().to_string()) else {
                continue;
            };
            let v = st.volume(&id)?;
            let (h, w) = v.size();
            out.push(VolumeInfo {
                id,
                shape: [v.n_slices(), h, w],
                organs: v.organ_names(),
                chunks: v.chunks.len(),
            });
        }
        Ok(Json(out))
    })
    .await
}

async fn slice_image(
    State(st): State<Arc<AppState>>,
    UrlPath((id, file)): UrlPath<(String, String)>,
) -> ApiResult<Response> {
    let k: usize = file
        .strip_suffix(".png")
        .and_then(|k| k.parse().ok())
        .ok_or_else(|| ApiError::not_found(format!("no slice image `{file}`")))?;
    let png = blocking(move || {
        let v = st.volume(&id)?;
        let slice = v
            .slice(k)
            .map_err(|_| ApiError::not_found(format!("volume `{id}` has no slice {k}")))?;
        Ok(slice_png(slice)?)
    })
    .await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    checkpoint: String,
}

async fn create_session(
    State(st): State<Arc<AppState>>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<serde_json::Value>)> {
    let req: CreateSession = parse_body(&body)?;
    blocking(move || {
        let path = st.checkpoint_path(&req.checkpoint)?;
        let (ckpt, params) = load_checkpoint(&path)?;
        let id = format!("s{}", st.next_id.fetch_add(1, Ordering::Relaxed));
        let session = Session {
            checkpoint: req.checkpoint,
            config: ckpt.config,
            params: RwLock::new(Arc::new(params)),
            adapting: AtomicBool::new(false),
            organ: Mutex::new(None),
            history: Mutex::new(Vec::new()),
        };
        st.sessions
            .lock()
            .expect("session table")
            .insert(id.clone(), Arc::new(session));
        Ok((StatusCode::CREATED, Json(json!({ "session_id": id }))))
    })
    .await
}

async fn session_info(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    let s = st.session(&id)?;
    let organ = s.organ.lock().expect("session organ").clone();
    let history = s.history.lock().expect("session history").clone();
    Ok(Json(json!({
        "session_id": id,
        "checkpoint": s.checkpoint,
        "organ": organ,
        "adapting": s.adapting.load(Ordering::Acquire),
        "history": history,
    })))
}

async fn delete_session(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> ApiResult<Json<serde_json::Value>> {
    st.sessions
        .lock()
        .expect("session table")
        .remove(&id)
        .ok_or_else(|| ApiError::not_found(format!("no session `{id}`")))?;
    Ok(Json(json!({ "deleted": id })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptRequest {
    volume: String,
    organ: String,
    chunk: usize,
    steps: usize,
    alpha: f64,
    #[serde(default)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct AdaptResponse {
    loss_trace: Vec<f64>,
    dsc_before: f64,
    dsc_after: f64,
}

/// Clears the adaptation flag however the request ends.
struct AdaptGuard(Arc<Session>);

impl Drop for AdaptGuard {
    fn drop(&mut self) {
        self.0.adapting.store(false, Ordering::Release);
    }
}

fn chunk_pairs(v: &ChunkedVolume, organ: &str, chunk: usize) -> ApiResult<Vec<Pair>> {
    if !v.organs.contains_key(organ) {
        return Err(ApiError::field(
            "organ",
            format!("volume `{}` has no organ `{organ}`", v.id),
        ));
    }
    if chunk >= v.chunks.len() {
        return Err(ApiError::field(
            "chunk",
            format!("chunk {chunk} out of range 0..{}", v.chunks.len()),
        ));
    }
    let eps = make_episodes(v, organ)?;
    let ep = eps
        .episodes
        .iter()
        .find(|e| e.chunk == chunk)
        .ok_or_else(|| ApiError::field("chunk", format!("chunk {chunk} has an empty `{organ}` support mask")))?;
    let pairs: Vec<Pair> = Pair::from_episode(ep)
        .into_iter()
        .filter(|p| !p.mask.is_empty())
        .collect();
    if pairs.is_empty() {
        return Err(ApiError::field(
            "chunk",
            format!("chunk {chunk} has no slices showing `{organ}`"),
        ));
    }
    Ok(pairs)
}

async fn adapt(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<AdaptResponse>> {
    let req: AdaptRequest = parse_body(&body)?;
    if !(req.alpha >= 0.0 && req.alpha.is_finite()) {
        return Err(ApiError::field("alpha", "alpha must be a nonnegative number"));
    }
    let session = st.session(&id)?;
    if session
        .adapting
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            format!("session `{id}` is already adapting"),
        ));
    }
    let guard = AdaptGuard(session);
    blocking(move || {
        let s = &guard.0;
        let v = st
            .volume(&req.volume)
            .map_err(|e| ApiError::field("volume", e.message))?;
        let pairs = chunk_pairs(&v, &req.organ, req.chunk)?;
        let cfg = &s.config.model;
        let theta = s.params.read().expect("session params").clone();
        let shots = make_shots(cfg, &pairs, req.seed, &[req.chunk as u64])?;
        let queries = eval_shots(cfg, &pairs, req.seed)?;
        let dsc_before = mean_dsc(cfg, &theta, &queries)?;
        let adapted = online_optimize(cfg, &theta, &shots, req.steps, req.alpha)?;
        let dsc_after = mean_dsc(cfg, &adapted.params, &queries)?;
        let loss_trace: Vec<f64> = adapted.trace.iter().map(|r| r.total).collect();
        *s.params.write().expect("session params") = Arc::new(adapted.params);
        *s.organ.lock().expect("session organ") = Some(req.organ.clone());
        s.history.lock().expect("session history").push(AdaptRecord {
            volume: req.volume,
            organ: req.organ,
            chunk: req.chunk,
            steps: req.steps,
            alpha: req.alpha,
            loss_trace: loss_trace.clone(),
            dsc_before,
            dsc_after,
        });
        Ok(Json(AdaptResponse {
            loss_trace,
            dsc_before,
            dsc_after,
        }))
    })
    .await
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Sign {
    Positive,
    Negative,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Point {
    x: f64,
    y: f64,
    sign: Sign,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRequest {
    volume: String,
    slice: usize,
    points: Vec<Point>,
    /// Organ whose support mask conditions the decoder; defaults to the
    /// session's last adapted organ.
    #[serde(default)]
    organ: Option<String>,
}

#[derive(Debug, Serialize)]
struct SegmentResponse {
    mask_rle: Rle,
    dsc: Option<f64>,
}

async fn segment_slice(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Json<SegmentResponse>> {
    let req: SegmentRequest = parse_body(&body)?;
    let session = st.session(&id)?;
    blocking(move || {
        let v = st
            .volume(&req.volume)
            .map_err(|e| ApiError::field("volume", e.message))?;
        let image = v
            .slice(req.slice)
            .map_err(|_| ApiError::field("slice", format!("slice {} out of range 0..{}", req.slice, v.n_slices())))?;
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for p in &req.points {
            if !((0.0..=1.0).contains(&p.x) && (0.0..=1.0).contains(&p.y)) {
                return Err(ApiError::field("points", "point coordinates must lie in [0, 1]"));
            }
            match p.sign {
                Sign::Positive => pos.push([p.x, p.y]),
                Sign::Negative => neg.push([p.x, p.y]),
            }
        }
        let cfg = &session.config.model;
        let prompt = match cfg.prompt.mode {
            PromptMode::None => None,
            _ if pos.is_empty() => return Err(ApiError::field("points", "at least one positive point is required")),
            _ => Some(PointPrompt::new(pos, neg).map_err(|e| ApiError::field("points", e.to_string()))?),
        };
        let organ = req
            .organ
            .clone()
            .or_else(|| session.organ.lock().expect("session organ").clone());
        let (h, w) = v.size();
        let (support, truth) = match &organ {
            Some(o) => {
                let masks = v
                    .masks(o)
                    .map_err(|_| ApiError::field("organ", format!("volume `{}` has no organ `{o}`", v.id)))?;
                let chunk = v.chunk_of(req.slice).expect("slice index checked above");
                (masks[v.chunks[chunk].support].clone(), Some(&masks[req.slice]))
            }
            None => (Mask::empty(h, w), None),
        };
        let params = session.params.read().expect("session params").clone();
        let pred = segment(cfg, &params, image, &support, prompt.as_ref())?;
        let dsc = truth.map(|g| dsc(&pred, g)).transpose()?;
        Ok(Json(SegmentResponse {
            mask_rle: Rle::encode(&pred),
            dsc,
        }))
    })
    .await
}
