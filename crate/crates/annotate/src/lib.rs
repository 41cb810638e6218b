//! HTTP+JSON front end of the annotation [`HitStore`].
//!
//! | method | path                   | body / result                               |
//! |--------|------------------------|---------------------------------------------|
//! | GET    | `/hits?status=open`    | list of HIT summaries (`status` optional)   |
//! | GET    | `/hits/{id}`           | HIT manifest with asset URLs and options    |
//! | POST   | `/hits/{id}/responses` | `WorkerResponse` in, `SubmitReceipt` out    |
//! | GET    | `/ledger`              | ledger export                               |
//! | GET    | `/assets/{*path}`      | rendered images under the asset root        |
//!
//! A submission returns 201 when recorded, 400 when malformed, 404 for an
//! unknown HIT and 409 once the HIT's quorum has been reached. When a token is
//! configured, submissions must carry `Authorization: Bearer <token>`; reads
//! stay open. Errors are JSON objects `{"error": kind, "message": text}`.

use std::net::SocketAddr;
use std::path::{Component, Path, PathBuf};
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use log::{info, warn};
use probe_core::annotation::{
    Choice, Hit, HitKind, HitStatus, HitStore, LedgerExport, PanelImage, WorkerResponse,
};
use probe_core::Error;
use serde::{Deserialize, Serialize};

/// URL prefix under which asset paths of a HIT are served.
pub const ASSET_PREFIX: &str = "/assets/";

#[derive(Debug, Clone, Default)]
pub struct ServiceConfig {
    /// Directories the relative asset paths of the HITs resolve against,
    /// tried in order.
    pub asset_roots: Vec<PathBuf>,
    /// Bearer token required on submissions.
    pub token: Option<String>,
}

#[derive(Debug)]
struct AppState {
    store: Arc<HitStore>,
    config: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, kind: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: ErrorBody {
                error: kind.to_string(),
                message: message.into(),
            },
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, kind) = match &e {
            Error::UnknownHit(_) => (StatusCode::NOT_FOUND, "unknown_hit"),
            Error::HitClosed(_) => (StatusCode::CONFLICT, "hit_closed"),
            Error::InvalidResponse(_) | Error::Json(_) => (StatusCode::BAD_REQUEST, "invalid_response"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, kind, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OptionView {
    pub choice: Choice,
    pub label: String,
}

/// What a client needs to render and answer one HIT.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HitManifest {
    /// The HIT with every asset path replaced by its URL.
    pub hit: Hit,
    pub status: HitStatus,
    pub responses: usize,
    pub quorum: usize,
    pub options: Vec<OptionView>,
    /// URLs of the class panel's held-out images (discovery HITs only).
    pub class_images: Vec<String>,
}

pub fn asset_url(relative: &str) -> String {
    format!("{ASSET_PREFIX}{relative}")
}

fn with_urls(panel: &[PanelImage]) -> Vec<PanelImage> {
    panel
        .iter()
        .map(|p| PanelImage {
            image: asset_url(&p.image),
            heatmap: asset_url(&p.heatmap),
            attack: p.attack.as_deref().map(asset_url),
            ..p.clone()
        })
        .collect()
}

pub fn manifest(hit: &Hit, status: HitStatus, responses: usize, quorum: usize) -> HitManifest {
    let (hit, class_images) = match hit {
        Hit::Discovery(h) => {
            let mut h = h.clone();
            h.visual_panel = with_urls(&h.visual_panel);
            let images = h
                .class_panel
                .validation_image_ids
                .iter()
                .map(|id| asset_url(&probe_core::annotation::AssetWriter::image_path(id)))
                .collect();
            (Hit::Discovery(h), images)
        }
        Hit::Validation(h) => {
            let mut h = h.clone();
            h.section_a = with_urls(&h.section_a);
            h.section_b = with_urls(&h.section_b);
            (Hit::Validation(h), Vec::new())
        }
    };
    let kind: HitKind = hit.kind();
    HitManifest {
        hit,
        status,
        responses,
        quorum,
        options: kind
            .options()
            .iter()
            .map(|&choice| OptionView {
                choice,
                label: choice.label().to_string(),
            })
            .collect(),
        class_images,
    }
}

#[derive(Debug, Deserialize)]
struct ListQuery {
    status: Option<String>,
}

async fn list_hits(State(state): State<Arc<AppState>>, Query(query): Query<ListQuery>) -> ApiResult<Response> {
    let status = match query.status.as_deref() {
        None => None,
        Some("open") => Some(HitStatus::Open),
        Some("closed") => Some(HitStatus::Closed),
        Some(other) => {
            return Err(ApiError::new(
                StatusCode::BAD_REQUEST,
                "invalid_query",
                format!("status must be `open` or `closed`, got `{other}`"),
            ))
        }
    };
    Ok(Json(state.store.summaries(status)).into_response())
}

async fn get_hit(State(state): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (hit, summary) = state.store.hit(&id)?;
    Ok(Json(manifest(&hit, summary.status, summary.responses, state.store.quorum())).into_response())
}

fn authorized(config: &ServiceConfig, headers: &HeaderMap) -> bool {
    let Some(token) = &config.token else {
        return true;
    };
    headers
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "))
        .is_some_and(|given| given == token)
}

async fn post_response(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    if !authorized(&state.config, &headers) {
        return Err(ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token"));
    }
    let response: WorkerResponse = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_response", e.to_string()))?;
    let worker = response.worker_id.clone();
    let receipt = state.store.submit(&id, response).inspect_err(|e| warn!("hit {id}, worker {worker}: {e}"))?;
    if let Some(outcome) = &receipt.outcome {
        info!("hit {id} closed with {outcome:?}");
    }
    Ok((StatusCode::CREATED, Json(receipt)).into_response())
}

async fn get_ledger(State(state): State<Arc<AppState>>) -> Json<LedgerExport> {
    Json(state.store.ledger().export())
}

/// `relative` joined onto `root`, refusing anything but plain path segments.
fn contained(root: &Path, relative: &str) -> Option<PathBuf> {
    let rel = Path::new(relative);
    if relative.is_empty() || !rel.components().all(|c| matches!(c, Component::Normal(_))) {
        return None;
    }
    Some(root.join(rel))
}

fn content_type(path: &Path) -> &'static str {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => "image/png",
        Some("json") => "application/json",
        Some("svg") => "image/svg+xml",
        _ => "application/octet-stream",
    }
}

async fn get_asset(State(state): State<Arc<AppState>>, UrlPath(relative): UrlPath<String>) -> ApiResult<Response> {
    let not_found = || ApiError::new(StatusCode::NOT_FOUND, "unknown_asset", format!("no asset `{relative}`"));
    let candidates = state
        .config
        .asset_roots
        .iter()
        .map(|root| contained(root, &relative))
        .collect::<Option<Vec<PathBuf>>>()
        .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "invalid_path", format!("bad asset path `{relative}`")))?;
    let found = tokio::task::spawn_blocking(move || {
        candidates.into_iter().find_map(|path| std::fs::read(&path).ok().map(|bytes| (path, bytes)))
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    let (path, bytes) = found.ok_or_else(not_found)?;
    Ok(([(header::CONTENT_TYPE, content_type(&path))], bytes).into_response())
}

pub fn router(store: Arc<HitStore>, config: ServiceConfig) -> Router {
    let state = Arc::new(AppState { store, config });
    Router::new()
        .route("/hits", get(list_hits))
        .route("/hits/{id}", get(get_hit))
        .route("/hits/{id}/responses", axum::routing::post(post_response))
        .route("/ledger", get(get_ledger))
        .route("/assets/{*path}", get(get_asset))
        .with_state(state)
}

/// Serves until ctrl-c.
pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    info!("annotation service listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
