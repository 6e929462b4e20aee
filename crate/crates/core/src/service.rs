//! HTTP front end for [`SessionStore`]. Request and response bodies are
//! JSON; binary payloads (volumes, masks, slices) are base64 strings. See
//! `api/openapi.yaml` for the schema.

use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::model::Model;
use crate::refiner::Click;
use crate::session::{HistoryEntry, Layer, Session, SessionError, SessionStore, Slice, StepResult};
use crate::volume::{Axis, Dims, LabelMask, Volume};

const BODY_LIMIT: usize = 256 << 20;

#[derive(Clone)]
pub struct AppState {
    store: Arc<SessionStore>,
    /// `None` when no checkpoint could be loaded; session creation then
    /// answers 503.
    model: Option<Arc<Model>>,
}

impl AppState {
    pub fn new(store: SessionStore, model: Option<Model>) -> Self {
        Self {
            store: Arc::new(store),
            model: model.map(Arc::new),
        }
    }

    fn model(&self) -> Result<Arc<Model>, ApiError> {
        self.model
            .clone()
            .ok_or_else(|| ApiError(SessionError::Unavailable("model checkpoint not loaded".into())))
    }
}

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, kind) = match &self.0 {
            SessionError::Validation(_) => (StatusCode::BAD_REQUEST, "validation"),
            SessionError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            SessionError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            SessionError::Unavailable(_) => (StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
            SessionError::Internal(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        let body = json!({ "error": { "kind": kind, "message": self.0.to_string() } });
        (status, Json(body)).into_response()
    }
}

fn invalid(msg: impl Into<String>) -> ApiError {
    ApiError(SessionError::Validation(msg.into()))
}

fn decode(field: &str, text: &str) -> Result<Vec<u8>, ApiError> {
    STANDARD
        .decode(text)
        .map_err(|e| invalid(format!("{field} is not valid base64: {e}")))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    /// Base64 of a complete volume file.
    pub volume: String,
    /// Base64 of a complete label file.
    pub gt: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct MaskResponse {
    pub id: String,
    pub step: usize,
    pub dims: Dims,
    pub classes: usize,
    /// Base64 of `H·W·D` label bytes, x fastest.
    pub mask: String,
    pub dice: Option<Vec<f64>>,
}

impl MaskResponse {
    fn new(session: &Session, r: StepResult) -> Self {
        Self {
            id: session.id().to_string(),
            step: r.step,
            dims: session.dims(),
            classes: session.classes(),
            mask: STANDARD.encode(r.mask.labels()),
            dice: r.dice,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClickRequest {
    pub position: [usize; 3],
    pub category: u8,
    /// 1-based index this click will have in the session history.
    pub step: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SessionState {
    pub id: String,
    pub created: u64,
    pub dims: Dims,
    pub classes: usize,
    pub step: usize,
    pub has_gt: bool,
    pub auto_dice: Option<Vec<f64>>,
    pub history: Vec<HistoryEntry>,
}

#[derive(Debug, Deserialize)]
pub struct SliceQuery {
    pub axis: String,
    pub index: usize,
    #[serde(default = "default_layer")]
    pub layer: String,
}

fn default_layer() -> String {
    "image".into()
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SliceResponse {
    pub axis: String,
    pub index: usize,
    pub layer: String,
    pub rows: usize,
    pub cols: usize,
    /// `f32` (little-endian) for the image layer, `u8` otherwise.
    pub dtype: String,
    pub data: String,
}

/// Runs `f` on a blocking thread with the session locked.
async fn with_session<T: Send + 'static>(
    state: &AppState,
    id: &str,
    f: impl FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    let handle: Arc<Mutex<Session>> = state.store.get(id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = handle.lock().unwrap_or_else(|p| p.into_inner());
        f(&mut s)
    })
    .await
    .map_err(|e| ApiError(SessionError::Internal(crate::error::Error::Contract(e.to_string()))))?
}

async fn health(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(json!({ "status": "ok", "model_loaded": state.model.is_some() }))
}

async fn create(State(state): State<AppState>, Json(req): Json<CreateRequest>) -> Result<(StatusCode, Json<MaskResponse>), ApiError> {
    let model = state.model()?;
    let volume = Volume::from_bytes(&decode("volume", &req.volume)?).map_err(SessionError::from)?;
    let gt = match &req.gt {
        Some(g) => Some(LabelMask::from_bytes(&decode("gt", g)?).map_err(SessionError::from)?),
        None => None,
    };
    let store = state.store.clone();
    let body = tokio::task::spawn_blocking(move || -> Result<MaskResponse, ApiError> {
        let handle = store.create(&model, volume, gt)?;
        let s = handle.lock().unwrap_or_else(|p| p.into_inner());
        Ok(MaskResponse::new(&s, s.current()))
    })
    .await
    .map_err(|e| ApiError(SessionError::Internal(crate::error::Error::Contract(e.to_string()))))??;
    Ok((StatusCode::CREATED, Json(body)))
}

async fn add_click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<MaskResponse>, ApiError> {
    let model = state.model()?;
    let body = with_session(&state, &id, move |s| {
        let r = s.add_click(&model, Click::new(req.position, req.category), req.step)?;
        Ok(MaskResponse::new(s, r))
    })
    .await?;
    Ok(Json(body))
}

async fn undo(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<MaskResponse>, ApiError> {
    let body = with_session(&state, &id, |s| {
        let r = s.undo()?;
        Ok(MaskResponse::new(s, r))
    })
    .await?;
    Ok(Json(body))
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<SessionState>, ApiError> {
    let body = with_session(&state, &id, |s| {
        Ok(SessionState {
            id: s.id().to_string(),
            created: s.created(),
            dims: s.dims(),
            classes: s.classes(),
            step: s.step(),
            has_gt: s.has_gt(),
            auto_dice: s.dice_at(0),
            history: s.history(),
        })
    })
    .await?;
    Ok(Json(body))
}

async fn get_slice(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<SliceQuery>,
) -> Result<Json<SliceResponse>, ApiError> {
    let axis = Axis::parse(&q.axis).ok_or_else(|| invalid(format!("axis must be x, y or z, got {:?}", q.axis)))?;
    let layer = Layer::parse(&q.layer)
        .ok_or_else(|| invalid(format!("layer must be image, auto, refined or error, got {:?}", q.layer)))?;
    let body = with_session(&state, &id, move |s| {
        let (rows, cols, dtype, data) = match s.slice(axis, q.index, layer)? {
            Slice::Image(p) => {
                let bytes: Vec<u8> = p.data.iter().flat_map(|v| v.to_le_bytes()).collect();
                (p.rows, p.cols, "f32", STANDARD.encode(bytes))
            }
            Slice::Labels(p) => (p.rows, p.cols, "u8", STANDARD.encode(&p.data)),
        };
        Ok(SliceResponse {
            axis: q.axis,
            index: q.index,
            layer: q.layer,
            rows,
            cols,
            dtype: dtype.into(),
            data,
        })
    })
    .await?;
    Ok(Json(body))
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create))
        .route("/sessions/{id}", get(get_state))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/slice", get(get_slice))
        .layer(DefaultBodyLimit::max(BODY_LIMIT))
        .with_state(state)
}

/// Serves until the process receives Ctrl-C.
pub async fn serve(state: AppState, port: u16) -> std::io::Result<()> {
    let addr = SocketAddr::from(([127, 0, 0, 1], port));
    let listener = tokio::net::TcpListener::bind(addr).await?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
