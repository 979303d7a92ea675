//! JSON-over-HTTP access to running sessions.
//!
//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | GET | `/sessions` | session ids |
//! | GET | `/sessions/:id` | state and iteration records |
//! | GET | `/sessions/:id/volumes/:vid/slices/:axis/:index` | PNG, `?level=&width=` |
//! | GET | `/sessions/:id/volumes/:vid/proposal` | RLE mask, one slice with `?axis=&index=` |
//! | POST | `/sessions/:id/volumes/:vid/annotations` | `{mask_rle, seconds}` |
//! | POST | `/sessions/:id/volumes/:vid/corrections` | `{mask_rle, seconds, proposal_ref}` |
//! | POST | `/sessions/:id/iterate` | 202 accepted, 409 busy |
//! | GET | `/sessions/:id/report` | labeling-time table |

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::{Arc, Mutex, MutexGuard};

use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use vbquant_core::trainer::Hyperparams;
use vbquant_core::volume::{LUNG_WINDOW_LEVEL, LUNG_WINDOW_WIDTH};

use crate::engine::{Correction, HitlSession, IterationRecord, SessionState};
use crate::render::{slice_indices, slice_png, Axis, RenderError};
use crate::report::time_report;
use crate::rle::{encode_runs, MaskRle, Run};
use crate::HitlError;

/// A session plus the outcome of its last background job.
#[derive(Debug)]
pub struct SessionHandle {
    session: Mutex<HitlSession>,
    last_error: Mutex<Option<String>>,
}

impl SessionHandle {
    pub fn new(session: HitlSession) -> Self {
        Self {
            session: Mutex::new(session),
            last_error: Mutex::new(None),
        }
    }

    pub fn lock(&self) -> MutexGuard<'_, HitlSession> {
        self.session.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[derive(Debug, Clone, Default)]
pub struct AppState {
    sessions: Arc<Mutex<BTreeMap<String, Arc<SessionHandle>>>>,
}

impl AppState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, session: HitlSession) -> Arc<SessionHandle> {
        let id = session.config().session_id.clone();
        let h = Arc::new(SessionHandle::new(session));
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).insert(id, h.clone());
        h
    }

    pub fn get(&self, id: &str) -> Option<Arc<SessionHandle>> {
        self.sessions.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<HitlError> for ApiError {
    fn from(e: HitlError) -> Self {
        use HitlError::*;
        let code = match &e {
            UnknownVolume(_) => StatusCode::NOT_FOUND,
            WrongState { .. } | Busy | StaleProposal { .. } | WrongBatch { .. } | NothingToReport => StatusCode::CONFLICT,
            Volume(_) | Rle(_) | BadSeconds(_) | Train(_) => StatusCode::UNPROCESSABLE_ENTITY,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        ApiError(code, e.to_string())
    }
}

impl From<RenderError> for ApiError {
    fn from(e: RenderError) -> Self {
        let code = match e {
            RenderError::Png(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        ApiError(code, e.to_string())
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn not_found(what: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("{what} not found"))
}

fn handle(st: &AppState, id: &str) -> ApiResult<Arc<SessionHandle>> {
    st.get(id).ok_or_else(|| not_found(&format!("session {id}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStatus {
    pub session_id: String,
    #[serde(flatten)]
    pub state: SessionState,
    pub training: bool,
    pub batches: Vec<Vec<String>>,
    pub iterations: Vec<IterationRecord>,
    pub queued_corrections: usize,
    pub last_error: Option<String>,
}

async fn list(State(st): State<AppState>) -> Json<Vec<String>> {
    Json(st.sessions.lock().unwrap_or_else(|e| e.into_inner()).keys().cloned().collect())
}

async fn status(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<SessionStatus>> {
    let h = handle(&st, &id)?;
    let last_error = h.last_error.lock().unwrap_or_else(|e| e.into_inner()).clone();
    let s = h.lock();
    Ok(Json(SessionStatus {
        session_id: id,
        state: s.state(),
        training: s.is_training(),
        batches: s.config().batches.clone(),
        iterations: s.iterations().to_vec(),
        queued_corrections: s.queued().len(),
        last_error,
    }))
}

#[derive(Debug, Deserialize)]
struct WindowQuery {
    level: Option<f32>,
    width: Option<f32>,
}

async fn slice(
    State(st): State<AppState>,
    Path((id, vid, axis, index)): Path<(String, String, String, usize)>,
    Query(q): Query<WindowQuery>,
) -> ApiResult<Response> {
    let axis: Axis = axis.parse().map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let h = handle(&st, &id)?;
    let volume = h.lock().volume(&vid)?.clone();
    let png = slice_png(
        &volume,
        axis,
        index,
        q.level.unwrap_or(LUNG_WINDOW_LEVEL),
        q.width.unwrap_or(LUNG_WINDOW_WIDTH),
    )?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response())
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    axis: Option<String>,
    index: Option<usize>,
}

/// One slice of a proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceRle {
    pub proposal_ref: u64,
    pub axis: Axis,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub runs: Vec<Run>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalBody {
    pub proposal_ref: u64,
    pub mask_rle: MaskRle,
}

async fn proposal(
    State(st): State<AppState>,
    Path((id, vid)): Path<(String, String)>,
    Query(q): Query<SliceQuery>,
) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let s = h.lock();
    s.volume(&vid)?;
    let p = s.proposal(&vid).ok_or_else(|| not_found(&format!("proposal for {vid}")))?;
    let Some(index) = q.index else {
        return Ok(Json(ProposalBody {
            proposal_ref: p.proposal_ref,
            mask_rle: MaskRle::encode(&p.mask),
        })
        .into_response());
    };
    let axis: Axis = q
        .axis
        .as_deref()
        .unwrap_or("z")
        .parse()
        .map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let (width, height, idx) = slice_indices(p.mask.dims(), axis, index)
        .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, format!("slice {index} out of range")))?;
    let px: Vec<bool> = idx.iter().map(|&i| p.mask.labels()[i] != 0).collect();
    Ok(Json(SliceRle {
        proposal_ref: p.proposal_ref,
        axis,
        index,
        width,
        height,
        runs: encode_runs(&px),
    })
    .into_response())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSubmission {
    pub mask_rle: MaskRle,
    pub seconds: f64,
    #[serde(default)]
    pub proposal_ref: Option<u64>,
    #[serde(default)]
    pub editor: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmissionAck {
    pub voxels: usize,
    pub edit_cost: Option<usize>,
    pub queued: bool,
    #[serde(flatten)]
    pub state: SessionState,
}

async fn annotate(
    State(st): State<AppState>,
    Path((id, vid)): Path<(String, String)>,
    Json(body): Json<MaskSubmission>,
) -> ApiResult<Json<SubmissionAck>> {
    let h = handle(&st, &id)?;
    let mut s = h.lock();
    let g = *s.volume(&vid)?.geometry();
    let mask = body.mask_rle.decode(&g).map_err(HitlError::from)?;
    let voxels = mask.foreground_count();
    s.submit_annotation(&vid, mask, body.seconds, body.editor.as_deref().unwrap_or("anonymous"))?;
    Ok(Json(SubmissionAck {
        voxels,
        edit_cost: None,
        queued: false,
        state: s.state(),
    }))
}

async fn correct(
    State(st): State<AppState>,
    Path((id, vid)): Path<(String, String)>,
    Json(body): Json<MaskSubmission>,
) -> ApiResult<(StatusCode, Json<SubmissionAck>)> {
    let h = handle(&st, &id)?;
    let mut s = h.lock();
    let g = *s.volume(&vid)?.geometry();
    let corrected = body.mask_rle.decode(&g).map_err(HitlError::from)?;
    let voxels = corrected.foreground_count();
    let proposal_ref = body
        .proposal_ref
        .ok_or_else(|| ApiError(StatusCode::UNPROCESSABLE_ENTITY, "proposal_ref is required".into()))?;
    let queued = s.is_training();
    let cost = s.ingest_correction(Correction {
        volume_id: vid,
        proposal_ref,
        corrected,
        seconds: body.seconds,
        editor: body.editor.unwrap_or_else(|| "anonymous".into()),
    })?;
    let code = if queued { StatusCode::ACCEPTED } else { StatusCode::OK };
    Ok((
        code,
        Json(SubmissionAck {
            voxels,
            edit_cost: Some(cost),
            queued,
            state: s.state(),
        }),
    ))
}

#[derive(Debug, Default, Deserialize)]
struct IterateBody {
    hyper: Option<Hyperparams>,
}

async fn iterate(State(st): State<AppState>, Path(id): Path<String>, body: Option<Json<IterateBody>>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let job = {
        let mut s = h.lock();
        let hyper = body.and_then(|b| b.0.hyper).unwrap_or_else(|| s.config().hyper.clone());
        s.begin_iteration(&hyper)?
    };
    let iteration = job.iteration;
    *h.last_error.lock().unwrap_or_else(|e| e.into_inner()) = None;
    let h2 = h.clone();
    tokio::spawn(async move {
        let out = tokio::task::spawn_blocking(move || job.run())
            .await
            .unwrap_or_else(|e| Err(HitlError::Data(format!("training task failed: {e}"))));
        let mut s = h2.lock();
        if let Err(e) = s.finish_iteration(out) {
            *h2.last_error.lock().unwrap_or_else(|e| e.into_inner()) = Some(e.to_string());
        }
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "iteration": iteration }))).into_response())
}

async fn report(State(st): State<AppState>, Path(id): Path<String>) -> ApiResult<Response> {
    let h = handle(&st, &id)?;
    let r = time_report(&h.lock())?;
    Ok(Json(r).into_response())
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/sessions", get(list))
        .route("/sessions/:id", get(status))
        .route("/sessions/:id/volumes/:vid/slices/:axis/:index", get(slice))
        .route("/sessions/:id/volumes/:vid/proposal", get(proposal))
        .route("/sessions/:id/volumes/:vid/annotations", post(annotate))
        .route("/sessions/:id/volumes/:vid/corrections", post(correct))
        .route("/sessions/:id/iterate", post(iterate))
        .route("/sessions/:id/report", get(report))
        .with_state(state)
}

/// Serve until `shutdown` resolves. Events are persisted as they happen, so
/// stopping loses at most a running training job.
pub async fn serve(listener: tokio::net::TcpListener, state: AppState, shutdown: impl Future<Output = ()> + Send + 'static) -> std::io::Result<()> {
    axum::serve(listener, router(state)).with_graceful_shutdown(shutdown).await
}
