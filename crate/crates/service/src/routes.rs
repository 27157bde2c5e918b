use axum::body::{Body, Bytes};
use axum::extract::rejection::{JsonRejection, QueryRejection};
use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path, Query, Request, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{delete, get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use voxprompt_core::geometry::{ras_to_voxel, voxel_to_ras};
use voxprompt_core::nifti::peek_header;
use voxprompt_core::session::MaskInfo;
use voxprompt_core::{
    run_ensemble, uncertainty_to_heatmap, BackendDescriptor, EnsembleConfig, EnsembleSummary, PromptKind,
    PromptUpdate, RasPoint, Session, SessionSummary, VoxelIndex,
};

use crate::error::ApiError;
use crate::render::{gray_slice, mask_slice};
use crate::state::AppState;

/// Multipart framing allowance on top of the upload cap.
const MULTIPART_SLACK: usize = 64 * 1024;

pub fn router(state: AppState) -> Router {
    let limit = state.config().max_upload_bytes + MULTIPART_SLACK;
    Router::new()
        .route("/health", get(|| async { "ok" }))
        .route("/backends", get(list_backends))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session).delete(delete_session))
        .route("/sessions/{id}/slice", get(get_slice))
        .route("/sessions/{id}/overlay", get(get_overlay))
        .route("/sessions/{id}/prompts", post(add_prompt))
        .route("/sessions/{id}/prompts/{kind}/{index}", delete(remove_prompt))
        .route("/sessions/{id}/masks", post(commit_mask))
        .route("/sessions/{id}/backend", post(switch_backend))
        .route("/sessions/{id}/uncertainty", post(uncertainty))
        .route("/sessions/{id}/export/{mask}", get(export_mask))
        .route("/sessions/{id}/debug/voxel", get(debug_voxel))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

// ---- wire types ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreatedSession {
    pub id: String,
    pub revision: u64,
    pub nonfinite_replaced: usize,
    pub summary: SessionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceResponse {
    pub axis: usize,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    pub window_center: f64,
    pub window_width: f64,
    /// Base64 of `width * height` bytes.
    pub pixels: String,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskLayer {
    pub id: u64,
    pub label: String,
    /// Base64 of the packed bitmap.
    pub bits: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayResponse {
    pub axis: usize,
    pub index: usize,
    pub width: usize,
    pub height: usize,
    /// Working mask at the session threshold, packed LSB-first.
    pub working: Option<String>,
    pub masks: Vec<MaskLayer>,
    /// Base64 heatmap bytes, present when requested and available.
    pub uncertainty: Option<String>,
    pub revision: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    pub point: RasPoint,
    pub kind: PromptKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptResponse {
    pub revision: u64,
    pub update: PromptUpdate,
    pub summary: SessionSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRequest {
    pub label: String,
    #[serde(default)]
    pub tau: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskResponse {
    pub mask_id: u64,
    pub revision: u64,
    pub mask: MaskInfo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendResponse {
    pub ok: bool,
    pub changed: bool,
    pub revision: u64,
    pub backend: BackendDescriptor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebugVoxel {
    pub point: RasPoint,
    pub voxel: VoxelIndex,
    /// RAS position of the voxel centre.
    pub voxel_ras: RasPoint,
}

#[derive(Debug, Deserialize)]
struct CreateQuery {
    backend: Option<String>,
}

#[derive(Debug, Deserialize)]
struct SliceQuery {
    axis: usize,
    index: usize,
    wc: Option<f64>,
    ww: Option<f64>,
}

#[derive(Debug, Deserialize)]
struct OverlayQuery {
    axis: usize,
    index: usize,
    #[serde(default)]
    uncertainty: u8,
}

#[derive(Debug, Deserialize)]
struct ExportQuery {
    #[serde(default)]
    gzip: u8,
}

#[derive(Debug, Deserialize)]
struct PointQuery {
    x: f64,
    y: f64,
    z: f64,
}

// ---- helpers ----

fn query<T>(q: Result<Query<T>, QueryRejection>) -> Result<T, ApiError> {
    q.map(|Query(t)| t)
        .map_err(|e| ApiError::bad_request("BadQuery", e.body_text()))
}

fn body<T>(b: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    b.map(|Json(t)| t)
        .map_err(|e| ApiError::bad_request("BadBody", e.body_text()))
}

/// Revision from `If-Match`, accepting `3`, `"3"` and `W/"3"`.
fn expected_revision(headers: &HeaderMap) -> Result<Option<u64>, ApiError> {
    let Some(v) = headers.get(header::IF_MATCH) else {
        return Ok(None);
    };
    let raw = v
        .to_str()
        .map_err(|_| ApiError::bad_request("BadHeader", "If-Match is not ASCII"))?
        .trim();
    if raw == "*" {
        return Ok(None);
    }
    raw.trim_start_matches("W/")
        .trim_matches('"')
        .parse()
        .map(Some)
        .map_err(|_| ApiError::bad_request("BadHeader", format!("If-Match `{raw}` is not a revision")))
}

fn etag(revision: u64) -> [(header::HeaderName, HeaderValue); 1] {
    [(
        header::ETAG,
        HeaderValue::from_str(&format!("\"{revision}\"")).unwrap(),
    )]
}

fn with_revision<T: Serialize>(status: StatusCode, revision: u64, value: T) -> Response {
    (status, etag(revision), Json(value)).into_response()
}

fn slice_error(axis: usize, index: usize, dims: [usize; 3]) -> ApiError {
    ApiError::bad_request(
        "SliceOutOfRange",
        format!("axis {axis} index {index} outside dims {dims:?}"),
    )
}

async fn upload_bytes(state: &AppState, req: Request) -> Result<Bytes, ApiError> {
    let cap = state.config().max_upload_bytes;
    let is_multipart = req
        .headers()
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|ct| ct.starts_with("multipart/form-data"));
    let (parts, raw) = req.into_parts();
    let limit = if is_multipart { cap + MULTIPART_SLACK } else { cap };
    let bytes = axum::body::to_bytes(raw, limit)
        .await
        .map_err(|_| ApiError::too_large(format!("upload exceeds {cap} bytes")))?;
    if !is_multipart {
        return Ok(bytes);
    }
    let req = Request::from_parts(parts, Body::from(bytes));
    let mut form = Multipart::from_request(req, &())
        .await
        .map_err(|e| ApiError::bad_request("BadBody", e.body_text()))?;
    while let Some(field) = form
        .next_field()
        .await
        .map_err(|e| ApiError::bad_request("BadBody", e.body_text()))?
    {
        if field.file_name().is_some() || matches!(field.name(), Some("file" | "volume")) {
            let data = field
                .bytes()
                .await
                .map_err(|e| ApiError::bad_request("BadBody", e.body_text()))?;
            if data.len() > cap {
                return Err(ApiError::too_large(format!("upload exceeds {cap} bytes")));
            }
            return Ok(data);
        }
    }
    Err(ApiError::bad_request(
        "BadBody",
        "multipart body has no file field",
    ))
}

// ---- handlers ----

async fn list_backends(State(state): State<AppState>) -> Json<Vec<BackendDescriptor>> {
    Json(state.registry().descriptors())
}

async fn create_session(
    State(state): State<AppState>,
    q: Result<Query<CreateQuery>, QueryRejection>,
    req: Request,
) -> Result<Response, ApiError> {
    let q = query(q)?;
    let backend = q
        .backend
        .unwrap_or_else(|| state.config().default_backend.clone());
    let bytes = upload_bytes(&state, req).await?;
    let dims = peek_header(&bytes)
        .map_err(|e| ApiError::from(voxprompt_core::SessionError::from(e)))?
        .dims();
    let voxels = dims.iter().product::<usize>();
    if voxels > state.config().max_voxels {
        return Err(ApiError::too_large(format!(
            "{dims:?} has {voxels} voxels, cap is {}",
            state.config().max_voxels
        )));
    }
    let registry = state.registry().clone();
    let engine = state.config().engine.clone();
    let session = tokio::task::spawn_blocking(move || Session::create(&bytes, &backend, registry, engine))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    let created = CreatedSession {
        id: session.id().to_string(),
        revision: session.revision(),
        nonfinite_replaced: session.nonfinite_replaced(),
        summary: session.summary(),
    };
    tracing::info!(session = %created.id, dims = ?created.summary.dims, "session created");
    state.insert(session);
    Ok(with_revision(StatusCode::CREATED, created.revision, created))
}

async fn get_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let summary = state.get(&id)?.read(|s| Ok(s.summary())).await?;
    Ok(with_revision(StatusCode::OK, summary.revision, summary))
}

async fn delete_session(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<StatusCode, ApiError> {
    state.remove(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn get_slice(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<SliceQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let q = query(q)?;
    let slice = state
        .get(&id)?
        .read(move |s| {
            let v = s.volume();
            let g = gray_slice(v, q.axis, q.index, q.wc, q.ww)
                .ok_or_else(|| slice_error(q.axis, q.index, v.dims()))?;
            Ok(SliceResponse {
                axis: q.axis,
                index: q.index,
                width: g.width,
                height: g.height,
                window_center: g.center,
                window_width: g.width_window,
                pixels: B64.encode(&g.pixels),
                revision: s.revision(),
            })
        })
        .await?;
    Ok(with_revision(StatusCode::OK, slice.revision, slice))
}

async fn get_overlay(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<OverlayQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let q = query(q)?;
    let overlay = state
        .get(&id)?
        .read(move |s| {
            let dims = s.volume().dims();
            let (width, height, _) = voxprompt_core::volume::slice_indices(dims, q.axis, q.index)
                .ok_or_else(|| slice_error(q.axis, q.index, dims))?;
            let working = s
                .working_mask(s.config().tau)
                .and_then(|m| mask_slice(&m, q.axis, q.index))
                .map(|b| B64.encode(b));
            let masks = s
                .masks()
                .iter()
                .filter_map(|m| {
                    Some(MaskLayer {
                        id: m.id,
                        label: m.label.clone(),
                        bits: B64.encode(mask_slice(&m.mask, q.axis, q.index)?),
                    })
                })
                .collect();
            let uncertainty = match (q.uncertainty != 0, s.ensemble()) {
                (true, Some(e)) => {
                    Some(B64.encode(uncertainty_to_heatmap(&e.uncertainty, q.axis, q.index)?.to_u8()))
                }
                _ => None,
            };
            Ok(OverlayResponse {
                axis: q.axis,
                index: q.index,
                width,
                height,
                working,
                masks,
                uncertainty,
                revision: s.revision(),
            })
        })
        .await?;
    Ok(with_revision(StatusCode::OK, overlay.revision, overlay))
}

async fn add_prompt(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    b: Result<Json<PromptRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    let req = body(b)?;
    let out = state
        .get(&id)?
        .write(expected, move |s| {
            let update = s.add_prompt(req.point, req.kind)?;
            Ok(PromptResponse {
                revision: s.revision(),
                update,
                summary: s.summary(),
            })
        })
        .await?;
    Ok(with_revision(StatusCode::OK, out.revision, out))
}

async fn remove_prompt(
    State(state): State<AppState>,
    Path((id, kind, index)): Path<(String, String, String)>,
    headers: HeaderMap,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    let kind: PromptKind = kind
        .parse()
        .map_err(|e: String| ApiError::bad_request("BadPath", e))?;
    let index: usize = index
        .parse()
        .map_err(|_| ApiError::bad_request("BadPath", format!("index `{index}` is not a number")))?;
    let out = state
        .get(&id)?
        .write(expected, move |s| {
            let update = s.remove_prompt(kind, index)?;
            Ok(PromptResponse {
                revision: s.revision(),
                update,
                summary: s.summary(),
            })
        })
        .await?;
    Ok(with_revision(StatusCode::OK, out.revision, out))
}

async fn commit_mask(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    b: Result<Json<MaskRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    let req = body(b)?;
    let out = state
        .get(&id)?
        .write(expected, move |s| {
            let tau = req.tau.unwrap_or(s.config().tau);
            let mask_id = s.commit_mask(&req.label, tau)?;
            let mask = s
                .summary()
                .masks
                .into_iter()
                .find(|m| m.id == mask_id)
                .expect("just committed");
            Ok(MaskResponse {
                mask_id,
                revision: s.revision(),
                mask,
            })
        })
        .await?;
    Ok(with_revision(StatusCode::CREATED, out.revision, out))
}

async fn switch_backend(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    b: Result<Json<BackendRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    let req = body(b)?;
    let out = state
        .get(&id)?
        .write(expected, move |s| {
            let changed = s.switch_backend(&req.name)?;
            Ok(BackendResponse {
                ok: true,
                changed,
                revision: s.revision(),
                backend: s.backend().clone(),
            })
        })
        .await?;
    Ok(with_revision(StatusCode::OK, out.revision, out))
}

async fn uncertainty(
    State(state): State<AppState>,
    Path(id): Path<String>,
    headers: HeaderMap,
    b: Result<Json<serde_json::Value>, JsonRejection>,
) -> Result<Response, ApiError> {
    let expected = expected_revision(&headers)?;
    let overrides = body(b)?;
    let config = merge_ensemble(&state.config().engine.ensemble, overrides)?;
    let summary: EnsembleSummary = state
        .get(&id)?
        .write(expected, move |s| Ok(run_ensemble(s, &config)?))
        .await?;
    Ok(with_revision(StatusCode::OK, summary.revision, summary))
}

/// Fields present in `overrides` replace the configured defaults.
pub fn merge_ensemble(
    base: &EnsembleConfig,
    overrides: serde_json::Value,
) -> Result<EnsembleConfig, ApiError> {
    let mut v = serde_json::to_value(base).map_err(|e| ApiError::internal(e.to_string()))?;
    match overrides {
        serde_json::Value::Object(o) => {
            let target = v.as_object_mut().expect("struct serializes to an object");
            for (key, value) in o {
                if !target.contains_key(&key) {
                    return Err(ApiError::bad_request("BadBody", format!("unknown field `{key}`")));
                }
                target.insert(key, value);
            }
        }
        serde_json::Value::Null => {}
        _ => return Err(ApiError::bad_request("BadBody", "expected a JSON object")),
    }
    serde_json::from_value(v).map_err(|e| ApiError::bad_request("BadBody", e.to_string()))
}

async fn export_mask(
    State(state): State<AppState>,
    Path((id, mask)): Path<(String, u64)>,
    q: Result<Query<ExportQuery>, QueryRejection>,
) -> Result<Response, ApiError> {
    let gzip = query(q)?.gzip != 0;
    let (bytes, revision) = state
        .get(&id)?
        .read(move |s| Ok((s.export_mask(mask, gzip)?, s.revision())))
        .await?;
    let name = format!("mask-{mask}.nii{}", if gzip { ".gz" } else { "" });
    Ok((
        StatusCode::OK,
        etag(revision),
        [
            (
                header::CONTENT_TYPE,
                HeaderValue::from_static("application/octet-stream"),
            ),
            (
                header::CONTENT_DISPOSITION,
                HeaderValue::from_str(&format!("attachment; filename=\"{name}\"")).unwrap(),
            ),
        ],
        bytes,
    )
        .into_response())
}

async fn debug_voxel(
    State(state): State<AppState>,
    Path(id): Path<String>,
    q: Result<Query<PointQuery>, QueryRejection>,
) -> Result<Json<DebugVoxel>, ApiError> {
    let q = query(q)?;
    let point = RasPoint::new(q.x, q.y, q.z);
    let out = state
        .get(&id)?
        .read(move |s| {
            let v = s.volume();
            let voxel =
                ras_to_voxel(point, v.affine(), v.dims()).map_err(voxprompt_core::SessionError::from)?;
            Ok(DebugVoxel {
                point,
                voxel,
                voxel_ras: voxel_to_ras(voxel, v.affine()),
            })
        })
        .await?;
    Ok(Json(out))
}
