//! HTTP curation service over a manifest and its PNG files.
//!
//! Reads run concurrently. Each mutating request takes a per-sample lock
//! with `try_lock`, so a second writer on the same sample gets 409 instead
//! of silently overwriting. Requests may also send `If-Match: <revision>`;
//! a stale revision is a 409 as well.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;

use pbasr_core::dataset::curate::{self, LabelUpdate, DEFAULT_THRESHOLD, DEFAULT_WINDOW};
use pbasr_core::dataset::{encode_mask_png, BlurSample, BlurType, Manifest, ReviewState, SizeCategory};
use pbasr_core::Error;

pub const DEFAULT_PORT: u16 = 8080;
pub const PORT_ENV: &str = "PBASR_PORT";
const MAX_PER_PAGE: usize = 500;

pub struct AppState {
    manifest: RwLock<Manifest>,
    manifest_path: PathBuf,
    sample_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl AppState {
    pub fn load(manifest_path: &Path) -> pbasr_core::Result<Self> {
        Ok(Self::new(Manifest::load(manifest_path)?, manifest_path.to_path_buf()))
    }

    pub fn new(manifest: Manifest, manifest_path: PathBuf) -> Self {
        Self {
            manifest: RwLock::new(manifest),
            manifest_path,
            sample_locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn manifest(&self) -> Manifest {
        self.manifest.read().expect("manifest lock").clone()
    }

    /// The lock mutating requests on `id` must hold.
    pub fn sample_lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.sample_locks
            .lock()
            .expect("lock table")
            .entry(id.to_string())
            .or_default()
            .clone()
    }
}

pub struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.0, Json(json!({ "error": self.1 }))).into_response()
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::InvalidArgument(_) | Error::Image(_) | Error::Format { .. } | Error::DegenerateInput(_) => {
                StatusCode::UNPROCESSABLE_ENTITY
            }
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let msg = match e {
            Error::InvalidArgument(m) => m,
            other => other.to_string(),
        };
        ApiError(status, msg)
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn not_found(id: &str) -> ApiError {
    ApiError(StatusCode::NOT_FOUND, format!("unknown sample `{id}`"))
}

#[derive(Serialize)]
struct SampleView<'a> {
    #[serde(flatten)]
    sample: &'a BlurSample,
    size_category: Option<SizeCategory>,
}

impl<'a> From<&'a BlurSample> for SampleView<'a> {
    fn from(sample: &'a BlurSample) -> Self {
        Self { sample, size_category: sample.size_category() }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ListQuery {
    state: Option<ReviewState>,
    #[serde(rename = "type")]
    blur_type: Option<BlurType>,
    /// 1-based.
    page: Option<usize>,
    per_page: Option<usize>,
}

#[derive(Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EstimateBody {
    threshold: Option<f32>,
    window: Option<usize>,
}

pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/samples", get(list_samples))
        .route("/api/samples/{id}", get(get_sample))
        .route("/api/samples/{id}/image", get(get_image))
        .route("/api/samples/{id}/mask", get(get_mask).put(put_mask))
        .route("/api/samples/{id}/labels", axum::routing::patch(patch_labels))
        .route("/api/samples/{id}/estimate", post(post_estimate))
        .route("/api/stats", get(get_stats))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(tower_http::services::ServeDir::new(dir)),
        None => api,
    }
}

async fn list_samples(
    State(st): State<Arc<AppState>>,
    query: Result<Query<ListQuery>, QueryRejection>,
) -> ApiResult<Json<serde_json::Value>> {
    let Query(q) = query.map_err(|e| ApiError(StatusCode::BAD_REQUEST, e.body_text()))?;
    let page = q.page.unwrap_or(1);
    let per_page = q.per_page.unwrap_or(50);
    if page == 0 || per_page == 0 || per_page > MAX_PER_PAGE {
        return Err(ApiError(StatusCode::BAD_REQUEST, format!("page >= 1 and per_page in 1..={MAX_PER_PAGE}")));
    }
    let m = st.manifest.read().expect("manifest lock");
    let matching: Vec<&BlurSample> = m
        .samples
        .iter()
        .filter(|s| q.state.is_none_or(|v| s.review_state == v))
        .filter(|s| q.blur_type.is_none_or(|v| s.blur_type == v))
        .collect();
    let items: Vec<SampleView> = matching
        .iter()
        .skip((page - 1) * per_page)
        .take(per_page)
        .map(|s| SampleView::from(*s))
        .collect();
    Ok(Json(json!({
        "page": page,
        "per_page": per_page,
        "total": matching.len(),
        "items": items,
    })))
}

async fn get_sample(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<serde_json::Value>> {
    let m = st.manifest.read().expect("manifest lock");
    let s = m.get(&id).ok_or_else(|| not_found(&id))?;
    Ok(Json(serde_json::to_value(SampleView::from(s)).expect("sample serializes")))
}

fn png_response(bytes: Vec<u8>, revision: u64) -> Response {
    (
        [(header::CONTENT_TYPE, "image/png".to_string()), (header::ETAG, format!("\"{revision}\""))],
        bytes,
    )
        .into_response()
}

fn read_file(path: &Path) -> ApiResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, format!("{}: {e}", path.display())))
}

async fn get_image(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (path, rev) = {
        let m = st.manifest.read().expect("manifest lock");
        let s = m.get(&id).ok_or_else(|| not_found(&id))?;
        (m.hr_path(s), s.revision)
    };
    Ok(png_response(read_file(&path)?, rev))
}

async fn get_mask(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let (path, rev) = {
        let m = st.manifest.read().expect("manifest lock");
        let s = m.get(&id).ok_or_else(|| not_found(&id))?;
        (m.mask_path(s), s.revision)
    };
    Ok(png_response(read_file(&path)?, rev))
}

/// Runs `f` on a working copy of the manifest while holding the sample's
/// write lock, then persists and publishes the copy. A failure leaves both
/// the in-memory and on-disk manifest untouched.
fn mutate<T>(
    st: &AppState,
    id: &str,
    headers: &HeaderMap,
    f: impl FnOnce(&mut Manifest) -> pbasr_core::Result<T>,
) -> ApiResult<(T, BlurSample)> {
    if st.manifest.read().expect("manifest lock").get(id).is_none() {
        return Err(not_found(id));
    }
    let lock = st.sample_lock(id);
    let Ok(_guard) = lock.try_lock() else {
        return Err(ApiError(StatusCode::CONFLICT, format!("sample `{id}` is being written")));
    };
    let mut working = {
        let m = st.manifest.read().expect("manifest lock");
        let s = m.get(id).ok_or_else(|| not_found(id))?;
        if let Some(v) = headers.get(header::IF_MATCH) {
            let want = v.to_str().unwrap_or("").trim().trim_matches('"');
            if want != s.revision.to_string() {
                return Err(ApiError(
                    StatusCode::CONFLICT,
                    format!("revision is {}, request expected {want}", s.revision),
                ));
            }
        }
        m.clone()
    };
    let out = f(&mut working)?;
    let mut m = st.manifest.write().expect("manifest lock");
    // Other samples may have changed since the copy was taken; publish only
    // this sample's record.
    let updated = working.get(id).expect("sample still present").clone();
    *m.get_mut(id).expect("sample still present") = updated.clone();
    m.save(&st.manifest_path)?;
    Ok((out, updated))
}

async fn put_mask(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let ((), s) = mutate(&st, &id, &headers, |m| curate::replace_mask(m, &id, &body).map(|_| ()))?;
    log::info!("mask for {id} replaced, revision {}", s.revision);
    Ok(Json(serde_json::to_value(SampleView::from(&s)).expect("sample serializes")))
}

async fn patch_labels(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<serde_json::Value>> {
    let update: LabelUpdate =
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?;
    let ((), s) = mutate(&st, &id, &headers, |m| curate::apply_labels(m, &id, &update))?;
    Ok(Json(serde_json::to_value(SampleView::from(&s)).expect("sample serializes")))
}

async fn post_estimate(
    State(st): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Response> {
    let req: EstimateBody = if body.iter().all(u8::is_ascii_whitespace) {
        EstimateBody::default()
    } else {
        serde_json::from_slice(&body).map_err(|e| ApiError(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()))?
    };
    let threshold = req.threshold.unwrap_or(DEFAULT_THRESHOLD);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(ApiError(StatusCode::UNPROCESSABLE_ENTITY, "threshold must be in [0, 1]".into()));
    }
    let window = req.window.unwrap_or(DEFAULT_WINDOW);
    let (mask, s) = mutate(&st, &id, &headers, |m| curate::reestimate(m, &id, window, threshold))?;
    Ok(png_response(encode_mask_png(&mask)?, s.revision))
}

async fn get_stats(State(st): State<Arc<AppState>>) -> Json<serde_json::Value> {
    let m = st.manifest.read().expect("manifest lock");
    Json(serde_json::to_value(m.stats()).expect("stats serialize"))
}

/// `--port` wins, then `PBASR_PORT`, then the default.
pub fn resolve_port(flag: Option<u16>) -> Result<u16, String> {
    if let Some(p) = flag {
        return Ok(p);
    }
    match std::env::var(PORT_ENV) {
        Ok(v) => v.parse().map_err(|_| format!("{PORT_ENV}=`{v}` is not a port")),
        Err(_) => Ok(DEFAULT_PORT),
    }
}

pub async fn serve(state: Arc<AppState>, port: u16, ui_dir: Option<PathBuf>) -> std::io::Result<()> {
    let app = router(state, ui_dir.as_deref());
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
