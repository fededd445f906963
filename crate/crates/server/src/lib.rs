//! HTTP review service: browse clusters and exemplar crops, edit the merge
//! map under optimistic concurrency, preview pseudo-labels and watch dev-set
//! metrics.
//!
//! The merge map is held as an immutable snapshot behind an `RwLock<Arc<_>>`;
//! readers clone the `Arc` and never observe a partial update. Writes are
//! serialized by a mutex, checked against the `If-Match` revision, persisted
//! with an atomic rename and only then published.

use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use comrp_core::clustering::ClusterModel;
use comrp_core::labeling::{apply_merge, read_label_png, read_merge_map, write_merge_map, LabelError, LabelMap};
use comrp_core::masks::crop_region;
use comrp_core::metrics::MetricsReport;
use comrp_core::pipeline::{encode_png_rgb, evaluate_maps, overlay, rasterize_image, Dataset, PipelineError};
use comrp_core::{MergeMap, MergeTarget, IGNORE_LABEL};
use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;
use tower_http::services::ServeDir;

pub const PREVIEW_CACHE: usize = 64;
pub const CROP_SIZE: u32 = 224;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Label(#[from] LabelError),
    #[error("{}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Parse { path: PathBuf, source: serde_json::Error },
}

/// Files a review session is built from.
#[derive(Debug, Clone, Default)]
pub struct SessionConfig {
    pub model: PathBuf,
    pub manifest: PathBuf,
    pub masks: PathBuf,
    /// Read at startup when present; every accepted edit is written here.
    pub merge: PathBuf,
    /// Class names for a fresh all-DISCARD map when `merge` does not exist.
    pub classes: Vec<String>,
    pub gt: Option<PathBuf>,
}

/// One published merge-map revision.
struct Snapshot {
    revision: u64,
    merge: MergeMap,
    /// Region classes, or `None` while the map does not cover the model.
    regions: Option<BTreeMap<String, Option<u8>>>,
    metrics: OnceLock<Result<MetricsReport, String>>,
}

impl Snapshot {
    fn new(revision: u64, merge: MergeMap, model: &ClusterModel) -> Self {
        Snapshot {
            revision,
            regions: apply_merge(model, &merge).ok(),
            merge,
            metrics: OnceLock::new(),
        }
    }
}

type PreviewKey = (String, u64, Vec<u8>);

pub struct AppState {
    model: ClusterModel,
    data: Dataset,
    by_image: BTreeMap<String, Vec<usize>>,
    gt: Option<Vec<LabelMap>>,
    merge_path: PathBuf,
    current: RwLock<Arc<Snapshot>>,
    writer: tokio::sync::Mutex<()>,
    previews: Mutex<LruCache<PreviewKey, Arc<Vec<u8>>>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, ServerError> {
    let bytes = std::fs::read(path).map_err(|source| ServerError::Read {
        path: path.into(),
        source,
    })?;
    serde_json::from_slice(&bytes).map_err(|source| ServerError::Parse {
        path: path.into(),
        source,
    })
}

impl AppState {
    pub fn load(cfg: &SessionConfig) -> Result<Self, ServerError> {
        let model: ClusterModel = read_json(&cfg.model)?;
        let data = Dataset::load(&cfg.manifest, &cfg.masks)?;
        let merge = if cfg.merge.exists() {
            read_merge_map(&cfg.merge)?
        } else {
            MergeMap::discard_all(&model, cfg.classes.clone())
        };
        let gt = match &cfg.gt {
            Some(dir) => Some(
                data.images
                    .iter()
                    .map(|img| read_label_png(&dir.join(format!("{}.png", img.image_id))))
                    .collect::<Result<Vec<_>, _>>()?,
            ),
            None => None,
        };
        Ok(Self::new(model, data, merge, gt, cfg.merge.clone()))
    }

    pub fn new(model: ClusterModel, data: Dataset, merge: MergeMap, gt: Option<Vec<LabelMap>>, merge_path: PathBuf) -> Self {
        let mut by_image: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, m) in data.masks.iter().enumerate() {
            by_image.entry(m.image_id.clone()).or_default().push(i);
        }
        let snapshot = Snapshot::new(0, merge, &model);
        AppState {
            model,
            data,
            by_image,
            gt,
            merge_path,
            current: RwLock::new(Arc::new(snapshot)),
            writer: tokio::sync::Mutex::new(()),
            previews: Mutex::new(LruCache::new(NonZeroUsize::new(PREVIEW_CACHE).unwrap())),
        }
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.current.read().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn revision(&self) -> u64 {
        self.snapshot().revision
    }

    fn render_label(&self, image_id: &str, snap: &Snapshot) -> Result<LabelMap, ApiError> {
        let regions = snap.regions.as_ref().ok_or_else(incomplete_map)?;
        let image = self
            .data
            .image(image_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {image_id}")))?;
        let masks: Vec<_> = self
            .by_image
            .get(image_id)
            .map(|ix| ix.iter().map(|&i| &self.data.masks[i]).collect())
            .unwrap_or_default();
        Ok(rasterize_image(image, &masks, regions)?)
    }

    fn metrics(&self, snap: &Snapshot) -> Result<MetricsReport, ApiError> {
        let gt = self.gt.as_ref().ok_or_else(|| ApiError::not_found("no ground truth loaded"))?;
        let result = snap.metrics.get_or_init(|| {
            let preds: Result<Vec<LabelMap>, ApiError> = self
                .data
                .images
                .iter()
                .map(|img| self.render_label(&img.image_id, snap))
                .collect();
            let preds = preds.map_err(|e| e.message)?;
            evaluate_maps(gt, &preds, snap.merge.classes.len() as u32)
                .and_then(|c| Ok(c.report()?))
                .map_err(|e| e.to_string())
        });
        result.clone().map_err(ApiError::unprocessable)
    }
}

fn incomplete_map() -> ApiError {
    ApiError {
        status: StatusCode::CONFLICT,
        message: "the current merge map does not cover every cluster".into(),
        extra: None,
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
    extra: Option<serde_json::Value>,
}

impl ApiError {
    fn not_found(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::NOT_FOUND,
            message: msg.into(),
            extra: None,
        }
    }

    fn unprocessable(msg: impl Into<String>) -> Self {
        ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: msg.into(),
            extra: None,
        }
    }

    fn internal(msg: impl ToString) -> Self {
        ApiError {
            status: StatusCode::INTERNAL_SERVER_ERROR,
            message: msg.to_string(),
            extra: None,
        }
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        ApiError::internal(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({ "error": self.message });
        if let (Some(obj), Some(serde_json::Value::Object(extra))) = (body.as_object_mut(), self.extra) {
            obj.extend(extra);
        }
        (self.status, Json(body)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterInfo {
    pub cluster_id: u32,
    pub size: usize,
    pub exemplars: Vec<String>,
    /// `None` while unassigned.
    pub mapping: Option<MergeTarget>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMapResponse {
    pub revision: u64,
    pub merge_map: MergeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsResponse {
    pub revision: u64,
    pub classes: Vec<String>,
    pub report: MetricsReport,
}

fn etag(revision: u64) -> HeaderValue {
    HeaderValue::from_str(&format!("\"{revision}\"")).expect("ascii")
}

fn png(bytes: Arc<Vec<u8>>, revision: Option<u64>) -> Response {
    let mut headers = HeaderMap::new();
    headers.insert(header::CONTENT_TYPE, HeaderValue::from_static("image/png"));
    if let Some(r) = revision {
        headers.insert(header::ETAG, etag(r));
    }
    (headers, bytes.as_ref().clone()).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(ApiError::internal)?
}

async fn get_clusters(State(st): State<Arc<AppState>>) -> Json<Vec<ClusterInfo>> {
    let snap = st.snapshot();
    let sizes = st.model.cluster_sizes();
    Json(
        st.model
            .cluster_ids()
            .map(|c| ClusterInfo {
                cluster_id: c,
                size: sizes[c as usize],
                exemplars: st.model.exemplars.get(&c).cloned().unwrap_or_default(),
                mapping: snap.merge.mapping.get(&c).copied(),
            })
            .collect(),
    )
}

async fn get_images(State(st): State<Arc<AppState>>) -> Json<Vec<String>> {
    Json(st.data.images.iter().map(|i| i.image_id.clone()).collect())
}

async fn get_crop(State(st): State<Arc<AppState>>, UrlPath(mask_id): UrlPath<String>) -> Result<Response, ApiError> {
    let bytes = blocking(move || {
        let mask = st
            .data
            .mask(&mask_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown mask {mask_id}")))?;
        let image = st
            .data
            .image(&mask.image_id)
            .ok_or_else(|| ApiError::not_found(format!("unknown image {}", mask.image_id)))?;
        let rgb = image.load_rgb().map_err(ApiError::internal)?;
        let crop = crop_region(&rgb, mask, CROP_SIZE).map_err(ApiError::internal)?;
        Ok(encode_png_rgb(&crop)?)
    })
    .await?;
    Ok(png(Arc::new(bytes), None))
}

async fn get_mergemap(State(st): State<Arc<AppState>>) -> Response {
    let snap = st.snapshot();
    let mut headers = HeaderMap::new();
    headers.insert(header::ETAG, etag(snap.revision));
    (
        headers,
        Json(MergeMapResponse {
            revision: snap.revision,
            merge_map: snap.merge.clone(),
        }),
    )
        .into_response()
}

fn parse_revision(headers: &HeaderMap) -> Result<u64, ApiError> {
    let raw = headers.get(header::IF_MATCH).ok_or(ApiError {
        status: StatusCode::PRECONDITION_REQUIRED,
        message: "If-Match header with the expected revision is required".into(),
        extra: None,
    })?;
    raw.to_str()
        .ok()
        .map(|s| s.trim().trim_start_matches("W/").trim_matches('"'))
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| ApiError {
            status: StatusCode::BAD_REQUEST,
            message: "If-Match must hold a revision number".into(),
            extra: None,
        })
}

async fn put_mergemap(
    State(st): State<Arc<AppState>>,
    headers: HeaderMap,
    Json(merge): Json<MergeMap>,
) -> Result<Response, ApiError> {
    let expected = parse_revision(&headers)?;
    let _guard = st.writer.lock().await;
    let current = st.snapshot();
    if current.revision != expected {
        return Err(ApiError {
            status: StatusCode::CONFLICT,
            message: format!("revision is {}, not {expected}", current.revision),
            extra: Some(json!({ "revision": current.revision })),
        });
    }
    if let Err(e) = merge.validate_for(&st.model) {
        let extra = match &e {
            LabelError::UnmappedCluster(ids) => json!({ "missing": ids }),
            LabelError::UnknownCluster(ids) => json!({ "unknown": ids }),
            _ => json!({}),
        };
        return Err(ApiError {
            status: StatusCode::UNPROCESSABLE_ENTITY,
            message: e.to_string(),
            extra: Some(extra),
        });
    }
    let next = Snapshot::new(current.revision + 1, merge, &st.model);
    let path = st.merge_path.clone();
    let to_write = next.merge.clone();
    blocking(move || write_merge_map(&to_write, &path).map_err(ApiError::internal)).await?;
    let revision = next.revision;
    *st.current.write().unwrap_or_else(|e| e.into_inner()) = Arc::new(next);
    log::info!("merge map revision {revision}");
    let mut headers = HeaderMap::new();
    headers.insert(header::ETAG, etag(revision));
    Ok((headers, Json(json!({ "revision": revision })).into_response()).into_response())
}

#[derive(Debug, Default, Deserialize)]
struct PreviewQuery {
    /// Comma-separated class indices left untinted.
    hide: Option<String>,
}

async fn get_preview(
    State(st): State<Arc<AppState>>,
    UrlPath(image_id): UrlPath<String>,
    Query(q): Query<PreviewQuery>,
) -> Result<Response, ApiError> {
    let hidden: BTreeSet<u8> = q
        .hide
        .as_deref()
        .unwrap_or("")
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<u8>())
        .collect::<Result<_, _>>()
        .map_err(|_| ApiError {
            status: StatusCode::BAD_REQUEST,
            message: "hide must be a comma-separated list of class indices".into(),
            extra: None,
        })?;
    if st.data.image(&image_id).is_none() {
        return Err(ApiError::not_found(format!("unknown image {image_id}")));
    }
    let snap = st.snapshot();
    let key: PreviewKey = (image_id.clone(), snap.revision, hidden.iter().copied().collect());
    if let Some(hit) = st.previews.lock().unwrap_or_else(|e| e.into_inner()).get(&key) {
        return Ok(png(hit.clone(), Some(snap.revision)));
    }
    let revision = snap.revision;
    let st2 = st.clone();
    let bytes = blocking(move || {
        let mut label = st2.render_label(&image_id, &snap)?;
        for v in label.data.iter_mut().filter(|v| hidden.contains(v)) {
            *v = IGNORE_LABEL;
        }
        let rgb = st2.data.image(&image_id).unwrap().load_rgb().map_err(ApiError::internal)?;
        Ok(Arc::new(encode_png_rgb(&overlay(&rgb, &label))?))
    })
    .await?;
    st.previews
        .lock()
        .unwrap_or_else(|e| e.into_inner())
        .put(key, bytes.clone());
    Ok(png(bytes, Some(revision)))
}

async fn get_metrics(State(st): State<Arc<AppState>>) -> Result<Json<MetricsResponse>, ApiError> {
    if st.gt.is_none() {
        return Err(ApiError::not_found("no ground truth loaded"));
    }
    let snap = st.snapshot();
    let st2 = st.clone();
    let snap2 = snap.clone();
    let report = blocking(move || st2.metrics(&snap2)).await?;
    Ok(Json(MetricsResponse {
        revision: snap.revision,
        classes: snap.merge.classes.clone(),
        report,
    }))
}

/// API routes, plus the UI bundle at `/` when `ui_dir` is given.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/clusters", get(get_clusters))
        .route("/api/images", get(get_images))
        .route("/api/regions/{mask_id}/crop.png", get(get_crop))
        .route("/api/mergemap", get(get_mergemap).put(put_mergemap))
        .route("/api/images/{image_id}/preview", get(get_preview))
        .route("/api/metrics", get(get_metrics))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
