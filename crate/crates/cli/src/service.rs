//! Local HTTP/JSON service behind the annotation tool: image listing,
//! marker editing, background training, progressive saliency and
//! validation scores.
//!
//! Every marked image trains the model; every unmarked image with ground
//! truth forms the validation pool. Responses identify images by id only and
//! never carry filesystem paths.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use flim::encoder::{count_parameters, train_encoder, BlockSpec, EncoderMode, EncoderModel};
use flim::pipeline::{
    ingest, predict, score_images, select_training_image, DatasetEntry, DatasetIndex, EntryIssue, ImageScore,
    PipelineConfig,
};
use flim::postproc::refine;
use flim::{decode_progressive, MarkerSet};

/// Training and scoring defaults for a session.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    pub pipeline: PipelineConfig,
}

impl ServiceConfig {
    /// Defaults from `pipeline.json` in the dataset root when present.
    pub fn for_root(root: impl Into<PathBuf>) -> flim::Result<Self> {
        let root = root.into();
        let config_path = root.join("pipeline.json");
        let mut pipeline = if config_path.is_file() {
            PipelineConfig::load(&config_path)?
        } else {
            PipelineConfig::new(&root)
        };
        pipeline.dataset = root.clone();
        Ok(Self { root, pipeline })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainState {
    Idle,
    Running,
    Failed,
    Done,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub load_secs: f64,
    pub train_secs: f64,
    pub score_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStatus {
    pub state: TrainState,
    pub job_id: u64,
    pub mode: Option<EncoderMode>,
    pub stages: StageTimings,
    pub error: Option<String>,
    pub training_images: Vec<String>,
    pub kmeans_invocations: Option<usize>,
    pub parameters: Option<usize>,
    pub model_available: bool,
    /// Markers changed since the current model was trained.
    pub stale: bool,
}

struct TrainedModel {
    model: Arc<EncoderModel>,
    /// Marker generation the model was trained from.
    generation: u64,
}

struct Session {
    index: DatasetIndex,
    marker_versions: HashMap<String, u64>,
    /// Bumped on every marker change.
    generation: u64,
    model: Option<TrainedModel>,
    status: TrainStatus,
    scores: Vec<ImageScore>,
}

impl Session {
    fn stale(&self) -> bool {
        self.model.as_ref().is_some_and(|m| m.generation != self.generation)
    }
}

struct Inner {
    config: ServiceConfig,
    session: RwLock<Session>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(config: ServiceConfig) -> flim::Result<Self> {
        let index = ingest(&config.root)?;
        Ok(Self(Arc::new(Inner {
            session: RwLock::new(Session {
                index,
                marker_versions: HashMap::new(),
                generation: 0,
                model: None,
                status: TrainStatus {
                    state: TrainState::Idle,
                    job_id: 0,
                    mode: None,
                    stages: StageTimings::default(),
                    error: None,
                    training_images: Vec::new(),
                    kmeans_invocations: None,
                    parameters: None,
                    model_available: false,
                    stale: false,
                },
                scores: Vec::new(),
            }),
            config,
        })))
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, Session> {
        self.0.session.read().unwrap_or_else(|e| e.into_inner())
    }

    fn write(&self) -> std::sync::RwLockWriteGuard<'_, Session> {
        self.0.session.write().unwrap_or_else(|e| e.into_inner())
    }

    fn root(&self) -> &Path {
        &self.0.config.root
    }
}

/// JSON error body. `field` is set for marker validation failures.
#[derive(Debug, Serialize)]
struct ApiError {
    #[serde(skip)]
    status: StatusCode,
    error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    field: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self {
            status,
            error: error.into(),
            field: None,
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, what)
    }

    fn invalid(field: impl Into<String>, error: impl Into<String>) -> Self {
        Self {
            status: StatusCode::BAD_REQUEST,
            error: error.into(),
            field: Some(field.into()),
        }
    }

    /// Internal failure; the message is scrubbed of the dataset location.
    fn internal(state: &AppState, err: impl std::fmt::Display) -> Self {
        let root = state.root().display().to_string();
        let msg = err.to_string().replace(&root, "<dataset>");
        log::error!("{msg}");
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, msg)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

fn png(bytes: Vec<u8>, stale: bool) -> Response {
    (
        [
            (header::CONTENT_TYPE, "image/png"),
            (header::HeaderName::from_static("x-model-stale"), if stale { "true" } else { "false" }),
        ],
        bytes,
    )
        .into_response()
}

#[derive(Debug, Serialize)]
struct ImageInfo {
    id: String,
    width: usize,
    height: usize,
    has_markers: bool,
    has_gt: bool,
    trainable: bool,
    issues: Vec<EntryIssue>,
    marker_version: u64,
}

fn image_info(entry: &DatasetEntry, version: u64) -> ImageInfo {
    ImageInfo {
        id: entry.id.clone(),
        width: entry.width,
        height: entry.height,
        has_markers: entry.has_markers,
        has_gt: entry.has_gt,
        trainable: entry.trainable(),
        issues: entry.issues.clone(),
        marker_version: version,
    }
}

async fn list_images(State(state): State<AppState>) -> Json<serde_json::Value> {
    let s = state.read();
    let images: Vec<ImageInfo> = s
        .index
        .entries
        .iter()
        .map(|e| image_info(e, s.marker_versions.get(&e.id).copied().unwrap_or(0)))
        .collect();
    Json(serde_json::json!({ "images": images }))
}

fn entry(s: &Session, id: &str) -> ApiResult<DatasetEntry> {
    s.index
        .get(id)
        .cloned()
        .ok_or_else(|| ApiError::not_found(format!("unknown image {id:?}")))
}

async fn get_image(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let path = {
        let s = state.read();
        entry(&s, &id)?;
        s.index.image_path(&id).map_err(|e| ApiError::internal(&state, e))?
    };
    let bytes = std::fs::read(&path).map_err(|e| ApiError::internal(&state, e))?;
    Ok(png(bytes, false))
}

fn markers_response(set: &MarkerSet, version: u64) -> Response {
    (
        [
            (header::CONTENT_TYPE, "application/json".to_string()),
            (header::ETAG, format!("\"{version}\"")),
            (header::HeaderName::from_static("x-marker-version"), version.to_string()),
        ],
        set.to_canonical_json(),
    )
        .into_response()
}

async fn get_markers(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let s = state.read();
    let e = entry(&s, &id)?;
    let set = s
        .index
        .load_markers(&id)
        .map_err(|err| ApiError::internal(&state, err))?
        .unwrap_or_else(|| MarkerSet::new(e.file.clone(), Vec::new()));
    Ok(markers_response(&set, s.marker_versions.get(&id).copied().unwrap_or(0)))
}

async fn put_markers(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> ApiResult<Response> {
    let de = &mut serde_json::Deserializer::from_slice(&body);
    let mut set: MarkerSet = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        ApiError::invalid(field, e.into_inner().to_string())
    })?;
    let mut s = state.write();
    let e = entry(&s, &id)?;
    if set.image != e.file {
        return Err(ApiError::invalid("image", format!("expected {:?}", e.file)));
    }
    set.validate(e.width, e.height)
        .map_err(|v| ApiError::invalid(v.field, v.message))?;
    set.canonicalize();
    let path = s.index.markers_path(&id);
    let saved = if set.is_empty() {
        match std::fs::remove_file(&path) {
            Err(err) if err.kind() != std::io::ErrorKind::NotFound => Err(err.into()),
            _ => Ok(()),
        }
    } else {
        std::fs::create_dir_all(path.parent().expect("markers live in a directory"))
            .map_err(flim::Error::from)
            .and_then(|_| set.save(&path))
    };
    saved.map_err(|err| ApiError::internal(&state, err))?;
    let version = {
        let v = s.marker_versions.entry(id.clone()).or_insert(0);
        *v += 1;
        *v
    };
    s.generation += 1;
    // Refresh the index so trainability reflects the new markers.
    let index = ingest(state.root()).map_err(|err| ApiError::internal(&state, err))?;
    s.index = index;
    s.status.stale = s.stale();
    Ok(markers_response(&set, version))
}

#[derive(Debug, Default, Deserialize)]
pub struct TrainRequest {
    pub mode: Option<EncoderMode>,
    #[serde(alias = "blockspecs")]
    pub blocks: Option<Vec<BlockSpec>>,
    pub seed: Option<u64>,
}

async fn post_train(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let request: TrainRequest = if body.iter().all(u8::is_ascii_whitespace) {
        TrainRequest::default()
    } else {
        let de = &mut serde_json::Deserializer::from_slice(&body);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            ApiError::invalid(field, e.into_inner().to_string())
        })?
    };
    let defaults = &state.0.config.pipeline;
    let mode = request.mode.unwrap_or(defaults.mode);
    let blocks = request.blocks.unwrap_or_else(|| defaults.blocks.clone());
    let seed = request.seed.unwrap_or(defaults.seed);
    if blocks.is_empty() {
        return Err(ApiError::invalid("blocks", "at least one block is required"));
    }
    for (i, spec) in blocks.iter().enumerate() {
        spec.validate()
            .map_err(|e| ApiError::invalid(format!("blocks[{i}]"), e.to_string()))?;
    }
    let (job_id, generation, training_ids, validation_ids, index) = {
        let mut s = state.write();
        if s.status.state == TrainState::Running {
            return Err(ApiError::new(StatusCode::CONFLICT, "a training job is already running"));
        }
        let training_ids: Vec<String> = s.index.trainable().map(|e| e.id.clone()).collect();
        if training_ids.is_empty() {
            return Err(ApiError::new(StatusCode::CONFLICT, "no image has markers yet"));
        }
        let validation_ids: Vec<String> = s
            .index
            .entries
            .iter()
            .filter(|e| !e.has_markers && e.evaluable())
            .map(|e| e.id.clone())
            .collect();
        let job_id = s.status.job_id + 1;
        s.status = TrainStatus {
            state: TrainState::Running,
            job_id,
            mode: Some(mode),
            stages: StageTimings::default(),
            error: None,
            training_images: training_ids.clone(),
            kmeans_invocations: None,
            parameters: None,
            model_available: s.model.is_some(),
            stale: s.stale(),
        };
        (job_id, s.generation, training_ids, validation_ids, s.index.clone())
    };
    let worker = state.clone();
    tokio::task::spawn_blocking(move || {
        let mut stages = StageTimings::default();
        let result = (|| -> flim::Result<_> {
            let t = Instant::now();
            let images = index.training_images(&training_ids)?;
            stages.load_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let trained = train_encoder(&images, &blocks, mode, seed)?;
            stages.train_secs = t.elapsed().as_secs_f64();
            let t = Instant::now();
            let p = &worker.0.config.pipeline;
            let scores = score_images(
                &trained.model,
                &index,
                &validation_ids,
                &p.decoder,
                p.refine.as_ref(),
                p.beta_sq,
            )?;
            stages.score_secs = t.elapsed().as_secs_f64();
            Ok((trained, scores))
        })();
        let mut s = worker.write();
        s.status.stages = stages;
        match result {
            Ok((trained, scores)) => {
                s.status.kmeans_invocations = Some(trained.report.kmeans_invocations);
                s.status.parameters = Some(count_parameters(&trained.model));
                s.model = Some(TrainedModel {
                    model: Arc::new(trained.model),
                    generation,
                });
                s.scores = scores;
                s.status.state = TrainState::Done;
                s.status.model_available = true;
            }
            Err(e) => {
                let root = worker.root().display().to_string();
                s.status.error = Some(e.to_string().replace(&root, "<dataset>"));
                s.status.state = TrainState::Failed;
            }
        }
        s.status.stale = s.stale();
    });
    Ok((StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job_id }))).into_response())
}

async fn train_status(State(state): State<AppState>) -> Json<TrainStatus> {
    let s = state.read();
    let mut status = s.status.clone();
    status.stale = s.stale();
    status.model_available = s.model.is_some();
    Json(status)
}

#[derive(Debug, Deserialize)]
pub struct SaliencyQuery {
    /// 1-based block index; the last block when omitted.
    pub block: Option<usize>,
    #[serde(default)]
    pub refined: bool,
}

async fn get_saliency(
    State(state): State<AppState>,
    UrlPath(id): UrlPath<String>,
    Query(query): Query<SaliencyQuery>,
) -> ApiResult<Response> {
    let (model, stale, index) = {
        let s = state.read();
        entry(&s, &id)?;
        let Some(m) = &s.model else {
            return Err(ApiError::not_found("no trained model yet; POST /train first"));
        };
        (m.model.clone(), s.stale(), s.index.clone())
    };
    let depth = model.depth();
    let block = query.block.unwrap_or(depth);
    if block == 0 || block > depth {
        return Err(ApiError::not_found(format!(
            "block {block} requested but the model has {depth} block(s)"
        )));
    }
    let pipeline = state.0.config.pipeline.clone();
    let refine_params = pipeline.refine.unwrap_or_default();
    let worker = state.clone();
    let bytes = tokio::task::spawn_blocking(move || -> flim::Result<Vec<u8>> {
        let image = index.load_image(&id)?;
        let maps = decode_progressive(&model, &image, &pipeline.decoder)?;
        let map = &maps[block - 1];
        if query.refined {
            refine(map, &image, &refine_params)?.to_png_bytes()
        } else {
            map.to_png_bytes()
        }
    })
    .await
    .map_err(|e| ApiError::internal(&worker, e))?
    .map_err(|e| ApiError::internal(&worker, e))?;
    Ok(png(bytes, stale))
}

#[derive(Debug, Serialize)]
struct ScoresResponse {
    model_available: bool,
    stale: bool,
    job_id: u64,
    scores: Vec<ImageScore>,
}

async fn validation_scores(State(state): State<AppState>) -> Json<ScoresResponse> {
    let s = state.read();
    Json(ScoresResponse {
        model_available: s.model.is_some(),
        stale: s.stale(),
        job_id: s.status.job_id,
        scores: s.scores.clone(),
    })
}

async fn suggest_next(State(state): State<AppState>) -> Json<serde_json::Value> {
    let s = state.read();
    // Only images that are still unmarked are candidates.
    let pool: Vec<ImageScore> = s
        .scores
        .iter()
        .filter(|sc| s.index.get(&sc.image).is_some_and(|e| !e.has_markers))
        .cloned()
        .collect();
    let suggestion = select_training_image(&pool).cloned();
    Json(serde_json::json!({ "suggestion": suggestion, "stale": s.stale() }))
}

/// Predicts a single image with the current model (used by tools and tests).
pub fn predict_image(state: &AppState, id: &str) -> flim::Result<Option<flim::pipeline::Prediction>> {
    let (model, index) = {
        let s = state.read();
        match &s.model {
            Some(m) => (m.model.clone(), s.index.clone()),
            None => return Ok(None),
        }
    };
    let p = &state.0.config.pipeline;
    let image = index.load_image(id)?;
    predict(&model, &image, &p.decoder, p.refine.as_ref()).map(Some)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/images", get(list_images))
        .route("/images/{id}", get(get_image))
        .route("/images/{id}/markers", get(get_markers).put(put_markers))
        .route("/images/{id}/saliency", get(get_saliency))
        .route("/train", post(post_train))
        .route("/train/status", get(train_status))
        .route("/validation/scores", get(validation_scores))
        .route("/suggest-next", get(suggest_next))
        .with_state(state)
}

/// Serves on `127.0.0.1:port` until the process is stopped.
pub async fn serve(config: ServiceConfig, port: u16) -> anyhow::Result<()> {
    let state = AppState::new(config)?;
    let listener = tokio::net::TcpListener::bind(("127.0.0.1", port)).await?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state)).await?;
    Ok(())
}
