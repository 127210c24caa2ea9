//! HTTP JSON API over a loaded model bundle.
//!
//! Shapes live in an in-memory store keyed by id; every operation that produces a
//! shape inserts a new record, so stored records never change. With a log file the
//! store is also appended to as JSON lines and reloaded on startup.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use slpgen_core::data::encode_ply;
use slpgen_core::edit::{combine, correspond, edit, interpolate, CorrespondStrategy, EditMode, EditRequest, Models};
use slpgen_core::geometry::PointCloud;
use slpgen_core::nets::SparseLatent;
use slpgen_core::Error;

const MAX_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Generated,
    Edited { from: Option<String>, mode: EditMode },
    Interpolated { a: String, b: String, s: f32 },
    Combined { parts: Vec<String> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeRecord {
    pub id: String,
    pub latent: SparseLatent,
    pub cloud: PointCloud,
    pub provenance: Provenance,
    /// Seed of the stochastic step that produced the shape, if any.
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn conflict(message: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match e {
            Error::Argument(m) => Self::bad_request(m),
            other => {
                eprintln!("internal error: {other}");
                Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
            }
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub struct AppState {
    models: Models,
    shapes: RwLock<HashMap<String, Arc<ShapeRecord>>>,
    next_id: AtomicU64,
    log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(models: Models) -> Self {
        Self { models, shapes: RwLock::new(HashMap::new()), next_id: AtomicU64::new(1), log: None }
    }

    /// Like [`AppState::new`], replaying and then appending to the JSON-lines file at `path`.
    pub fn with_log(models: Models, path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let mut shapes = HashMap::new();
        let mut next = 1;
        if path.exists() {
            for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                let rec: ShapeRecord = serde_json::from_str(&line)
                    .map_err(|e| anyhow::anyhow!("{}:{}: {e}", path.display(), n + 1))?;
                if let Some(num) = rec.id.strip_prefix("shape-").and_then(|s| s.parse::<u64>().ok()) {
                    next = next.max(num + 1);
                }
                shapes.insert(rec.id.clone(), Arc::new(rec));
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { models, shapes: RwLock::new(shapes), next_id: AtomicU64::new(next), log: Some(Mutex::new(file)) })
    }

    pub fn models(&self) -> &Models {
        &self.models
    }

    pub fn len(&self) -> usize {
        self.shapes.read().expect("shape store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, id: &str) -> Option<Arc<ShapeRecord>> {
        self.shapes.read().expect("shape store poisoned").get(id).cloned()
    }

    fn find(&self, id: &str) -> ApiResult<Arc<ShapeRecord>> {
        self.get(id).ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown shape id {id}")))
    }

    fn insert(&self, latent: SparseLatent, cloud: PointCloud, provenance: Provenance, seed: Option<u64>) -> ApiResult<ShapeRecord> {
        let id = format!("shape-{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let rec = ShapeRecord { id: id.clone(), latent, cloud, provenance, seed };
        if let Some(log) = &self.log {
            let line = serde_json::to_string(&rec).map_err(|e| ApiError::from(Error::from(e)))?;
            let mut f = log.lock().expect("log poisoned");
            writeln!(f, "{line}").map_err(|e| ApiError::from(Error::from(e)))?;
        }
        self.shapes.write().expect("shape store poisoned").insert(id, Arc::new(rec.clone()));
        Ok(rec)
    }

    fn check_latent(&self, latent: &SparseLatent) -> ApiResult<()> {
        let (k, d) = (self.models.k(), self.models.dim());
        if latent.k() != k || latent.dim() != d {
            return Err(ApiError::conflict(format!("latent is {}x{}, model expects {k}x{d}", latent.k(), latent.dim())));
        }
        Ok(())
    }
}

/// Seeds stay below 2^53 so JSON clients that read numbers as doubles keep them exact.
fn fresh_seed() -> u64 {
    rand::random::<u64>() >> 11
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> ApiResult<T> + Send + 'static) -> ApiResult<T> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        eprintln!("worker failed: {e}");
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal error")
    })?
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/v1/health", get(health))
        .route("/v1/generate", post(generate))
        .route("/v1/edit", post(edit_shape))
        .route("/v1/interpolate", post(interpolate_shapes))
        .route("/v1/combine", post(combine_shapes))
        .route("/v1/shapes/{id}", get(get_shape))
        .with_state(state)
}

/// Serves until the listener fails.
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    axum::serve(listener, router(state)).await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    let m = st.models();
    Json(json!({
        "status": "ok",
        "model_config": {
            "autoencoder": m.ae.config(),
            "position_ddpm": m.pos.config(),
            "feature_ddpm": m.feat.config(),
        }
    }))
}

#[derive(Deserialize)]
struct GenerateBody {
    count: usize,
    seed: Option<u64>,
}

async fn generate(State(st): State<Arc<AppState>>, body: Result<Json<GenerateBody>, JsonRejection>) -> ApiResult<Json<Vec<ShapeRecord>>> {
    let Json(body) = body?;
    if body.count == 0 || body.count > MAX_BATCH {
        return Err(ApiError::bad_request(format!("count must lie in 1..={MAX_BATCH}")));
    }
    let base = body.seed.unwrap_or_else(fresh_seed);
    blocking(move || {
        (0..body.count as u64)
            .map(|i| {
                let seed = base.wrapping_add(i);
                let latent = st.models().generate(seed)?;
                let cloud = st.models().decode(&latent)?;
                st.insert(latent, cloud, Provenance::Generated, Some(seed))
            })
            .collect::<ApiResult<Vec<_>>>()
            .map(Json)
    })
    .await
}

#[derive(Deserialize)]
struct EditBody {
    id: Option<String>,
    latent: Option<SparseLatent>,
    moved_mask: Option<Vec<bool>>,
    mode: EditMode,
    seed: Option<u64>,
}

async fn edit_shape(State(st): State<Arc<AppState>>, body: Result<Json<EditBody>, JsonRejection>) -> ApiResult<Json<ShapeRecord>> {
    let Json(body) = body?;
    let latent = match (&body.latent, &body.id) {
        (Some(l), _) => SparseLatent::new(l.positions.clone(), l.features.clone())?,
        (None, Some(id)) => st.find(id)?.latent.clone(),
        (None, None) => return Err(ApiError::bad_request("edit needs an id or a latent")),
    };
    if let (Some(_), Some(id)) = (&body.latent, &body.id) {
        st.find(id)?;
    }
    st.check_latent(&latent)?;
    let moved_mask = body.moved_mask.unwrap_or_else(|| vec![false; latent.k()]);
    if moved_mask.len() != latent.k() {
        return Err(ApiError::conflict(format!("moved_mask has {} entries for {} latent points", moved_mask.len(), latent.k())));
    }
    let seed = body.seed.unwrap_or_else(fresh_seed);
    let req = EditRequest { latent, moved_mask, mode: body.mode, seed };
    let provenance = Provenance::Edited { from: body.id, mode: body.mode };
    blocking(move || {
        let out = edit(&req, st.models())?;
        let seed = (req.mode != EditMode::KeepFeatures).then_some(seed);
        st.insert(out.latent, out.cloud, provenance, seed).map(Json)
    })
    .await
}

#[derive(Deserialize)]
struct InterpolateBody {
    id_a: String,
    id_b: String,
    steps: usize,
    mask: Option<Vec<bool>>,
    #[serde(default)]
    strategy: CorrespondStrategy,
}

async fn interpolate_shapes(
    State(st): State<Arc<AppState>>,
    body: Result<Json<InterpolateBody>, JsonRejection>,
) -> ApiResult<Json<Vec<ShapeRecord>>> {
    let Json(body) = body?;
    if body.steps < 2 || body.steps > MAX_BATCH {
        return Err(ApiError::bad_request(format!("steps must lie in 2..={MAX_BATCH}")));
    }
    let (a, b) = (st.find(&body.id_a)?, st.find(&body.id_b)?);
    if let Some(m) = &body.mask {
        if m.len() != a.latent.k() {
            return Err(ApiError::conflict(format!("mask has {} entries for {} latent points", m.len(), a.latent.k())));
        }
    }
    blocking(move || {
        let b_aligned = correspond(&a.latent, &b.latent, body.strategy)?.apply(&b.latent)?;
        (0..body.steps)
            .map(|i| {
                let s = i as f32 / (body.steps - 1) as f32;
                let latent = interpolate(&a.latent, &b_aligned, s, body.mask.as_deref())?;
                let cloud = st.models().decode(&latent)?;
                let prov = Provenance::Interpolated { a: a.id.clone(), b: b.id.clone(), s };
                st.insert(latent, cloud, prov, None)
            })
            .collect::<ApiResult<Vec<_>>>()
            .map(Json)
    })
    .await
}

#[derive(Deserialize)]
struct CombinePart {
    id: String,
    indices: Vec<usize>,
}

#[derive(Deserialize)]
struct CombineBody {
    parts: Vec<CombinePart>,
}

async fn combine_shapes(State(st): State<Arc<AppState>>, body: Result<Json<CombineBody>, JsonRejection>) -> ApiResult<Json<ShapeRecord>> {
    let Json(body) = body?;
    let records = body.parts.iter().map(|p| st.find(&p.id)).collect::<ApiResult<Vec<_>>>()?;
    blocking(move || {
        let parts: Vec<(&SparseLatent, &[usize])> =
            records.iter().zip(&body.parts).map(|(r, p)| (&r.latent, p.indices.as_slice())).collect();
        let combined = combine(&parts, st.models().k())?;
        let cloud = st.models().decode(&combined.latent)?;
        let prov = Provenance::Combined { parts: body.parts.iter().map(|p| p.id.clone()).collect() };
        st.insert(combined.latent, cloud, prov, None).map(Json)
    })
    .await
}

/// `/v1/shapes/{id}` returns the record; `/v1/shapes/{id}.ply` the decoded cloud as PLY.
async fn get_shape(State(st): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    if let Some(base) = id.strip_suffix(".ply") {
        let rec = st.find(base)?;
        let bytes = encode_ply(&rec.cloud)?;
        return Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes).into_response());
    }
    Ok(Json(st.find(&id)?.as_ref().clone()).into_response())
}
