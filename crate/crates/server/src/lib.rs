//! HTTP session API for interactive segmentation.
//!
//! Each session owns a working copy of the parameters, so per-image
//! adaptation never leaks between sessions. Finishing a session with
//! sequence adaptation enabled takes one step on the server-wide parameters;
//! those steps are serialized in arrival order.
//!
//! | method | path                   | body / query                  |
//! |--------|------------------------|-------------------------------|
//! | POST   | `/sessions`            | PNG, `?ia=bool&sa=bool`       |
//! | POST   | `/sessions/{id}/clicks`| `{"row", "col", "label"}`     |
//! | POST   | `/sessions/{id}/finish`|                               |
//! | GET    | `/sessions/{id}/mask`  | `?probabilities=bool`         |
//! | GET    | `/status`              |                               |
//!
//! Masks travel base64-encoded inside JSON responses and as raw PNG from the
//! mask endpoint.

mod codec;
mod error;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::SystemTime;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use clickadapt::eval::checkpoint_id;
use clickadapt::losses::ImportanceSet;
use clickadapt::{AdaptConfig, Anchor, Checkpoint, Click, Label, ParamSet, SequenceAdapter, Session};

pub use codec::ProbabilityStats;
pub use error::ApiError;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ServerConfig {
    pub adapt: AdaptConfig,
    pub default_ia: bool,
    pub default_sa: bool,
    pub max_body_bytes: usize,
    pub max_pixels: u64,
    /// Seed of the guidance subsampling used by sequence steps.
    pub seed: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            adapt: AdaptConfig::default(),
            default_ia: true,
            default_sa: true,
            max_body_bytes: 8 << 20,
            max_pixels: 4096 * 4096,
            seed: 0,
        }
    }
}

struct SessionEntry {
    session: Option<Session>,
    sa: bool,
    height: usize,
    width: usize,
    created: SystemTime,
}

struct Sequence {
    adapter: SequenceAdapter,
    rng: ChaCha8Rng,
    images_adapted: usize,
}

struct Shared {
    config: ServerConfig,
    checkpoint_id: String,
    sequence: Mutex<Sequence>,
    sessions: Mutex<HashMap<String, Arc<Mutex<SessionEntry>>>>,
    next_id: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

/// Cloneable handle on the server state.
#[derive(Clone)]
pub struct AppState(Arc<Shared>);

impl AppState {
    /// Falls back to uniform importance when the checkpoint carries none.
    pub fn new(ckpt: &Checkpoint, config: ServerConfig) -> Result<Self, ApiError> {
        config.adapt.validate()?;
        let omega = match &ckpt.importance {
            Some(o) => o.clone(),
            None => {
                log::warn!("checkpoint has no importance weights; using uniform weights");
                ImportanceSet::ones_like(&ckpt.net.params)
            }
        };
        let anchor = Anchor::new(&ckpt.net, omega)?;
        Ok(Self(Arc::new(Shared {
            checkpoint_id: checkpoint_id(ckpt)?,
            sequence: Mutex::new(Sequence {
                adapter: SequenceAdapter::new(anchor),
                rng: ChaCha8Rng::seed_from_u64(config.seed),
                images_adapted: 0,
            }),
            config,
            sessions: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        })))
    }

    /// Current server-level sequence parameters θ_t.
    pub fn sequence_params(&self) -> ParamSet {
        lock(&self.0.sequence).adapter.net().params.clone()
    }

    fn entry(&self, id: &str) -> Result<Arc<Mutex<SessionEntry>>, ApiError> {
        lock(&self.0.sessions)
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))
    }

    fn create(&self, body: &[u8], ia: bool, sa: bool) -> Result<SessionCreated, ApiError> {
        let cfg = &self.0.config;
        let size = lock(&self.0.sequence).adapter.net().arch.input_size;
        let (image, height, width) = codec::decode_image(body, size, cfg.max_pixels)?;
        let (start, anchor) = {
            let seq = lock(&self.0.sequence);
            (seq.adapter.net().clone(), seq.adapter.anchor().clone())
        };
        let mut session = Session::new(&start, anchor, image, None, cfg.adapt.clone(), ia)?;
        let id = format!("s{:06}", self.0.next_id.fetch_add(1, Ordering::Relaxed));
        session.id = Some(id.clone());
        let pred = session.latest();
        let created = SessionCreated {
            id: id.clone(),
            height,
            width,
            ia,
            sa,
            mask_png: BASE64.encode(codec::mask_png(pred, height, width)),
            probability: ProbabilityStats::of(pred),
        };
        let entry = SessionEntry {
            session: Some(session),
            sa,
            height,
            width,
            created: SystemTime::now(),
        };
        lock(&self.0.sessions).insert(id, Arc::new(Mutex::new(entry)));
        Ok(created)
    }

    fn click(&self, id: &str, req: ClickRequest) -> Result<ClickResponse, ApiError> {
        let entry = self.entry(id)?;
        let mut entry = lock(&entry);
        let (height, width) = (entry.height, entry.width);
        let session = entry
            .session
            .as_mut()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        if req.row >= height || req.col >= width {
            return Err(clickadapt::Error::OutOfBounds {
                row: req.row,
                col: req.col,
                height,
                width,
            }
            .into());
        }
        let size = session.image().shape()[1];
        let click = Click::new(codec::to_model(req.row, height, size), codec::to_model(req.col, width, size), req.label);
        let before = (!session.ia_enabled()).then(|| session.params().clone());
        session.apply_click(click)?;
        if let Some(before) = before {
            if &before != session.params() {
                return Err(ApiError::Internal("parameters changed with adaptation disabled".into()));
            }
        }
        let pred = session.latest();
        Ok(ClickResponse {
            clicks_used: session.corrections().len(),
            mask_png: BASE64.encode(codec::mask_png(pred, height, width)),
            probability: ProbabilityStats::of(pred),
        })
    }

    fn finish(&self, id: &str) -> Result<FinishResponse, ApiError> {
        let entry = lock(&self.0.sessions)
            .remove(id)
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        let mut entry = lock(&entry);
        let session = entry
            .session
            .take()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        let record = session.finish();
        let mut seq = lock(&self.0.sequence);
        let applied_sa = if entry.sa {
            let Sequence { adapter, rng, .. } = &mut *seq;
            adapter.step(&record, &self.0.config.adapt, rng)?
        } else {
            false
        };
        if applied_sa {
            seq.images_adapted += 1;
        }
        log::info!(
            "session {id} finished after {} clicks ({:.1}s open), sequence step applied: {applied_sa}",
            record.corrections.len(),
            entry.created.elapsed().map(|d| d.as_secs_f64()).unwrap_or(0.0)
        );
        Ok(FinishResponse {
            applied_sa,
            images_adapted: seq.images_adapted,
        })
    }

    fn mask(&self, id: &str, probabilities: bool) -> Result<Vec<u8>, ApiError> {
        let entry = self.entry(id)?;
        let entry = lock(&entry);
        let session = entry
            .session
            .as_ref()
            .ok_or_else(|| ApiError::UnknownSession(id.to_string()))?;
        let pred = session.latest();
        Ok(if probabilities {
            codec::probability_png(pred, entry.height, entry.width)
        } else {
            codec::mask_png(pred, entry.height, entry.width)
        })
    }

    pub fn status(&self) -> Status {
        let cfg = &self.0.config;
        Status {
            checkpoint_id: self.0.checkpoint_id.clone(),
            images_adapted: lock(&self.0.sequence).images_adapted,
            open_sessions: lock(&self.0.sessions).len(),
            defaults: ModeDefaults {
                ia: cfg.default_ia,
                sa: cfg.default_sa,
            },
            click_budget: cfg.adapt.click_budget,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub id: String,
    pub height: usize,
    pub width: usize,
    pub ia: bool,
    pub sa: bool,
    /// Base64-encoded 0/255 PNG.
    pub mask_png: String,
    pub probability: ProbabilityStats,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClickRequest {
    pub row: usize,
    pub col: usize,
    pub label: Label,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClickResponse {
    pub mask_png: String,
    pub clicks_used: usize,
    pub probability: ProbabilityStats,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FinishResponse {
    pub applied_sa: bool,
    pub images_adapted: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct ModeDefaults {
    pub ia: bool,
    pub sa: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Status {
    pub checkpoint_id: String,
    pub images_adapted: usize,
    pub open_sessions: usize,
    pub defaults: ModeDefaults,
    pub click_budget: usize,
}

#[derive(Debug, Default, Deserialize)]
struct CreateQuery {
    ia: Option<bool>,
    sa: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
struct MaskQuery {
    #[serde(default)]
    probabilities: bool,
}

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::Internal(e.to_string()))?
}

async fn create_session(
    State(state): State<AppState>,
    Query(q): Query<CreateQuery>,
    body: Bytes,
) -> Result<impl IntoResponse, ApiError> {
    let cfg = &state.0.config;
    let (ia, sa) = (q.ia.unwrap_or(cfg.default_ia), q.sa.unwrap_or(cfg.default_sa));
    let created = blocking(move || state.create(&body, ia, sa)).await?;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn add_click(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Json(req): Json<ClickRequest>,
) -> Result<Json<ClickResponse>, ApiError> {
    blocking(move || state.click(&id, req)).await.map(Json)
}

async fn finish_session(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<FinishResponse>, ApiError> {
    blocking(move || state.finish(&id)).await.map(Json)
}

async fn get_mask(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MaskQuery>,
) -> Result<impl IntoResponse, ApiError> {
    let png = blocking(move || state.mask(&id, q.probabilities)).await?;
    Ok(([(header::CONTENT_TYPE, "image/png")], png))
}

async fn get_status(State(state): State<AppState>) -> Json<Status> {
    Json(state.status())
}

pub fn router(state: AppState) -> Router {
    let limit = state.0.config.max_body_bytes;
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/finish", post(finish_session))
        .route("/sessions/{id}/mask", get(get_mask))
        .route("/status", get(get_status))
        .layer(DefaultBodyLimit::max(limit))
        .with_state(state)
}

/// Serves until the process is stopped.
pub async fn serve(state: AppState, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, router(state)).await
}
