//! JSON API over a live engine.
//!
//! Writers take the engine mutex with `try_lock` and answer 503 when another
//! tick is being ingested. Readers never touch the mutex: they clone the
//! snapshot published after the last commit.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::{Mutex, MutexGuard};

use super::{open_engine, EngineConfig, Persistence, ServiceError, UpdatePeriod};
use crate::checkpoint::{merge_checkpoints, Checkpoint, CheckpointError};
use crate::delta::DeltaBreakdown;
use crate::engine::{Engine, EngineError, MismatchFlags, RankedList, TickInput};
use crate::event::{EventInstance, FactorSchema, InstanceId, Tick, TypeId};
use crate::history::HistoryError;
use crate::pls::PlsModel;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelView {
    pub type_id: TypeId,
    pub schema: FactorSchema,
    pub coefficients: Vec<f64>,
    pub samples_absorbed: u64,
    pub model: PlsModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpenEvents {
    pub next_tick: Tick,
    pub events: Vec<EventInstance>,
}

/// Everything the read endpoints serve, as of the last committed tick.
#[derive(Debug, Clone, Default)]
pub struct Snapshot {
    pub next_tick: Tick,
    pub events: Vec<EventInstance>,
    pub ranking: RankedList,
    pub breakdowns: BTreeMap<InstanceId, DeltaBreakdown>,
    pub flags: MismatchFlags,
    pub models: BTreeMap<TypeId, ModelView>,
}

impl Snapshot {
    pub fn of(engine: &Engine) -> Result<Self, EngineError> {
        let (ranking, breakdowns) = engine.current_ranking()?;
        let models = engine
            .registry()
            .iter()
            .map(|(id, entry)| {
                (
                    id.clone(),
                    ModelView {
                        type_id: id.clone(),
                        schema: entry.schema().clone(),
                        coefficients: entry.coefficients().beta.clone(),
                        samples_absorbed: entry.model().samples_absorbed(),
                        model: entry.model().clone(),
                    },
                )
            })
            .collect();
        Ok(Self {
            next_tick: engine.next_tick(),
            events: engine.history().active_events(),
            ranking,
            breakdowns,
            flags: engine.flags().clone(),
            models,
        })
    }
}

pub struct Live {
    pub engine: Engine,
    persistence: Option<Persistence>,
    checkpoint_path: Option<PathBuf>,
}

impl Live {
    fn save_checkpoint(&self) -> Result<Option<Checkpoint>, CheckpointError> {
        let Some(path) = &self.checkpoint_path else {
            return Ok(None);
        };
        let checkpoint = Checkpoint::from_engine(&self.engine);
        checkpoint.write_file(path)?;
        Ok(Some(checkpoint))
    }
}

#[derive(Clone)]
pub struct AppState {
    live: Arc<Mutex<Live>>,
    snapshot: Arc<RwLock<Arc<Snapshot>>>,
}

impl AppState {
    /// In-memory state with no files behind it.
    pub fn new(engine: Engine) -> Result<Self, EngineError> {
        Self::build(engine, None, None)
    }

    /// State that appends each committed tick to the configured files.
    pub fn persistent(engine: Engine, config: &EngineConfig) -> Result<Self, ServiceError> {
        let persistence = Persistence::open(config)?;
        Ok(Self::build(engine, Some(persistence), Some(config.checkpoint_path.clone()))?)
    }

    fn build(engine: Engine, persistence: Option<Persistence>, checkpoint_path: Option<PathBuf>) -> Result<Self, EngineError> {
        let snapshot = Snapshot::of(&engine)?;
        Ok(Self {
            live: Arc::new(Mutex::new(Live {
                engine,
                persistence,
                checkpoint_path,
            })),
            snapshot: Arc::new(RwLock::new(Arc::new(snapshot))),
        })
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock poisoned").clone()
    }

    /// Waits for the engine. Used by background tasks and tests; request
    /// handlers use `try_lock` instead.
    pub async fn lock(&self) -> MutexGuard<'_, Live> {
        self.live.lock().await
    }

    fn publish(&self, engine: &Engine) -> Result<(), EngineError> {
        let fresh = Arc::new(Snapshot::of(engine)?);
        *self.snapshot.write().expect("snapshot lock poisoned") = fresh;
        Ok(())
    }

    pub async fn autosave(&self) -> Result<(), CheckpointError> {
        self.lock().await.save_checkpoint().map(|_| ())
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        Self {
            status,
            message: message.into(),
        }
    }

    fn busy() -> Self {
        Self::new(StatusCode::SERVICE_UNAVAILABLE, "busy")
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "error": self.message }))).into_response()
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        let status = match &e {
            EngineError::NonConsecutiveTick { .. } => StatusCode::CONFLICT,
            EngineError::History(HistoryError::NonConsecutiveTick { .. }) => StatusCode::CONFLICT,
            EngineError::Pls(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl From<CheckpointError> for ApiError {
    fn from(e: CheckpointError) -> Self {
        let status = match &e {
            CheckpointError::SchemaMismatch(_) => StatusCode::CONFLICT,
            CheckpointError::Corrupt(_) => StatusCode::BAD_REQUEST,
            CheckpointError::Io(_) => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::UNPROCESSABLE_ENTITY,
        };
        Self::new(status, e.to_string())
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/events/current", get(current_events))
        .route("/ticks", post(submit_tick))
        .route("/rankings/current", get(current_ranking))
        .route("/diagnostics/delta/{instance}", get(delta_breakdown))
        .route("/diagnostics/flags", get(flags))
        .route("/models/{type}", get(model))
        .route("/checkpoints/export", post(export_checkpoint))
        .route("/checkpoints/merge", post(merge_checkpoint))
        .with_state(state)
}

async fn current_events(State(state): State<AppState>) -> Json<OpenEvents> {
    let snapshot = state.snapshot();
    Json(OpenEvents {
        next_tick: snapshot.next_tick,
        events: snapshot.events.clone(),
    })
}

async fn current_ranking(State(state): State<AppState>) -> Json<RankedList> {
    Json(state.snapshot().ranking.clone())
}

async fn delta_breakdown(
    State(state): State<AppState>,
    Path(instance): Path<String>,
) -> Result<Json<DeltaBreakdown>, ApiError> {
    state
        .snapshot()
        .breakdowns
        .get(&InstanceId::new(instance.clone()))
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("no open instance {instance}")))
}

async fn flags(State(state): State<AppState>) -> Json<MismatchFlags> {
    Json(state.snapshot().flags.clone())
}

async fn model(State(state): State<AppState>, Path(type_id): Path<String>) -> Result<Json<ModelView>, ApiError> {
    state
        .snapshot()
        .models
        .get(&TypeId::new(type_id.clone()))
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown type {type_id}")))
}

/// Decodes a request body, answering malformed input in the same JSON error
/// shape as every other failure.
fn decode<T: serde::de::DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, format!("malformed body: {e}")))
}

async fn submit_tick(State(state): State<AppState>, body: Bytes) -> Result<Response, ApiError> {
    let input: TickInput = decode(&body)?;
    let mut live = state.live.try_lock().map_err(|_| ApiError::busy())?;
    let report = live.engine.ingest_tick(input)?;
    let Live {
        engine, persistence, ..
    } = &mut *live;
    if let Some(persistence) = persistence {
        persistence.commit(engine, &report)?;
    }
    state.publish(engine)?;
    Ok(Json(report).into_response())
}

async fn export_checkpoint(State(state): State<AppState>) -> Result<Json<Checkpoint>, ApiError> {
    let live = state.live.try_lock().map_err(|_| ApiError::busy())?;
    let checkpoint = match live.save_checkpoint()? {
        Some(saved) => saved,
        None => Checkpoint::from_engine(&live.engine),
    };
    Ok(Json(checkpoint))
}

/// Merges a remote checkpoint into the live models. The local history and
/// tick marker are kept.
async fn merge_checkpoint(
    State(state): State<AppState>,
    body: Bytes,
) -> Result<Json<Checkpoint>, ApiError> {
    let theirs: Checkpoint = decode(&body)?;
    let mut live = state.live.try_lock().map_err(|_| ApiError::busy())?;
    let ours = Checkpoint::from_engine(&live.engine);
    let merged = merge_checkpoints(&ours, &theirs)?;
    let auto_register = live.engine.auto_register_types();
    let engine = merged.restore(live.engine.history().clone(), auto_register)?;
    state.publish(&engine)?;
    live.engine = engine;
    live.save_checkpoint()?;
    Ok(Json(merged))
}

/// Serves the API on the configured address until ctrl-c, then writes a
/// final checkpoint.
pub async fn run_online(config: &EngineConfig) -> Result<(), ServiceError> {
    config.check_writable()?;
    let engine = open_engine(config)?;
    let state = AppState::persistent(engine, config)?;
    let listener = tokio::net::TcpListener::bind(&config.listen_address)
        .await
        .map_err(|source| ServiceError::Bind {
            address: config.listen_address.clone(),
            source,
        })?;
    log::info!("listening on {}", config.listen_address);

    let autosave = match config.update_period {
        UpdatePeriod::Every(period) => {
            let state = state.clone();
            Some(tokio::spawn(async move {
                let mut interval = tokio::time::interval(period);
                interval.tick().await;
                loop {
                    interval.tick().await;
                    if let Err(e) = state.autosave().await {
                        log::error!("autosave failed: {e}");
                    }
                }
            }))
        }
        UpdatePeriod::Manual => None,
    };

    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
            log::info!("shutting down");
        })
        .await?;
    if let Some(task) = autosave {
        task.abort();
    }
    state.autosave().await?;
    Ok(())
}
