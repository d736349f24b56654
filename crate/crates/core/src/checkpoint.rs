//! Model checkpoints: every type's model and schema, the mismatch flags and
//! the tick marker, sealed with a SHA-256 digest of the canonical JSON body.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::{merge_models, Engine, EngineError, MismatchFlags, ModelRegistry, TypeModel};
use crate::event::{FactorSchema, Tick, TypeId};
use crate::history::HistoryDb;
use crate::pls::PlsModel;

pub const CHECKPOINT_FORMAT: &str = "triage-checkpoint/1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("type {0}: factor schemas differ between checkpoints")]
    SchemaMismatch(TypeId),
    #[error("checkpoint marks tick {checkpoint}, history continues at {history}")]
    TickMismatch { checkpoint: Tick, history: Tick },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeCheckpoint {
    pub schema: FactorSchema,
    pub model: PlsModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointBody {
    pub format: String,
    /// Tick the engine expects next.
    pub next_tick: Tick,
    pub epsilon: f64,
    pub types: BTreeMap<TypeId, TypeCheckpoint>,
    pub flags: MismatchFlags,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub body: CheckpointBody,
    /// Lowercase hex SHA-256 of the body's compact JSON rendering.
    pub digest: String,
}

fn body_digest(body: &CheckpointBody) -> String {
    let canonical = serde_json::to_vec(body).expect("checkpoint bodies always serialize");
    hex::encode(Sha256::digest(&canonical))
}

impl Checkpoint {
    pub fn seal(body: CheckpointBody) -> Self {
        let digest = body_digest(&body);
        Self { body, digest }
    }

    pub fn from_engine(engine: &Engine) -> Self {
        let types = engine
            .registry()
            .iter()
            .map(|(id, entry)| {
                (
                    id.clone(),
                    TypeCheckpoint {
                        schema: entry.schema().clone(),
                        model: entry.model().clone(),
                    },
                )
            })
            .collect();
        Self::seal(CheckpointBody {
            format: CHECKPOINT_FORMAT.to_owned(),
            next_tick: engine.next_tick(),
            epsilon: engine.epsilon(),
            types,
            flags: engine.flags().clone(),
        })
    }

    pub fn verify(&self) -> Result<(), CheckpointError> {
        if self.body.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Corrupt(format!(
                "unknown format {:?}",
                self.body.format
            )));
        }
        let actual = body_digest(&self.body);
        if actual != self.digest {
            return Err(CheckpointError::Corrupt(format!(
                "digest mismatch: recorded {}, computed {actual}",
                self.digest
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoints always serialize")
    }

    /// Parses and verifies a checkpoint.
    pub fn from_json(text: &str) -> Result<Self, CheckpointError> {
        let checkpoint: Self =
            serde_json::from_str(text).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
        checkpoint.verify()?;
        Ok(checkpoint)
    }

    pub fn write_file(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn read_file(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn registry(&self) -> Result<ModelRegistry, CheckpointError> {
        let mut registry = ModelRegistry::new(self.body.epsilon);
        for (type_id, entry) in &self.body.types {
            let model = TypeModel::from_model(type_id, entry.schema.clone(), entry.model.clone())?;
            registry.install(type_id.clone(), model);
        }
        Ok(registry)
    }

    /// Rebuilds an engine from this checkpoint and the history it was taken
    /// alongside.
    pub fn restore(&self, history: HistoryDb, auto_register_types: bool) -> Result<Engine, CheckpointError> {
        self.verify()?;
        if self.body.next_tick != history.next_tick() {
            return Err(CheckpointError::TickMismatch {
                checkpoint: self.body.next_tick,
                history: history.next_tick(),
            });
        }
        Ok(Engine::from_parts(
            self.registry()?,
            history,
            self.body.flags.clone(),
            auto_register_types,
        ))
    }
}

/// Per type, keeps whichever model absorbed more samples; flags are united.
/// The tick marker and epsilon stay those of `ours`.
pub fn merge_checkpoints(ours: &Checkpoint, theirs: &Checkpoint) -> Result<Checkpoint, CheckpointError> {
    ours.verify()?;
    theirs.verify()?;
    let mut types = ours.body.types.clone();
    for (type_id, incoming) in &theirs.body.types {
        match types.get_mut(type_id) {
            Some(existing) => {
                if existing.schema != incoming.schema {
                    return Err(CheckpointError::SchemaMismatch(type_id.clone()));
                }
                existing.model = merge_models(&existing.model, &incoming.model)?;
            }
            None => {
                types.insert(type_id.clone(), incoming.clone());
            }
        }
    }
    let mut flags = ours.body.flags.clone();
    flags.union(&theirs.body.flags);
    Ok(Checkpoint::seal(CheckpointBody {
        format: CHECKPOINT_FORMAT.to_owned(),
        next_tick: ours.body.next_tick,
        epsilon: ours.body.epsilon,
        types,
        flags,
    }))
}
