//! Adaptive prioritization of reported security events.
//!
//! Each violation type carries a partial-least-squares model over its
//! environmental factors, updated one observation at a time from the
//! security administrator's priorities. A history-based correction term
//! captures context the per-event factors cannot express, estimated from
//! past pairs whose relative order the engine got wrong.

pub mod checkpoint;
pub mod delta;
pub mod engine;
pub mod event;
pub mod history;
pub mod pls;
pub mod service;
pub mod sim;

pub use delta::{delta, lambda_term, phi, phi_values, DeltaBreakdown, MismatchVerdict};
pub use engine::{
    merge_models, predict_priority, rank_events, Engine, EngineError, EngineParams, MismatchFlags,
    ModelRegistry, RankedEntry, RankedList, TickInput, TickReport,
};
pub use event::{EventInstance, FactorSchema, InstanceId, Priority, Tick, TickRecord, TypeId};
pub use history::{HistoryDb, HistoryError};
pub use pls::{
    extract_coefficients, nipals_fit, numerical_rank, predict, rpls_update, CoefficientVector,
    DataBlock, PlsError, PlsModel,
};
