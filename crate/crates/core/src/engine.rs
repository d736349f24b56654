//! Per-tick orchestration: valuation of every open event, recursive model
//! updates from the SA's history-adapted priorities, mismatch flagging, and
//! history bookkeeping.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delta::{self, phi_values, DeltaBreakdown, DeltaError};
use crate::event::{EventError, EventInstance, FactorSchema, InstanceId, Priority, Tick, TickRecord, TypeId};
use crate::history::{HistoryDb, HistoryError};
use crate::pls::{self, CoefficientVector, PlsError, PlsModel, DEFAULT_EPSILON};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("expected tick {expected}, got {got}")]
    NonConsecutiveTick { expected: Tick, got: Tick },
    #[error("type {type_id}: schema has {expected} factors, got {got}")]
    SchemaMismatch {
        type_id: TypeId,
        expected: usize,
        got: usize,
    },
    #[error("unknown violation type {0}")]
    UnknownType(TypeId),
    #[error(transparent)]
    Pls(#[from] PlsError),
    #[error(transparent)]
    Delta(#[from] DeltaError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Event(#[from] EventError),
}

/// Model state of one violation type.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeModel {
    schema: FactorSchema,
    model: PlsModel,
    coefficients: CoefficientVector,
}

impl TypeModel {
    fn cold(schema: FactorSchema, epsilon: f64) -> Self {
        let n = schema.len();
        Self {
            schema,
            model: PlsModel::cold(n, epsilon),
            coefficients: CoefficientVector::ones(n),
        }
    }

    /// Wraps a fitted (or cold) model. Coefficients stay all-ones until the
    /// model has absorbed at least one sample.
    pub fn from_model(type_id: &TypeId, schema: FactorSchema, model: PlsModel) -> Result<Self, EngineError> {
        if model.n_factors() != schema.len() {
            return Err(EngineError::SchemaMismatch {
                type_id: type_id.clone(),
                expected: schema.len(),
                got: model.n_factors(),
            });
        }
        model.validate()?;
        let coefficients = if model.samples_absorbed() == 0 {
            CoefficientVector::ones(schema.len())
        } else {
            pls::extract_coefficients(&model)?
        };
        Ok(Self {
            schema,
            model,
            coefficients,
        })
    }

    pub fn schema(&self) -> &FactorSchema {
        &self.schema
    }

    pub fn model(&self) -> &PlsModel {
        &self.model
    }

    pub fn coefficients(&self) -> &CoefficientVector {
        &self.coefficients
    }
}

/// Models keyed by violation type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelRegistry {
    types: BTreeMap<TypeId, TypeModel>,
    epsilon: f64,
}

impl Default for ModelRegistry {
    fn default() -> Self {
        Self::new(DEFAULT_EPSILON)
    }
}

impl ModelRegistry {
    pub fn new(epsilon: f64) -> Self {
        Self {
            types: BTreeMap::new(),
            epsilon,
        }
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn register(&mut self, type_id: TypeId, schema: FactorSchema) -> Result<(), EngineError> {
        match self.types.get(&type_id) {
            Some(existing) if existing.schema != schema => Err(EngineError::SchemaMismatch {
                type_id,
                expected: existing.schema.len(),
                got: schema.len(),
            }),
            Some(_) => Ok(()),
            None => {
                self.types.insert(type_id, TypeModel::cold(schema, self.epsilon));
                Ok(())
            }
        }
    }

    /// Installs a model restored from elsewhere, replacing any existing one.
    pub fn install(&mut self, type_id: TypeId, entry: TypeModel) {
        self.types.insert(type_id, entry);
    }

    pub fn get(&self, type_id: &TypeId) -> Option<&TypeModel> {
        self.types.get(type_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TypeId, &TypeModel)> {
        self.types.iter()
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    fn check_event(&self, event: &EventInstance) -> Result<&TypeModel, EngineError> {
        let entry = self
            .types
            .get(&event.type_id)
            .ok_or_else(|| EngineError::UnknownType(event.type_id.clone()))?;
        if entry.schema.len() != event.factors.len() {
            return Err(EngineError::SchemaMismatch {
                type_id: event.type_id.clone(),
                expected: entry.schema.len(),
                got: event.factors.len(),
            });
        }
        Ok(entry)
    }

    /// Linear term `Σ βᵢ·xᵢ` for an event.
    pub fn linear_term(&self, event: &EventInstance) -> Result<f64, EngineError> {
        Ok(self.check_event(event)?.coefficients.dot(&event.factors))
    }

    fn update(&mut self, event: &EventInstance, response: f64) -> Result<(), EngineError> {
        self.check_event(event)?;
        let entry = self.types.get_mut(&event.type_id).expect("checked above");
        let model = pls::rpls_update(&entry.model, &event.factors, response, self.epsilon)?;
        entry.coefficients = pls::extract_coefficients(&model)?;
        entry.model = model;
        Ok(())
    }

    /// Discards the type's model and replaces its schema. History is left
    /// alone.
    pub fn reset_type_model(&mut self, type_id: &TypeId, new_schema: FactorSchema) -> Result<(), EngineError> {
        let entry = self
            .types
            .get_mut(type_id)
            .ok_or_else(|| EngineError::UnknownType(type_id.clone()))?;
        *entry = TypeModel::cold(new_schema, self.epsilon);
        Ok(())
    }
}

/// Per-instance latch set once a directionality mismatch has been seen.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MismatchFlags {
    flagged: BTreeSet<InstanceId>,
}

impl MismatchFlags {
    pub fn is_flagged(&self, id: &InstanceId) -> bool {
        self.flagged.contains(id)
    }

    /// Returns true if the flag was newly set.
    pub fn set(&mut self, id: &InstanceId) -> bool {
        self.flagged.insert(id.clone())
    }

    pub fn union(&mut self, other: &MismatchFlags) {
        self.flagged.extend(other.flagged.iter().cloned());
    }

    fn forget(&mut self, id: &InstanceId) {
        self.flagged.remove(id);
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstanceId> {
        self.flagged.iter()
    }

    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }
}

impl FromIterator<InstanceId> for MismatchFlags {
    fn from_iter<I: IntoIterator<Item = InstanceId>>(iter: I) -> Self {
        Self {
            flagged: iter.into_iter().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub instance_id: InstanceId,
    pub type_id: TypeId,
    pub first_reported: Tick,
    pub f_value: f64,
    pub delta: u64,
    pub linear_term: f64,
}

/// Events by descending valuation; ties go to the earlier report, then to
/// the smaller instance id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RankedList {
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    fn sort(&mut self) {
        self.entries.sort_by(|a, b| {
            b.f_value
                .total_cmp(&a.f_value)
                .then(a.first_reported.cmp(&b.first_reported))
                .then_with(|| a.instance_id.cmp(&b.instance_id))
        });
    }

    pub fn order(&self) -> Vec<InstanceId> {
        self.entries.iter().map(|e| e.instance_id.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PriorityPrediction {
    pub f_value: f64,
    pub linear_term: f64,
    pub breakdown: DeltaBreakdown,
}

/// Valuation of `v`: its linear term plus the history correction at `t`.
pub fn predict_priority(
    registry: &ModelRegistry,
    db: &HistoryDb,
    t: Tick,
    v: &EventInstance,
    chi_t: &BTreeSet<InstanceId>,
) -> Result<PriorityPrediction, EngineError> {
    let linear_term = registry.linear_term(v)?;
    let breakdown = delta::delta(db, t, chi_t, &v.instance_id)?;
    Ok(PriorityPrediction {
        f_value: linear_term + breakdown.delta as f64,
        linear_term,
        breakdown,
    })
}

/// Ranking plus the correction breakdown behind every entry.
pub fn rank_with_breakdowns(
    registry: &ModelRegistry,
    db: &HistoryDb,
    t: Tick,
    events: &[EventInstance],
) -> Result<(RankedList, BTreeMap<InstanceId, DeltaBreakdown>), EngineError> {
    let chi: BTreeSet<InstanceId> = events.iter().map(|e| e.instance_id.clone()).collect();
    let mut ranking = RankedList::default();
    let mut breakdowns = BTreeMap::new();
    for event in events {
        let prediction = predict_priority(registry, db, t, event, &chi)?;
        ranking.entries.push(RankedEntry {
            instance_id: event.instance_id.clone(),
            type_id: event.type_id.clone(),
            first_reported: event.first_reported,
            f_value: prediction.f_value,
            delta: prediction.breakdown.delta,
            linear_term: prediction.linear_term,
        });
        breakdowns.insert(event.instance_id.clone(), prediction.breakdown);
    }
    ranking.sort();
    Ok((ranking, breakdowns))
}

pub fn rank_events(
    registry: &ModelRegistry,
    db: &HistoryDb,
    t: Tick,
    events: &[EventInstance],
) -> Result<RankedList, EngineError> {
    rank_with_breakdowns(registry, db, t, events).map(|(ranking, _)| ranking)
}

/// Regression target `pri_t(v) − Δ_t(v)`. May be negative.
pub fn history_adapted_response(
    db: &HistoryDb,
    t: Tick,
    chi_t: &BTreeSet<InstanceId>,
    v: &InstanceId,
    sa_priority: Priority,
) -> Result<f64, EngineError> {
    let breakdown = delta::delta(db, t, chi_t, v)?;
    Ok(adapted(sa_priority, breakdown.delta))
}

fn adapted(sa_priority: Priority, delta: u64) -> f64 {
    f64::from(sa_priority.value()) - delta as f64
}

/// Keeps the model trained on more samples; ties keep `ours`.
pub fn merge_models(ours: &PlsModel, theirs: &PlsModel) -> Result<PlsModel, EngineError> {
    if ours.n_factors() != theirs.n_factors() {
        return Err(PlsError::DimensionMismatch {
            expected: ours.n_factors(),
            actual: theirs.n_factors(),
        }
        .into());
    }
    if theirs.samples_absorbed() > ours.samples_absorbed() {
        Ok(theirs.clone())
    } else {
        Ok(ours.clone())
    }
}

/// One tick as submitted: the open events with their factors, the SA's
/// priorities, and the instances that close after this tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickInput {
    pub tick: Tick,
    pub events: Vec<EventInstance>,
    pub sa_priorities: BTreeMap<InstanceId, Priority>,
    #[serde(default)]
    pub resolved: BTreeSet<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickReport {
    pub tick: Tick,
    /// Number of recursive updates applied per type.
    pub updated_types: BTreeMap<TypeId, u64>,
    pub newly_flagged: Vec<InstanceId>,
    /// Ranking of the events still open after this tick, under the updated
    /// models.
    pub ranking: RankedList,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineParams {
    pub epsilon: f64,
    /// Register unseen violation types on the fly with a generic schema.
    pub auto_register_types: bool,
    pub schemas: BTreeMap<TypeId, FactorSchema>,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON,
            auto_register_types: true,
            schemas: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Engine {
    registry: ModelRegistry,
    history: HistoryDb,
    flags: MismatchFlags,
    auto_register_types: bool,
}

impl Default for Engine {
    fn default() -> Self {
        Self::new(EngineParams::default()).expect("default params are valid")
    }
}

impl Engine {
    pub fn new(params: EngineParams) -> Result<Self, EngineError> {
        if !(params.epsilon.is_finite() && params.epsilon >= 0.0) {
            return Err(PlsError::InvalidEpsilon(params.epsilon).into());
        }
        let mut registry = ModelRegistry::new(params.epsilon);
        for (type_id, schema) in params.schemas {
            registry.register(type_id, schema)?;
        }
        Ok(Self {
            registry,
            history: HistoryDb::new(),
            flags: MismatchFlags::default(),
            auto_register_types: params.auto_register_types,
        })
    }

    /// Reassembles an engine from saved parts. The history must be the one
    /// the registry and flags were produced alongside.
    pub fn from_parts(
        registry: ModelRegistry,
        history: HistoryDb,
        flags: MismatchFlags,
        auto_register_types: bool,
    ) -> Self {
        Self {
            registry,
            history,
            flags,
            auto_register_types,
        }
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn auto_register_types(&self) -> bool {
        self.auto_register_types
    }

    pub fn history(&self) -> &HistoryDb {
        &self.history
    }

    pub fn flags(&self) -> &MismatchFlags {
        &self.flags
    }

    pub fn next_tick(&self) -> Tick {
        self.history.next_tick()
    }

    pub fn epsilon(&self) -> f64 {
        self.registry.epsilon
    }

    pub fn reset_type_model(&mut self, type_id: &TypeId, new_schema: FactorSchema) -> Result<(), EngineError> {
        self.registry.reset_type_model(type_id, new_schema)
    }

    /// Linear term for an ad-hoc factor vector of the given type.
    pub fn predict_linear(&self, type_id: &TypeId, factors: &[f64]) -> Result<f64, EngineError> {
        let entry = self
            .registry
            .get(type_id)
            .ok_or_else(|| EngineError::UnknownType(type_id.clone()))?;
        if factors.len() != entry.schema.len() {
            return Err(EngineError::SchemaMismatch {
                type_id: type_id.clone(),
                expected: entry.schema.len(),
                got: factors.len(),
            });
        }
        Ok(entry.coefficients.dot(factors))
    }

    /// Ranking of the currently open events as of the next tick.
    pub fn current_ranking(&self) -> Result<(RankedList, BTreeMap<InstanceId, DeltaBreakdown>), EngineError> {
        rank_with_breakdowns(
            &self.registry,
            &self.history,
            self.history.next_tick(),
            &self.history.active_events(),
        )
    }

    /// Processes one tick as a single transaction: nothing changes unless
    /// every step succeeds.
    pub fn ingest_tick(&mut self, input: TickInput) -> Result<TickReport, EngineError> {
        let t = input.tick;
        if t != self.history.next_tick() {
            return Err(EngineError::NonConsecutiveTick {
                expected: self.history.next_tick(),
                got: t,
            });
        }
        let mut events = input.events;
        events.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let mut record = TickRecord {
            tick: t,
            events,
            sa_priorities: input.sa_priorities,
            predictions: BTreeMap::new(),
            resolved: input.resolved,
        };
        self.history.check_append(&record)?;

        let mut registry = self.registry.clone();
        for event in &record.events {
            if registry.get(&event.type_id).is_none() && self.auto_register_types {
                registry.register(event.type_id.clone(), FactorSchema::generic(event.factors.len()))?;
            }
            registry.check_event(event)?;
            if !record.sa_priorities.contains_key(&event.instance_id) {
                log::warn!(
                    "tick {t}: no SA priority for {}; excluded from updates and mismatch checks",
                    event.instance_id
                );
            }
        }

        // Valuations under the pre-update models; these are what gets stored.
        let (ranking, _) = rank_with_breakdowns(&registry, &self.history, t, &record.events)?;
        record.predictions = ranking
            .entries
            .iter()
            .map(|e| (e.instance_id.clone(), e.f_value))
            .collect();

        // Recursive updates for unflagged events, in ranking order.
        let mut updated_types: BTreeMap<TypeId, u64> = BTreeMap::new();
        for entry in &ranking.entries {
            if self.flags.is_flagged(&entry.instance_id) {
                continue;
            }
            let Some(&priority) = record.sa_priorities.get(&entry.instance_id) else {
                continue;
            };
            let event = record.event(&entry.instance_id).expect("ranked from record");
            registry.update(event, adapted(priority, entry.delta))?;
            *updated_types.entry(event.type_id.clone()).or_default() += 1;
        }

        // Pairwise mismatch check against the stored valuations.
        let mut flags = self.flags.clone();
        let mut newly_flagged = Vec::new();
        let judged: Vec<(&InstanceId, Priority, f64)> = record
            .events
            .iter()
            .filter_map(|e| {
                let id = &e.instance_id;
                let pri = *record.sa_priorities.get(id)?;
                Some((id, pri, record.predictions[id]))
            })
            .collect();
        for (i, &(v, pri_v, alpha_v)) in judged.iter().enumerate() {
            for &(w, pri_w, alpha_w) in &judged[i + 1..] {
                if flags.is_flagged(v) && flags.is_flagged(w) {
                    continue;
                }
                if phi_values(pri_v, pri_w, alpha_v, alpha_w).is_mismatch() {
                    for id in [v, w] {
                        if flags.set(id) {
                            newly_flagged.push(id.clone());
                        }
                    }
                }
            }
        }
        newly_flagged.sort();

        let resolved = record.resolved.clone();
        self.history.append_tick(record)?;
        self.registry = registry;
        for id in &resolved {
            flags.forget(id);
        }
        self.flags = flags;

        let ranking = match self.current_ranking() {
            Ok((ranking, _)) => ranking,
            Err(e) => {
                log::warn!("tick {t}: post-update ranking unavailable: {e}");
                RankedList::default()
            }
        };
        Ok(TickReport {
            tick: t,
            updated_types,
            newly_flagged,
            ranking,
        })
    }
}
