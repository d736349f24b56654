//! Domain types for reported events, violation types and SA priorities.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Tick = u64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl InstanceId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for InstanceId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeId(pub String);

impl TypeId {
    pub fn new(id: impl Into<String>) -> Self {
        Self(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for TypeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for TypeId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

/// SA-assigned priority. Higher is more urgent; always at least 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Priority(u32);

impl Priority {
    pub fn new(value: u32) -> Result<Self, EventError> {
        if value >= 1 {
            Ok(Self(value))
        } else {
            Err(EventError::InvalidPriority(value))
        }
    }

    pub fn value(self) -> u32 {
        self.0
    }
}

impl TryFrom<u32> for Priority {
    type Error = EventError;

    fn try_from(value: u32) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<Priority> for u32 {
    fn from(p: Priority) -> Self {
        p.0
    }
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EventError {
    #[error("priority must be at least 1, got {0}")]
    InvalidPriority(u32),
    #[error("event {0}: factor vector is empty")]
    EmptyFactors(InstanceId),
    #[error("event {0}: non-finite factor value")]
    NonFiniteFactor(InstanceId),
    #[error("event {0}: intercept factor must be 1.0, got {1}")]
    BadIntercept(InstanceId, f64),
    #[error("factor schema is empty")]
    EmptySchema,
    #[error("factor schema repeats identifier {0:?}")]
    DuplicateFactor(String),
}

/// Factor layout of a violation type. Position 0 is the intercept.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct FactorSchema(Vec<String>);

impl TryFrom<Vec<String>> for FactorSchema {
    type Error = EventError;

    fn try_from(names: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(names)
    }
}

impl From<FactorSchema> for Vec<String> {
    fn from(schema: FactorSchema) -> Self {
        schema.0
    }
}

impl FactorSchema {
    pub fn new(names: Vec<String>) -> Result<Self, EventError> {
        if names.is_empty() {
            return Err(EventError::EmptySchema);
        }
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(EventError::DuplicateFactor(name.clone()));
            }
        }
        Ok(Self(names))
    }

    /// `intercept, x1, ..., x{n-1}`.
    pub fn generic(len: usize) -> Self {
        let names = (0..len.max(1))
            .map(|i| {
                if i == 0 {
                    "intercept".to_owned()
                } else {
                    format!("x{i}")
                }
            })
            .collect();
        Self(names)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ViolationType {
    pub type_id: TypeId,
    pub factor_schema: FactorSchema,
}

/// A reported, unresolved event as observed at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventInstance {
    pub instance_id: InstanceId,
    pub type_id: TypeId,
    pub first_reported: Tick,
    pub factors: Vec<f64>,
}

impl EventInstance {
    pub fn validate(&self) -> Result<(), EventError> {
        let Some(&intercept) = self.factors.first() else {
            return Err(EventError::EmptyFactors(self.instance_id.clone()));
        };
        if self.factors.iter().any(|v| !v.is_finite()) {
            return Err(EventError::NonFiniteFactor(self.instance_id.clone()));
        }
        if intercept != 1.0 {
            return Err(EventError::BadIntercept(self.instance_id.clone(), intercept));
        }
        Ok(())
    }
}

/// Everything recorded for one tick: the working set, the SA's priorities,
/// the engine's stored valuations, and the instances that left afterwards.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: Tick,
    pub events: Vec<EventInstance>,
    pub sa_priorities: BTreeMap<InstanceId, Priority>,
    pub predictions: BTreeMap<InstanceId, f64>,
    pub resolved: BTreeSet<InstanceId>,
}

impl TickRecord {
    pub fn event(&self, id: &InstanceId) -> Option<&EventInstance> {
        self.events.iter().find(|e| &e.instance_id == id)
    }

    pub fn contains(&self, id: &InstanceId) -> bool {
        self.event(id).is_some()
    }

    pub fn instance_ids(&self) -> BTreeSet<InstanceId> {
        self.events.iter().map(|e| e.instance_id.clone()).collect()
    }
}
