//! Synthetic SA oracles and event-stream generators.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::TickInput;
use crate::event::{EventInstance, InstanceId, Priority, Tick, TypeId};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid stream spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn default_initial_events() -> usize {
    4
}

/// Parameters of a synthetic stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSpec {
    pub types: usize,
    /// Measured factors per event, not counting the intercept.
    pub factors_per_type: usize,
    pub ticks: u64,
    /// Mean number of new events per tick after the first (Poisson).
    pub arrival_rate: f64,
    /// Probability that an open event is resolved after each tick.
    pub resolution_rate: f64,
    pub seed: u64,
    /// Events open at tick 0.
    #[serde(default = "default_initial_events")]
    pub initial_events: usize,
    /// SA oracle used by `label_stream` when simulating from a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleSpec>,
}

fn default_levels() -> u32 {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    /// Per-type generator coefficients, intercept first. Missing types get
    /// coefficients drawn uniformly from [-2, 2].
    #[serde(default)]
    pub beta_star: BTreeMap<TypeId, Vec<f64>>,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default = "default_levels")]
    pub priority_levels: u32,
}

impl Default for OracleSpec {
    fn default() -> Self {
        Self {
            beta_star: BTreeMap::new(),
            noise_sigma: 0.0,
            priority_levels: default_levels(),
        }
    }
}

impl StreamSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::InvalidSpec(msg));
        if self.types == 0 {
            return bad("types must be at least 1".into());
        }
        if !(self.arrival_rate.is_finite() && self.arrival_rate >= 0.0) {
            return bad(format!("arrival_rate {} must be finite and >= 0", self.arrival_rate));
        }
        if !(0.0..=1.0).contains(&self.resolution_rate) {
            return bad(format!("resolution_rate {} must lie in [0, 1]", self.resolution_rate));
        }
        if let Some(oracle) = &self.oracle {
            if !(oracle.noise_sigma.is_finite() && oracle.noise_sigma >= 0.0) {
                return bad(format!("noise_sigma {} must be finite and >= 0", oracle.noise_sigma));
            }
            if oracle.priority_levels == 0 {
                return bad("priority_levels must be at least 1".into());
            }
            for (type_id, beta) in &oracle.beta_star {
                if beta.len() != self.factors_per_type + 1 {
                    return bad(format!(
                        "beta_star for {type_id} has {} entries, expected {}",
                        beta.len(),
                        self.factors_per_type + 1
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn type_ids(&self) -> Vec<TypeId> {
        (0..self.types).map(|i| TypeId::new(format!("type{i}"))).collect()
    }

    /// Linear oracle for this stream, filling in missing coefficients
    /// from `seed`.
    pub fn linear_oracle(&self, seed: u64) -> LinearOracle {
        let spec = self.oracle.clone().unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut beta_star = BTreeMap::new();
        for type_id in self.type_ids() {
            let beta = spec.beta_star.get(&type_id).cloned().unwrap_or_else(|| {
                (0..=self.factors_per_type)
                    .map(|_| rng.random_range(-2.0..=2.0))
                    .collect()
            });
            beta_star.insert(type_id, beta);
        }
        LinearOracle {
            beta_star,
            noise_sigma: spec.noise_sigma,
            priority_levels: spec.priority_levels,
        }
    }
}

/// Open events and departures for one tick, without SA labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamTick {
    pub tick: Tick,
    pub events: Vec<EventInstance>,
    pub resolved: BTreeSet<InstanceId>,
}

/// Generates a stream whose factor vectors are redrawn i.i.d. standard
/// normal at every tick, with a leading intercept of 1.
pub fn generate_stream(spec: &StreamSpec, seed: u64) -> Result<Vec<StreamTick>, SimError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arrivals = if spec.arrival_rate > 0.0 {
        Some(Poisson::new(spec.arrival_rate).map_err(|e| SimError::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let type_ids = spec.type_ids();

    let mut next_id = 0u64;
    // (instance, type, first_reported)
    let mut open: Vec<(InstanceId, TypeId, Tick)> = Vec::new();
    let mut out = Vec::with_capacity(spec.ticks as usize);
    for t in 0..spec.ticks {
        let new_count = if t == 0 {
            spec.initial_events
        } else {
            arrivals.as_ref().map_or(0, |d| d.sample(&mut rng) as usize)
        };
        for _ in 0..new_count {
            let type_id = type_ids[rng.random_range(0..type_ids.len())].clone();
            open.push((InstanceId::new(format!("ev{next_id:06}")), type_id, t));
            next_id += 1;
        }

        let events: Vec<EventInstance> = open
            .iter()
            .map(|(id, type_id, first)| {
                let mut factors = Vec::with_capacity(spec.factors_per_type + 1);
                factors.push(1.0);
                factors.extend((0..spec.factors_per_type).map(|_| rng.sample::<f64, _>(StandardNormal)));
                EventInstance {
                    instance_id: id.clone(),
                    type_id: type_id.clone(),
                    first_reported: *first,
                    factors,
                }
            })
            .collect();
        let resolved: BTreeSet<InstanceId> = open
            .iter()
            .filter(|_| rng.random_bool(spec.resolution_rate))
            .map(|(id, _, _)| id.clone())
            .collect();
        open.retain(|(id, _, _)| !resolved.contains(id));
        out.push(StreamTick {
            tick: t,
            events,
            resolved,
        });
    }
    Ok(out)
}

/// Source of SA priorities for a tick's working set.
pub trait PriorityOracle {
    fn priorities(&self, events: &[EventInstance], rng: &mut dyn rand::RngCore) -> BTreeMap<InstanceId, Priority>;
}

/// Scores events by `x·β*` plus Gaussian noise and assigns priorities
/// `L..1` by rank bucket within the tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearOracle {
    pub beta_star: BTreeMap<TypeId, Vec<f64>>,
    pub noise_sigma: f64,
    pub priority_levels: u32,
}

impl LinearOracle {
    /// Noise-free score. Types without coefficients score 0.
    pub fn score(&self, event: &EventInstance) -> f64 {
        self.beta_star
            .get(&event.type_id)
            .map_or(0.0, |beta| beta.iter().zip(&event.factors).map(|(b, x)| b * x).sum())
    }
}

/// Maps scores to priorities by rank: the highest score gets `levels`, and
/// the n events are spread over the levels in equal-width rank buckets.
pub fn bucket_priorities(scores: &[(InstanceId, f64)], levels: u32) -> BTreeMap<InstanceId, Priority> {
    let mut order: Vec<&(InstanceId, f64)> = scores.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let n = order.len() as u64;
    let levels = u64::from(levels.max(1));
    order
        .into_iter()
        .enumerate()
        .map(|(rank, (id, _))| {
            let below_top = n - 1 - rank as u64;
            let value = levels - below_top * levels / n;
            let priority = Priority::new(value as u32).expect("bucket values start at 1");
            (id.clone(), priority)
        })
        .collect()
}

impl PriorityOracle for LinearOracle {
    fn priorities(&self, events: &[EventInstance], rng: &mut dyn rand::RngCore) -> BTreeMap<InstanceId, Priority> {
        let noise = (self.noise_sigma > 0.0)
            .then(|| Normal::new(0.0, self.noise_sigma).expect("sigma validated as finite"));
        let scores: Vec<(InstanceId, f64)> = events
            .iter()
            .map(|e| {
                let jitter = noise.as_ref().map_or(0.0, |n| n.sample(rng));
                (e.instance_id.clone(), self.score(e) + jitter)
            })
            .collect();
        bucket_priorities(&scores, self.priority_levels)
    }
}

/// Swaps the priorities of two instances whenever both are present, e.g.
/// to encode route-sharing knowledge the factors cannot express.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairOverride {
    pub first: InstanceId,
    pub second: InstanceId,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaOracle {
    pub base: LinearOracle,
    pub overrides: Vec<PairOverride>,
}

impl PriorityOracle for MetaOracle {
    fn priorities(&self, events: &[EventInstance], rng: &mut dyn rand::RngCore) -> BTreeMap<InstanceId, Priority> {
        let mut out = self.base.priorities(events, rng);
        for rule in &self.overrides {
            if let (Some(&a), Some(&b)) = (out.get(&rule.first), out.get(&rule.second)) {
                out.insert(rule.first.clone(), b);
                out.insert(rule.second.clone(), a);
            }
        }
        out
    }
}

/// Attaches oracle priorities to every tick of a stream.
pub fn label_stream(stream: &[StreamTick], oracle: &dyn PriorityOracle, seed: u64) -> Vec<TickInput> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    stream
        .iter()
        .map(|tick| TickInput {
            tick: tick.tick,
            sa_priorities: oracle.priorities(&tick.events, &mut rng),
            events: tick.events.clone(),
            resolved: tick.resolved.clone(),
        })
        .collect()
}

/// Generates a stream and labels it with its own linear oracle.
pub fn simulate(spec: &StreamSpec, seed: u64) -> Result<Vec<TickInput>, SimError> {
    let stream = generate_stream(spec, seed)?;
    let oracle = spec.linear_oracle(seed);
    Ok(label_stream(&stream, &oracle, seed.wrapping_add(1)))
}

pub fn write_stream<W: Write>(ticks: &[TickInput], mut out: W) -> Result<(), SimError> {
    for tick in ticks {
        let line = serde_json::to_string(tick).expect("tick inputs always serialize");
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn read_stream<R: BufRead>(input: R) -> Result<Vec<TickInput>, SimError> {
    let mut out = Vec::new();
    for (index, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let tick = serde_json::from_str(&line).map_err(|e| SimError::Parse {
            line: index + 1,
            message: e.to_string(),
        })?;
        out.push(tick);
    }
    Ok(out)
}
