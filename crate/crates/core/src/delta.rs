//! Directionality mismatch between SA priorities and stored valuations, and
//! the history-based correction term derived from it.
//!
//! For an instance `v` queried at tick `t`, every earlier tick `u` where `v`
//! was open contributes the set of co-present events (still open at `t`)
//! whose order relative to `v` the engine got wrong, and the sum of the SA's
//! priority differences over that set. The correction is the ceiling of the
//! averaged sum, scaled by the fraction of the working set involved.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::{InstanceId, Priority, Tick};
use crate::history::{HistoryDb, HistoryError};

#[derive(Debug, Error)]
pub enum DeltaError {
    #[error("no stored {what} for instance {id} at tick {tick}")]
    MissingRecord {
        what: &'static str,
        id: InstanceId,
        tick: Tick,
    },
    #[error("tick {t} is beyond the next tick {next}")]
    TickOutOfRange { t: Tick, next: Tick },
    #[error("instance {0} is not in the working set")]
    NotInWorkingSet(InstanceId),
    #[error(transparent)]
    History(#[from] HistoryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum MismatchVerdict {
    Agreement,
    Mismatch,
}

impl MismatchVerdict {
    pub fn value(self) -> u8 {
        match self {
            Self::Agreement => 0,
            Self::Mismatch => 1,
        }
    }

    pub fn is_mismatch(self) -> bool {
        self == Self::Mismatch
    }
}

impl From<MismatchVerdict> for u8 {
    fn from(v: MismatchVerdict) -> Self {
        v.value()
    }
}

impl TryFrom<u8> for MismatchVerdict {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        match value {
            0 => Ok(Self::Agreement),
            1 => Ok(Self::Mismatch),
            other => Err(format!("mismatch verdict must be 0 or 1, got {other}")),
        }
    }
}

/// Agreement only when both orderings point the same way strictly; equal
/// SA priorities or equal valuations count as a mismatch.
pub fn phi_values(pri_v: Priority, pri_w: Priority, alpha_v: f64, alpha_w: f64) -> MismatchVerdict {
    let sa = i64::from(pri_v.value()) - i64::from(pri_w.value());
    if (sa as f64) * (alpha_v - alpha_w) > 0.0 {
        MismatchVerdict::Agreement
    } else {
        MismatchVerdict::Mismatch
    }
}

fn stored(db: &HistoryDb, u: Tick, id: &InstanceId) -> Result<(Priority, f64), DeltaError> {
    let record = db.get(u).ok_or(DeltaError::TickOutOfRange {
        t: u,
        next: db.next_tick(),
    })?;
    let missing = |what| DeltaError::MissingRecord {
        what,
        id: id.clone(),
        tick: u,
    };
    let pri = *record.sa_priorities.get(id).ok_or_else(|| missing("priority"))?;
    let alpha = *record.predictions.get(id).ok_or_else(|| missing("prediction"))?;
    Ok((pri, alpha))
}

/// Mismatch verdict for the pair `(v, w)` at tick `u`, from the stored
/// priorities and valuations.
pub fn phi(db: &HistoryDb, u: Tick, v: &InstanceId, w: &InstanceId) -> Result<MismatchVerdict, DeltaError> {
    let (pri_v, alpha_v) = stored(db, u, v)?;
    let (pri_w, alpha_w) = stored(db, u, w)?;
    Ok(phi_values(pri_v, pri_w, alpha_v, alpha_w))
}

/// Relative priority mass of `v` at past tick `u` against the events of
/// `chi_t`. Zero when `v` was not present at `u`.
pub fn lambda_term(
    db: &HistoryDb,
    chi_t: &BTreeSet<InstanceId>,
    t: Tick,
    u: Tick,
    v: &InstanceId,
) -> Result<f64, DeltaError> {
    if u >= t || !db.get(u).is_some_and(|r| r.contains(v)) {
        return Ok(0.0);
    }
    let contribution = mismatch_set(db, chi_t, t, u, v)?;
    Ok(contribution.map_or(0, |(_, lambda)| lambda) as f64)
}

/// Mismatched co-present set and its priority mass for one past tick.
/// `None` when `v` itself has no SA priority at `u`.
fn mismatch_set(
    db: &HistoryDb,
    chi_t: &BTreeSet<InstanceId>,
    t: Tick,
    u: Tick,
    v: &InstanceId,
) -> Result<Option<(BTreeSet<InstanceId>, i64)>, DeltaError> {
    let record = db.get(u).expect("caller checked the tick");
    let Some(&pri_v) = record.sa_priorities.get(v) else {
        return Ok(None);
    };
    let (_, alpha_v) = stored(db, u, v)?;
    let mut theta = BTreeSet::new();
    let mut lambda = 0i64;
    for w in db.shared_events_with(chi_t, t, u, v)? {
        // Events without an SA priority at u take no part in the comparison.
        let Some(&pri_w) = record.sa_priorities.get(&w) else {
            continue;
        };
        let (_, alpha_w) = stored(db, u, &w)?;
        if phi_values(pri_v, pri_w, alpha_v, alpha_w).is_mismatch() {
            lambda += i64::from(pri_v.value()) - i64::from(pri_w.value());
            theta.insert(w);
        }
    }
    Ok(Some((theta, lambda)))
}

/// All intermediate quantities behind one correction value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaBreakdown {
    pub lambda_by_tick: BTreeMap<Tick, f64>,
    pub theta_by_tick: BTreeMap<Tick, BTreeSet<InstanceId>>,
    pub meta_count: u64,
    pub omega: BTreeSet<InstanceId>,
    pub m_value: f64,
    pub n_value: f64,
    pub delta: u64,
}

impl DeltaBreakdown {
    pub fn zero() -> Self {
        Self {
            lambda_by_tick: BTreeMap::new(),
            theta_by_tick: BTreeMap::new(),
            meta_count: 0,
            omega: BTreeSet::new(),
            m_value: 0.0,
            n_value: 0.0,
            delta: 0,
        }
    }

    pub fn lambda_sum(&self) -> f64 {
        self.lambda_by_tick.values().sum()
    }
}

/// Correction for `v` at tick `t`, given the working set `chi_t`. Only
/// history strictly before `t` is read, so `t` may be the tick about to be
/// ingested.
pub fn delta(
    db: &HistoryDb,
    t: Tick,
    chi_t: &BTreeSet<InstanceId>,
    v: &InstanceId,
) -> Result<DeltaBreakdown, DeltaError> {
    if t > db.next_tick() {
        return Err(DeltaError::TickOutOfRange {
            t,
            next: db.next_tick(),
        });
    }
    if !chi_t.contains(v) {
        return Err(DeltaError::NotInWorkingSet(v.clone()));
    }

    let mut out = DeltaBreakdown::zero();
    let mut lambda_sum = 0i64;
    for u in db.shared_history_ticks(t, v) {
        let Some((theta, lambda)) = mismatch_set(db, chi_t, t, u, v)? else {
            continue;
        };
        lambda_sum += lambda;
        if !theta.is_empty() {
            out.meta_count += 1;
            out.omega.extend(theta.iter().cloned());
        }
        out.lambda_by_tick.insert(u, lambda as f64);
        out.theta_by_tick.insert(u, theta);
    }

    let omega_plus_one = out.omega.len() as u64 + 1;
    let chi_len = chi_t.len() as u64;
    out.n_value = omega_plus_one as f64 / chi_len as f64;
    if out.meta_count > 0 {
        out.m_value = lambda_sum as f64 / out.meta_count as f64;
    }
    if t > 0 && lambda_sum > 0 {
        if out.meta_count == 0 {
            log::warn!("instance {v} at tick {t}: positive priority mass without mismatches");
            return Ok(out);
        }
        // ceil((sum / meta) * ((|Ω| + 1) / |χ_t|)) in exact integer arithmetic.
        let num = lambda_sum as u64 * omega_plus_one;
        let den = out.meta_count * chi_len;
        out.delta = num.div_ceil(den);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{EventInstance, TickRecord};

    fn p(v: u32) -> Priority {
        Priority::new(v).unwrap()
    }

    #[test]
    fn phi_branches() {
        assert_eq!(phi_values(p(5), p(3), 4.2, 1.0), MismatchVerdict::Agreement);
        assert_eq!(phi_values(p(5), p(3), 1.0, 4.2), MismatchVerdict::Mismatch);
        assert_eq!(phi_values(p(3), p(3), 4.0, 1.0), MismatchVerdict::Mismatch);
        assert_eq!(phi_values(p(5), p(3), 2.0, 2.0), MismatchVerdict::Mismatch);
    }

    fn worked_example() -> HistoryDb {
        let ev = |id: &str| EventInstance {
            instance_id: id.into(),
            type_id: "t".into(),
            first_reported: 0,
            factors: vec![1.0],
        };
        let mut db = HistoryDb::new();
        db.append_tick(TickRecord {
            tick: 0,
            events: vec![ev("v"), ev("w")],
            sa_priorities: [("v".into(), p(1)), ("w".into(), p(5))].into(),
            predictions: [("v".into(), 4.0), ("w".into(), 2.0)].into(),
            resolved: BTreeSet::new(),
        })
        .unwrap();
        db
    }

    #[test]
    fn worked_two_event_history() {
        let db = worked_example();
        let chi: BTreeSet<InstanceId> = ["v".into(), "w".into()].into();
        let v = InstanceId::from("v");
        let w = InstanceId::from("w");
        assert_eq!(phi(&db, 0, &v, &w).unwrap(), MismatchVerdict::Mismatch);

        assert_eq!(lambda_term(&db, &chi, 1, 0, &v).unwrap(), -4.0);
        let dv = delta(&db, 1, &chi, &v).unwrap();
        assert_eq!(dv.delta, 0);

        let dw = delta(&db, 1, &chi, &w).unwrap();
        assert_eq!(dw.lambda_sum(), 4.0);
        assert_eq!(dw.theta_by_tick[&0], [v.clone()].into());
        assert_eq!(dw.meta_count, 1);
        assert_eq!(dw.m_value, 4.0);
        assert_eq!(dw.omega, [v].into());
        assert_eq!(dw.n_value, 1.0);
        assert_eq!(dw.delta, 4);
    }

    #[test]
    fn tick_zero_is_always_zero() {
        let db = HistoryDb::new();
        let chi: BTreeSet<InstanceId> = ["a".into(), "b".into()].into();
        assert_eq!(delta(&db, 0, &chi, &"a".into()).unwrap().delta, 0);
    }

    #[test]
    fn lambda_guard_and_mask() {
        let db = worked_example();
        let chi: BTreeSet<InstanceId> = ["v".into(), "w".into(), "x".into()].into();
        assert_eq!(lambda_term(&db, &chi, 1, 0, &"x".into()).unwrap(), 0.0);
        // Agreement masks the term.
        let mut rec = db.ticks()[0].clone();
        rec.predictions.insert("v".into(), 1.0);
        let mut agree = HistoryDb::new();
        agree.append_tick(rec).unwrap();
        assert_eq!(lambda_term(&agree, &chi, 1, 0, &"v".into()).unwrap(), 0.0);
        assert_eq!(lambda_term(&agree, &chi, 1, 0, &"w".into()).unwrap(), 0.0);
    }

    #[test]
    fn errors() {
        let db = worked_example();
        let chi: BTreeSet<InstanceId> = ["v".into()].into();
        assert!(matches!(
            delta(&db, 3, &chi, &"v".into()),
            Err(DeltaError::TickOutOfRange { .. })
        ));
        assert!(matches!(
            delta(&db, 1, &chi, &"w".into()),
            Err(DeltaError::NotInWorkingSet(_))
        ));
        assert!(matches!(
            phi(&db, 0, &"v".into(), &"q".into()),
            Err(DeltaError::MissingRecord { .. })
        ));
    }

    #[test]
    fn verdict_serializes_as_digit() {
        assert_eq!(serde_json::to_string(&MismatchVerdict::Mismatch).unwrap(), "1");
        assert!(serde_json::from_str::<MismatchVerdict>("2").is_err());
    }
}
