//! Append-only tick history and the shared-history queries over it.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use thiserror::Error;

use crate::event::{EventError, EventInstance, InstanceId, Tick, TickRecord};

#[derive(Debug, Error)]
pub enum HistoryError {
    #[error("expected tick {expected}, got {got}")]
    NonConsecutiveTick { expected: Tick, got: Tick },
    #[error("instance {0} appears twice in one tick")]
    DuplicateInstanceInTick(InstanceId),
    #[error("tick {tick}: {field} names {id}, which is not in the tick's event set")]
    UnknownKey {
        tick: Tick,
        field: &'static str,
        id: InstanceId,
    },
    #[error("instance {id} is unresolved but missing from tick {tick}")]
    MissingPersistentInstance { id: InstanceId, tick: Tick },
    #[error("instance {id} reappears at tick {tick} after leaving the working set")]
    Reappeared { id: InstanceId, tick: Tick },
    #[error("instance {id}: first_reported {got} does not match {expected}")]
    FirstReportedMismatch {
        id: InstanceId,
        expected: Tick,
        got: Tick,
    },
    #[error("instance {id} changed violation type at tick {tick}")]
    TypeChanged { id: InstanceId, tick: Tick },
    #[error("precondition violated: {0}")]
    PreconditionViolated(String),
    #[error(transparent)]
    Event(#[from] EventError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered store of tick records. `ticks[i].tick == i` always holds.
#[derive(Debug, Clone, Default)]
pub struct HistoryDb {
    ticks: Vec<TickRecord>,
    /// Ticks at which each instance was present, ascending.
    presence: BTreeMap<InstanceId, Vec<Tick>>,
}

impl PartialEq for HistoryDb {
    fn eq(&self, other: &Self) -> bool {
        self.ticks == other.ticks
    }
}

impl HistoryDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ticks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ticks.is_empty()
    }

    /// Index of the last appended tick, if any.
    pub fn current_tick(&self) -> Option<Tick> {
        self.ticks.last().map(|r| r.tick)
    }

    /// Tick index the next record must carry.
    pub fn next_tick(&self) -> Tick {
        self.ticks.len() as Tick
    }

    pub fn ticks(&self) -> &[TickRecord] {
        &self.ticks
    }

    pub fn get(&self, tick: Tick) -> Option<&TickRecord> {
        self.ticks.get(usize::try_from(tick).ok()?)
    }

    /// Events still open after the last tick, i.e. expected in the next one.
    pub fn active_events(&self) -> Vec<EventInstance> {
        match self.ticks.last() {
            Some(last) => last
                .events
                .iter()
                .filter(|e| !last.resolved.contains(&e.instance_id))
                .cloned()
                .collect(),
            None => Vec::new(),
        }
    }

    /// Checks that `record` may be appended without modifying anything.
    pub fn check_append(&self, record: &TickRecord) -> Result<(), HistoryError> {
        let t = record.tick;
        if t != self.next_tick() {
            return Err(HistoryError::NonConsecutiveTick {
                expected: self.next_tick(),
                got: t,
            });
        }
        let mut ids = BTreeSet::new();
        for event in &record.events {
            event.validate()?;
            if !ids.insert(&event.instance_id) {
                return Err(HistoryError::DuplicateInstanceInTick(event.instance_id.clone()));
            }
        }
        let keyed = [
            ("sa_priorities", record.sa_priorities.keys().collect::<Vec<_>>()),
            ("predictions", record.predictions.keys().collect()),
            ("resolved", record.resolved.iter().collect()),
        ];
        for (field, keys) in keyed {
            if let Some(id) = keys.into_iter().find(|id| !ids.contains(id)) {
                return Err(HistoryError::UnknownKey {
                    tick: t,
                    field,
                    id: id.clone(),
                });
            }
        }

        let previous = t.checked_sub(1).and_then(|p| self.get(p));
        for event in &record.events {
            let id = &event.instance_id;
            match self.presence.get(id) {
                Some(seen) => {
                    let prev = previous.expect("presence implies an earlier tick");
                    let last = *seen.last().expect("presence lists are nonempty");
                    if last + 1 != t || prev.resolved.contains(id) {
                        return Err(HistoryError::Reappeared {
                            id: id.clone(),
                            tick: t,
                        });
                    }
                    if event.first_reported != seen[0] {
                        return Err(HistoryError::FirstReportedMismatch {
                            id: id.clone(),
                            expected: seen[0],
                            got: event.first_reported,
                        });
                    }
                    if prev.event(id).map(|e| &e.type_id) != Some(&event.type_id) {
                        return Err(HistoryError::TypeChanged {
                            id: id.clone(),
                            tick: t,
                        });
                    }
                }
                None if event.first_reported != t => {
                    return Err(HistoryError::FirstReportedMismatch {
                        id: id.clone(),
                        expected: t,
                        got: event.first_reported,
                    });
                }
                None => {}
            }
        }
        if let Some(prev) = previous {
            for event in &prev.events {
                let id = &event.instance_id;
                if !prev.resolved.contains(id) && !ids.contains(id) {
                    return Err(HistoryError::MissingPersistentInstance {
                        id: id.clone(),
                        tick: t,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn append_tick(&mut self, record: TickRecord) -> Result<(), HistoryError> {
        self.check_append(&record)?;
        for event in &record.events {
            self.presence
                .entry(event.instance_id.clone())
                .or_default()
                .push(record.tick);
        }
        self.ticks.push(record);
        Ok(())
    }

    /// Ticks `u < t` at which `v` was present, ascending.
    pub fn shared_history_ticks(&self, t: Tick, v: &InstanceId) -> Vec<Tick> {
        self.presence
            .get(v)
            .map(|ticks| ticks.iter().copied().take_while(|u| *u < t).collect())
            .unwrap_or_default()
    }

    /// Instances present at both `u` and `t` other than `v`, with the
    /// working set at `t` read from the database.
    pub fn shared_events(
        &self,
        t: Tick,
        u: Tick,
        v: &InstanceId,
    ) -> Result<BTreeSet<InstanceId>, HistoryError> {
        let current = self.get(t).ok_or_else(|| {
            HistoryError::PreconditionViolated(format!("tick {t} is not in the history"))
        })?;
        self.shared_events_with(&current.instance_ids(), t, u, v)
    }

    /// Same as [`Self::shared_events`] with the working set at `t` supplied
    /// by the caller, for a tick that has not been appended yet.
    pub fn shared_events_with(
        &self,
        chi_t: &BTreeSet<InstanceId>,
        t: Tick,
        u: Tick,
        v: &InstanceId,
    ) -> Result<BTreeSet<InstanceId>, HistoryError> {
        if u >= t {
            return Err(HistoryError::PreconditionViolated(format!(
                "past tick {u} is not before {t}"
            )));
        }
        let past = self.get(u).ok_or_else(|| {
            HistoryError::PreconditionViolated(format!("tick {u} is not in the history"))
        })?;
        if !past.contains(v) {
            return Err(HistoryError::PreconditionViolated(format!(
                "instance {v} is not present at tick {u}"
            )));
        }
        Ok(past
            .events
            .iter()
            .map(|e| &e.instance_id)
            .filter(|w| *w != v && chi_t.contains(*w))
            .cloned()
            .collect())
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<(), HistoryError> {
        for record in &self.ticks {
            writeln!(out, "{}", record_to_line(record))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self, HistoryError> {
        let mut db = Self::new();
        for (index, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let record: TickRecord =
                serde_json::from_str(&line).map_err(|e| HistoryError::Parse {
                    line: index + 1,
                    message: e.to_string(),
                })?;
            db.append_tick(record)?;
        }
        Ok(db)
    }
}

/// One history line. Floats are rendered in shortest round-trip form.
pub fn record_to_line(record: &TickRecord) -> String {
    serde_json::to_string(record).expect("tick records always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Priority;

    fn ev(id: &str, first: Tick) -> EventInstance {
        EventInstance {
            instance_id: id.into(),
            type_id: "t".into(),
            first_reported: first,
            factors: vec![1.0, 0.5],
        }
    }

    fn record(tick: Tick, events: Vec<EventInstance>, resolved: &[&str]) -> TickRecord {
        TickRecord {
            tick,
            sa_priorities: events
                .iter()
                .map(|e| (e.instance_id.clone(), Priority::new(1).unwrap()))
                .collect(),
            predictions: events.iter().map(|e| (e.instance_id.clone(), 0.0)).collect(),
            events,
            resolved: resolved.iter().map(|s| InstanceId::from(*s)).collect(),
        }
    }

    #[test]
    fn append_first_tick() {
        let mut db = HistoryDb::new();
        assert_eq!(db.current_tick(), None);
        db.append_tick(record(0, vec![ev("a", 0)], &[])).unwrap();
        assert_eq!(db.len(), 1);
        assert_eq!(db.current_tick(), Some(0));
    }

    #[test]
    fn rejects_skipped_tick() {
        let mut db = HistoryDb::new();
        for t in 0..5 {
            db.append_tick(record(t, vec![], &[])).unwrap();
        }
        let err = db.append_tick(record(6, vec![], &[])).unwrap_err();
        assert!(matches!(
            err,
            HistoryError::NonConsecutiveTick {
                expected: 5,
                got: 6
            }
        ));
    }

    #[test]
    fn rejects_duplicates_and_gaps() {
        let mut db = HistoryDb::new();
        let err = db
            .append_tick(record(0, vec![ev("a", 0), ev("a", 0)], &[]))
            .unwrap_err();
        assert!(matches!(err, HistoryError::DuplicateInstanceInTick(_)));

        db.append_tick(record(0, vec![ev("a", 0), ev("b", 0)], &["b"]))
            .unwrap();
        // a is unresolved and must persist.
        let err = db.append_tick(record(1, vec![], &[])).unwrap_err();
        assert!(matches!(err, HistoryError::MissingPersistentInstance { .. }));
        // b was resolved and may not come back.
        let err = db
            .append_tick(record(1, vec![ev("a", 0), ev("b", 0)], &[]))
            .unwrap_err();
        assert!(matches!(err, HistoryError::Reappeared { .. }));
        let err = db
            .append_tick(record(1, vec![ev("a", 1)], &[]))
            .unwrap_err();
        assert!(matches!(err, HistoryError::FirstReportedMismatch { .. }));
        let err = db
            .append_tick(record(1, vec![ev("a", 0), ev("c", 0)], &[]))
            .unwrap_err();
        assert!(matches!(err, HistoryError::FirstReportedMismatch { .. }));
        db.append_tick(record(1, vec![ev("a", 0), ev("c", 1)], &[]))
            .unwrap();
        assert_eq!(db.len(), 2);
    }

    #[test]
    fn rejects_foreign_keys() {
        let mut db = HistoryDb::new();
        let mut r = record(0, vec![ev("a", 0)], &[]);
        r.predictions.insert("zz".into(), 1.0);
        assert!(matches!(
            db.append_tick(r),
            Err(HistoryError::UnknownKey {
                field: "predictions",
                ..
            })
        ));
    }

    #[test]
    fn shared_history_is_strictly_before_t() {
        let mut db = HistoryDb::new();
        for t in 0..3 {
            db.append_tick(record(t, vec![ev("v", 0)], &[])).unwrap();
        }
        let v = InstanceId::from("v");
        assert_eq!(db.shared_history_ticks(2, &v), vec![0, 1]);
        assert_eq!(db.shared_history_ticks(0, &v), Vec::<Tick>::new());
        assert!(db.shared_history_ticks(2, &"nope".into()).is_empty());
    }

    #[test]
    fn shared_events_examples() {
        let mut db = HistoryDb::new();
        db.append_tick(record(0, vec![ev("v", 0), ev("w", 0)], &["w"]))
            .unwrap();
        db.append_tick(record(1, vec![ev("v", 0), ev("z", 1)], &[]))
            .unwrap();
        let v = InstanceId::from("v");
        assert!(db.shared_events(1, 0, &v).unwrap().is_empty());

        let chi: BTreeSet<InstanceId> = ["v".into(), "w".into()].into();
        let shared = db.shared_events_with(&chi, 1, 0, &v).unwrap();
        assert_eq!(shared, ["w".into()].into());

        let err = db.shared_events(1, 0, &"z".into()).unwrap_err();
        assert!(matches!(err, HistoryError::PreconditionViolated(_)));
    }

    #[test]
    fn jsonl_round_trip_keeps_floats() {
        let mut db = HistoryDb::new();
        let mut r = record(0, vec![ev("a", 0)], &[]);
        r.events[0].factors = vec![1.0, 0.1 + 0.2, 1e-300, -7.123456789012345e17];
        r.predictions.insert("a".into(), std::f64::consts::PI / 3.0);
        db.append_tick(r).unwrap();
        let mut buf = Vec::new();
        db.write_jsonl(&mut buf).unwrap();
        let back = HistoryDb::read_jsonl(buf.as_slice()).unwrap();
        assert_eq!(back, db);
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(buf, again);
        let line = String::from_utf8(buf).unwrap();
        for field in ["\"tick\"", "\"events\"", "\"sa_priorities\"", "\"predictions\"", "\"resolved\""] {
            assert!(line.contains(field), "missing {field}");
        }
    }
}
