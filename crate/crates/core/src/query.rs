//! Forecast queries and horizon selection.
//!
//! Every event (s, r, o, t) is asked in both directions: an object query
//! (e = s, relation r, target o) and a subject query (e = o, relation
//! r + R, target s). Both anchor their observable history at
//! `t_a = t - delta_t`, clamped to the dataset's earliest timestamp, so
//! the model only ever reads events at or before `t_a`.

use std::fmt;
use std::str::FromStr;

use crate::data::{time_range, Dataset, Quadruplet};
use crate::error::{Error, Result};

/// Which splits count as observable ground truth, and hence how far the
/// forecast horizon reaches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DtMode {
    /// Only the training split is observable; the horizon spans
    /// validation plus test.
    TrainOnly,
    /// Training and validation splits are observable; the horizon spans
    /// only the test split.
    TrainValid,
}

impl DtMode {
    pub fn name(self) -> &'static str {
        match self {
            DtMode::TrainOnly => "train-only",
            DtMode::TrainValid => "train-valid",
        }
    }
}

impl fmt::Display for DtMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DtMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<DtMode> {
        match s {
            "train-only" => Ok(DtMode::TrainOnly),
            "train-valid" => Ok(DtMode::TrainValid),
            other => Err(Error::Config(format!(
                "unknown dt mode '{other}' (expected train-only or train-valid)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Query {
    /// Known entity e.
    pub entity: usize,
    /// Relation id, already reverse-mapped for subject queries.
    pub relation: usize,
    /// Ground-truth answer entity.
    pub target: usize,
    /// Anchor time t_a; all observable history satisfies t <= t_a.
    pub anchor: i64,
    pub event_time: i64,
}

/// Horizon `delta_t` between the last observable timestamp and the last
/// forecast timestamp.
pub fn horizon(dataset: &Dataset, mode: DtMode) -> Result<i64> {
    let [train, valid, test] = dataset.splits();
    let last = |events: &[Quadruplet]| time_range(events).map(|(_, hi)| hi);
    match mode {
        DtMode::TrainOnly => {
            let train_end = last(train)
                .ok_or_else(|| Error::Dataset("horizon requires a training split".into()))?;
            let held_end = last(test)
                .or_else(|| last(valid))
                .ok_or_else(|| Error::Dataset("horizon requires a held-out split".into()))?;
            Ok(held_end - train_end)
        }
        DtMode::TrainValid => {
            let valid_end = last(valid).ok_or_else(|| {
                Error::Dataset("train-valid mode requires a validation split".into())
            })?;
            let test_end = last(test)
                .ok_or_else(|| Error::Dataset("train-valid mode requires a test split".into()))?;
            Ok(test_end - valid_end)
        }
    }
}

/// Events the model may read under `mode`, sorted by time.
pub fn observable_events(dataset: &Dataset, mode: DtMode) -> Vec<Quadruplet> {
    let [train, valid, _] = dataset.splits();
    let mut events = train.to_vec();
    if mode == DtMode::TrainValid {
        events.extend_from_slice(valid);
        events.sort();
    }
    events
}

/// Both-direction queries for `events` with anchors `t - delta_t`,
/// clamped at `min_time`.
pub fn make_queries(
    events: &[Quadruplet],
    num_base_relations: usize,
    delta_t: i64,
    min_time: i64,
) -> Result<Vec<Query>> {
    if delta_t < 1 {
        return Err(Error::contract("query horizon must be at least 1"));
    }
    queries_with(events, num_base_relations, |t| (t - delta_t).max(min_time))
}

/// Both-direction queries that all anchor at the fixed time `anchor`,
/// for evaluation that ignores per-event timestamps.
pub fn make_queries_at(
    events: &[Quadruplet],
    num_base_relations: usize,
    anchor: i64,
) -> Result<Vec<Query>> {
    queries_with(events, num_base_relations, |_| anchor)
}

fn queries_with(
    events: &[Quadruplet],
    num_base_relations: usize,
    anchor_of: impl Fn(i64) -> i64,
) -> Result<Vec<Query>> {
    if events.is_empty() {
        return Err(Error::contract("cannot build queries from an empty event list"));
    }
    let mut queries = Vec::with_capacity(events.len() * 2);
    for e in events {
        if e.r >= num_base_relations {
            return Err(Error::contract(
                "queries are built from base events, not reverse-augmented ones",
            ));
        }
        let anchor = anchor_of(e.t);
        queries.push(Query {
            entity: e.s,
            relation: e.r,
            target: e.o,
            anchor,
            event_time: e.t,
        });
        queries.push(Query {
            entity: e.o,
            relation: e.r + num_base_relations,
            target: e.s,
            anchor,
            event_time: e.t,
        });
    }
    Ok(queries)
}
