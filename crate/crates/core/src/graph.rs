//! Snapshot graph: history arranged into fixed time windows.
//!
//! For an anchor time `t_a` and window size `T`, snapshot `k` covers the
//! half-open range `(t_a - (k+1)T, t_a - kT]`, with `k = 0` nearest the
//! anchor. Every entity gets one node copy per snapshot. Events land in
//! the snapshot containing their timestamp and connect copies within that
//! snapshot only; self-connection edges run from each entity's copy in
//! snapshot `k+1` (older) to its copy in snapshot `k` (newer), so
//! information can only flow toward the anchor.

use crate::data::Quadruplet;
use crate::error::{Error, Result};

/// History offsets: the past distances (in timestamps) at which the
/// sequence head reads entity embeddings. Strictly decreasing, ending
/// at 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HistorySpec {
    offsets: Vec<i64>,
}

impl HistorySpec {
    pub fn new(offsets: Vec<i64>) -> Result<HistorySpec> {
        if offsets.is_empty() {
            return Err(Error::Config("history offsets must be nonempty".into()));
        }
        if *offsets.last().unwrap() != 0 {
            return Err(Error::Config(format!(
                "history offsets must end at 0, got {offsets:?}"
            )));
        }
        if offsets.iter().any(|&o| o < 0) {
            return Err(Error::Config(format!("negative history offset in {offsets:?}")));
        }
        if !offsets.windows(2).all(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "history offsets must be strictly decreasing, got {offsets:?}"
            )));
        }
        Ok(HistorySpec { offsets })
    }

    /// Parses a comma-separated offset list such as "31,23,15,7,3,1,0".
    pub fn parse(text: &str) -> Result<HistorySpec> {
        let offsets: Result<Vec<i64>> = text
            .split(',')
            .map(|p| {
                p.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::Config(format!("invalid history offset `{p}`")))
            })
            .collect();
        HistorySpec::new(offsets?)
    }

    pub fn offsets(&self) -> &[i64] {
        &self.offsets
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_offset(&self) -> i64 {
        self.offsets[0]
    }

    /// Snapshots needed so the chain reaches back past the oldest offset:
    /// `ceil((hx[0] + 1) / T)`.
    pub fn num_snapshots(&self, window: i64) -> Result<usize> {
        if window <= 0 {
            return Err(Error::Config(format!("window size must be positive, got {window}")));
        }
        Ok(((self.max_offset() + window) / window) as usize)
    }

    /// Snapshot holding the embedding for history offset `offsets[i]`.
    pub fn snapshot_for_offset(&self, i: usize, window: i64) -> usize {
        (self.offsets[i] / window) as usize
    }
}

/// Index of the snapshot whose range contains `tau`: `floor((t_a - tau) / T)`.
pub fn snapshot_of(t_a: i64, window: i64, tau: i64) -> Result<usize> {
    if window <= 0 {
        return Err(Error::Config(format!("window size must be positive, got {window}")));
    }
    if tau > t_a {
        return Err(Error::contract(format!(
            "snapshot_of: timestamp {tau} is after anchor {t_a}"
        )));
    }
    Ok(((t_a - tau) / window) as usize)
}

/// An event edge between two copies in the same snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventEdge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
    pub time: i64,
}

/// A self-connection edge from an entity's older copy to its newer copy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfEdge {
    pub entity: usize,
    pub from_snapshot: usize,
    pub to_snapshot: usize,
}

/// Incoming event message at a copy: source copy, relation type, event time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InEvent {
    pub src: usize,
    pub relation: usize,
    pub time: i64,
}

#[derive(Debug)]
pub struct SnapshotGraph {
    anchor: i64,
    window: i64,
    num_snapshots: usize,
    num_entities: usize,
    in_events: Vec<Vec<InEvent>>,
    self_in: Vec<Option<usize>>,
    event_edges: Vec<EventEdge>,
    self_edges: Vec<SelfEdge>,
}

impl SnapshotGraph {
    /// Builds the graph from observable (already reverse-augmented)
    /// events. Events after the anchor or older than the whole chain are
    /// excluded.
    pub fn build(
        events: &[Quadruplet],
        num_entities: usize,
        t_a: i64,
        window: i64,
        spec: &HistorySpec,
    ) -> Result<SnapshotGraph> {
        let num_snapshots = spec.num_snapshots(window)?;
        let num_copies = num_entities * num_snapshots;
        let mut in_events: Vec<Vec<InEvent>> = vec![Vec::new(); num_copies];
        let mut event_edges = Vec::new();
        let oldest_boundary = t_a - (num_snapshots as i64) * window;

        for e in events {
            if e.t > t_a || e.t <= oldest_boundary {
                continue;
            }
            let k = snapshot_of(t_a, window, e.t)?;
            debug_assert!(k < num_snapshots);
            let src = k * num_entities + e.s;
            let dst = k * num_entities + e.o;
            in_events[dst].push(InEvent { src, relation: e.r, time: e.t });
            event_edges.push(EventEdge { src, dst, relation: e.r, time: e.t });
        }

        let mut self_in: Vec<Option<usize>> = vec![None; num_copies];
        let mut self_edges = Vec::new();
        for entity in 0..num_entities {
            for k in 0..num_snapshots.saturating_sub(1) {
                self_edges.push(SelfEdge { entity, from_snapshot: k + 1, to_snapshot: k });
                self_in[k * num_entities + entity] = Some((k + 1) * num_entities + entity);
            }
        }

        Ok(SnapshotGraph {
            anchor: t_a,
            window,
            num_snapshots,
            num_entities,
            in_events,
            self_in,
            event_edges,
            self_edges,
        })
    }

    pub fn anchor(&self) -> i64 {
        self.anchor
    }

    pub fn window(&self) -> i64 {
        self.window
    }

    pub fn num_snapshots(&self) -> usize {
        self.num_snapshots
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn num_copies(&self) -> usize {
        self.num_entities * self.num_snapshots
    }

    /// Node copy id of `entity` in snapshot `k`.
    pub fn copy_id(&self, entity: usize, snapshot: usize) -> usize {
        debug_assert!(entity < self.num_entities && snapshot < self.num_snapshots);
        snapshot * self.num_entities + entity
    }

    pub fn snapshot_of_copy(&self, copy: usize) -> usize {
        copy / self.num_entities
    }

    pub fn entity_of_copy(&self, copy: usize) -> usize {
        copy % self.num_entities
    }

    /// Right (newest) edge of snapshot `k`'s range, used as the reference
    /// time for messages arriving at copies in that snapshot.
    pub fn right_edge(&self, snapshot: usize) -> i64 {
        self.anchor - (snapshot as i64) * self.window
    }

    /// Incoming event messages at a copy.
    pub fn in_events(&self, copy: usize) -> &[InEvent] {
        &self.in_events[copy]
    }

    /// Source copy of the self-connection edge arriving at `copy`, if any.
    /// Copies in the oldest snapshot have none.
    pub fn self_in(&self, copy: usize) -> Option<usize> {
        self.self_in[copy]
    }

    /// All event edges, for structural inspection.
    pub fn event_edges(&self) -> &[EventEdge] {
        &self.event_edges
    }

    /// All self-connection edges, for structural inspection.
    pub fn self_edges(&self) -> &[SelfEdge] {
        &self.self_edges
    }
}
