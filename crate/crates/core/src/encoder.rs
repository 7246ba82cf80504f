//! Temporal graph encoder.
//!
//! One (or up to three) heterogeneous GNN layers over a [`SnapshotGraph`].
//! Per edge type, a node copy attends over its incoming neighbors: logits
//! are dot products between the center's query projection and neighbor key
//! projections, neighbor values are softmax-combined, and the rectified
//! per-head results are concatenated and projected back to the embedding
//! width. Neighbor inputs carry a learnable time encoding
//! `cos(omega * delta + phi)` appended to their features, where `delta` is
//! the gap between the snapshot's reference time and the edge timestamp;
//! layer outputs never carry the encoding.
//!
//! Each copy also receives two reserved edge types: a self loop carrying
//! its own previous-layer state at `delta = 0`, and a self connection
//! carrying its older copy's state at `delta = T`. The copy's new state is
//! the mean over the edge types that have at least one neighbor.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::data::Quadruplet;
use crate::error::{Error, Result};
use crate::graph::{HistorySpec, SnapshotGraph};
use crate::params::{glorot, normal_init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Maps relation ids to weight-group ids. Relations whose training-set
/// occurrence meets the threshold get their own group; the rest share one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeTypeGrouping {
    group_of: Vec<usize>,
    num_groups: usize,
    threshold: u64,
}

impl EdgeTypeGrouping {
    /// Counts relation occurrences over (already augmented) training
    /// events and assigns groups.
    pub fn from_train_events(
        events: &[Quadruplet],
        num_relation_types: usize,
        threshold: u64,
    ) -> Result<EdgeTypeGrouping> {
        let mut counts = vec![0u64; num_relation_types];
        for e in events {
            if e.r >= num_relation_types {
                return Err(Error::Index {
                    what: "relation id in training events",
                    index: e.r,
                    bound: num_relation_types,
                });
            }
            counts[e.r] += 1;
        }
        let mut group_of = vec![usize::MAX; num_relation_types];
        let mut next = 0usize;
        for (r, &c) in counts.iter().enumerate() {
            if c >= threshold {
                group_of[r] = next;
                next += 1;
            }
        }
        let any_rare = group_of.iter().any(|&g| g == usize::MAX);
        if any_rare {
            for g in group_of.iter_mut() {
                if *g == usize::MAX {
                    *g = next;
                }
            }
            next += 1;
        }
        Ok(EdgeTypeGrouping { group_of, num_groups: next, threshold })
    }

    pub fn group_of(&self, relation: usize) -> Result<usize> {
        self.group_of
            .get(relation)
            .copied()
            .ok_or(Error::Index {
                what: "relation id in grouping",
                index: relation,
                bound: self.group_of.len(),
            })
    }

    /// Rebuilds a grouping from stored assignments. Group ids must be
    /// dense: every id in 0..=max occurs.
    pub fn from_assignments(group_of: Vec<usize>, threshold: u64) -> Result<EdgeTypeGrouping> {
        if group_of.is_empty() {
            return Err(Error::contract("grouping needs at least one relation type"));
        }
        let num_groups = group_of.iter().max().unwrap() + 1;
        let mut seen = vec![false; num_groups];
        for &g in &group_of {
            seen[g] = true;
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::contract("grouping assignments must use dense group ids"));
        }
        Ok(EdgeTypeGrouping { group_of, num_groups, threshold })
    }

    /// Relation-derived groups only (reserved self types come on top).
    pub fn num_relation_groups(&self) -> usize {
        self.num_groups
    }

    pub fn num_relation_types(&self) -> usize {
        self.group_of.len()
    }

    pub fn threshold(&self) -> u64 {
        self.threshold
    }

    pub fn assignments(&self) -> &[usize] {
        &self.group_of
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderConfig {
    /// Entity embedding width d.
    pub embed_dim: usize,
    /// Width of the time encoding appended to neighbor features.
    pub time_dim: usize,
    pub num_heads: usize,
    /// GNN depth, 1 to 3.
    pub num_layers: usize,
    /// Most-recent neighbors kept per (copy, edge type).
    pub neighbor_cap: usize,
    /// Negative slope of the rectifier.
    pub leaky_slope: f64,
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 200,
            time_dim: 32,
            num_heads: 4,
            num_layers: 1,
            neighbor_cap: 64,
            leaky_slope: 0.2,
        }
    }
}

struct GroupWeights {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
}

struct LayerWeights {
    groups: Vec<GroupWeights>,
}

pub struct Encoder {
    cfg: EncoderConfig,
    grouping: EdgeTypeGrouping,
    num_entities: usize,
    attributes: ParamId,
    omega: ParamId,
    phi: ParamId,
    layers: Vec<LayerWeights>,
}

impl Encoder {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        cfg: EncoderConfig,
        grouping: EdgeTypeGrouping,
        num_entities: usize,
    ) -> Result<Encoder> {
        if cfg.embed_dim == 0 || cfg.num_heads == 0 || cfg.embed_dim % cfg.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                cfg.embed_dim, cfg.num_heads
            )));
        }
        if !(1..=3).contains(&cfg.num_layers) {
            return Err(Error::Config(format!("num_layers must be 1..=3, got {}", cfg.num_layers)));
        }
        if cfg.time_dim == 0 || cfg.neighbor_cap == 0 {
            return Err(Error::Config("time_dim and neighbor_cap must be positive".into()));
        }
        let d = cfg.embed_dim;
        let dh = d / cfg.num_heads;
        let dt = cfg.time_dim;

        let attributes = store.add("encoder.attributes", normal_init(rng, &[num_entities, d], 0.1));
        let mut omega = Tensor::zeros(&[dt]);
        for (i, w) in omega.data_mut().iter_mut().enumerate() {
            // Geometric frequency ladder from 1e-3 to 1.
            let frac = if dt == 1 { 0.0 } else { i as f64 / (dt - 1) as f64 };
            *w = 1e-3_f64.powf(1.0 - frac);
        }
        let omega = store.add("encoder.omega", omega);
        let phi = store.add("encoder.phi", Tensor::zeros(&[dt]));

        let total_groups = grouping.num_relation_groups() + 2;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let mut groups = Vec::with_capacity(total_groups);
            for g in 0..total_groups {
                let mut wq = Vec::with_capacity(cfg.num_heads);
                let mut wk = Vec::with_capacity(cfg.num_heads);
                let mut wv = Vec::with_capacity(cfg.num_heads);
                for h in 0..cfg.num_heads {
                    let base = format!("encoder.layer{l}.group{g}.head{h}");
                    wq.push(store.add(format!("{base}.wq"), glorot(rng, &[d, dh])));
                    wk.push(store.add(format!("{base}.wk"), glorot(rng, &[d + dt, dh])));
                    wv.push(store.add(format!("{base}.wv"), glorot(rng, &[d + dt, dh])));
                }
                let wo = store.add(
                    format!("encoder.layer{l}.group{g}.wo"),
                    glorot(rng, &[cfg.num_heads * dh, d]),
                );
                groups.push(GroupWeights { wq, wk, wv, wo });
            }
            layers.push(LayerWeights { groups });
        }
        Ok(Encoder { cfg, grouping, num_entities, attributes, omega, phi, layers })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn grouping(&self) -> &EdgeTypeGrouping {
        &self.grouping
    }

    pub fn num_entities(&self) -> usize {
        self.num_entities
    }

    pub fn attributes_param(&self) -> ParamId {
        self.attributes
    }

    /// Weight-group id of the reserved self-loop edge type.
    pub fn self_loop_group(&self) -> usize {
        self.grouping.num_relation_groups()
    }

    /// Weight-group id of the reserved self-connection edge type.
    pub fn self_conn_group(&self) -> usize {
        self.grouping.num_relation_groups() + 1
    }

    /// `cos(omega * delta + phi)` with learnable omega, phi.
    pub fn time_encode(&self, tape: &mut Tape, store: &ParamStore, delta: i64) -> Result<Var> {
        let omega = tape.param(store, self.omega);
        let phi = tape.param(store, self.phi);
        let scaled = tape.scale(omega, delta as f64)?;
        let arg = tape.add(scaled, phi)?;
        tape.cos(arg)
    }

    /// One edge type's attention message for one center copy.
    ///
    /// `center` is the copy's previous-layer state `[d]`; `neighbors` are
    /// (previous-layer state, time gap) pairs. Returns the projected
    /// message `[d]`.
    pub fn attention_aggregate(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        center: Var,
        neighbors: &[(Var, i64)],
        layer: usize,
        group: usize,
    ) -> Result<Var> {
        let mut cache = HashMap::new();
        self.aggregate_inner(tape, store, center, neighbors, layer, group, &mut cache)
            .map(|(msg, _)| msg)
    }

    /// Like [`Encoder::attention_aggregate`] but also returns the per-head
    /// attention weight vectors, for inspection.
    pub fn attention_details(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        center: Var,
        neighbors: &[(Var, i64)],
        layer: usize,
        group: usize,
    ) -> Result<(Var, Vec<Var>)> {
        let mut cache = HashMap::new();
        self.aggregate_inner(tape, store, center, neighbors, layer, group, &mut cache)
    }

    #[allow(clippy::too_many_arguments)]
    fn aggregate_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        center: Var,
        neighbors: &[(Var, i64)],
        layer: usize,
        group: usize,
        time_cache: &mut HashMap<i64, Var>,
    ) -> Result<(Var, Vec<Var>)> {
        if neighbors.is_empty() {
            return Err(Error::contract("attention_aggregate: empty neighbor list"));
        }
        let weights = &self.layers[layer].groups[group];
        let mut features = Vec::with_capacity(neighbors.len());
        for &(state, delta) in neighbors {
            if delta < 0 {
                return Err(Error::contract(format!(
                    "attention_aggregate: negative time gap {delta}"
                )));
            }
            let enc = match time_cache.get(&delta) {
                Some(&v) => v,
                None => {
                    let v = self.time_encode(tape, store, delta)?;
                    time_cache.insert(delta, v);
                    v
                }
            };
            features.push(tape.concat_vec(&[state, enc])?);
        }
        let stacked = tape.stack_rows(&features)?;

        let mut head_outputs = Vec::with_capacity(self.cfg.num_heads);
        let mut head_weights = Vec::with_capacity(self.cfg.num_heads);
        for h in 0..self.cfg.num_heads {
            let wq = tape.param(store, weights.wq[h]);
            let wk = tape.param(store, weights.wk[h]);
            let wv = tape.param(store, weights.wv[h]);
            let q = tape.vecmat(center, wq)?;
            let k = tape.matmul(stacked, wk)?;
            let v = tape.matmul(stacked, wv)?;
            let logits = tape.matvec(k, q)?;
            let attn = tape.softmax_rows(logits)?;
            let mixed = tape.vecmat(attn, v)?;
            head_outputs.push(tape.leaky_relu(mixed, self.cfg.leaky_slope)?);
            head_weights.push(attn);
        }
        let concat = tape.concat_vec(&head_outputs)?;
        let wo = tape.param(store, weights.wo);
        let msg = tape.vecmat(concat, wo)?;
        Ok((msg, head_weights))
    }

    /// Encodes the graph and returns, per query entity, the stacked
    /// history sequence `[|hx| x d]`: row `i` is the entity's embedding in
    /// the snapshot holding history offset `hx[i]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        graph: &SnapshotGraph,
        spec: &HistorySpec,
        entities: &[usize],
    ) -> Result<Vec<Var>> {
        if graph.num_entities() != self.num_entities {
            return Err(Error::contract(format!(
                "graph has {} entities, encoder was built for {}",
                graph.num_entities(),
                self.num_entities
            )));
        }
        let expected = spec.num_snapshots(graph.window())?;
        if graph.num_snapshots() != expected {
            return Err(Error::contract(format!(
                "graph has {} snapshots, history spec needs {expected}",
                graph.num_snapshots()
            )));
        }
        for &e in entities {
            if e >= self.num_entities {
                return Err(Error::Index { what: "query entity", index: e, bound: self.num_entities });
            }
        }

        let num_copies = graph.num_copies();
        let attrs = tape.param(store, self.attributes);
        let mut entity_rows: Vec<Option<Var>> = vec![None; self.num_entities];
        let mut states: Vec<Var> = Vec::with_capacity(num_copies);
        for copy in 0..num_copies {
            let entity = graph.entity_of_copy(copy);
            let row = match entity_rows[entity] {
                Some(v) => v,
                None => {
                    let v = tape.row(attrs, entity)?;
                    entity_rows[entity] = Some(v);
                    v
                }
            };
            states.push(row);
        }

        let mut time_cache: HashMap<i64, Var> = HashMap::new();
        for layer in 0..self.cfg.num_layers {
            let mut next = Vec::with_capacity(num_copies);
            for copy in 0..num_copies {
                let snapshot = graph.snapshot_of_copy(copy);
                let t_ref = graph.right_edge(snapshot);
                let mut messages = Vec::new();

                let mut by_relation: BTreeMap<usize, Vec<(i64, usize)>> = BTreeMap::new();
                for ev in graph.in_events(copy) {
                    by_relation.entry(ev.relation).or_default().push((ev.time, ev.src));
                }
                for (relation, mut evs) in by_relation {
                    // Most recent first; source copy id breaks ties.
                    evs.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
                    evs.truncate(self.cfg.neighbor_cap);
                    let neigh: Vec<(Var, i64)> =
                        evs.iter().map(|&(t, src)| (states[src], t_ref - t)).collect();
                    let group = self.grouping.group_of(relation)?;
                    let (msg, _) = self.aggregate_inner(
                        tape, store, states[copy], &neigh, layer, group, &mut time_cache,
                    )?;
                    messages.push(msg);
                }

                if let Some(src) = graph.self_in(copy) {
                    let (msg, _) = self.aggregate_inner(
                        tape,
                        store,
                        states[copy],
                        &[(states[src], graph.window())],
                        layer,
                        self.self_conn_group(),
                        &mut time_cache,
                    )?;
                    messages.push(msg);
                }

                let (msg, _) = self.aggregate_inner(
                    tape,
                    store,
                    states[copy],
                    &[(states[copy], 0)],
                    layer,
                    self.self_loop_group(),
                    &mut time_cache,
                )?;
                messages.push(msg);

                next.push(tape.mean_vars(&messages)?);
            }
            states = next;
        }

        let mut out = Vec::with_capacity(entities.len());
        for &entity in entities {
            let rows: Vec<Var> = (0..spec.len())
                .map(|i| {
                    let snapshot = spec.snapshot_for_offset(i, graph.window());
                    states[graph.copy_id(entity, snapshot)]
                })
                .collect();
            out.push(tape.stack_rows(&rows)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthPattern};
    use crate::gradcheck::{assert_grads_match, check_param_gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 6,
            time_dim: 4,
            num_heads: 2,
            num_layers: 1,
            neighbor_cap: 64,
            leaky_slope: 0.2,
        }
    }

    fn toy_encoder(
        num_relation_types: usize,
        num_entities: usize,
        cfg: EncoderConfig,
    ) -> (ParamStore, Encoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let events: Vec<Quadruplet> = (0..num_relation_types)
            .map(|r| Quadruplet::new(0, r, 1 % num_entities, 0))
            .collect();
        let grouping = EdgeTypeGrouping::from_train_events(&events, num_relation_types, 0).unwrap();
        let enc = Encoder::new(&mut store, &mut rng, cfg, grouping, num_entities).unwrap();
        (store, enc)
    }

    #[test]
    fn grouping_threshold_zero_is_all_singletons() {
        let events = vec![Quadruplet::new(0, 0, 1, 0), Quadruplet::new(0, 2, 1, 0)];
        let g = EdgeTypeGrouping::from_train_events(&events, 3, 0).unwrap();
        assert_eq!(g.num_relation_groups(), 3);
        let mut ids: Vec<usize> = (0..3).map(|r| g.group_of(r).unwrap()).collect();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn grouping_pools_rare_relations() {
        let mut events = Vec::new();
        for _ in 0..100 {
            events.push(Quadruplet::new(0, 0, 1, 0));
        }
        events.push(Quadruplet::new(0, 1, 1, 0));
        let g = EdgeTypeGrouping::from_train_events(&events, 2, 10).unwrap();
        assert_eq!(g.num_relation_groups(), 2);
        assert_ne!(g.group_of(0).unwrap(), g.group_of(1).unwrap());

        // Two rare relations share one group.
        let g2 = EdgeTypeGrouping::from_train_events(&events, 3, 10).unwrap();
        assert_eq!(g2.num_relation_groups(), 2);
        assert_eq!(g2.group_of(1).unwrap(), g2.group_of(2).unwrap());
    }

    #[test]
    fn grouping_count_matches_formula_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..20 {
            let relations = rng.gen_range(1..6);
            let d = generate_synthetic(5, relations, 12, SynthPattern::Functional, seed).unwrap();
            let threshold = rng.gen_range(0..200u64);
            let num_types = d.num_base_relations;
            let g = EdgeTypeGrouping::from_train_events(&d.train, num_types, threshold).unwrap();
            let mut counts = vec![0u64; num_types];
            for e in &d.train {
                counts[e.r] += 1;
            }
            let kept = counts.iter().filter(|&&c| c >= threshold).count();
            let rare = counts.len() - kept;
            assert_eq!(g.num_relation_groups(), kept + usize::from(rare > 0));
        }
    }

    #[test]
    fn time_encode_closed_forms() {
        let (mut store, enc) = toy_encoder(1, 2, toy_config());
        // delta = 0 gives cos(phi) regardless of omega.
        let phi_id = store.lookup("encoder.phi").unwrap();
        store.value_mut(phi_id).data_mut().copy_from_slice(&[0.0, 0.3, -0.7, 1.2]);
        let mut tape = Tape::new();
        let v = enc.time_encode(&mut tape, &store, 0).unwrap();
        for (got, phi) in tape.value(v).iter().zip([0.0f64, 0.3, -0.7, 1.2]) {
            assert!((got - phi.cos()).abs() < 1e-12);
        }

        // omega = pi, phi = 0, delta = 1 gives -1.
        let omega_id = store.lookup("encoder.omega").unwrap();
        store
            .value_mut(omega_id)
            .data_mut()
            .copy_from_slice(&[std::f64::consts::PI; 4]);
        store.value_mut(phi_id).data_mut().copy_from_slice(&[0.0; 4]);
        let mut tape = Tape::new();
        let v = enc.time_encode(&mut tape, &store, 1).unwrap();
        for got in tape.value(v) {
            assert!((got + 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn time_encode_stays_in_unit_range() {
        let (mut store, enc) = toy_encoder(1, 2, toy_config());
        let omega_id = store.lookup("encoder.omega").unwrap();
        let phi_id = store.lookup("encoder.phi").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..250 {
            for v in store.value_mut(omega_id).data_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            for v in store.value_mut(phi_id).data_mut() {
                *v = rng.gen_range(-5.0..5.0);
            }
            let delta = rng.gen_range(0..1000);
            let mut tape = Tape::new();
            let out = enc.time_encode(&mut tape, &store, delta).unwrap();
            for x in tape.value(out) {
                assert!((-1.0..=1.0).contains(x));
            }
        }
    }

    #[test]
    fn singleton_neighbor_gets_weight_one() {
        let (store, enc) = toy_encoder(1, 2, toy_config());
        let mut tape = Tape::new();
        let center = tape.leaf(Tensor::vector(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.1]));
        let n = tape.leaf(Tensor::vector(&[0.4, 0.1, -0.3, 0.2, 0.0, 0.6]));
        let (_, weights) = enc
            .attention_details(&mut tape, &store, center, &[(n, 2)], 0, 0)
            .unwrap();
        for w in weights {
            assert_eq!(tape.value(w), &[1.0]);
        }
    }

    #[test]
    fn identical_neighbors_split_weight_evenly() {
        let (store, enc) = toy_encoder(1, 2, toy_config());
        let mut tape = Tape::new();
        let center = tape.leaf(Tensor::vector(&[0.1, -0.2, 0.3, 0.0, 0.5, -0.1]));
        let n = tape.leaf(Tensor::vector(&[0.4, 0.1, -0.3, 0.2, 0.0, 0.6]));
        let (_, weights) = enc
            .attention_details(&mut tape, &store, center, &[(n, 3), (n, 3)], 0, 0)
            .unwrap();
        for w in weights {
            let v = tape.value(w);
            assert!((v[0] - 0.5).abs() < 1e-12);
            assert!((v[1] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let (store, enc) = toy_encoder(2, 2, toy_config());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let rand_vec = |tape: &mut Tape, rng: &mut ChaCha8Rng| {
                let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
                tape.leaf(Tensor::vector(&vals))
            };
            let center = rand_vec(&mut tape, &mut rng);
            let n_count = rng.gen_range(1..6);
            let neighbors: Vec<(Var, i64)> = (0..n_count)
                .map(|_| (rand_vec(&mut tape, &mut rng), rng.gen_range(0..10)))
                .collect();
            let (_, weights) = enc
                .attention_details(&mut tape, &store, center, &neighbors, 0, 1)
                .unwrap();
            for w in weights {
                let total: f64 = tape.value(w).iter().sum();
                assert!((total - 1.0).abs() < 1e-6);
                assert!(tape.value(w).iter().all(|&x| x >= 0.0));
            }
        }
    }

    #[test]
    fn empty_neighbor_list_is_rejected() {
        let (store, enc) = toy_encoder(1, 2, toy_config());
        let mut tape = Tape::new();
        let center = tape.leaf(Tensor::zeros(&[6]));
        assert!(enc.attention_aggregate(&mut tape, &store, center, &[], 0, 0).is_err());
    }

    fn toy_graph_events() -> Vec<Quadruplet> {
        // 4 relation types (2 base + 2 reverse), 5 entities.
        let base = vec![
            Quadruplet::new(0, 0, 1, 10),
            Quadruplet::new(1, 1, 2, 10),
            Quadruplet::new(2, 0, 3, 9),
            Quadruplet::new(3, 1, 4, 8),
            Quadruplet::new(4, 0, 0, 7),
            Quadruplet::new(0, 1, 2, 6),
        ];
        let mut all = base.clone();
        for e in &base {
            all.push(Quadruplet::new(e.o, e.r + 2, e.s, e.t));
        }
        all
    }

    #[test]
    fn fd_gradients_through_encode() {
        for layers in [1, 2] {
            let cfg = EncoderConfig { num_layers: layers, ..toy_config() };
            let events = toy_graph_events();
            let grouping = EdgeTypeGrouping::from_train_events(&events, 4, 0).unwrap();
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(23);
            let enc = Encoder::new(&mut store, &mut rng, cfg, grouping, 5).unwrap();
            let spec = HistorySpec::new(vec![3, 1, 0]).unwrap();
            let graph = SnapshotGraph::build(&events, 5, 10, 2, &spec).unwrap();

            let ids: Vec<ParamId> = store.ids().collect();
            let mismatches = check_param_gradients(&mut store, &ids, 1e-5, 1e-3, |tape, store| {
                let seqs = enc.encode(tape, store, &graph, &spec, &[0, 3])?;
                let cat = tape.concat_vec(&seqs)?;
                let sq = tape.mul(cat, cat)?;
                tape.sum(sq)
            })
            .unwrap();
            assert_grads_match(&mismatches);
        }
    }

    #[test]
    fn isolated_entity_depends_only_on_itself() {
        let cfg = toy_config();
        let events = toy_graph_events();
        // Entity 5 exists but appears in no event.
        let grouping = EdgeTypeGrouping::from_train_events(&events, 4, 0).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let enc = Encoder::new(&mut store, &mut rng, cfg, grouping, 6).unwrap();
        // Offsets 1 and 0 share snapshot 0 under window 2.
        let spec = HistorySpec::new(vec![3, 1, 0]).unwrap();
        let graph = SnapshotGraph::build(&events, 6, 10, 2, &spec).unwrap();

        let run = |store: &ParamStore| -> Vec<f64> {
            let mut tape = Tape::new();
            let seqs = enc.encode(&mut tape, store, &graph, &spec, &[5]).unwrap();
            tape.value(seqs[0]).to_vec()
        };
        let before = run(&store);
        // Offsets [3,1,0] with window 2 map to snapshots [1,0,0]; rows 1
        // and 2 read the same copy.
        let d = 6;
        assert_eq!(before[d..2 * d], before[2 * d..3 * d]);

        // Perturbing another entity's attribute leaves the isolate unchanged.
        let attrs = store.lookup("encoder.attributes").unwrap();
        store.value_mut(attrs).data_mut()[0] += 10.0;
        let after = run(&store);
        assert_eq!(before, after);

        // Perturbing its own attribute changes it.
        store.value_mut(attrs).data_mut()[5 * d] += 1.0;
        let own = run(&store);
        assert_ne!(before, own);
    }

    #[test]
    fn neighbor_order_does_not_change_embeddings() {
        let cfg = toy_config();
        let mut events = toy_graph_events();
        let grouping = EdgeTypeGrouping::from_train_events(&events, 4, 0).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let enc = Encoder::new(&mut store, &mut rng, cfg, grouping, 5).unwrap();
        let spec = HistorySpec::new(vec![3, 1, 0]).unwrap();

        let run = |events: &[Quadruplet]| -> Vec<f64> {
            let graph = SnapshotGraph::build(events, 5, 10, 2, &spec).unwrap();
            let mut tape = Tape::new();
            let seqs = enc.encode(&mut tape, &store, &graph, &spec, &[0, 1, 2, 3, 4]).unwrap();
            let mut out = Vec::new();
            for s in seqs {
                out.extend_from_slice(tape.value(s));
            }
            out
        };
        let before = run(&events);
        events.reverse();
        let after = run(&events);
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn removing_an_event_never_touches_older_snapshots() {
        let cfg = EncoderConfig { num_layers: 2, ..toy_config() };
        let mut base = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for t in 0..12i64 {
            for _ in 0..3 {
                let s = rng.gen_range(0..10);
                let o = rng.gen_range(0..10);
                let r = rng.gen_range(0..2);
                base.push(Quadruplet::new(s, r, o, t));
            }
        }
        let mut events = base.clone();
        for e in &base {
            events.push(Quadruplet::new(e.o, e.r + 2, e.s, e.t));
        }
        let grouping = EdgeTypeGrouping::from_train_events(&events, 4, 0).unwrap();
        let mut store = ParamStore::new();
        let mut prng = ChaCha8Rng::seed_from_u64(41);
        let enc = Encoder::new(&mut store, &mut prng, cfg, grouping, 10).unwrap();
        // Window 1: offset i reads snapshot i, so every snapshot is
        // observable through the output sequence.
        let spec = HistorySpec::new(vec![3, 2, 1, 0]).unwrap();
        let t_a = 11;

        let run = |events: &[Quadruplet]| -> Vec<Vec<f64>> {
            let graph = SnapshotGraph::build(events, 10, t_a, 1, &spec).unwrap();
            let mut tape = Tape::new();
            let all: Vec<usize> = (0..10).collect();
            let seqs = enc.encode(&mut tape, &store, &graph, &spec, &all).unwrap();
            seqs.iter().map(|&s| tape.value(s).to_vec()).collect()
        };
        let before = run(&events);

        // Remove one in-window forward event and its reverse mate.
        let victim = *base.iter().find(|e| e.t == 9).unwrap();
        let pruned: Vec<Quadruplet> = events
            .iter()
            .filter(|e| {
                !(**e == victim
                    || **e == Quadruplet::new(victim.o, victim.r + 2, victim.s, victim.t))
            })
            .cloned()
            .collect();
        assert_eq!(pruned.len(), events.len() - 2);
        let after = run(&pruned);

        let removed_snapshot = (t_a - victim.t) as usize;
        let d = 6;
        let mut changed_somewhere = false;
        for entity in 0..10 {
            for (i, &offset) in spec.offsets().iter().enumerate() {
                let snapshot = offset as usize;
                let row_b = &before[entity][i * d..(i + 1) * d];
                let row_a = &after[entity][i * d..(i + 1) * d];
                if snapshot > removed_snapshot {
                    assert_eq!(row_b, row_a, "older snapshot {snapshot} changed");
                } else if row_b != row_a {
                    changed_somewhere = true;
                }
            }
        }
        assert!(changed_somewhere, "removing an event had no effect at all");
    }
}
