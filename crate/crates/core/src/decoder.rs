//! Entity scoring decoder with an optional copy branch.
//!
//! The generation path concatenates the predicted future entity embedding
//! with a learnable relation embedding, applies residual blocks
//! (dense-rectify-dense plus identity skip) at the concatenation width,
//! and maps to one logit per candidate entity.
//!
//! The copy branch, when enabled, maps the query entity's current
//! (offset-0) embedding to copy logits, masks them down to the entities
//! seen with this (entity, relation) in the observable past, and blends:
//! `p = (1 - alpha) * softmax(gen) + alpha * softmax(masked copy)`. The
//! copy input is detached, so encoder parameters receive no gradient
//! through this branch. With an empty mask the copy term is dropped
//! exactly.

use std::collections::HashMap;

use rand::Rng;

use crate::data::Quadruplet;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{glorot, normal_init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecoderConfig {
    /// Entity (and relation) embedding width d.
    pub embed_dim: usize,
    pub num_entities: usize,
    /// Relation vocabulary including reverses (2R).
    pub num_relation_types: usize,
    pub num_blocks: usize,
    pub copy: bool,
}

impl DecoderConfig {
    pub fn new(embed_dim: usize, num_entities: usize, num_relation_types: usize) -> DecoderConfig {
        DecoderConfig { embed_dim, num_entities, num_relation_types, num_blocks: 2, copy: true }
    }
}

struct ResBlock {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

struct CopyHead {
    w: ParamId,
    b: ParamId,
    alpha_logit: ParamId,
}

pub struct Decoder {
    cfg: DecoderConfig,
    relations: ParamId,
    blocks: Vec<ResBlock>,
    final_w: ParamId,
    final_b: ParamId,
    copy: Option<CopyHead>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: DecoderConfig) -> Result<Decoder> {
        if cfg.embed_dim == 0 || cfg.num_entities == 0 || cfg.num_relation_types == 0 {
            return Err(Error::Config("decoder dimensions must be positive".into()));
        }
        let d = cfg.embed_dim;
        let width = 2 * d;
        let relations = store.add(
            "decoder.relations",
            normal_init(rng, &[cfg.num_relation_types, d], 0.1),
        );
        let mut blocks = Vec::with_capacity(cfg.num_blocks);
        for i in 0..cfg.num_blocks {
            blocks.push(ResBlock {
                w1: store.add(format!("decoder.block{i}.w1"), glorot(rng, &[width, width])),
                b1: store.add(format!("decoder.block{i}.b1"), Tensor::zeros(&[width])),
                w2: store.add(format!("decoder.block{i}.w2"), glorot(rng, &[width, width])),
                b2: store.add(format!("decoder.block{i}.b2"), Tensor::zeros(&[width])),
            });
        }
        let final_w = store.add("decoder.final.w", glorot(rng, &[width, cfg.num_entities]));
        let final_b = store.add("decoder.final.b", Tensor::zeros(&[cfg.num_entities]));
        let copy = if cfg.copy {
            Some(CopyHead {
                w: store.add("decoder.copy.w", glorot(rng, &[d, cfg.num_entities])),
                b: store.add("decoder.copy.b", Tensor::zeros(&[cfg.num_entities])),
                alpha_logit: store.add("decoder.copy.alpha_logit", Tensor::scalar(0.0)),
            })
        } else {
            None
        };
        Ok(Decoder { cfg, relations, blocks, final_w, final_b, copy })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn copy_enabled(&self) -> bool {
        self.copy.is_some()
    }

    /// Residual stack on the concatenated `[2d]` input, exposed for
    /// inspection.
    pub fn residual_blocks(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut x = x;
        for block in &self.blocks {
            let w1 = tape.param(store, block.w1);
            let b1 = tape.param(store, block.b1);
            let w2 = tape.param(store, block.w2);
            let b2 = tape.param(store, block.b2);
            let h = nn::affine_vec(tape, x, w1, Some(b1))?;
            let h = tape.relu(h)?;
            let h = nn::affine_vec(tape, h, w2, Some(b2))?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }

    /// Generation logits `[num_entities]` for (future embedding, relation).
    pub fn score_entities(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        future_emb: Var,
        relation: usize,
    ) -> Result<Var> {
        if relation >= self.cfg.num_relation_types {
            return Err(Error::Index {
                what: "decoder relation",
                index: relation,
                bound: self.cfg.num_relation_types,
            });
        }
        if tape.shape(future_emb) != [self.cfg.embed_dim] {
            return Err(Error::dim(
                "score_entities",
                format!("expected [{}], got {:?}", self.cfg.embed_dim, tape.shape(future_emb)),
            ));
        }
        let rel_table = tape.param(store, self.relations);
        let rel = tape.row(rel_table, relation)?;
        let x = tape.concat_vec(&[future_emb, rel])?;
        let x = self.residual_blocks(tape, store, x)?;
        let w = tape.param(store, self.final_w);
        let b = tape.param(store, self.final_b);
        nn::affine_vec(tape, x, w, Some(b))
    }

    /// Copy logits from the detached current embedding. Errors if the
    /// copy head is disabled.
    pub fn copy_logits(&self, tape: &mut Tape, store: &ParamStore, current_emb: Var) -> Result<Var> {
        let head = self
            .copy
            .as_ref()
            .ok_or_else(|| Error::contract("copy head is disabled"))?;
        let detached = tape.detach(current_emb)?;
        let w = tape.param(store, head.w);
        let b = tape.param(store, head.b);
        nn::affine_vec(tape, detached, w, Some(b))
    }

    /// Mixing weight `alpha = sigmoid(logit)`, in (0, 1).
    pub fn alpha(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let head = self
            .copy
            .as_ref()
            .ok_or_else(|| Error::contract("copy head is disabled"))?;
        let logit = tape.param(store, head.alpha_logit);
        tape.sigmoid(logit)
    }

    /// Probability vector for one query.
    ///
    /// `current_emb` is the query entity's offset-0 embedding, used only
    /// by the copy branch; `mask` marks entities seen with this (entity,
    /// relation) in the past. With the copy head off, or an all-false
    /// mask, this is exactly `softmax(gen_logits)`.
    pub fn query_probabilities(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        future_emb: Var,
        current_emb: Var,
        relation: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let gen_logits = self.score_entities(tape, store, future_emb, relation)?;
        if mask.len() != self.cfg.num_entities {
            return Err(Error::dim(
                "query_probabilities",
                format!("mask length {} vs {} entities", mask.len(), self.cfg.num_entities),
            ));
        }
        let use_copy = self.copy.is_some() && mask.iter().any(|&m| m);
        if !use_copy {
            return tape.softmax_rows(gen_logits);
        }
        let gen_p = tape.softmax_rows(gen_logits)?;
        let copy_logits = self.copy_logits(tape, store, current_emb)?;
        let copy_p = tape.masked_softmax(copy_logits, mask)?;
        let alpha = self.alpha(tape, store)?;
        let one_minus = tape.neg(alpha)?;
        let one_minus = tape.add_const(one_minus, 1.0)?;
        let gen_term = tape.scale_by(gen_p, one_minus)?;
        let copy_term = tape.scale_by(copy_p, alpha)?;
        tape.add(gen_term, copy_term)
    }

    /// Cross-entropy loss of one query against `target`. Uses the fused
    /// log-sum-exp path whenever the copy branch is inactive.
    pub fn query_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        future_emb: Var,
        current_emb: Var,
        relation: usize,
        mask: &[bool],
        target: usize,
    ) -> Result<Var> {
        if target >= self.cfg.num_entities {
            return Err(Error::Index {
                what: "query target",
                index: target,
                bound: self.cfg.num_entities,
            });
        }
        let use_copy = self.copy.is_some() && mask.iter().any(|&m| m);
        if !use_copy {
            let logits = self.score_entities(tape, store, future_emb, relation)?;
            return tape.cross_entropy_logits(logits, target);
        }
        let p = self.query_probabilities(tape, store, future_emb, current_emb, relation, mask)?;
        tape.neg_log_index(p, target)
    }
}

/// Per-(entity, relation) history of observed objects, for copy masks.
/// Built once over the observable (augmented) events.
pub struct HistoryIndex {
    map: HashMap<(usize, usize), Vec<(i64, usize)>>,
    num_entities: usize,
}

impl HistoryIndex {
    pub fn build<'a>(
        events: impl Iterator<Item = &'a Quadruplet>,
        num_entities: usize,
    ) -> HistoryIndex {
        let mut map: HashMap<(usize, usize), Vec<(i64, usize)>> = HashMap::new();
        for e in events {
            map.entry((e.s, e.r)).or_default().push((e.t, e.o));
        }
        for list in map.values_mut() {
            list.sort();
        }
        HistoryIndex { map, num_entities }
    }

    /// `mask[c]` is true iff (entity, relation, c) occurred at some time
    /// `<= t_a`.
    pub fn mask(&self, entity: usize, relation: usize, t_a: i64) -> Vec<bool> {
        let mut mask = vec![false; self.num_entities];
        if let Some(list) = self.map.get(&(entity, relation)) {
            for &(t, o) in list {
                if t > t_a {
                    break;
                }
                mask[o] = true;
            }
        }
        mask
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{assert_grads_match, check_param_gradients};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(copy: bool, d: usize, entities: usize) -> (ParamStore, Decoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mut cfg = DecoderConfig::new(d, entities, 4);
        cfg.copy = copy;
        let dec = Decoder::new(&mut store, &mut rng, cfg).unwrap();
        (store, dec)
    }

    fn test_vec(d: usize, scale: f64) -> Tensor {
        let vals: Vec<f64> = (0..d).map(|i| ((i as f64) * 0.77 + 0.1).sin() * scale).collect();
        Tensor::vector(&vals)
    }

    #[test]
    fn zero_final_layer_gives_uniform_softmax() {
        let (mut store, dec) = build(false, 6, 9);
        let wid = store.lookup("decoder.final.w").unwrap();
        for v in store.value_mut(wid).data_mut() {
            *v = 0.0;
        }
        let bid = store.lookup("decoder.final.b").unwrap();
        for v in store.value_mut(bid).data_mut() {
            *v = 0.42;
        }
        let mut tape = Tape::new();
        let fut = tape.leaf(test_vec(6, 0.5));
        let logits = dec.score_entities(&mut tape, &store, fut, 1).unwrap();
        assert!(tape.value(logits).iter().all(|&v| v == 0.42));
        let loss = tape.cross_entropy_logits(logits, 3).unwrap();
        assert!((tape.item(loss) - (9.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn zeroed_blocks_are_identity() {
        let (mut store, dec) = build(false, 8, 5);
        for i in 0..2 {
            for name in ["w1", "b1", "w2", "b2"] {
                let id = store.lookup(&format!("decoder.block{i}.{name}")).unwrap();
                for v in store.value_mut(id).data_mut() {
                    *v = 0.0;
                }
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(test_vec(16, 0.8));
        let y = dec.residual_blocks(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(x), tape.value(y));
    }

    #[test]
    fn relation_out_of_range_is_rejected() {
        let (store, dec) = build(false, 6, 5);
        let mut tape = Tape::new();
        let fut = tape.leaf(test_vec(6, 0.5));
        assert!(matches!(
            dec.score_entities(&mut tape, &store, fut, 4),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn fd_gradients_through_residual_decoder() {
        // Two residual blocks at width 16 (embed_dim 8).
        let (mut store, dec) = build(false, 8, 7);
        let fut_t = test_vec(8, 0.5);
        let ids: Vec<ParamId> = store.ids().collect();
        let mismatches = check_param_gradients(&mut store, &ids, 1e-5, 1e-3, |tape, store| {
            let fut = tape.leaf(fut_t.clone());
            let logits = dec.score_entities(tape, store, fut, 2)?;
            tape.cross_entropy_logits(logits, 3)
        })
        .unwrap();
        assert_grads_match(&mismatches);
    }

    #[test]
    fn fd_gradients_through_copy_blend() {
        let (mut store, dec) = build(true, 8, 7);
        let fut_t = test_vec(8, 0.5);
        let cur_t = test_vec(8, 0.9);
        let mask = vec![true, false, true, false, false, true, false];
        let ids: Vec<ParamId> = store.ids().collect();
        let mismatches = check_param_gradients(&mut store, &ids, 1e-5, 1e-3, |tape, store| {
            let fut = tape.leaf(fut_t.clone());
            let cur = tape.leaf(cur_t.clone());
            dec.query_loss(tape, store, fut, cur, 1, &mask, 2)
        })
        .unwrap();
        assert_grads_match(&mismatches);
    }

    #[test]
    fn empty_mask_drops_copy_term_exactly() {
        let (store, dec) = build(true, 6, 5);
        let mask = vec![false; 5];
        let mut tape = Tape::new();
        let fut = tape.leaf(test_vec(6, 0.5));
        let cur = tape.leaf(test_vec(6, 0.2));
        let p = dec
            .query_probabilities(&mut tape, &store, fut, cur, 0, &mask)
            .unwrap();
        let logits = dec.score_entities(&mut tape, &store, fut, 0).unwrap();
        let gen_p = tape.softmax_rows(logits).unwrap();
        assert_eq!(tape.value(p), tape.value(gen_p));
    }

    #[test]
    fn tiny_alpha_approaches_generation_distribution() {
        let (mut store, dec) = build(true, 6, 5);
        let a = store.lookup("decoder.copy.alpha_logit").unwrap();
        store.value_mut(a).data_mut()[0] = -50.0;
        let mask = vec![true, true, false, false, true];
        let mut tape = Tape::new();
        let fut = tape.leaf(test_vec(6, 0.5));
        let cur = tape.leaf(test_vec(6, 0.2));
        let p = dec
            .query_probabilities(&mut tape, &store, fut, cur, 0, &mask)
            .unwrap();
        let logits = dec.score_entities(&mut tape, &store, fut, 0).unwrap();
        let gen_p = tape.softmax_rows(logits).unwrap();
        for (a, b) in tape.value(p).iter().zip(tape.value(gen_p)) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn probabilities_form_a_distribution() {
        let (store, dec) = build(true, 6, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let fut_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let cur_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mask: Vec<bool> = (0..8).map(|_| rng.gen_bool(0.4)).collect();
            let fut = tape.leaf(Tensor::vector(&fut_vals));
            let cur = tape.leaf(Tensor::vector(&cur_vals));
            let p = dec
                .query_probabilities(&mut tape, &store, fut, cur, 3, &mask)
                .unwrap();
            let v = tape.value(p);
            assert!(v.iter().all(|&x| x >= 0.0));
            assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn copy_branch_sends_no_gradient_to_its_input() {
        let (mut store, dec) = build(true, 6, 5);
        // Drive alpha toward 1 so the copy branch dominates the loss.
        let a = store.lookup("decoder.copy.alpha_logit").unwrap();
        store.value_mut(a).data_mut()[0] = 8.0;
        let mask = vec![true, true, false, true, false];
        let mut tape = Tape::new();
        let fut = tape.leaf(test_vec(6, 0.5));
        let cur = tape.leaf_grad(test_vec(6, 0.2));
        let loss = dec
            .query_loss(&mut tape, &store, fut, cur, 0, &mask, 1)
            .unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(cur).iter().all(|&g| g == 0.0));
        tape.write_grads(&mut store).unwrap();
        let copy_w = store.lookup("decoder.copy.w").unwrap();
        assert!(store.grad(copy_w).iter().any(|&g| g != 0.0));
        assert!(store.grad(a).iter().any(|&g| g != 0.0));
    }

    #[test]
    fn history_mask_basics() {
        let events = vec![
            Quadruplet::new(0, 1, 3, 5),
            Quadruplet::new(0, 1, 2, 9),
            Quadruplet::new(1, 0, 4, 2),
        ];
        let idx = HistoryIndex::build(events.iter(), 6);
        assert!(idx.mask(2, 0, 100).iter().all(|&m| !m));
        let m = idx.mask(1, 0, 2);
        assert_eq!(m.iter().filter(|&&x| x).count(), 1);
        assert!(m[4]);
        // Time cutoff excludes the later event.
        let m = idx.mask(0, 1, 6);
        assert!(m[3] && !m[2]);
        let m = idx.mask(0, 1, 9);
        assert!(m[3] && m[2]);
    }

    #[test]
    fn history_mask_matches_brute_force_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let entities = 12;
        let events: Vec<Quadruplet> = (0..400)
            .map(|_| {
                Quadruplet::new(
                    rng.gen_range(0..entities),
                    rng.gen_range(0..4),
                    rng.gen_range(0..entities),
                    rng.gen_range(0..30),
                )
            })
            .collect();
        let idx = HistoryIndex::build(events.iter(), entities);
        for _ in 0..1000 {
            let e = rng.gen_range(0..entities);
            let r = rng.gen_range(0..4);
            let t_a = rng.gen_range(-1..32);
            let got = idx.mask(e, r, t_a);
            let mut want = vec![false; entities];
            for ev in &events {
                if ev.s == e && ev.r == r && ev.t <= t_a {
                    want[ev.o] = true;
                }
            }
            assert_eq!(got, want);
        }
    }
}
