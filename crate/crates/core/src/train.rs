//! Mini-batch training over both-direction queries.
//!
//! Queries are grouped by anchor time so one snapshot graph serves a
//! whole batch; encoder sequences are computed once per distinct entity
//! in the batch and shared across its queries. Each batch contributes a
//! single mean cross-entropy loss, one backward pass, and one optimizer
//! step updating encoder, head, decoder, and embedding tables jointly.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adam::{Adam, AdamConfig};
use crate::data::{time_range, with_reverses, Dataset};
use crate::decoder::HistoryIndex;
use crate::error::{Error, Result};
use crate::graph::SnapshotGraph;
use crate::model::Model;
use crate::query::{horizon, make_queries, observable_events, Query};
use crate::tape::Tape;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Shuffling seed; model initialization has its own.
    pub seed: u64,
    /// Stop after this many epochs without loss improvement; 0 disables.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig { epochs: 50, batch_size: 128, lr: 1e-3, seed: 0, patience: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStats {
    /// Mean query loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub stopped_early: bool,
    /// Sequence-cache instrumentation over the whole run.
    pub cache_lookups: usize,
    pub cache_hits: usize,
}

/// Trains `model` in place; `progress` receives (epoch, mean loss) after
/// every epoch.
pub fn train(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainStats> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("epochs and batch_size must be positive".into()));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Config(format!("invalid learning rate {}", cfg.lr)));
    }
    let mcfg = model.config().clone();
    if dataset.augmented() {
        return Err(Error::contract("training expects an unaugmented dataset"));
    }
    if dataset.num_entities != mcfg.num_entities
        || dataset.num_base_relations != mcfg.num_base_relations
    {
        return Err(Error::contract(format!(
            "dataset has {} entities / {} relations, model expects {} / {}",
            dataset.num_entities,
            dataset.num_base_relations,
            mcfg.num_entities,
            mcfg.num_base_relations
        )));
    }
    let [train_split, _, _] = dataset.splits();
    let observable =
        with_reverses(&observable_events(dataset, mcfg.dt_mode), dataset.num_base_relations);
    let history = HistoryIndex::build(observable.iter(), mcfg.num_entities);
    let delta_t =
        if mcfg.ignore_eval_times { 1 } else { horizon(dataset, mcfg.dt_mode)? };
    let min_time = time_range(train_split)
        .ok_or_else(|| Error::Dataset("empty training split".into()))?
        .0;
    let queries = make_queries(train_split, dataset.num_base_relations, delta_t, min_time)?;

    let mut by_anchor: BTreeMap<i64, Vec<Query>> = BTreeMap::new();
    for q in queries {
        by_anchor.entry(q.anchor).or_default().push(q);
    }
    let mut graphs: BTreeMap<i64, SnapshotGraph> = BTreeMap::new();
    for &anchor in by_anchor.keys() {
        graphs.insert(anchor, model.build_graph(&observable, anchor)?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.store());
    let mut stats = TrainStats {
        epoch_losses: Vec::new(),
        stopped_early: false,
        cache_lookups: 0,
        cache_hits: 0,
    };
    let mut best = f64::INFINITY;
    let mut flat_epochs = 0usize;

    for epoch in 0..cfg.epochs {
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        let mut batch_index = 0usize;
        for (&anchor, group) in by_anchor.iter_mut() {
            group.shuffle(&mut rng);
            let graph = &graphs[&anchor];
            for batch in group.chunks(cfg.batch_size) {
                let batch_loss =
                    run_batch(model, graph, &history, batch, &mut stats).map_err(|e| {
                        training_abort(model, epoch, batch_index, e)
                    })?;
                adam.step(model.store_mut()).map_err(|e| {
                    let e = Error::BadGradient(e.to_string());
                    training_abort(model, epoch, batch_index, e)
                })?;
                model.store_mut().zero_grads();
                loss_sum += batch_loss * batch.len() as f64;
                loss_count += batch.len();
                batch_index += 1;
            }
        }
        let mean_loss = loss_sum / loss_count as f64;
        stats.epoch_losses.push(mean_loss);
        progress(epoch, mean_loss);
        if mean_loss < best - 1e-9 {
            best = mean_loss;
            flat_epochs = 0;
        } else {
            flat_epochs += 1;
            if cfg.patience > 0 && flat_epochs >= cfg.patience {
                stats.stopped_early = true;
                break;
            }
        }
    }
    Ok(stats)
}

fn run_batch(
    model: &mut Model,
    graph: &SnapshotGraph,
    history: &HistoryIndex,
    batch: &[Query],
    stats: &mut TrainStats,
) -> Result<f64> {
    let mut entities: Vec<usize> = batch.iter().map(|q| q.entity).collect();
    entities.sort_unstable();
    entities.dedup();
    stats.cache_lookups += batch.len();
    stats.cache_hits += batch.len() - entities.len();

    let mut tape = Tape::new();
    let seqs = model.sequences(&mut tape, graph, &entities)?;
    let mut losses = Vec::with_capacity(batch.len());
    for q in batch {
        let slot = entities.binary_search(&q.entity).unwrap();
        let mask = history.mask(q.entity, q.relation, q.anchor);
        losses.push(model.query_loss(&mut tape, seqs[slot], q.relation, &mask, q.target)?);
    }
    let batch_loss = tape.mean_scalars(&losses)?;
    let value = tape.item(batch_loss);
    tape.backward(batch_loss)?;
    tape.write_grads(model.store_mut())?;
    Ok(value)
}

fn training_abort(model: &Model, epoch: usize, batch: usize, cause: Error) -> Error {
    let mut norms: Vec<(String, f64)> = model.store().norms();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal));
    let top: Vec<String> =
        norms.iter().take(5).map(|(n, v)| format!("{n}={v:.3e}")).collect();
    Error::Contract(format!(
        "training aborted at epoch {epoch}, batch {batch}: {cause} (largest parameter norms: {})",
        top.join(", ")
    ))
}
