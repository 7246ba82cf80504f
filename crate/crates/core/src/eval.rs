//! Ranking evaluation: optimistic ranks, known-answer filtering, MRR and
//! Hits@k, and the scorers that feed them.
//!
//! Ranks are optimistic under ties: rank = 1 + number of unfiltered
//! candidates scored strictly higher than the target. The filtered
//! variant removes other entities that form a true quadruplet with the
//! query, either at the query's exact timestamp (time-aware, default) or
//! at any timestamp (static).

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::data::{time_range, with_reverses, Dataset, Quadruplet};
use crate::decoder::HistoryIndex;
use crate::error::{Error, Result};
use crate::graph::SnapshotGraph;
use crate::model::Model;
use crate::query::{horizon, make_queries, make_queries_at, observable_events, DtMode, Query};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// 1-based optimistic rank of `target` among unfiltered candidates.
pub fn rank_of(probabilities: &[f64], target: usize, filter: &[bool]) -> Result<usize> {
    if probabilities.len() != filter.len() {
        return Err(Error::dim(
            "rank_of",
            format!("{} probabilities vs {} filter flags", probabilities.len(), filter.len()),
        ));
    }
    if target >= probabilities.len() {
        return Err(Error::Index { what: "rank target", index: target, bound: probabilities.len() });
    }
    if filter[target] {
        return Err(Error::contract("rank target must not be filtered out"));
    }
    let p_t = probabilities[target];
    let better = probabilities
        .iter()
        .zip(filter)
        .filter(|&(p, &f)| !f && *p > p_t)
        .count();
    Ok(1 + better)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    /// Remove co-true answers sharing the query's exact timestamp.
    TimeAware,
    /// Remove co-true answers at any timestamp.
    Static,
}

impl FilterMode {
    pub fn name(self) -> &'static str {
        match self {
            FilterMode::TimeAware => "time-aware",
            FilterMode::Static => "static",
        }
    }
}

impl fmt::Display for FilterMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<FilterMode> {
        match s {
            "time-aware" => Ok(FilterMode::TimeAware),
            "static" => Ok(FilterMode::Static),
            other => Err(Error::Config(format!(
                "unknown filter mode '{other}' (expected time-aware or static)"
            ))),
        }
    }
}

/// True answers over all splits, keyed for filtered ranking.
pub struct FilterIndex {
    map: HashMap<(usize, usize, i64), Vec<usize>>,
    num_entities: usize,
    mode: FilterMode,
}

impl FilterIndex {
    pub fn build<'a>(
        events: impl Iterator<Item = &'a Quadruplet>,
        num_entities: usize,
        mode: FilterMode,
    ) -> FilterIndex {
        let mut map: HashMap<(usize, usize, i64), Vec<usize>> = HashMap::new();
        for e in events {
            let key = match mode {
                FilterMode::TimeAware => (e.s, e.r, e.t),
                FilterMode::Static => (e.s, e.r, 0),
            };
            map.entry(key).or_default().push(e.o);
        }
        FilterIndex { map, num_entities, mode }
    }

    /// Index over train, validation, and test of an unaugmented dataset,
    /// including reverse-direction answers.
    pub fn for_dataset(dataset: &Dataset, mode: FilterMode) -> Result<FilterIndex> {
        if dataset.augmented() {
            return Err(Error::contract("filter index expects an unaugmented dataset"));
        }
        let all: Vec<Quadruplet> = dataset.all_events().copied().collect();
        let augmented = with_reverses(&all, dataset.num_base_relations);
        Ok(FilterIndex::build(augmented.iter(), dataset.num_entities, mode))
    }

    pub fn mode(&self) -> FilterMode {
        self.mode
    }

    /// Mask of co-true answers to remove before ranking; never masks the
    /// target itself.
    pub fn mask(&self, query: &Query) -> Vec<bool> {
        let mut mask = vec![false; self.num_entities];
        let key = match self.mode {
            FilterMode::TimeAware => (query.entity, query.relation, query.event_time),
            FilterMode::Static => (query.entity, query.relation, 0),
        };
        if let Some(answers) = self.map.get(&key) {
            for &o in answers {
                mask[o] = true;
            }
        }
        mask[query.target] = false;
        mask
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub mrr_filtered: f64,
    pub h3_filtered: f64,
    pub h10_filtered: f64,
    pub mrr_raw: f64,
    pub h3_raw: f64,
    pub h10_raw: f64,
    pub n_queries: usize,
}

impl Metrics {
    /// Single-line machine-readable record.
    pub fn tsv_record(&self, split: &str, head: &str) -> String {
        format!(
            "{split}\t{head}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.mrr_filtered, self.h3_filtered, self.h10_filtered, self.mrr_raw, self.n_queries
        )
    }
}

impl fmt::Display for Metrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}{:>10}", "metric", "filtered", "raw")?;
        writeln!(f, "{:<10}{:>10.4}{:>10.4}", "MRR", self.mrr_filtered, self.mrr_raw)?;
        writeln!(f, "{:<10}{:>10.4}{:>10.4}", "Hits@3", self.h3_filtered, self.h3_raw)?;
        writeln!(f, "{:<10}{:>10.4}{:>10.4}", "Hits@10", self.h10_filtered, self.h10_raw)?;
        write!(f, "{:<10}{:>10}", "queries", self.n_queries)
    }
}

/// Anything that can turn a query into a probability vector over
/// entities.
pub trait Scorer {
    fn probabilities(&mut self, query: &Query) -> Result<Vec<f64>>;
}

/// Ranks every query raw and filtered and aggregates the metrics.
pub fn evaluate(
    scorer: &mut dyn Scorer,
    queries: &[Query],
    filter: &FilterIndex,
) -> Result<Metrics> {
    if queries.is_empty() {
        return Err(Error::Dataset("cannot evaluate an empty query set".into()));
    }
    let mut sum_rr_f = 0.0;
    let mut sum_rr_r = 0.0;
    let mut hits_f = [0usize; 2];
    let mut hits_r = [0usize; 2];
    let no_filter = vec![false; filter.num_entities];
    for q in queries {
        let p = scorer.probabilities(q)?;
        let mask = filter.mask(q);
        let rank_f = rank_of(&p, q.target, &mask)?;
        let rank_r = rank_of(&p, q.target, &no_filter)?;
        sum_rr_f += 1.0 / rank_f as f64;
        sum_rr_r += 1.0 / rank_r as f64;
        if rank_f <= 3 {
            hits_f[0] += 1;
        }
        if rank_f <= 10 {
            hits_f[1] += 1;
        }
        if rank_r <= 3 {
            hits_r[0] += 1;
        }
        if rank_r <= 10 {
            hits_r[1] += 1;
        }
    }
    let n = queries.len() as f64;
    Ok(Metrics {
        mrr_filtered: sum_rr_f / n,
        h3_filtered: hits_f[0] as f64 / n,
        h10_filtered: hits_f[1] as f64 / n,
        mrr_raw: sum_rr_r / n,
        h3_raw: hits_r[0] as f64 / n,
        h10_raw: hits_r[1] as f64 / n,
        n_queries: queries.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Split> {
        match s {
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => {
                Err(Error::Config(format!("unknown split '{other}' (expected valid or test)")))
            }
        }
    }
}

/// Both-direction queries for one held-out split. With
/// `ignore_eval_times` every query anchors at the last observable
/// timestamp; otherwise anchors are event time minus the mode's horizon.
pub fn queries_for_split(
    dataset: &Dataset,
    split: Split,
    mode: DtMode,
    ignore_eval_times: bool,
) -> Result<Vec<Query>> {
    let [train, valid, test] = dataset.splits();
    let events = match split {
        Split::Valid => valid,
        Split::Test => test,
    };
    if events.is_empty() {
        return Err(Error::Dataset(format!("cannot evaluate empty split '{split}'")));
    }
    if ignore_eval_times {
        let pool = observable_events(dataset, mode);
        let anchor = time_range(&pool)
            .ok_or_else(|| Error::Dataset("no observable events".into()))?
            .1;
        return make_queries_at(events, dataset.num_base_relations, anchor);
    }
    let dt = horizon(dataset, mode)?;
    let min_time = time_range(train)
        .ok_or_else(|| Error::Dataset("empty training split".into()))?
        .0;
    make_queries(events, dataset.num_base_relations, dt, min_time)
}

/// Scores queries with a trained model; caches one snapshot graph per
/// anchor and one encoded sequence per (entity, anchor).
pub struct ModelScorer<'a> {
    model: &'a Model,
    observable: Vec<Quadruplet>,
    history: HistoryIndex,
    graphs: HashMap<i64, SnapshotGraph>,
    seq_cache: HashMap<(usize, i64), Tensor>,
    pub cache_lookups: usize,
    pub cache_hits: usize,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a Model, dataset: &Dataset) -> Result<ModelScorer<'a>> {
        let cfg = model.config();
        if dataset.augmented() {
            return Err(Error::contract("scorer expects an unaugmented dataset"));
        }
        if dataset.num_entities != cfg.num_entities
            || dataset.num_base_relations != cfg.num_base_relations
        {
            return Err(Error::contract(format!(
                "dataset has {} entities / {} relations, model expects {} / {}",
                dataset.num_entities,
                dataset.num_base_relations,
                cfg.num_entities,
                cfg.num_base_relations
            )));
        }
        let observable = with_reverses(
            &observable_events(dataset, cfg.dt_mode),
            dataset.num_base_relations,
        );
        let history = HistoryIndex::build(observable.iter(), cfg.num_entities);
        Ok(ModelScorer {
            model,
            observable,
            history,
            graphs: HashMap::new(),
            seq_cache: HashMap::new(),
            cache_lookups: 0,
            cache_hits: 0,
        })
    }

    fn sequence(&mut self, entity: usize, anchor: i64) -> Result<Tensor> {
        self.cache_lookups += 1;
        if let Some(t) = self.seq_cache.get(&(entity, anchor)) {
            self.cache_hits += 1;
            return Ok(t.clone());
        }
        if !self.graphs.contains_key(&anchor) {
            let graph = self.model.build_graph(&self.observable, anchor)?;
            self.graphs.insert(anchor, graph);
        }
        let graph = &self.graphs[&anchor];
        let mut tape = Tape::new();
        let seq = self.model.sequences(&mut tape, graph, &[entity])?[0];
        let tensor = Tensor::new(tape.shape(seq).to_vec(), tape.value(seq).to_vec())?;
        self.seq_cache.insert((entity, anchor), tensor.clone());
        Ok(tensor)
    }
}

impl Scorer for ModelScorer<'_> {
    fn probabilities(&mut self, query: &Query) -> Result<Vec<f64>> {
        let seq_t = self.sequence(query.entity, query.anchor)?;
        let mask = self.history.mask(query.entity, query.relation, query.anchor);
        let mut tape = Tape::new();
        let seq = tape.leaf(seq_t);
        let p = self.model.query_probabilities(&mut tape, seq, query.relation, &mask)?;
        Ok(tape.value(p).to_vec())
    }
}

/// Time-blind baseline: scores by how often each object answered
/// (entity, relation) in the observable history, uniform when unseen.
///
/// Equal counts are nudged apart by a tiny entity-id term. Without it,
/// optimistic tie ranking would hand every balanced-count candidate rank
/// 1 and the baseline would score a vacuous MRR of 1.0 on any evenly
/// cycling history.
pub struct FrequencyBaseline {
    counts: HashMap<(usize, usize), Vec<f64>>,
    num_entities: usize,
}

impl FrequencyBaseline {
    pub fn new(observable: &[Quadruplet], num_entities: usize) -> FrequencyBaseline {
        let mut counts: HashMap<(usize, usize), Vec<f64>> = HashMap::new();
        for e in observable {
            counts.entry((e.s, e.r)).or_insert_with(|| vec![0.0; num_entities])[e.o] += 1.0;
        }
        FrequencyBaseline { counts, num_entities }
    }

    pub fn for_dataset(dataset: &Dataset, mode: DtMode) -> Result<FrequencyBaseline> {
        if dataset.augmented() {
            return Err(Error::contract("baseline expects an unaugmented dataset"));
        }
        let observable =
            with_reverses(&observable_events(dataset, mode), dataset.num_base_relations);
        Ok(FrequencyBaseline::new(&observable, dataset.num_entities))
    }
}

impl Scorer for FrequencyBaseline {
    fn probabilities(&mut self, query: &Query) -> Result<Vec<f64>> {
        let tie_break = |scores: Vec<f64>| {
            scores
                .into_iter()
                .enumerate()
                .map(|(c, p)| p + c as f64 * 1e-12)
                .collect()
        };
        match self.counts.get(&(query.entity, query.relation)) {
            Some(c) => {
                let total: f64 = c.iter().sum();
                Ok(tie_break(c.iter().map(|&x| x / total).collect()))
            }
            None => Ok(tie_break(vec![1.0 / self.num_entities as f64; self.num_entities])),
        }
    }
}
