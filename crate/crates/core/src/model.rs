//! The assembled forecasting model and its checkpoint format.
//!
//! A model bundles the snapshot encoder, one sequence head, and the
//! entity decoder over a single parameter store, so one optimizer step
//! updates everything jointly. Checkpoints are a versioned binary
//! container: magic header, flat key-value config echo, the edge-type
//! grouping, then every parameter tensor shape-prefixed as little-endian
//! doubles. The loader rebuilds the model from the embedded config and
//! rejects version or shape mismatches.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Quadruplet;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoder::{EdgeTypeGrouping, Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::graph::{HistorySpec, SnapshotGraph};
use crate::params::ParamStore;
use crate::query::DtMode;
use crate::seqhead::{SeqHead, SeqHeadConfig, SeqHeadKind};
use crate::tape::{Tape, Var};

const MAGIC: &[u8; 8] = b"TKGCASTM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub num_entities: usize,
    pub num_base_relations: usize,
    pub embed_dim: usize,
    pub time_dim: usize,
    pub enc_heads: usize,
    pub enc_layers: usize,
    pub neighbor_cap: usize,
    pub leaky_slope: f64,
    pub head: SeqHeadKind,
    pub satt_layers: usize,
    pub satt_heads: usize,
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    /// 0 means "use embed_dim".
    pub lstm_hidden: usize,
    /// History offsets, strictly decreasing, ending at 0.
    pub hx: Vec<i64>,
    pub window: i64,
    pub dt_mode: DtMode,
    pub copy: bool,
    pub rare_threshold: u64,
    pub decoder_blocks: usize,
    /// Evaluation anchors every query at the last observable timestamp
    /// instead of event time minus horizon; training uses horizon 1.
    pub ignore_eval_times: bool,
}

impl ModelConfig {
    pub fn new(num_entities: usize, num_base_relations: usize) -> ModelConfig {
        ModelConfig {
            num_entities,
            num_base_relations,
            embed_dim: 200,
            time_dim: 32,
            enc_heads: 4,
            enc_layers: 1,
            neighbor_cap: 64,
            leaky_slope: 0.2,
            head: SeqHeadKind::Mlp,
            satt_layers: 2,
            satt_heads: 4,
            conv_channels: 8,
            mlp_hidden: 400,
            lstm_hidden: 0,
            hx: vec![7, 3, 1, 0],
            window: 1,
            dt_mode: DtMode::TrainOnly,
            copy: true,
            rare_threshold: 10,
            decoder_blocks: 2,
            ignore_eval_times: false,
        }
    }

    pub fn num_relation_types(&self) -> usize {
        2 * self.num_base_relations
    }

    fn to_kv(&self) -> Vec<(String, String)> {
        let hx: Vec<String> = self.hx.iter().map(|o| o.to_string()).collect();
        vec![
            ("num_entities".into(), self.num_entities.to_string()),
            ("num_base_relations".into(), self.num_base_relations.to_string()),
            ("embed_dim".into(), self.embed_dim.to_string()),
            ("time_dim".into(), self.time_dim.to_string()),
            ("enc_heads".into(), self.enc_heads.to_string()),
            ("enc_layers".into(), self.enc_layers.to_string()),
            ("neighbor_cap".into(), self.neighbor_cap.to_string()),
            ("leaky_slope".into(), self.leaky_slope.to_string()),
            ("head".into(), self.head.name().into()),
            ("satt_layers".into(), self.satt_layers.to_string()),
            ("satt_heads".into(), self.satt_heads.to_string()),
            ("conv_channels".into(), self.conv_channels.to_string()),
            ("mlp_hidden".into(), self.mlp_hidden.to_string()),
            ("lstm_hidden".into(), self.lstm_hidden.to_string()),
            ("hx".into(), hx.join(",")),
            ("window".into(), self.window.to_string()),
            ("dt_mode".into(), self.dt_mode.name().into()),
            ("copy".into(), if self.copy { "on" } else { "off" }.into()),
            ("rare_threshold".into(), self.rare_threshold.to_string()),
            ("decoder_blocks".into(), self.decoder_blocks.to_string()),
            ("ignore_eval_times".into(), self.ignore_eval_times.to_string()),
        ]
    }

    fn from_kv(map: &BTreeMap<String, String>) -> Result<ModelConfig> {
        fn get<T: FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<T> {
            let raw = map
                .get(key)
                .ok_or_else(|| Error::Checkpoint(format!("config echo missing key '{key}'")))?;
            raw.parse().map_err(|_| {
                Error::Checkpoint(format!("config key '{key}' has invalid value '{raw}'"))
            })
        }
        let hx_raw: String = get(map, "hx")?;
        let hx = hx_raw
            .split(',')
            .map(|p| p.trim().parse::<i64>())
            .collect::<std::result::Result<Vec<i64>, _>>()
            .map_err(|_| Error::Checkpoint(format!("config key 'hx' has invalid value '{hx_raw}'")))?;
        let copy_raw: String = get(map, "copy")?;
        let copy = match copy_raw.as_str() {
            "on" => true,
            "off" => false,
            _ => {
                return Err(Error::Checkpoint(format!(
                    "config key 'copy' has invalid value '{copy_raw}'"
                )))
            }
        };
        Ok(ModelConfig {
            num_entities: get(map, "num_entities")?,
            num_base_relations: get(map, "num_base_relations")?,
            embed_dim: get(map, "embed_dim")?,
            time_dim: get(map, "time_dim")?,
            enc_heads: get(map, "enc_heads")?,
            enc_layers: get(map, "enc_layers")?,
            neighbor_cap: get(map, "neighbor_cap")?,
            leaky_slope: get(map, "leaky_slope")?,
            head: get(map, "head")?,
            satt_layers: get(map, "satt_layers")?,
            satt_heads: get(map, "satt_heads")?,
            conv_channels: get(map, "conv_channels")?,
            mlp_hidden: get(map, "mlp_hidden")?,
            lstm_hidden: get(map, "lstm_hidden")?,
            hx,
            window: get(map, "window")?,
            dt_mode: get(map, "dt_mode")?,
            copy,
            rare_threshold: get(map, "rare_threshold")?,
            decoder_blocks: get(map, "decoder_blocks")?,
            ignore_eval_times: get(map, "ignore_eval_times")?,
        })
    }
}

pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    spec: HistorySpec,
    encoder: Encoder,
    head: SeqHead,
    decoder: Decoder,
}

impl Model {
    /// Builds a fresh model; edge-type groups come from the (augmented)
    /// training events.
    pub fn new(cfg: ModelConfig, train_events: &[Quadruplet], seed: u64) -> Result<Model> {
        let grouping = EdgeTypeGrouping::from_train_events(
            train_events,
            cfg.num_relation_types(),
            cfg.rare_threshold,
        )?;
        Model::with_grouping(cfg, grouping, seed)
    }

    pub fn with_grouping(
        cfg: ModelConfig,
        grouping: EdgeTypeGrouping,
        seed: u64,
    ) -> Result<Model> {
        if grouping.num_relation_types() != cfg.num_relation_types() {
            return Err(Error::contract(format!(
                "grouping covers {} relation types, config needs {}",
                grouping.num_relation_types(),
                cfg.num_relation_types()
            )));
        }
        let spec = HistorySpec::new(cfg.hx.clone())?;
        spec.num_snapshots(cfg.window)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_cfg = EncoderConfig {
            embed_dim: cfg.embed_dim,
            time_dim: cfg.time_dim,
            num_heads: cfg.enc_heads,
            num_layers: cfg.enc_layers,
            neighbor_cap: cfg.neighbor_cap,
            leaky_slope: cfg.leaky_slope,
        };
        let encoder = Encoder::new(&mut store, &mut rng, enc_cfg, grouping, cfg.num_entities)?;
        let mut head_cfg = SeqHeadConfig::new(cfg.head, spec.len(), cfg.embed_dim);
        head_cfg.satt_layers = cfg.satt_layers;
        head_cfg.satt_heads = cfg.satt_heads;
        head_cfg.conv_channels = cfg.conv_channels;
        head_cfg.mlp_hidden = cfg.mlp_hidden;
        head_cfg.lstm_hidden = cfg.lstm_hidden;
        let head = SeqHead::new(&mut store, &mut rng, head_cfg)?;
        let mut dec_cfg =
            DecoderConfig::new(cfg.embed_dim, cfg.num_entities, cfg.num_relation_types());
        dec_cfg.num_blocks = cfg.decoder_blocks;
        dec_cfg.copy = cfg.copy;
        let decoder = Decoder::new(&mut store, &mut rng, dec_cfg)?;
        Ok(Model { cfg, store, spec, encoder, head, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn spec(&self) -> &HistorySpec {
        &self.spec
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &SeqHead {
        &self.head
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Snapshot graph over `events` anchored at `t_a`, shaped for this
    /// model's history spec.
    pub fn build_graph(&self, events: &[Quadruplet], t_a: i64) -> Result<SnapshotGraph> {
        SnapshotGraph::build(events, self.cfg.num_entities, t_a, self.cfg.window, &self.spec)
    }

    /// History sequences `[|hx|, d]`, one per requested entity.
    pub fn sequences(
        &self,
        tape: &mut Tape,
        graph: &SnapshotGraph,
        entities: &[usize],
    ) -> Result<Vec<Var>> {
        self.encoder.encode(tape, &self.store, graph, &self.spec, entities)
    }

    /// Probability vector for one query given the entity's history
    /// sequence.
    pub fn query_probabilities(
        &self,
        tape: &mut Tape,
        seq: Var,
        relation: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let future = self.head.predict_future(tape, &self.store, seq)?;
        let current = tape.row(seq, self.spec.len() - 1)?;
        self.decoder
            .query_probabilities(tape, &self.store, future, current, relation, mask)
    }

    /// Cross-entropy loss for one query given the entity's history
    /// sequence.
    pub fn query_loss(
        &self,
        tape: &mut Tape,
        seq: Var,
        relation: usize,
        mask: &[bool],
        target: usize,
    ) -> Result<Var> {
        let future = self.head.predict_future(tape, &self.store, seq)?;
        let current = tape.row(seq, self.spec.len() - 1)?;
        self.decoder
            .query_loss(tape, &self.store, future, current, relation, mask, target)
    }

    /// Writes the checkpoint; `extras` are informational key-value pairs
    /// echoed alongside the config.
    pub fn save(&self, path: &Path, extras: &[(&str, String)]) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(VERSION)?;
        let mut kv = self.cfg.to_kv();
        for (k, v) in extras {
            kv.push((k.to_string(), v.clone()));
        }
        w.write_u32::<LittleEndian>(kv.len() as u32)?;
        for (k, v) in &kv {
            write_str(&mut w, k)?;
            write_str(&mut w, v)?;
        }
        let grouping = self.encoder.grouping();
        w.write_u64::<LittleEndian>(grouping.threshold())?;
        w.write_u32::<LittleEndian>(grouping.assignments().len() as u32)?;
        for &g in grouping.assignments() {
            w.write_u32::<LittleEndian>(g as u32)?;
        }
        let ids: Vec<_> = self.store.ids().collect();
        w.write_u32::<LittleEndian>(ids.len() as u32)?;
        for id in ids {
            write_str(&mut w, self.store.name(id))?;
            let t = self.store.value(id);
            w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
            for &d in t.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in t.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "{} is not a model checkpoint",
                path.display()
            )));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let n_kv = r.read_u32::<LittleEndian>()?;
        let mut map = BTreeMap::new();
        for _ in 0..n_kv {
            let k = read_str(&mut r)?;
            let v = read_str(&mut r)?;
            map.insert(k, v);
        }
        let cfg = ModelConfig::from_kv(&map)?;
        let threshold = r.read_u64::<LittleEndian>()?;
        let n_rel = r.read_u32::<LittleEndian>()? as usize;
        let mut assignments = Vec::with_capacity(n_rel);
        for _ in 0..n_rel {
            assignments.push(r.read_u32::<LittleEndian>()? as usize);
        }
        let grouping = EdgeTypeGrouping::from_assignments(assignments, threshold)
            .map_err(|e| Error::Checkpoint(format!("invalid grouping section: {e}")))?;
        let mut model = Model::with_grouping(cfg, grouping, 0)?;
        let n_params = r.read_u32::<LittleEndian>()? as usize;
        if n_params != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint stores {n_params} tensors, model has {}",
                model.store.len()
            )));
        }
        for _ in 0..n_params {
            let name = read_str(&mut r)?;
            let rank = r.read_u32::<LittleEndian>()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let id = model.store.lookup(&name).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint tensor '{name}' has no model parameter"))
            })?;
            if model.store.value(id).shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?} in checkpoint but {:?} in model",
                    shape,
                    model.store.value(id).shape()
                )));
            }
            for v in model.store.value_mut(id).data_mut() {
                *v = r.read_f64::<LittleEndian>()?;
            }
        }
        model.store.validate_finite()?;
        Ok(model)
    }
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = r.read_u32::<LittleEndian>()? as usize;
    if len > 1 << 20 {
        return Err(Error::Checkpoint(format!("string length {len} out of range")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("non-utf8 string".into()))
}
