//! Sequence heads: fixed-length extrapolation of an embedding series.
//!
//! Every head maps the history sequence `[|hx| x d]` (rows oldest first,
//! the offset-0 "current" embedding last) to one future embedding `[d]`.
//! The prediction horizon is not an input: each head is trained for one
//! fixed horizon, which is baked into its weights.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn;
use crate::params::{glorot, normal_init, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqHeadKind {
    Satt,
    Conv,
    Mlp,
    Lstm,
}

impl SeqHeadKind {
    pub const ALL: [SeqHeadKind; 4] =
        [SeqHeadKind::Satt, SeqHeadKind::Conv, SeqHeadKind::Mlp, SeqHeadKind::Lstm];

    pub fn name(self) -> &'static str {
        match self {
            SeqHeadKind::Satt => "satt",
            SeqHeadKind::Conv => "conv",
            SeqHeadKind::Mlp => "mlp",
            SeqHeadKind::Lstm => "lstm",
        }
    }
}

impl fmt::Display for SeqHeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SeqHeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<SeqHeadKind> {
        match s {
            "satt" => Ok(SeqHeadKind::Satt),
            "conv" => Ok(SeqHeadKind::Conv),
            "mlp" => Ok(SeqHeadKind::Mlp),
            "lstm" => Ok(SeqHeadKind::Lstm),
            other => Err(Error::Config(format!(
                "unknown sequence head `{other}` (expected satt, conv, mlp, or lstm)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeqHeadConfig {
    pub kind: SeqHeadKind,
    /// History length |hx|.
    pub seq_len: usize,
    /// Embedding width d.
    pub embed_dim: usize,
    pub satt_layers: usize,
    pub satt_heads: usize,
    pub conv_channels: usize,
    pub mlp_hidden: usize,
    /// 0 means "use embed_dim".
    pub lstm_hidden: usize,
}

impl SeqHeadConfig {
    pub fn new(kind: SeqHeadKind, seq_len: usize, embed_dim: usize) -> SeqHeadConfig {
        SeqHeadConfig {
            kind,
            seq_len,
            embed_dim,
            satt_layers: 2,
            satt_heads: 4,
            conv_channels: 8,
            mlp_hidden: 400,
            lstm_hidden: 0,
        }
    }

    fn lstm_hidden_dim(&self) -> usize {
        if self.lstm_hidden == 0 { self.embed_dim } else { self.lstm_hidden }
    }
}

struct SattLayer {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
}

enum HeadParams {
    Satt {
        pos: ParamId,
        layers: Vec<SattLayer>,
        out_w: ParamId,
        out_b: ParamId,
    },
    Conv {
        kernels: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
    Mlp {
        layers: Vec<(ParamId, ParamId)>,
    },
    Lstm {
        w_ih: ParamId,
        w_hh: ParamId,
        b: ParamId,
        out_w: ParamId,
        out_b: ParamId,
    },
}

pub struct SeqHead {
    cfg: SeqHeadConfig,
    params: HeadParams,
}

impl SeqHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: SeqHeadConfig) -> Result<SeqHead> {
        if cfg.seq_len == 0 || cfg.embed_dim == 0 {
            return Err(Error::Config("sequence head needs seq_len >= 1 and embed_dim >= 1".into()));
        }
        let n = cfg.seq_len;
        let d = cfg.embed_dim;
        let params = match cfg.kind {
            SeqHeadKind::Satt => {
                if cfg.satt_heads == 0 || d % cfg.satt_heads != 0 {
                    return Err(Error::Config(format!(
                        "embed_dim {d} must be a positive multiple of satt_heads {}",
                        cfg.satt_heads
                    )));
                }
                if cfg.satt_layers == 0 {
                    return Err(Error::Config("satt_layers must be >= 1".into()));
                }
                let dh = d / cfg.satt_heads;
                let pos = store.add("head.satt.pos", normal_init(rng, &[n, d], 0.1));
                let mut layers = Vec::with_capacity(cfg.satt_layers);
                for l in 0..cfg.satt_layers {
                    let mut wq = Vec::new();
                    let mut wk = Vec::new();
                    let mut wv = Vec::new();
                    for h in 0..cfg.satt_heads {
                        let base = format!("head.satt.layer{l}.head{h}");
                        wq.push(store.add(format!("{base}.wq"), glorot(rng, &[d, dh])));
                        wk.push(store.add(format!("{base}.wk"), glorot(rng, &[d, dh])));
                        wv.push(store.add(format!("{base}.wv"), glorot(rng, &[d, dh])));
                    }
                    let wo = store.add(format!("head.satt.layer{l}.wo"), glorot(rng, &[d, d]));
                    layers.push(SattLayer { wq, wk, wv, wo });
                }
                let out_w = store.add("head.satt.out_w", glorot(rng, &[d, d]));
                let out_b = store.add("head.satt.out_b", Tensor::zeros(&[d]));
                HeadParams::Satt { pos, layers, out_w, out_b }
            }
            SeqHeadKind::Conv => {
                if cfg.conv_channels == 0 {
                    return Err(Error::Config("conv_channels must be >= 1".into()));
                }
                let c = cfg.conv_channels;
                let kernels = store.add("head.conv.kernels", glorot(rng, &[c, 1, 3, 3]));
                let out_w = store.add("head.conv.out_w", glorot(rng, &[c * n * d, d]));
                let out_b = store.add("head.conv.out_b", Tensor::zeros(&[d]));
                HeadParams::Conv { kernels, out_w, out_b }
            }
            SeqHeadKind::Mlp => {
                if cfg.mlp_hidden == 0 {
                    return Err(Error::Config("mlp_hidden must be >= 1".into()));
                }
                let dims = [n * d, cfg.mlp_hidden, d];
                let mut layers = Vec::new();
                for (i, w) in dims.windows(2).enumerate() {
                    let wid = store.add(format!("head.mlp.layer{i}.w"), glorot(rng, &[w[0], w[1]]));
                    let bid = store.add(format!("head.mlp.layer{i}.b"), Tensor::zeros(&[w[1]]));
                    layers.push((wid, bid));
                }
                HeadParams::Mlp { layers }
            }
            SeqHeadKind::Lstm => {
                let hidden = cfg.lstm_hidden_dim();
                let w_ih = store.add("head.lstm.w_ih", glorot(rng, &[d, 4 * hidden]));
                let w_hh = store.add("head.lstm.w_hh", glorot(rng, &[hidden, 4 * hidden]));
                let b = store.add("head.lstm.b", Tensor::zeros(&[4 * hidden]));
                let out_w = store.add("head.lstm.out_w", glorot(rng, &[hidden, d]));
                let out_b = store.add("head.lstm.out_b", Tensor::zeros(&[d]));
                HeadParams::Lstm { w_ih, w_hh, b, out_w, out_b }
            }
        };
        Ok(SeqHead { cfg, params })
    }

    /// A multilayer perceptron head with explicit hidden widths; an empty
    /// list gives a single dense layer. Used where a hand-constructed
    /// shape is needed.
    pub fn mlp_custom(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        seq_len: usize,
        embed_dim: usize,
        hidden: &[usize],
    ) -> Result<SeqHead> {
        let mut cfg = SeqHeadConfig::new(SeqHeadKind::Mlp, seq_len, embed_dim);
        cfg.mlp_hidden = hidden.first().copied().unwrap_or(1);
        let mut dims = vec![seq_len * embed_dim];
        dims.extend_from_slice(hidden);
        dims.push(embed_dim);
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wid = store.add(format!("head.mlp.layer{i}.w"), glorot(rng, &[w[0], w[1]]));
            let bid = store.add(format!("head.mlp.layer{i}.b"), Tensor::zeros(&[w[1]]));
            layers.push((wid, bid));
        }
        Ok(SeqHead { cfg, params: HeadParams::Mlp { layers } })
    }

    pub fn config(&self) -> &SeqHeadConfig {
        &self.cfg
    }

    pub fn kind(&self) -> SeqHeadKind {
        self.cfg.kind
    }

    fn check_input(&self, tape: &Tape, seq: Var) -> Result<()> {
        let shape = tape.shape(seq);
        if shape != [self.cfg.seq_len, self.cfg.embed_dim] {
            return Err(Error::dim(
                "predict_future",
                format!(
                    "expected [{} x {}], got {shape:?}",
                    self.cfg.seq_len, self.cfg.embed_dim
                ),
            ));
        }
        Ok(())
    }

    /// Extrapolates the history sequence to the future embedding `[d]`.
    pub fn predict_future(&self, tape: &mut Tape, store: &ParamStore, seq: Var) -> Result<Var> {
        self.check_input(tape, seq)?;
        match &self.params {
            HeadParams::Satt { .. } => {
                let (reps, _) = self.satt_encode(tape, store, seq)?;
                let last = tape.row(reps, self.cfg.seq_len - 1)?;
                let HeadParams::Satt { out_w, out_b, .. } = &self.params else { unreachable!() };
                let w = tape.param(store, *out_w);
                let b = tape.param(store, *out_b);
                nn::affine_vec(tape, last, w, Some(b))
            }
            HeadParams::Conv { kernels, out_w, out_b } => {
                let image = tape.reshape(seq, &[1, self.cfg.seq_len, self.cfg.embed_dim])?;
                let k = tape.param(store, *kernels);
                let conv = tape.conv2d_3x3(image, k)?;
                let act = tape.relu(conv)?;
                let flat_len = self.cfg.conv_channels * self.cfg.seq_len * self.cfg.embed_dim;
                let flat = tape.reshape(act, &[flat_len])?;
                let w = tape.param(store, *out_w);
                let b = tape.param(store, *out_b);
                nn::affine_vec(tape, flat, w, Some(b))
            }
            HeadParams::Mlp { layers } => {
                let mut x = tape.reshape(seq, &[self.cfg.seq_len * self.cfg.embed_dim])?;
                for (i, (wid, bid)) in layers.iter().enumerate() {
                    let w = tape.param(store, *wid);
                    let b = tape.param(store, *bid);
                    x = nn::affine_vec(tape, x, w, Some(b))?;
                    if i + 1 < layers.len() {
                        x = tape.relu(x)?;
                    }
                }
                Ok(x)
            }
            HeadParams::Lstm { w_ih, w_hh, b, out_w, out_b } => {
                let hidden = self.cfg.lstm_hidden_dim();
                let w_ih = tape.param(store, *w_ih);
                let w_hh = tape.param(store, *w_hh);
                let b = tape.param(store, *b);
                let mut h = tape.leaf(Tensor::zeros(&[hidden]));
                let mut c = tape.leaf(Tensor::zeros(&[hidden]));
                for i in 0..self.cfg.seq_len {
                    let x = tape.row(seq, i)?;
                    let (h2, c2) = nn::lstm_cell(tape, x, h, c, w_ih, w_hh, b)?;
                    h = h2;
                    c = c2;
                }
                let w = tape.param(store, *out_w);
                let bo = tape.param(store, *out_b);
                nn::affine_vec(tape, h, w, Some(bo))
            }
        }
    }

    /// Self-attention encoder stack, exposed for inspection: returns the
    /// per-position representations `[|hx| x d]` after all layers plus the
    /// attention matrix of every (layer, head).
    pub fn satt_encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seq: Var,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape, seq)?;
        let HeadParams::Satt { pos, layers, .. } = &self.params else {
            return Err(Error::contract("satt_encode on a non-SATT head"));
        };
        let dh = self.cfg.embed_dim / self.cfg.satt_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos_v = tape.param(store, *pos);
        let mut x = tape.add(seq, pos_v)?;
        let mut attn_mats = Vec::new();
        for layer in layers {
            let mut heads = Vec::with_capacity(self.cfg.satt_heads);
            for h in 0..self.cfg.satt_heads {
                let wq = tape.param(store, layer.wq[h]);
                let wk = tape.param(store, layer.wk[h]);
                let wv = tape.param(store, layer.wv[h]);
                let q = tape.matmul(x, wq)?;
                let k = tape.matmul(x, wk)?;
                let v = tape.matmul(x, wv)?;
                let kt = tape.transpose(k)?;
                let logits = tape.matmul(q, kt)?;
                let scaled = tape.scale(logits, scale)?;
                let attn = tape.softmax_rows(scaled)?;
                heads.push(tape.matmul(attn, v)?);
                attn_mats.push(attn);
            }
            let concat = tape.concat_cols(&heads)?;
            let wo = tape.param(store, layer.wo);
            let proj = tape.matmul(concat, wo)?;
            x = tape.add(x, proj)?;
        }
        Ok((x, attn_mats))
    }
}
