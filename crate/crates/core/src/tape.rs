//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order; [`Tape::backward`] replays the record in reverse, accumulating
//! vector-Jacobian products into per-node gradient buffers. Tapes are
//! single-use: a second `backward` call is an error.
//!
//! Parameters live outside the tape in a [`ParamStore`] and are leased onto
//! it once per pass with [`Tape::param`]; [`Tape::write_grads`] moves the
//! accumulated leaf gradients back into the store after backward.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddConst(usize),
    /// y = s * x with `s` a one-element node.
    ScaleBy { x: usize, s: usize },
    MatMul(usize, usize),
    MatVec(usize, usize),
    VecMat(usize, usize),
    Transpose(usize),
    Sum(usize),
    StackRows(Vec<usize>),
    ConcatVec(Vec<usize>),
    ConcatCols(Vec<usize>),
    RowOf(usize, usize),
    RowGather(usize, Vec<usize>),
    Reshape(usize),
    SoftmaxRows(usize),
    MaskedSoftmax(usize, Vec<bool>),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Cos(usize),
    Conv3x3 { input: usize, kernels: usize },
    CrossEntropyLogits { logits: usize, target: usize },
    NegLogIndex { probs: usize, index: usize },
    Detach(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Recording tape for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leased: HashMap<ParamId, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// True once `backward` has run.
    pub fn consumed(&self) -> bool {
        self.consumed
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.nodes[v.0].shape.clone(), self.nodes[v.0].value.clone())
            .expect("node shape consistent")
    }

    /// Constant input; excluded from differentiation.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), false, Op::Leaf { param: None })
    }

    /// Differentiable input that is not store-backed (tests, probes).
    pub fn leaf_grad(&mut self, t: Tensor) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf { param: None })
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Leases a store parameter onto the tape. Repeated leases of the same
    /// parameter return the same node, so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.leased.get(&id) {
            return v;
        }
        let t = store.value(id);
        let v = self.push_unchecked(
            t.shape().to_vec(),
            t.data().to_vec(),
            true,
            Op::Leaf { param: Some(id) },
        );
        self.leased.insert(id, v);
        v
    }

    fn push_unchecked(
        &mut self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node { shape, value, grad, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
    ) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = op_inputs(&op).iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.push_unchecked(shape, value, requires_grad, op))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            ));
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x + y);
        self.push("add", self.nodes[a.0].shape.clone(), value, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x - y);
        self.push("sub", self.nodes[a.0].shape.clone(), value, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let value = zip_map(&self.nodes[a.0].value, &self.nodes[b.0].value, |x, y| x * y);
        self.push("mul", self.nodes[a.0].shape.clone(), value, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        self.push("scale", self.nodes[a.0].shape.clone(), value, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        self.push("add_const", self.nodes[a.0].shape.clone(), value, Op::AddConst(a.0))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.nodes[s.0].value.len() != 1 {
            return Err(Error::dim("scale_by", "scale factor must be a scalar node"));
        }
        let sv = self.nodes[s.0].value[0];
        let value = self.nodes[x.0].value.iter().map(|v| v * sv).collect();
        self.push("scale_by", self.nodes[x.0].shape.clone(), value, Op::ScaleBy { x: x.0, s: s.0 })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let ([m, k], [k2, n]) = (dims2("matmul", &na.shape)?, dims2("matmul", &nb.shape)?);
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut value = vec![0.0; m * n];
        matmul_nn(&na.value, &nb.value, m, k, n, &mut value);
        self.push("matmul", vec![m, n], value, Op::MatMul(a.0, b.0))
    }

    /// `[M×K] · [K] -> [M]`
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (nm, nv) = (&self.nodes[m.0], &self.nodes[v.0]);
        let [rows, k] = dims2("matvec", &nm.shape)?;
        if nv.shape != [k] {
            return Err(Error::dim("matvec", format!("[{rows}x{k}] * {:?}", nv.shape)));
        }
        let value = (0..rows)
            .map(|i| dot(&nm.value[i * k..(i + 1) * k], &nv.value))
            .collect();
        self.push("matvec", vec![rows], value, Op::MatVec(m.0, v.0))
    }

    /// `[K] · [K×N] -> [N]` (row vector times matrix)
    pub fn vecmat(&mut self, v: Var, m: Var) -> Result<Var> {
        let (nv, nm) = (&self.nodes[v.0], &self.nodes[m.0]);
        let [k, n] = dims2("vecmat", &nm.shape)?;
        if nv.shape != [k] {
            return Err(Error::dim("vecmat", format!("{:?} * [{k}x{n}]", nv.shape)));
        }
        let mut value = vec![0.0; n];
        for (kk, &vk) in nv.value.iter().enumerate() {
            axpy(vk, &nm.value[kk * n..(kk + 1) * n], &mut value);
        }
        self.push("vecmat", vec![n], value, Op::VecMat(v.0, m.0))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let na = &self.nodes[a.0];
        let [m, n] = dims2("transpose", &na.shape)?;
        let mut value = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                value[j * m + i] = na.value[i * n + j];
            }
        }
        self.push("transpose", vec![n, m], value, Op::Transpose(a.0))
    }

    /// Sums all elements to a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.nodes[a.0].value.iter().sum();
        self.push("sum", vec![], vec![total], Op::Sum(a.0))
    }

    // ── structure ───────────────────────────────────────────────────────

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(Error::dim("stack_rows", "no rows"));
        }
        let d = vec_len("stack_rows", &self.nodes[rows[0].0].shape)?;
        let mut value = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if vec_len("stack_rows", &self.nodes[r.0].shape)? != d {
                return Err(Error::dim("stack_rows", "row lengths differ"));
            }
            value.extend_from_slice(&self.nodes[r.0].value);
        }
        let ids = rows.iter().map(|r| r.0).collect();
        self.push("stack_rows", vec![rows.len(), d], value, Op::StackRows(ids))
    }

    /// Concatenates tensors (flattened) into one vector.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_vec", "no parts"));
        }
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let ids = parts.iter().map(|p| p.0).collect();
        let n = value.len();
        self.push("concat_vec", vec![n], value, Op::ConcatVec(ids))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("concat_cols", "no parts"));
        }
        let [rows, _] = dims2("concat_cols", &self.nodes[parts[0].0].shape)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let [r, c] = dims2("concat_cols", &self.nodes[p.0].shape)?;
            if r != rows {
                return Err(Error::dim("concat_cols", "row counts differ"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut value = vec![0.0; rows * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            for i in 0..rows {
                value[i * total + off..i * total + off + w]
                    .copy_from_slice(&self.nodes[p.0].value[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ids = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", vec![rows, total], value, Op::ConcatCols(ids))
    }

    /// Extracts row `i` of a matrix as a vector.
    pub fn row(&mut self, m: Var, i: usize) -> Result<Var> {
        let [rows, cols] = dims2("row", &self.nodes[m.0].shape)?;
        if i >= rows {
            return Err(Error::Index { what: "row", index: i, bound: rows });
        }
        let value = self.nodes[m.0].value[i * cols..(i + 1) * cols].to_vec();
        self.push("row", vec![cols], value, Op::RowOf(m.0, i))
    }

    /// Gathers rows of a matrix into a new matrix; indices may repeat.
    pub fn gather_rows(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let [rows, cols] = dims2("gather_rows", &self.nodes[m.0].shape)?;
        let mut value = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::Index { what: "gather_rows", index: i, bound: rows });
            }
            value.extend_from_slice(&self.nodes[m.0].value[i * cols..(i + 1) * cols]);
        }
        self.push(
            "gather_rows",
            vec![indices.len(), cols],
            value,
            Op::RowGather(m.0, indices.to_vec()),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].value.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {:?}", self.nodes[a.0].shape, shape),
            ));
        }
        let value = self.nodes[a.0].value.clone();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(a.0))
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// Row-wise softmax of a matrix, or of a single vector. Stabilized by
    /// subtracting the row maximum before exponentiation.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let na = &self.nodes[a.0];
        let (rows, cols) = match na.shape.len() {
            1 => (1, na.shape[0]),
            2 => (na.shape[0], na.shape[1]),
            _ => return Err(Error::dim("softmax_rows", format!("rank {} input", na.shape.len()))),
        };
        if cols == 0 {
            return Err(Error::dim("softmax_rows", "empty rows"));
        }
        let mut value = vec![0.0; rows * cols];
        for i in 0..rows {
            let row = &na.value[i * cols..(i + 1) * cols];
            softmax_into(row, &mut value[i * cols..(i + 1) * cols]);
        }
        self.push("softmax_rows", na.shape.clone(), value, Op::SoftmaxRows(a.0))
    }

    /// Softmax over the unmasked entries of a vector; masked entries get
    /// probability exactly zero. At least one entry must be unmasked.
    pub fn masked_softmax(&mut self, logits: Var, mask: &[bool]) -> Result<Var> {
        let nl = &self.nodes[logits.0];
        let n = vec_len("masked_softmax", &nl.shape)?;
        if mask.len() != n {
            return Err(Error::dim("masked_softmax", "mask length mismatch"));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::contract("masked_softmax: all entries masked"));
        }
        let mut max = f64::NEG_INFINITY;
        for (l, &m) in nl.value.iter().zip(mask) {
            if m && *l > max {
                max = *l;
            }
        }
        let mut value = vec![0.0; n];
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] {
                let e = (nl.value[i] - max).exp();
                value[i] = e;
                total += e;
            }
        }
        value.iter_mut().for_each(|v| *v /= total);
        self.push(
            "masked_softmax",
            nl.shape.clone(),
            value,
            Op::MaskedSoftmax(logits.0, mask.to_vec()),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let value = self.nodes[a.0]
            .value
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("leaky_relu", shape, value, Op::LeakyRelu(a.0, slope))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| sigmoid(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("sigmoid", shape, value, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("tanh", shape, value, Op::Tanh(a.0))
    }

    pub fn cos(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.iter().map(|&x| x.cos()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push("cos", shape, value, Op::Cos(a.0))
    }

    // ── fused ops ───────────────────────────────────────────────────────

    /// Zero-padded 3x3 cross-correlation: input `[Cin×H×W]`, kernels
    /// `[Cout×Cin×3×3]`, output `[Cout×H×W]`.
    pub fn conv2d_3x3(&mut self, input: Var, kernels: Var) -> Result<Var> {
        let (ni, nk) = (&self.nodes[input.0], &self.nodes[kernels.0]);
        let [cin, h, w] = match ni.shape[..] {
            [c, h, w] => [c, h, w],
            _ => return Err(Error::dim("conv2d_3x3", format!("input shape {:?}", ni.shape))),
        };
        let [cout, cin2, kh, kw] = match nk.shape[..] {
            [o, i, kh, kw] => [o, i, kh, kw],
            _ => return Err(Error::dim("conv2d_3x3", format!("kernel shape {:?}", nk.shape))),
        };
        if kh != 3 || kw != 3 {
            return Err(Error::dim("conv2d_3x3", format!("kernel must be 3x3, got {kh}x{kw}")));
        }
        if cin2 != cin {
            return Err(Error::dim("conv2d_3x3", format!("channels {cin} vs {cin2}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::dim("conv2d_3x3", "empty spatial dims"));
        }
        let mut value = vec![0.0; cout * h * w];
        conv3x3_forward(&ni.value, &nk.value, cin, h, w, cout, &mut value);
        self.push(
            "conv2d_3x3",
            vec![cout, h, w],
            value,
            Op::Conv3x3 { input: input.0, kernels: kernels.0 },
        )
    }

    /// `-log softmax(logits)[target]`, computed with log-sum-exp
    /// stabilization. `logits` must be a vector.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var> {
        let nl = &self.nodes[logits.0];
        let n = vec_len("cross_entropy_logits", &nl.shape)?;
        if target >= n {
            return Err(Error::Index { what: "cross_entropy_logits target", index: target, bound: n });
        }
        let max = nl.value.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + nl.value.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let loss = lse - nl.value[target];
        self.push(
            "cross_entropy_logits",
            vec![],
            vec![loss],
            Op::CrossEntropyLogits { logits: logits.0, target },
        )
    }

    /// `-ln probs[index]` for a probability vector.
    pub fn neg_log_index(&mut self, probs: Var, index: usize) -> Result<Var> {
        let np = &self.nodes[probs.0];
        let n = vec_len("neg_log_index", &np.shape)?;
        if index >= n {
            return Err(Error::Index { what: "neg_log_index", index, bound: n });
        }
        let loss = -np.value[index].ln();
        self.push("neg_log_index", vec![], vec![loss], Op::NegLogIndex { probs: probs.0, index })
    }

    /// Copies the value and blocks gradient flow to the source.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        let shape = self.nodes[a.0].shape.clone();
        // A detached node never requires grad regardless of its source.
        Ok(self.push_unchecked(shape, value, false, Op::Detach(a.0)))
    }

    // ── composite helpers ───────────────────────────────────────────────

    /// Elementwise mean of same-shape tensors.
    pub fn mean_vars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::dim("mean_vars", "no parts"));
        }
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        self.scale(acc, 1.0 / parts.len() as f64)
    }

    /// Mean of scalar nodes.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let cat = self.concat_vec(parts)?;
        let total = self.sum(cat)?;
        self.scale(total, 1.0 / parts.len() as f64)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar `loss`. Single use: the second call on
    /// any tape returns [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;

        let mut grads: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        grads[loss.0][0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[i]);
            self.propagate(i, &g, &mut grads);
            grads[i] = g;
        }

        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if !g.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            node.grad = g;
        }
        Ok(())
    }

    /// Adds the gradients of every leased parameter into the store. Call
    /// after `backward`.
    pub fn write_grads(&self, store: &mut ParamStore) -> Result<()> {
        if !self.consumed {
            return Err(Error::contract("write_grads before backward"));
        }
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                store.accumulate_grad(id, &node.grad);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[i];
        let needs = |idx: usize| self.nodes[idx].requires_grad;
        match &node.op {
            Op::Leaf { .. } | Op::Detach(_) => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    axpy(1.0, g, &mut grads[*a]);
                }
                if needs(*b) {
                    axpy(1.0, g, &mut grads[*b]);
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    axpy(1.0, g, &mut grads[*a]);
                }
                if needs(*b) {
                    axpy(-1.0, g, &mut grads[*b]);
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let bv = &self.nodes[*b].value;
                    for (ga, (gi, bi)) in grads[*a].iter_mut().zip(g.iter().zip(bv)) {
                        *ga += gi * bi;
                    }
                }
                if needs(*b) {
                    let av = &self.nodes[*a].value;
                    for (gb, (gi, ai)) in grads[*b].iter_mut().zip(g.iter().zip(av)) {
                        *gb += gi * ai;
                    }
                }
            }
            Op::Scale(a, c) => {
                if needs(*a) {
                    axpy(*c, g, &mut grads[*a]);
                }
            }
            Op::AddConst(a) => {
                if needs(*a) {
                    axpy(1.0, g, &mut grads[*a]);
                }
            }
            Op::ScaleBy { x, s } => {
                let sv = self.nodes[*s].value[0];
                if needs(*x) {
                    axpy(sv, g, &mut grads[*x]);
                }
                if needs(*s) {
                    grads[*s][0] += dot(g, &self.nodes[*x].value);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                let n = self.nodes[*b].shape[1];
                if needs(*a) {
                    matmul_nt(g, &self.nodes[*b].value, m, n, k, &mut grads[*a]);
                }
                if needs(*b) {
                    matmul_tn(&self.nodes[*a].value, g, m, k, n, &mut grads[*b]);
                }
            }
            Op::MatVec(mv, v) => {
                let (rows, k) = (self.nodes[*mv].shape[0], self.nodes[*mv].shape[1]);
                if needs(*mv) {
                    let vv = &self.nodes[*v].value;
                    for i in 0..rows {
                        axpy(g[i], vv, &mut grads[*mv][i * k..(i + 1) * k]);
                    }
                }
                if needs(*v) {
                    let mvv = &self.nodes[*mv].value;
                    for i in 0..rows {
                        axpy(g[i], &mvv[i * k..(i + 1) * k], &mut grads[*v]);
                    }
                }
            }
            Op::VecMat(v, mv) => {
                let (k, n) = (self.nodes[*mv].shape[0], self.nodes[*mv].shape[1]);
                if needs(*v) {
                    let mvv = &self.nodes[*mv].value;
                    for kk in 0..k {
                        grads[*v][kk] += dot(g, &mvv[kk * n..(kk + 1) * n]);
                    }
                }
                if needs(*mv) {
                    let vv = &self.nodes[*v].value;
                    for kk in 0..k {
                        axpy(vv[kk], g, &mut grads[*mv][kk * n..(kk + 1) * n]);
                    }
                }
            }
            Op::Transpose(a) => {
                if needs(*a) {
                    let (m, n) = (self.nodes[*a].shape[0], self.nodes[*a].shape[1]);
                    let ga = &mut grads[*a];
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if needs(*a) {
                    let gv = g[0];
                    grads[*a].iter_mut().for_each(|x| *x += gv);
                }
            }
            Op::StackRows(rows) => {
                let d = node.shape[1];
                for (r, &id) in rows.iter().enumerate() {
                    if needs(id) {
                        axpy(1.0, &g[r * d..(r + 1) * d], &mut grads[id]);
                    }
                }
            }
            Op::ConcatVec(parts) => {
                let mut off = 0;
                for &id in parts {
                    let len = self.nodes[id].value.len();
                    if needs(id) {
                        axpy(1.0, &g[off..off + len], &mut grads[id]);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for &id in parts {
                    let w = self.nodes[id].shape[1];
                    if needs(id) {
                        for i in 0..rows {
                            axpy(
                                1.0,
                                &g[i * total + off..i * total + off + w],
                                &mut grads[id][i * w..(i + 1) * w],
                            );
                        }
                    }
                    off += w;
                }
            }
            Op::RowOf(m, i) => {
                if needs(*m) {
                    let cols = self.nodes[*m].shape[1];
                    axpy(1.0, g, &mut grads[*m][i * cols..(i + 1) * cols]);
                }
            }
            Op::RowGather(m, indices) => {
                if needs(*m) {
                    let cols = self.nodes[*m].shape[1];
                    for (r, &i) in indices.iter().enumerate() {
                        axpy(1.0, &g[r * cols..(r + 1) * cols], &mut grads[*m][i * cols..(i + 1) * cols]);
                    }
                }
            }
            Op::Reshape(a) => {
                if needs(*a) {
                    axpy(1.0, g, &mut grads[*a]);
                }
            }
            Op::SoftmaxRows(a) => {
                if needs(*a) {
                    let cols = *node.shape.last().unwrap();
                    let rows = node.value.len() / cols;
                    for i in 0..rows {
                        let y = &node.value[i * cols..(i + 1) * cols];
                        let gr = &g[i * cols..(i + 1) * cols];
                        let inner = dot(gr, y);
                        let ga = &mut grads[*a][i * cols..(i + 1) * cols];
                        for j in 0..cols {
                            ga[j] += y[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(a, _mask) => {
                if needs(*a) {
                    // Masked entries have y = 0, so the softmax VJP already
                    // sends them zero gradient.
                    let y = &node.value;
                    let inner = dot(g, y);
                    let ga = &mut grads[*a];
                    for j in 0..y.len() {
                        ga[j] += y[j] * (g[j] - inner);
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                if needs(*a) {
                    let xv = &self.nodes[*a].value;
                    for (ga, (gi, xi)) in grads[*a].iter_mut().zip(g.iter().zip(xv)) {
                        *ga += gi * if *xi > 0.0 { 1.0 } else { *slope };
                    }
                }
            }
            Op::Sigmoid(a) => {
                if needs(*a) {
                    for (ga, (gi, yi)) in grads[*a].iter_mut().zip(g.iter().zip(&node.value)) {
                        *ga += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Tanh(a) => {
                if needs(*a) {
                    for (ga, (gi, yi)) in grads[*a].iter_mut().zip(g.iter().zip(&node.value)) {
                        *ga += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Cos(a) => {
                if needs(*a) {
                    let xv = &self.nodes[*a].value;
                    for (ga, (gi, xi)) in grads[*a].iter_mut().zip(g.iter().zip(xv)) {
                        *ga += gi * -xi.sin();
                    }
                }
            }
            Op::Conv3x3 { input, kernels } => {
                let [cin, h, w] = match self.nodes[*input].shape[..] {
                    [c, h, w] => [c, h, w],
                    _ => unreachable!(),
                };
                let cout = self.nodes[*kernels].shape[0];
                if needs(*input) {
                    conv3x3_backward_input(g, &self.nodes[*kernels].value, cin, h, w, cout, &mut grads[*input]);
                }
                if needs(*kernels) {
                    conv3x3_backward_kernels(g, &self.nodes[*input].value, cin, h, w, cout, &mut grads[*kernels]);
                }
            }
            Op::CrossEntropyLogits { logits, target } => {
                if needs(*logits) {
                    let lv = &self.nodes[*logits].value;
                    let gl = &mut grads[*logits];
                    let mut sm = vec![0.0; lv.len()];
                    softmax_into(lv, &mut sm);
                    let gv = g[0];
                    for j in 0..lv.len() {
                        let ind = if j == *target { 1.0 } else { 0.0 };
                        gl[j] += gv * (sm[j] - ind);
                    }
                }
            }
            Op::NegLogIndex { probs, index } => {
                if needs(*probs) {
                    let p = self.nodes[*probs].value[*index];
                    grads[*probs][*index] += -g[0] / p;
                }
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<usize> {
    match op {
        Op::Leaf { .. } => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) | Op::MatVec(a, b) | Op::VecMat(a, b) => {
            vec![*a, *b]
        }
        Op::ScaleBy { x, s } => vec![*x, *s],
        Op::Conv3x3 { input, kernels } => vec![*input, *kernels],
        Op::Scale(a, _)
        | Op::AddConst(a)
        | Op::Transpose(a)
        | Op::Sum(a)
        | Op::RowOf(a, _)
        | Op::RowGather(a, _)
        | Op::Reshape(a)
        | Op::SoftmaxRows(a)
        | Op::MaskedSoftmax(a, _)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::Tanh(a)
        | Op::Cos(a)
        | Op::Detach(a) => vec![*a],
        Op::CrossEntropyLogits { logits, .. } => vec![*logits],
        Op::NegLogIndex { probs, .. } => vec![*probs],
        Op::StackRows(v) | Op::ConcatVec(v) | Op::ConcatCols(v) => v.clone(),
    }
}

// ── numeric kernels ─────────────────────────────────────────────────────

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<[usize; 2]> {
    match shape {
        [m, n] => Ok([*m, *n]),
        _ => Err(Error::dim(op, format!("expected rank 2, got {shape:?}"))),
    }
}

fn vec_len(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape {
        [n] => Ok(*n),
        _ => Err(Error::dim(op, format!("expected rank 1, got {shape:?}"))),
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out += A[m×k] · B[k×n]`
fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in arow.iter().enumerate() {
            axpy(aik, &b[kk * n..(kk + 1) * n], orow);
        }
    }
}

/// `out += A[m×n] · B^T` where `B` is `[k×n]`; result `[m×k]`.
fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for kk in 0..k {
            out[i * k + kk] += dot(arow, &b[kk * n..(kk + 1) * n]);
        }
    }
}

/// `out += A^T · B` where `A` is `[m×k]`, `B` is `[m×n]`; result `[k×n]`.
fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            axpy(a[i * k + kk], brow, &mut out[kk * n..(kk + 1) * n]);
        }
    }
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        let e = (l - max).exp();
        *o = e;
        total += e;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv3x3_forward(input: &[f64], kernels: &[f64], cin: usize, h: usize, w: usize, cout: usize, out: &mut [f64]) {
    for o in 0..cout {
        for i in 0..cin {
            let k = &kernels[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            let plane = &input[i * h * w..(i + 1) * h * w];
            let oplane = &mut out[o * h * w..(o + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            acc += plane[sy as usize * w + sx as usize] * k[dy * 3 + dx];
                        }
                    }
                    oplane[y * w + x] += acc;
                }
            }
        }
    }
}

fn conv3x3_backward_input(g: &[f64], kernels: &[f64], cin: usize, h: usize, w: usize, cout: usize, gin: &mut [f64]) {
    for o in 0..cout {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let k = &kernels[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            let giplane = &mut gin[i * h * w..(i + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let gv = gplane[y * w + x];
                    if gv == 0.0 {
                        continue;
                    }
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            giplane[sy as usize * w + sx as usize] += gv * k[dy * 3 + dx];
                        }
                    }
                }
            }
        }
    }
}

fn conv3x3_backward_kernels(g: &[f64], input: &[f64], cin: usize, h: usize, w: usize, cout: usize, gk: &mut [f64]) {
    for o in 0..cout {
        let gplane = &g[o * h * w..(o + 1) * h * w];
        for i in 0..cin {
            let plane = &input[i * h * w..(i + 1) * h * w];
            let gkern = &mut gk[(o * cin + i) * 9..(o * cin + i) * 9 + 9];
            for y in 0..h {
                for x in 0..w {
                    let gv = gplane[y * w + x];
                    if gv == 0.0 {
                        continue;
                    }
                    for dy in 0..3usize {
                        let sy = y as isize + dy as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for dx in 0..3usize {
                            let sx = x as isize + dx as isize - 1;
                            if sx < 0 || sx >= w as isize {
                                continue;
                            }
                            gkern[dy * 3 + dx] += gv * plane[sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
}
