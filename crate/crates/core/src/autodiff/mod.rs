//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation of one forward pass in topological
//! order. [`Tape::backward`] replays it in reverse exactly once; a second call
//! without a fresh tape is an error. Gradients are only materialized for nodes
//! that (transitively) depend on a leaf created with `requires_grad = true`,
//! so frozen parameters never receive a gradient buffer.

mod gradcheck;
pub(crate) mod kernels;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

pub use gradcheck::{central_difference, grad_check, grad_check_coords, relative_error};

/// Arithmetic precision of a run. `F32` rounds every recorded forward value
/// to single precision; storage stays `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

impl std::str::FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::InvalidArgument(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which key positions each query may attend to.
///
/// Stored as `[batch, q_len, k_len]`; it broadcasts over attention heads.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn new(batch: usize, q_len: usize, k_len: usize) -> Self {
        Self {
            batch,
            q_len,
            k_len,
            allowed: vec![false; batch * q_len * k_len],
        }
    }

    pub fn allow(&mut self, b: usize, q: usize, k: usize) {
        self.allowed[(b * self.q_len + q) * self.k_len + k] = true;
    }

    pub fn is_allowed(&self, b: usize, q: usize, k: usize) -> bool {
        self.allowed[(b * self.q_len + q) * self.k_len + k]
    }

    /// Number of keys visible from query `q` of sequence `b`.
    pub fn span(&self, b: usize, q: usize) -> usize {
        (0..self.k_len).filter(|&k| self.is_allowed(b, q, k)).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var },
    MatMulNt { a: Var, b: Var },
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    MulConst { x: Var, factor: Vec<f64> },
    Scale { x: Var, c: f64 },
    Relu { x: Var },
    Gelu { x: Var },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax { x: Var, outer: usize, len: usize, inner: usize },
    MaskedSoftmax { x: Var },
    SwapAxes12 { x: Var },
    Reshape { x: Var },
    GatherRows { table: Var, ids: Vec<usize> },
    PrependRows { prefix: Var, x: Var },
    OverwriteRows { prefix: Var, x: Var },
    DropRows { x: Var, p: usize },
    Sum { x: Var },
    Mean { x: Var },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        pad: usize,
        smoothing: f64,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Ordered record of one forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    precision: Precision,
    grad_enabled: bool,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::with_precision(Precision::F64)
    }

    pub fn with_precision(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            precision,
            grad_enabled: true,
            backward_done: false,
        }
    }

    /// A tape that never tracks gradients (inference).
    pub fn no_grad(precision: Precision) -> Self {
        Self {
            grad_enabled: false,
            ..Self::with_precision(precision)
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.push_raw(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    fn push_raw(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push_raw(value, op, requires_grad)
    }

    fn new_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("kernel produced a consistent shape")
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m×k] · [k×n] -> [m×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Self::new_tensor(vec![m, n], out), Op::MatMul { a, b }, &[a, b]))
    }

    /// `[m×k] · [n×k]ᵀ -> [m×n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let out = kernels::gemm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Self::new_tensor(vec![m, n], out), Op::MatMulNt { a, b }, &[a, b]))
    }

    /// Batched product over the leading axis: `[g,m,k]·[g,k,n]`, or
    /// `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let inner_ok = if trans_b { sa.get(2) == sb.get(2) } else { sa.get(2) == sb.get(1) };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || !inner_ok {
            return Err(shape_err("bmm", sa, sb));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; g * m * n];
        for gi in 0..g {
            let ab = &av[gi * m * k..(gi + 1) * m * k];
            let bb = &bv[gi * k * n..(gi + 1) * k * n];
            let block = if trans_b {
                kernels::gemm_nt(ab, bb, m, k, n)
            } else {
                kernels::gemm_nn(ab, bb, m, k, n)
            };
            out[gi * m * n..(gi + 1) * m * n].copy_from_slice(&block);
        }
        Ok(self.push(
            Self::new_tensor(vec![g, m, n], out),
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
        ))
    }

    // ---- elementwise ---------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::new_tensor(shape, out), Op::Add { a, b }, &[a, b]))
    }

    /// Adds a `[n]` vector to every row of `[..., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        if sb.len() != 1 || sx.last() != sb.first() {
            return Err(shape_err("add_bias", sx, sb));
        }
        let n = sb[0];
        let bv = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let shape = sx.to_vec();
        Ok(self.push(Self::new_tensor(shape, out), Op::AddBias { x, bias }, &[x, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Self::new_tensor(shape, out), Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).data().iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::new_tensor(shape, out), Op::Scale { x, c }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::new_tensor(shape, out), Op::Relu { x }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).data().iter().map(|&v| kernels::gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(Self::new_tensor(shape, out), Op::Gelu { x }, &[x])
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Relu => self.relu(x),
            Activation::Gelu => self.gelu(x),
        }
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// survivors by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("dropout probability {p} not in [0,1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let factor: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&factor)
            .map(|(v, f)| v * f)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Self::new_tensor(shape, out), Op::MulConst { x, factor }, &[x]))
    }

    // ---- normalization -------------------------------------------------

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::EmptyAxis { op: "layer_norm" });
        }
        if self.shape(gamma) != [d] {
            return Err(shape_err("layer_norm gamma", &sx, self.shape(gamma)));
        }
        if self.shape(beta) != [d] {
            return Err(shape_err("layer_norm beta", &sx, self.shape(beta)));
        }
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::InvalidArgument(format!("layer_norm epsilon must be > 0, got {eps}")));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = xv.len() / d;
        let mut normed = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let z = (row[j] - mean) * is;
                normed[r * d + j] = z;
                out[r * d + j] = g[j] * z + b[j];
            }
        }
        Ok(self.push(
            Self::new_tensor(sx, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} out of range for shape {sx:?}"
            )));
        }
        let outer: usize = sx[..axis].iter().product();
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |t: usize| (o * len + t) * inner + i;
                let max = (0..len).map(|t| xv[idx(t)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (xv[idx(t)] - max).exp();
                    out[idx(t)] = e;
                    sum += e;
                }
                for t in 0..len {
                    out[idx(t)] /= sum;
                }
            }
        }
        Ok(self.push(Self::new_tensor(sx, out), Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Softmax over the last axis of `[batch·heads, q, k]` scores where
    /// disallowed keys get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, mask: &AttnMask) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3
            || sx[1] != mask.q_len
            || sx[2] != mask.k_len
            || mask.batch == 0
            || !sx[0].is_multiple_of(mask.batch)
        {
            return Err(shape_err(
                "masked_softmax",
                &sx,
                &[mask.batch, mask.q_len, mask.k_len],
            ));
        }
        let heads = sx[0] / mask.batch;
        let (tq, tk) = (sx[1], sx[2]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for g in 0..sx[0] {
            let b = g / heads;
            for q in 0..tq {
                let base = (g * tq + q) * tk;
                let allowed = &mask.allowed[(b * tq + q) * tk..(b * tq + q + 1) * tk];
                let row = &xv[base..base + tk];
                let max = row
                    .iter()
                    .zip(allowed)
                    .filter(|(_, &a)| a)
                    .map(|(&v, _)| v)
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let mut sum = 0.0;
                for k in 0..tk {
                    if allowed[k] {
                        let e = (row[k] - max).exp();
                        out[base + k] = e;
                        sum += e;
                    }
                }
                for o in &mut out[base..base + tk] {
                    *o /= sum;
                }
            }
        }
        Ok(self.push(Self::new_tensor(sx, out), Op::MaskedSoftmax { x }, &[x]))
    }

    // ---- shape manipulation --------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// `[a, b, c, d] -> [a, c, b, d]`
    pub fn swap_axes12(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(shape_err("swap_axes12", &s, &[0, 0, 0, 0]));
        }
        let out = kernels::swap12(self.value(x).data(), s[0], s[1], s[2], s[3]);
        Ok(self.push(
            Self::new_tensor(vec![s[0], s[2], s[1], s[3]], out),
            Op::SwapAxes12 { x },
            &[x],
        ))
    }

    /// Embedding lookup: rows `ids` of a `[n, d]` table.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table).to_vec();
        if st.len() != 2 {
            return Err(shape_err("gather_rows", &st, &[ids.len()]));
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= st[0]) {
            return Err(Error::InvalidArgument(format!(
                "row id {bad} out of range for table with {} rows",
                st[0]
            )));
        }
        let d = st[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Self::new_tensor(vec![ids.len(), d], out),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    fn rows3(shape: &[usize]) -> Option<(usize, usize, usize)> {
        match *shape {
            [l, d] => Some((1, l, d)),
            [b, l, d] => Some((b, l, d)),
            _ => None,
        }
    }

    /// Prepends the `[p, d]` block to every sequence of `[L, d]` or `[B, L, d]`.
    pub fn prepend_rows(&mut self, prefix: Var, x: Var) -> Result<Var> {
        let (sp, sx) = (self.shape(prefix).to_vec(), self.shape(x).to_vec());
        let Some((batch, len, d)) = Self::rows3(&sx) else {
            return Err(shape_err("prepend_rows", &sp, &sx));
        };
        if sp.len() != 2 || sp[1] != d {
            return Err(shape_err("prepend_rows", &sp, &sx));
        }
        let p = sp[0];
        let (pv, xv) = (self.value(prefix).data(), self.value(x).data());
        let mut out = Vec::with_capacity(batch * (len + p) * d);
        for b in 0..batch {
            out.extend_from_slice(pv);
            out.extend_from_slice(&xv[b * len * d..(b + 1) * len * d]);
        }
        let shape = if sx.len() == 2 { vec![len + p, d] } else { vec![batch, len + p, d] };
        Ok(self.push(Self::new_tensor(shape, out), Op::PrependRows { prefix, x }, &[prefix, x]))
    }

    /// Replaces rows `[0, p)` of every sequence with the `[p, d]` block.
    pub fn overwrite_rows(&mut self, prefix: Var, x: Var) -> Result<Var> {
        let (sp, sx) = (self.shape(prefix).to_vec(), self.shape(x).to_vec());
        let Some((batch, len, d)) = Self::rows3(&sx) else {
            return Err(shape_err("overwrite_rows", &sp, &sx));
        };
        if sp.len() != 2 || sp[1] != d || sp[0] > len {
            return Err(shape_err("overwrite_rows", &sp, &sx));
        }
        let p = sp[0];
        let pv = self.value(prefix).data();
        let mut out = self.value(x).data().to_vec();
        for b in 0..batch {
            out[b * len * d..(b * len + p) * d].copy_from_slice(pv);
        }
        Ok(self.push(Self::new_tensor(sx, out), Op::OverwriteRows { prefix, x }, &[prefix, x]))
    }

    /// Removes the first `p` rows of every sequence.
    pub fn drop_rows(&mut self, x: Var, p: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let Some((batch, len, d)) = Self::rows3(&sx) else {
            return Err(shape_err("drop_rows", &sx, &[p]));
        };
        if p >= len {
            return Err(shape_err("drop_rows", &sx, &[p]));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * (len - p) * d);
        for b in 0..batch {
            out.extend_from_slice(&xv[(b * len + p) * d..(b + 1) * len * d]);
        }
        let shape = if sx.len() == 2 { vec![len - p, d] } else { vec![batch, len - p, d] };
        Ok(self.push(Self::new_tensor(shape, out), Op::DropRows { x, p }, &[x]))
    }

    // ---- reductions and losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean { x }, &[x])
    }

    /// Mean label-smoothed negative log-likelihood over non-pad rows of
    /// `[T, V]` logits: `(1-ε)·NLL(target) + ε·mean_v NLL(v)`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        smoothing: f64,
        pad: usize,
    ) -> Result<Var> {
        let sl = self.shape(logits).to_vec();
        if sl.len() != 2 || sl[0] != targets.len() {
            return Err(shape_err("cross_entropy", &sl, &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::InvalidArgument(format!(
                "label smoothing must be in [0,1), got {smoothing}"
            )));
        }
        let v = sl[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::InvalidArgument(format!(
                "target id {bad} out of range for vocabulary of {v}"
            )));
        }
        let count = targets.iter().filter(|&&t| t != pad).count();
        if count == 0 {
            return Err(Error::NoLossPositions);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            let row = &lv[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
            let log_z = max + sum_exp.ln();
            let nll_target = log_z - row[t];
            let mean_nll = log_z - row.iter().sum::<f64>() / v as f64;
            total += (1.0 - smoothing) * nll_target + smoothing * mean_nll;
            for (p, z) in probs[r * v..(r + 1) * v].iter_mut().zip(row) {
                *p = (z - log_z).exp();
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                pad,
                smoothing,
                probs,
                count,
            },
            &[logits],
        ))
    }

    // ---- backward ------------------------------------------------------

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalar(shape.to_vec()));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &g);
            self.nodes[i].grad = Some(g);
            for (input, contribution) in contributions {
                self.accumulate(input, contribution);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Vec<f64>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => {
                for (a, c) in g.iter_mut().zip(&contribution) {
                    *a += c;
                }
            }
            None => node.grad = Some(contribution),
        }
    }

    fn backward_node(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let shp = |v: Var| self.nodes[v.0].value.shape();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b } => {
                let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[1]);
                if needs(a) {
                    out.push((a, kernels::gemm_nt(g, val(b), m, n, k)));
                }
                if needs(b) {
                    out.push((b, kernels::gemm_tn(val(a), g, m, k, n)));
                }
            }
            &Op::MatMulNt { a, b } => {
                let (m, k, n) = (shp(a)[0], shp(a)[1], shp(b)[0]);
                if needs(a) {
                    out.push((a, kernels::gemm_nn(g, val(b), m, n, k)));
                }
                if needs(b) {
                    out.push((b, kernels::gemm_tn(g, val(a), m, n, k)));
                }
            }
            &Op::BatchMatMul { a, b, trans_b } => {
                let (groups, m, k) = (shp(a)[0], shp(a)[1], shp(a)[2]);
                let n = if trans_b { shp(b)[1] } else { shp(b)[2] };
                let (av, bv) = (val(a), val(b));
                let mut da = needs(a).then(|| vec![0.0; av.len()]);
                let mut db = needs(b).then(|| vec![0.0; bv.len()]);
                for gi in 0..groups {
                    let gb = &g[gi * m * n..(gi + 1) * m * n];
                    let ab = &av[gi * m * k..(gi + 1) * m * k];
                    let bb = &bv[gi * k * n..(gi + 1) * k * n];
                    if let Some(da) = da.as_mut() {
                        let block = if trans_b {
                            kernels::gemm_nn(gb, bb, m, n, k)
                        } else {
                            kernels::gemm_nt(gb, bb, m, n, k)
                        };
                        da[gi * m * k..(gi + 1) * m * k].copy_from_slice(&block);
                    }
                    if let Some(db) = db.as_mut() {
                        let block = if trans_b {
                            kernels::gemm_tn(gb, ab, m, n, k)
                        } else {
                            kernels::gemm_tn(ab, gb, m, k, n)
                        };
                        db[gi * k * n..(gi + 1) * k * n].copy_from_slice(&block);
                    }
                }
                if let Some(da) = da {
                    out.push((a, da));
                }
                if let Some(db) = db {
                    out.push((b, db));
                }
            }
            &Op::Add { a, b } => {
                if needs(a) {
                    out.push((a, g.to_vec()));
                }
                if needs(b) {
                    out.push((b, g.to_vec()));
                }
            }
            &Op::AddBias { x, bias } => {
                if needs(x) {
                    out.push((x, g.to_vec()));
                }
                if needs(bias) {
                    let n = shp(bias)[0];
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    out.push((bias, db));
                }
            }
            &Op::Mul { a, b } => {
                if needs(a) {
                    out.push((a, g.iter().zip(val(b)).map(|(g, v)| g * v).collect()));
                }
                if needs(b) {
                    out.push((b, g.iter().zip(val(a)).map(|(g, v)| g * v).collect()));
                }
            }
            Op::MulConst { x, factor } => {
                out.push((*x, g.iter().zip(factor).map(|(g, f)| g * f).collect()));
            }
            &Op::Scale { x, c } => out.push((x, g.iter().map(|v| v * c).collect())),
            &Op::Relu { x } => out.push((
                x,
                g.iter()
                    .zip(val(x))
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            )),
            &Op::Gelu { x } => out.push((
                x,
                g.iter().zip(val(x)).map(|(g, &v)| g * kernels::gelu_grad(v)).collect(),
            )),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normed,
                inv_std,
            } => {
                let d = shp(*gamma)[0];
                let rows = normed.len() / d;
                if needs(*beta) {
                    let mut db = vec![0.0; d];
                    for row in g.chunks(d) {
                        for (acc, v) in db.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*beta, db));
                }
                if needs(*gamma) {
                    let mut dg = vec![0.0; d];
                    for (grow, zrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            dg[j] += grow[j] * zrow[j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if needs(*x) {
                    let gv = val(*gamma);
                    let mut dx = vec![0.0; normed.len()];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let zrow = &normed[r * d..(r + 1) * d];
                        let mut mean_dz = 0.0;
                        let mut mean_dz_z = 0.0;
                        for j in 0..d {
                            let dz = grow[j] * gv[j];
                            mean_dz += dz;
                            mean_dz_z += dz * zrow[j];
                        }
                        mean_dz /= d as f64;
                        mean_dz_z /= d as f64;
                        for j in 0..d {
                            let dz = grow[j] * gv[j];
                            dx[r * d + j] = inv_std[r] * (dz - mean_dz - zrow[j] * mean_dz_z);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            &Op::Softmax { x, outer, len, inner } => {
                let y = node.value.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |t: usize| (o * len + t) * inner + i;
                        let dot: f64 = (0..len).map(|t| g[idx(t)] * y[idx(t)]).sum();
                        for t in 0..len {
                            dx[idx(t)] = y[idx(t)] * (g[idx(t)] - dot);
                        }
                    }
                }
                out.push((x, dx));
            }
            &Op::MaskedSoftmax { x } => {
                let y = node.value.data();
                let k = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((dxr, yr), gr) in dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dxr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                out.push((x, dx));
            }
            &Op::Reshape { x } => out.push((x, g.to_vec())),
            &Op::SwapAxes12 { x } => {
                let s = node.value.shape();
                out.push((x, kernels::swap12(g, s[0], s[1], s[2], s[3])));
            }
            Op::GatherRows { table, ids } => {
                let d = shp(*table)[1];
                let mut dt = vec![0.0; val(*table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *acc += v;
                    }
                }
                out.push((*table, dt));
            }
            &Op::PrependRows { prefix, x } => {
                let (p, d) = (shp(prefix)[0], shp(prefix)[1]);
                let (batch, len, _) = Self::rows3(shp(x)).expect("checked in forward");
                let total = len + p;
                if needs(prefix) {
                    let mut dp = vec![0.0; p * d];
                    for b in 0..batch {
                        for (acc, v) in dp.iter_mut().zip(&g[b * total * d..(b * total + p) * d]) {
                            *acc += v;
                        }
                    }
                    out.push((prefix, dp));
                }
                if needs(x) {
                    let mut dx = Vec::with_capacity(batch * len * d);
                    for b in 0..batch {
                        dx.extend_from_slice(&g[(b * total + p) * d..(b + 1) * total * d]);
                    }
                    out.push((x, dx));
                }
            }
            &Op::OverwriteRows { prefix, x } => {
                let (p, d) = (shp(prefix)[0], shp(prefix)[1]);
                let (batch, len, _) = Self::rows3(shp(x)).expect("checked in forward");
                if needs(prefix) {
                    let mut dp = vec![0.0; p * d];
                    for b in 0..batch {
                        for (acc, v) in dp.iter_mut().zip(&g[b * len * d..(b * len + p) * d]) {
                            *acc += v;
                        }
                    }
                    out.push((prefix, dp));
                }
                if needs(x) {
                    let mut dx = g.to_vec();
                    for b in 0..batch {
                        dx[b * len * d..(b * len + p) * d].fill(0.0);
                    }
                    out.push((x, dx));
                }
            }
            &Op::DropRows { x, p } => {
                let (batch, len, d) = Self::rows3(shp(x)).expect("checked in forward");
                let kept = len - p;
                let mut dx = vec![0.0; batch * len * d];
                for b in 0..batch {
                    dx[(b * len + p) * d..(b + 1) * len * d]
                        .copy_from_slice(&g[b * kept * d..(b + 1) * kept * d]);
                }
                out.push((x, dx));
            }
            &Op::Sum { x } => out.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean { x } => {
                let n = val(x).len();
                out.push((x, vec![g[0] / n as f64; n]));
            }
            Op::CrossEntropy {
                logits,
                targets,
                pad,
                smoothing,
                probs,
                count,
            } => {
                let v = shp(*logits)[1];
                let scale = g[0] / *count as f64;
                let uniform = smoothing / v as f64;
                let mut dl = vec![0.0; probs.len()];
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for j in 0..v {
                        let mut d = probs[r * v + j] - uniform;
                        if j == t {
                            d -= 1.0 - smoothing;
                        }
                        dl[r * v + j] = d * scale;
                    }
                }
                out.push((*logits, dl));
            }
        }
        out
    }
}
