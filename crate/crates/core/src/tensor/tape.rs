use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` inside the loss.
pub const PROB_CLAMP: f64 = 1e-12;

const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Selu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA * x
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
                }
            }
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2)),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Selu => {
                if x > 0.0 {
                    SELU_LAMBDA
                } else {
                    SELU_LAMBDA * SELU_ALPHA * x.exp()
                }
            }
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "relu" => Ok(Activation::Relu),
            "selu" => Ok(Activation::Selu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!(
                "unknown activation {other:?} (expected relu, selu or gelu)"
            ))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Softmax {
        x: Var,
        axis: usize,
    },
    MaskedSoftmax {
        x: Var,
        keep: Vec<bool>,
    },
    Activation(Var, Activation),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv1d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    Col(Var, usize),
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    WeightedBce {
        probs: Var,
        labels: Vec<f64>,
        weight: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records operations in creation order; that order is topological.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that had `requires_grad`.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `var`; `None` when the node does not require gradients
    /// or does not influence the loss.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient for `var`, zero-filled when the node was never reached.
    pub fn get_or_zero(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var)
            .map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Number of operations whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `g · bᵀ` for g: m×n, b: k×n, giving m×k.
fn matmul_a_bt(g: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` for a: m×k, g: m×n, giving k×n.
fn matmul_at_b(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

fn accumulate(grads: &mut [Option<Vec<f64>>], var: Var, contribution: Vec<f64>) {
    match &mut grads[var.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Weighted binary cross-entropy for one prediction.
///
/// The positive term is weighted by `weight` and the negative term by
/// `1 - weight`. Both log terms carry the leading minus sign, giving the
/// ordinary negative log-likelihood.
pub fn weighted_bce(prob: f64, label: f64, weight: f64) -> f64 {
    let p = clamp_prob(prob);
    -(weight * label * p.ln() + (1.0 - weight) * (1.0 - label) * (1.0 - p).ln())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Records a leaf; it is differentiated iff `tensor.requires_grad`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs = tensor.requires_grad;
        let mut value = tensor;
        value.grad = None;
        self.push(value, Op::Leaf, needs)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    fn dims2(&self, var: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(var) {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2(x, "transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(x), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Add(a, b), ng))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Mul(a, b), ng))
    }

    /// Adds a vector of length `n` to every length-`n` slice along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Scale(x, factor), ng)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} is invalid for shape {shape:?}"
            )));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let max = (0..n)
                    .map(|j| src[idx(j)])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..n {
                    let e = (src[idx(j)] - max).exp();
                    data[idx(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    data[idx(j)] /= total;
                }
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }, ng))
    }

    /// Row-wise softmax of a 2-D tensor where columns with `keep[j] == false`
    /// get exactly zero weight (equivalent to a −∞ logit).
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let (m, n) = self.dims2(x, "masked_softmax")?;
        if keep.len() != n {
            return Err(Error::shape("masked_softmax", self.shape(x), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Data("attention mask hides every key".into()));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            let row = &src[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(keep)
                .filter(|(_, &k)| k)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[r * n..(r + 1) * n];
            let mut total = 0.0;
            for j in 0..n {
                if keep[j] {
                    out[j] = (row[j] - max).exp();
                    total += out[j];
                }
            }
            for v in out.iter_mut() {
                *v /= total;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(
            Tensor::from_parts(vec![m, n], data),
            Op::MaskedSoftmax {
                x,
                keep: keep.to_vec(),
            },
            ng,
        ))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| kind.apply(v))
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::from_parts(shape, data), Op::Activation(x, kind), ng)
    }

    /// Inverted dropout. `rate` must lie in `[0, 1)`; outside training, or at
    /// rate 0, the input handle is returned unchanged.
    pub fn dropout<R: rand::Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep_scale
                }
            })
            .collect();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(v, m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Dropout { x, mask }, ng))
    }

    /// Normalizes each slice along the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        if d < 2 {
            return Err(Error::Config(
                "layer_norm needs a last axis of at least 2".into(),
            ));
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / d;
        let mut normed = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut data = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let nv = (row[j] - mean) * inv;
                normed[r * d + j] = nv;
                data[r * d + j] = g[j] * nv + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let ng = self.ng(&[x, gain, bias]);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            },
            ng,
        ))
    }

    /// Same-length 1-D cross-correlation along the time axis.
    ///
    /// `x` is `[L, C_in]`, `weight` is `[kernel, C_in, C_out]`, `bias` is
    /// `[C_out]`. Odd kernels are zero padded by `(kernel - 1) / 2` on each side.
    pub fn conv1d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (len, c_in) = self.dims2(x, "conv1d")?;
        let (kernel, wc_in, c_out) = match self.shape(weight) {
            [k, ci, co] => (*k, *ci, *co),
            other => return Err(Error::shape("conv1d", self.shape(x), other)),
        };
        if wc_in != c_in {
            return Err(Error::shape("conv1d", self.shape(x), self.shape(weight)));
        }
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv1d kernel size {kernel} must be odd"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).len() != c_out {
                return Err(Error::shape("conv1d", self.shape(weight), self.shape(b)));
            }
        }
        let pad = (kernel - 1) / 2;
        let xs = self.value(x).data();
        let ws = self.value(weight).data();
        let mut data = vec![0.0; len * c_out];
        for t in 0..len {
            let out = &mut data[t * c_out..(t + 1) * c_out];
            if let Some(b) = bias {
                out.copy_from_slice(self.value(b).data());
            }
            for j in 0..kernel {
                let src_t = t + j;
                if src_t < pad || src_t - pad >= len {
                    continue;
                }
                let xrow = &xs[(src_t - pad) * c_in..(src_t - pad + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &ws[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                    for (o, &wv) in out.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        let ng = self.ng(&inputs);
        Ok(self.push(
            Tensor::from_parts(vec![len, c_out], data),
            Op::Conv1d { x, weight, bias },
            ng,
        ))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(vec![m, total], data),
            Op::ConcatCols(parts.to_vec()),
            ng,
        ))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(Error::shape(
                    "concat_rows",
                    self.shape(first),
                    self.shape(p),
                ));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        let ng = self.ng(parts);
        Ok(self.push(
            Tensor::from_parts(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            ng,
        ))
    }

    /// Selects one row of a 2-D tensor as a `[1, n]` tensor.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "row")?;
        if index >= m {
            return Err(Error::shape("row", self.shape(x), &[index]));
        }
        let data = self.value(x).row(index).to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1, n], data), Op::Row(x, index), ng))
    }

    /// Selects one column of a 2-D tensor as a vector.
    pub fn col(&mut self, x: Var, index: usize) -> Result<Var> {
        let (m, n) = self.dims2(x, "col")?;
        if index >= n {
            return Err(Error::shape("col", self.shape(x), &[index]));
        }
        let data = (0..m).map(|r| self.value(x).at(r, index)).collect();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(vec![m], data), Op::Col(x, index), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let data = self.value(x).data().to_vec();
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Reshape(x), ng))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab) {
            return Err(Error::Data(format!(
                "embedding id {bad} out of range for table of {vocab} rows"
            )));
        }
        if ids.is_empty() {
            return Err(Error::Data("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let ng = self.ng(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Mean weighted binary cross-entropy of a vector of positive-class
    /// probabilities against 0/1 labels.
    pub fn weighted_bce(&mut self, probs: Var, labels: &[f64], weight: f64) -> Result<Var> {
        let p = self.value(probs);
        if p.len() != labels.len() {
            return Err(Error::shape("weighted_bce", p.shape(), &[labels.len()]));
        }
        let loss = p
            .data()
            .iter()
            .zip(labels)
            .map(|(&pv, &y)| weighted_bce(pv, y, weight))
            .sum::<f64>()
            / labels.len() as f64;
        let ng = self.ng(&[probs]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                probs,
                labels: labels.to_vec(),
                weight,
            },
            ng,
        ))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            if !matches!(node.op, Op::Leaf) {
                visited += 1;
                self.backward_op(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        // Only leaves keep their gradients.
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, visited })
    }

    fn backward_op(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                if needs(*a) {
                    accumulate(grads, *a, matmul_a_bt(g, val(*b).data(), m, k, n));
                }
                if needs(*b) {
                    accumulate(grads, *b, matmul_at_b(val(*a).data(), g, m, k, n));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                let mut out = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        out[i * n + j] = g[j * m + i];
                    }
                }
                accumulate(grads, *x, out);
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if needs(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let c = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, c);
                }
                if needs(*b) {
                    let c = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, c);
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    accumulate(grads, *x, g.to_vec());
                }
                if needs(*b) {
                    let n = val(*b).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(x, f) => accumulate(grads, *x, g.iter().map(|v| v * f).collect()),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut out = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            out[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *x, out);
            }
            Op::MaskedSoftmax { x, keep } => {
                let y = node.value.data();
                let n = keep.len();
                let mut out = vec![0.0; y.len()];
                for ((orow, yrow), grow) in out.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        orow[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(grads, *x, out);
            }
            Op::Activation(x, kind) => {
                let c = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, &xv)| gv * kind.derivative(xv))
                    .collect();
                accumulate(grads, *x, c);
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g.iter().zip(mask).map(|(a, b)| a * b).collect())
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let d = val(*gain).len();
                let gamma = val(*gain).data();
                if needs(*gain) {
                    let mut gg = vec![0.0; d];
                    for (grow, nrow) in g.chunks(d).zip(normed.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * nrow[j];
                        }
                    }
                    accumulate(grads, *gain, gg);
                }
                if needs(*bias) {
                    let mut gb = vec![0.0; d];
                    for grow in g.chunks(d) {
                        for j in 0..d {
                            gb[j] += grow[j];
                        }
                    }
                    accumulate(grads, *bias, gb);
                }
                if needs(*x) {
                    let mut gx = vec![0.0; g.len()];
                    for (r, ((grow, nrow), xrow)) in g
                        .chunks(d)
                        .zip(normed.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let dn: Vec<f64> = grow.iter().zip(gamma).map(|(a, b)| a * b).collect();
                        let sum_dn: f64 = dn.iter().sum();
                        let sum_dn_n: f64 = dn.iter().zip(nrow).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for j in 0..d {
                            xrow[j] = scale * (d as f64 * dn[j] - sum_dn - nrow[j] * sum_dn_n);
                        }
                    }
                    accumulate(grads, *x, gx);
                }
            }
            Op::Conv1d { x, weight, bias } => {
                let (len, c_in) = (val(*x).shape()[0], val(*x).shape()[1]);
                let (kernel, c_out) = (val(*weight).shape()[0], val(*weight).shape()[2]);
                let pad = (kernel - 1) / 2;
                let xs = val(*x).data();
                let ws = val(*weight).data();
                let mut gx = needs(*x).then(|| vec![0.0; xs.len()]);
                let mut gw = needs(*weight).then(|| vec![0.0; ws.len()]);
                for t in 0..len {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for j in 0..kernel {
                        let src_t = t + j;
                        if src_t < pad || src_t - pad >= len {
                            continue;
                        }
                        let s = src_t - pad;
                        for c in 0..c_in {
                            let wbase = (j * c_in + c) * c_out;
                            let wrow = &ws[wbase..wbase + c_out];
                            if let Some(gx) = gx.as_mut() {
                                gx[s * c_in + c] +=
                                    grow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            if let Some(gw) = gw.as_mut() {
                                let xv = xs[s * c_in + c];
                                for (o, gv) in gw[wbase..wbase + c_out].iter_mut().zip(grow) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx {
                    accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(grads, *weight, gw);
                }
                if let Some(b) = bias.filter(|b| needs(*b)) {
                    let mut gb = vec![0.0; c_out];
                    for grow in g.chunks(c_out) {
                        for (o, v) in gb.iter_mut().zip(grow) {
                            *o += v;
                        }
                    }
                    accumulate(grads, b, gb);
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if needs(p) {
                        let mut gp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).len();
                    if needs(p) {
                        accumulate(grads, p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::Row(x, index) => {
                let n = val(*x).shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                gx[index * n..(index + 1) * n].copy_from_slice(g);
                accumulate(grads, *x, gx);
            }
            Op::Col(x, index) => {
                let n = val(*x).shape()[1];
                let mut gx = vec![0.0; val(*x).len()];
                for (r, gv) in g.iter().enumerate() {
                    gx[r * n + index] = *gv;
                }
                accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Embedding { table, ids } => {
                let d = val(*table).shape()[1];
                let mut gt = vec![0.0; val(*table).len()];
                for (pos, &id) in ids.iter().enumerate() {
                    for (o, v) in gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[pos * d..(pos + 1) * d])
                    {
                        *o += v;
                    }
                }
                accumulate(grads, *table, gt);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::WeightedBce {
                probs,
                labels,
                weight,
            } => {
                let n = labels.len() as f64;
                let c = val(*probs)
                    .data()
                    .iter()
                    .zip(labels)
                    .map(|(&p, &y)| {
                        if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                            return 0.0;
                        }
                        let d = -(weight * y / p) + (1.0 - weight) * (1.0 - y) / (1.0 - p);
                        g[0] * d / n
                    })
                    .collect();
                accumulate(grads, *probs, c);
            }
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let n = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, n, inner)
}
