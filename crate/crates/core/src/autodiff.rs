//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is the tape: every operation appends a node whose inputs are
//! earlier nodes, so insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep. Leaves are either constants
//! or parameters tagged with a [`ParamId`]; only parameters receive entries in
//! the returned [`Gradients`].
//!
//! The primitive set is exactly what the transformer and the adaptation losses
//! need. [`finite_difference_gradient`] is the independent oracle used to check
//! every backward rule.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use crate::math;
use crate::{Error, Result};

/// Value written into masked (future) attention slots; `exp` of it underflows
/// to exactly zero after the softmax max-shift.
pub const ATTENTION_MASK_VALUE: f64 = -1.0e30;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape-carrying row-major array.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![1], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..n).map(&mut f).collect() }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows when viewed as a matrix (leading dims collapsed); 1 for vectors.
    pub fn rows(&self) -> usize {
        if self.shape.len() < 2 {
            1
        } else {
            self.shape[..self.shape.len() - 1].iter().product()
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Sum of squares.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }
}

/// Identifier of a trainable leaf; assigned by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ParamId(pub usize);

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var),
    Tanh(Var),
    RowSoftmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, stats: Vec<(f64, f64)> },
    Gather { table: Var, ids: Vec<usize> },
    CausalScores { q: Var, k: Var, heads: usize, scale: f64 },
    HeadMix { probs: Var, v: Var, heads: usize },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, count: usize, probs: Vec<f64> },
    RowEntropy { logits: Var, rows: Vec<usize>, probs: Vec<f64>, entropies: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// The recording tape. Rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients keyed by parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor) {
        self.map.insert(id, grad);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.map.iter()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.map.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Elementwise `self += scale * other`, inserting missing entries.
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (id, g) in &other.map {
            let slot = self.map.entry(*id).or_insert_with(|| Tensor::zeros(g.shape()));
            for (a, b) in slot.data.iter_mut().zip(&g.data) {
                *a += scale * b;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.map.values_mut() {
            g.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Zero every stored gradient, keeping the allocations.
    pub fn zero_grad(&mut self) {
        for g in self.map.values_mut() {
            g.fill(0.0);
        }
    }

    /// Flat inner product over the parameters present in both maps.
    pub fn dot(&self, other: &Gradients) -> f64 {
        self.map
            .iter()
            .filter_map(|(id, g)| other.map.get(id).map(|h| g.dot(h)))
            .sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.map.values().map(Tensor::norm_sq).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.map.values().all(Tensor::is_finite)
    }
}

fn check_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::shape(format!("{what} must be a matrix, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `out[m×n] += a[m×k] · b[k×n]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + math::tanh(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let t = math::tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, param: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        v
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_matrix(self.value(a), "matmul lhs")?;
        let (k2, n) = check_matrix(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::Matmul(a, b), rg))
    }

    /// `a[m×k] · b[n×k]ᵀ`; the layout of a linear layer with weights stored
    /// as `out_features × in_features`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = check_matrix(self.value(a), "matmul_nt lhs")?;
        let (n, k2) = check_matrix(self.value(b), "matmul_nt rhs")?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(&self.value(a).data, &self.value(b).data, &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor { shape: vec![m, n], data: out }, Op::MatmulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(format!("add {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = check_matrix(self.value(a), "add_row lhs")?;
        if self.value(bias).len() != n {
            return Err(Error::shape(format!(
                "add_row bias length {} vs {n} columns",
                self.value(bias).len()
            )));
        }
        let mut data = self.value(a).data.clone();
        let b = &self.value(bias).data;
        for r in 0..m {
            for (x, y) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += y;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::AddRow(a, bias), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape != tb.shape {
            return Err(Error::shape(format!("mul {:?} vs {:?}", ta.shape, tb.shape)));
        }
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|x| c * x).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| gelu(x)).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let t = Tensor { shape: ta.shape.clone(), data: ta.data.iter().map(|&x| math::tanh(x)).collect() };
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    /// Softmax along the trailing dimension.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let (rows, cols) = (ta.rows(), ta.cols());
        let mut data = vec![0.0; ta.len()];
        for r in 0..rows {
            math::softmax_into(&ta.data[r * cols..(r + 1) * cols], &mut data[r * cols..(r + 1) * cols]);
        }
        let t = Tensor { shape: ta.shape.clone(), data };
        let rg = self.rg(a);
        self.push(t, Op::RowSoftmax(a), rg)
    }

    /// Per-row normalization followed by elementwise `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = check_matrix(self.value(x), "layer_norm input")?;
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(Error::shape(format!("layer_norm gain/bias must have length {n}")));
        }
        let tx = &self.value(x).data;
        let g = &self.value(gain).data;
        let b = &self.value(bias).data;
        let mut data = vec![0.0; m * n];
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = &tx[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            for c in 0..n {
                data[r * n + c] = (row[c] - mean) * rstd * g[c] + b[c];
            }
            stats.push((mean, rstd));
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(Tensor { shape: vec![m, n], data }, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    /// Selects rows of `table` (V×d) by index.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = check_matrix(self.value(table), "embedding table")?;
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(format!("embedding id {id} out of range for {v} rows")));
            }
            data.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor { shape: vec![ids.len(), d], data },
            Op::Gather { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Scaled dot-product scores for `heads` interleaved heads with a causal
    /// mask. `q`, `k` are T×d; the result is (heads·T)×T where row `h·T + i`
    /// holds query position `i` of head `h`. Future slots hold
    /// [`ATTENTION_MASK_VALUE`].
    pub fn causal_attention_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (t, d) = check_matrix(self.value(q), "attention q")?;
        let (t2, d2) = check_matrix(self.value(k), "attention k")?;
        if t != t2 || d != d2 {
            return Err(Error::shape(format!("attention q {t}×{d} vs k {t2}×{d2}")));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("width {d} not divisible into {heads} heads")));
        }
        let dh = d / heads;
        let scale = 1.0 / math::sqrt(dh as f64);
        let (qd, kd) = (&self.value(q).data, &self.value(k).data);
        let mut data = vec![ATTENTION_MASK_VALUE; heads * t * t];
        for h in 0..heads {
            for i in 0..t {
                let qrow = &qd[i * d + h * dh..i * d + (h + 1) * dh];
                for j in 0..=i {
                    let krow = &kd[j * d + h * dh..j * d + (h + 1) * dh];
                    let s: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                    data[(h * t + i) * t + j] = s * scale;
                }
            }
        }
        let rg = self.rg(q) || self.rg(k);
        Ok(self.push(
            Tensor { shape: vec![heads * t, t], data },
            Op::CausalScores { q, k, heads, scale },
            rg,
        ))
    }

    /// Attention-weighted values: `probs` is (heads·T)×T, `v` is T×d.
    pub fn head_mix(&mut self, probs: Var, v: Var, heads: usize) -> Result<Var> {
        let (ht, t) = check_matrix(self.value(probs), "head_mix probs")?;
        let (t2, d) = check_matrix(self.value(v), "head_mix values")?;
        if heads == 0 || ht != heads * t || t != t2 || d % heads != 0 {
            return Err(Error::shape(format!(
                "head_mix probs {ht}×{t}, values {t2}×{d}, heads {heads}"
            )));
        }
        let dh = d / heads;
        let (pd, vd) = (&self.value(probs).data, &self.value(v).data);
        let mut data = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let out = &mut data[i * d + h * dh..i * d + (h + 1) * dh];
                let prow = &pd[(h * t + i) * t..(h * t + i + 1) * t];
                for (j, &p) in prow.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let vrow = &vd[j * d + h * dh..j * d + (h + 1) * dh];
                    for (o, &x) in out.iter_mut().zip(vrow) {
                        *o += p * x;
                    }
                }
            }
        }
        let rg = self.rg(probs) || self.rg(v);
        Ok(self.push(Tensor { shape: vec![t, d], data }, Op::HeadMix { probs, v, heads }, rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of
    /// `logits` (T×V). Rows with `None` are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (t, vocab) = check_matrix(self.value(logits), "cross_entropy logits")?;
        if targets.len() != t {
            return Err(Error::shape(format!("{} targets for {t} logit rows", targets.len())));
        }
        let count = targets.iter().filter(|x| x.is_some()).count();
        if count == 0 {
            return Err(Error::invalid("cross_entropy needs at least one target"));
        }
        let ld = &self.value(logits).data;
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for (r, tgt) in targets.iter().enumerate() {
            let Some(tgt) = *tgt else { continue };
            if tgt >= vocab {
                return Err(Error::invalid(format!("target id {tgt} out of range for vocab {vocab}")));
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            math::softmax_into(row, &mut probs[r * vocab..(r + 1) * vocab]);
            total += math::log_sum_exp(row) - row[tgt];
        }
        let loss = total / count as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, targets: targets.to_vec(), count, probs },
            rg,
        ))
    }

    /// Mean Shannon entropy (nats) of the softmax distributions on `rows`.
    pub fn mean_row_entropy(&mut self, logits: Var, rows: &[usize]) -> Result<Var> {
        let (t, vocab) = check_matrix(self.value(logits), "entropy logits")?;
        if rows.is_empty() {
            return Err(Error::invalid("entropy needs at least one row"));
        }
        let ld = &self.value(logits).data;
        let mut probs = vec![0.0; rows.len() * vocab];
        let mut entropies = Vec::with_capacity(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            if r >= t {
                return Err(Error::invalid(format!("entropy row {r} out of range for {t} rows")));
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let p = &mut probs[k * vocab..(k + 1) * vocab];
            math::softmax_into(row, p);
            let lse = math::log_sum_exp(row);
            // -sum p log p with log p = z - lse
            let h: f64 = p
                .iter()
                .zip(row)
                .filter(|(pi, _)| **pi > 0.0)
                .map(|(pi, z)| -pi * (z - lse))
                .sum();
            entropies.push(h);
        }
        let mean = entropies.iter().sum::<f64>() / rows.len() as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(mean),
            Op::RowEntropy { logits, rows: rows.to_vec(), probs, entropies },
            rg,
        ))
    }

    /// Reverse sweep from the scalar `loss`. Every parameter leaf on the tape
    /// gets an entry, zero when unreachable.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(id) = node.param {
                let g = match grads[idx].take() {
                    Some(g) => Tensor { shape: node.value.shape.clone(), data: g },
                    None => Tensor::zeros(&node.value.shape),
                };
                match out.map.get_mut(&id) {
                    // the same parameter bound twice: sum the contributions
                    Some(prev) => {
                        for (a, b) in prev.data.iter_mut().zip(&g.data) {
                            *a += b;
                        }
                    }
                    None => {
                        out.map.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[m×k] += g[m×n] · bᵀ
                    gemm_nt(g, &tb.data, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb[k×n] += aᵀ · g
                    gemm_tn(&ta.data, g, gb, m, k, n);
                }
            }
            Op::MatmulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[0]);
                if let Some(ga) = self.slot(grads, *a) {
                    // ga[m×k] += g[m×n] · b[n×k]
                    gemm_nn(g, &tb.data, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    // gb[n×k] += gᵀ · a
                    gemm_tn(g, &ta.data, gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gy), bv) in ga.iter_mut().zip(g).zip(&tb.data) {
                        *x += gy * bv;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gy), av) in gb.iter_mut().zip(g).zip(&ta.data) {
                        *x += gy * av;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += c * y);
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Gelu(a) => {
                let ta = self.value(*a);
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gy), &xv) in ga.iter_mut().zip(g).zip(&ta.data) {
                        *x += gy * gelu_grad(xv);
                    }
                }
            }
            Op::Tanh(a) => {
                let y = &node.value.data;
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gy), yv) in ga.iter_mut().zip(g).zip(y) {
                        *x += gy * (1.0 - yv * yv);
                    }
                }
            }
            Op::RowSoftmax(a) => {
                let y = &node.value;
                let cols = y.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..y.rows() {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, stats } => {
                let tx = self.value(*x);
                let gn = &self.value(*gain).data;
                let n = tx.cols();
                let xhat = |r: usize, c: usize| (tx.data[r * n + c] - stats[r].0) * stats[r].1;
                if let Some(gg) = self.slot(grads, *gain) {
                    for r in 0..stats.len() {
                        for c in 0..n {
                            gg[c] += g[r * n + c] * xhat(r, c);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gh = vec![0.0; n];
                    for (r, &(_, rstd)) in stats.iter().enumerate() {
                        let mut mean_gh = 0.0;
                        let mut mean_ghx = 0.0;
                        for c in 0..n {
                            gh[c] = g[r * n + c] * gn[c];
                            mean_gh += gh[c];
                            mean_ghx += gh[c] * xhat(r, c);
                        }
                        mean_gh /= n as f64;
                        mean_ghx /= n as f64;
                        for c in 0..n {
                            gx[r * n + c] += rstd * (gh[c] - mean_gh - xhat(r, c) * mean_ghx);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            gt[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::CausalScores { q, k, heads, scale } => {
                let (tq, tk) = (self.value(*q), self.value(*k));
                let (t, d) = (tq.shape[0], tq.shape[1]);
                let dh = d / heads;
                let need_q = self.rg(*q);
                let need_k = self.rg(*k);
                let mut gq_local = if need_q { vec![0.0; t * d] } else { Vec::new() };
                let mut gk_local = if need_k { vec![0.0; t * d] } else { Vec::new() };
                for h in 0..*heads {
                    for i in 0..t {
                        for j in 0..=i {
                            let gs = g[(h * t + i) * t + j] * scale;
                            if gs == 0.0 {
                                continue;
                            }
                            for c in h * dh..(h + 1) * dh {
                                if need_q {
                                    gq_local[i * d + c] += gs * tk.data[j * d + c];
                                }
                                if need_k {
                                    gk_local[j * d + c] += gs * tq.data[i * d + c];
                                }
                            }
                        }
                    }
                }
                if let Some(gq) = self.slot(grads, *q) {
                    gq.iter_mut().zip(&gq_local).for_each(|(a, b)| *a += b);
                }
                if let Some(gk) = self.slot(grads, *k) {
                    gk.iter_mut().zip(&gk_local).for_each(|(a, b)| *a += b);
                }
            }
            Op::HeadMix { probs, v, heads } => {
                let (tp, tv) = (self.value(*probs), self.value(*v));
                let (t, d) = (tv.shape[0], tv.shape[1]);
                let dh = d / heads;
                if let Some(gp) = self.slot(grads, *probs) {
                    for h in 0..*heads {
                        for i in 0..t {
                            let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            for j in 0..t {
                                let vrow = &tv.data[j * d + h * dh..j * d + (h + 1) * dh];
                                gp[(h * t + i) * t + j] +=
                                    grow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
                if let Some(gv) = self.slot(grads, *v) {
                    for h in 0..*heads {
                        for i in 0..t {
                            let grow = &g[i * d + h * dh..i * d + (h + 1) * dh];
                            for j in 0..t {
                                let p = tp.data[(h * t + i) * t + j];
                                if p == 0.0 {
                                    continue;
                                }
                                let out = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                                out.iter_mut().zip(grow).for_each(|(a, b)| *a += p * b);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, count, probs } => {
                let vocab = self.value(*logits).cols();
                let s = g[0] / *count as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, tgt) in targets.iter().enumerate() {
                        let Some(tgt) = *tgt else { continue };
                        let p = &probs[r * vocab..(r + 1) * vocab];
                        let out = &mut gl[r * vocab..(r + 1) * vocab];
                        out.iter_mut().zip(p).for_each(|(a, pi)| *a += s * pi);
                        out[tgt] -= s;
                    }
                }
            }
            Op::RowEntropy { logits, rows, probs, entropies } => {
                let tl = self.value(*logits);
                let vocab = tl.cols();
                let s = g[0] / rows.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (k, &r) in rows.iter().enumerate() {
                        let z = &tl.data[r * vocab..(r + 1) * vocab];
                        let lse = math::log_sum_exp(z);
                        let p = &probs[k * vocab..(k + 1) * vocab];
                        let h = entropies[k];
                        // dH/dz_i = -p_i (log p_i + H)
                        for i in 0..vocab {
                            gl[r * vocab + i] -= s * p[i] * ((z[i] - lse) + h);
                        }
                    }
                }
            }
        }
    }
}

/// Central-difference gradient of `f` at `params`:
/// `(f(p + ε e_i) − f(p − ε e_i)) / 2ε` for every coordinate.
pub fn finite_difference_gradient<F>(
    mut f: F,
    params: &[(ParamId, Tensor)],
    epsilon: f64,
) -> Result<Gradients>
where
    F: FnMut(&[(ParamId, Tensor)]) -> Result<f64>,
{
    if !(epsilon > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut work: Vec<(ParamId, Tensor)> = params.to_vec();
    let mut out = Gradients::new();
    for p in 0..work.len() {
        let mut grad = Tensor::zeros(work[p].1.shape());
        for i in 0..work[p].1.len() {
            let orig = work[p].1.data[i];
            work[p].1.data[i] = orig + epsilon;
            let plus = f(&work)?;
            work[p].1.data[i] = orig - epsilon;
            let minus = f(&work)?;
            work[p].1.data[i] = orig;
            grad.data[i] = (plus - minus) / (2.0 * epsilon);
        }
        out.insert(work[p].0, grad);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut g = Graph::new();
        let i2 = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let mm = g.constant(m(2, 2, &[0.3, -1.0, 2.5, 4.0]));
        let z = g.constant(Tensor::zeros(&[2, 2]));
        let out = g.matmul(i2, mm).unwrap();
        assert_eq!(g.value(out).data(), &[0.3, -1.0, 2.5, 4.0]);
        let out = g.matmul(z, mm).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_hand_example() {
        let mut g = Graph::new();
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.constant(m(2, 1, &[0.0, 1.0]));
        let out = g.matmul(a, b).unwrap();
        assert_eq!(g.value(out).shape(), &[2, 1]);
        assert_eq!(g.value(out).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(Error::Shape(_))));
    }

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[5, 16]));
        let nll = g.cross_entropy(logits, &[Some(0), Some(3), Some(15), Some(7), Some(1)]).unwrap();
        assert!((g.scalar(nll) - 16f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn margin_drives_nll_to_zero() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::new();
            let mut t = Tensor::zeros(&[1, 8]);
            t.data_mut()[2] = margin;
            let l = g.constant(t);
            let nll = g.cross_entropy(l, &[Some(2)]).unwrap();
            let v = g.scalar(nll);
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn nll_of_halving_probabilities_is_ln4() {
        // rows chosen so the targeted token has probability 1/2, 1/4, 1/8
        let rows: Vec<f64> = [0.5f64, 0.25, 0.125]
            .iter()
            .flat_map(|&p| {
                let rest = (1.0 - p) / 3.0;
                [p.ln(), rest.ln(), rest.ln(), rest.ln()]
            })
            .collect();
        let mut g = Graph::new();
        let l = g.constant(m(3, 4, &rows));
        let nll = g.cross_entropy(l, &[Some(0), Some(0), Some(0)]).unwrap();
        assert!((g.scalar(nll) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(g.cross_entropy(l, &[Some(4)]), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        g.param(ParamId(0), m(1, 3, &[1.0, 2.0, 3.0]));
        let c = g.constant(Tensor::scalar(4.0));
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient_is_twice_w() {
        let mut g = Graph::new();
        let w = g.param(ParamId(7), m(1, 3, &[1.5, -2.0, 0.25]));
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(ParamId(7)).unwrap().data(), &[3.0, -4.0, 0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let w = g.param(ParamId(0), Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(w), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn causal_scores_mask_future() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64 * 0.1));
        let s = g.causal_attention_scores(q, q, 2).unwrap();
        let v = g.value(s);
        assert_eq!(v.shape(), &[6, 3]);
        assert_eq!(v.row(0)[1], ATTENTION_MASK_VALUE);
        let p = g.row_softmax(s);
        for r in 0..6 {
            let row = g.value(p).row(r);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(g.value(p).row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn entropy_of_uniform_and_peaked_rows() {
        let mut g = Graph::new();
        let mut t = Tensor::zeros(&[2, 10]);
        t.data_mut()[10 + 4] = 1e4;
        let l = g.constant(t);
        let h0 = g.mean_row_entropy(l, &[0]).unwrap();
        let h1 = g.mean_row_entropy(l, &[1]).unwrap();
        assert!((g.scalar(h0) - 10f64.ln()).abs() < 1e-12);
        assert!(g.scalar(h1).abs() < 1e-12);
    }

    #[test]
    fn finite_difference_square() {
        let p = [(ParamId(0), Tensor::scalar(3.0))];
        let g = finite_difference_gradient(|ps| Ok(ps[0].1.data()[0].powi(2)), &p, 1e-5).unwrap();
        assert!((g.get(ParamId(0)).unwrap().data()[0] - 6.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| Ok(2.0), &p, 1e-5).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data()[0], 0.0);
    }

    #[test]
    fn finite_difference_sin() {
        let w = Tensor::from_fn(&[4], |i| 0.3 * i as f64 - 0.5);
        let p = [(ParamId(1), w.clone())];
        let g = finite_difference_gradient(
            |ps| Ok(ps[0].1.data().iter().map(|&v| math::sin(v)).sum()),
            &p,
            1e-5,
        )
        .unwrap();
        for (gi, wi) in g.get(ParamId(1)).unwrap().data().iter().zip(w.data()) {
            assert!((gi - math::cos(*wi)).abs() < 1e-9);
        }
    }

    #[test]
    fn finite_difference_rejects_nonpositive_step() {
        let p = [(ParamId(0), Tensor::scalar(1.0))];
        assert!(finite_difference_gradient(|_| Ok(0.0), &p, 0.0).is_err());
    }

    #[test]
    fn shared_parameter_accumulates_paths() {
        // loss = sum(w*w) + sum(3w)  ->  2w + 3
        let mut g = Graph::new();
        let w = g.param(ParamId(0), m(1, 2, &[1.0, -1.0]));
        let sq = g.mul(w, w).unwrap();
        let a = g.sum(sq);
        let s3 = g.scale(w, 3.0);
        let b = g.sum(s3);
        let total = g.add(a, b).unwrap();
        let grads = g.backward(total).unwrap();
        assert_eq!(grads.get(ParamId(0)).unwrap().data(), &[5.0, 1.0]);
    }
}
