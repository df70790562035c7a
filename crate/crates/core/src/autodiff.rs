//! Minimal reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation applied during one forward pass.
//! [`Tape::backward`] walks the record in reverse and accumulates gradients
//! for every node and for every parameter that entered the tape through
//! [`Tape::param`]. Parameters live in a [`ParamStore`] outside the tape, so a
//! tape is cheap to throw away after each optimisation step.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{concatenate, s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Handle to a parameter in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Encoder stages, in their only legal composition order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Token,
    Graph,
    Sequence,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Token, Stage::Graph, Stage::Sequence];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Token => "token",
            Stage::Graph => "graph",
            Stage::Sequence => "sequence",
        }
    }
}

/// Ownership group of a parameter. Freezing works per group.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    Encoder(Stage),
    Head(String),
}

impl Group {
    pub fn is_encoder(&self) -> bool {
        matches!(self, Group::Encoder(_))
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub group: Group,
    pub value: Array2<T>,
}

/// Named, grouped parameter matrices.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    frozen: BTreeSet<Group>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), frozen: BTreeSet::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Array2<T>) -> ParamId {
        self.entries.push(ParamEntry { name: name.into(), group, value });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform(-1/sqrt(d), 1/sqrt(d)) initialisation, used for embedding tables.
    pub fn add_embedding<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        rows: usize,
        dim: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (dim.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn((rows, dim), |_| T::of(rng.random_range(-bound..=bound)));
        self.add(name, group, value)
    }

    /// Glorot-uniform initialisation, used for weight matrices.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        let value =
            Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.random_range(-bound..=bound)));
        self.add(name, group, value)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, group: Group, rows: usize, cols: usize) -> ParamId {
        self.add(name, group, Array2::zeros((rows, cols)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.entries[id.0].value
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn freeze(&mut self, group: Group) {
        self.frozen.insert(group);
    }

    pub fn unfreeze(&mut self, group: &Group) {
        self.frozen.remove(group);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen.contains(&self.entries[id.0].group)
    }

    pub fn frozen_groups(&self) -> &BTreeSet<Group> {
        &self.frozen
    }

    /// Number of learnable scalars, optionally restricted to one group predicate.
    pub fn scalar_count(&self, filter: impl Fn(&Group) -> bool) -> usize {
        self.entries.iter().filter(|e| filter(&e.group)).map(|e| e.value.len()).sum()
    }

    /// Drops every parameter registered at or after position `len`.
    pub fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Gather(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    Sum(Var),
    SumCols(Var),
    Reshape(Var),
    MeanRows(Var),
    NormalizeRows(Var, Array2<T>),
    SoftmaxRows(Var),
    LayerNorm(Var, Array2<T>),
    CrossEntropy(Var, Vec<usize>, Array2<T>),
    BceLogits(Var, Array2<T>),
}

#[derive(Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

/// Record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    nodes: Vec<Option<Array2<T>>>,
    params: BTreeMap<ParamId, Array2<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Array2<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Array2<T>> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Array2<T>> {
        &self.params
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

const LN_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-12;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, x: T) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Brings a parameter onto the tape. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let value = store.value(id).clone();
        if store.is_frozen(id) {
            self.push(value, Op::Leaf)
        } else {
            self.push(value, Op::Param(id))
        }
    }

    /// Gathers rows of a parameter without copying the whole table onto the tape.
    pub fn param_rows(&mut self, store: &ParamStore<T>, id: ParamId, rows: &[usize]) -> Var {
        let p = self.param(store, id);
        self.gather(p, rows)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds a 1xC row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row expects a single row");
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| if x > T::zero() { x } else { T::zero() });
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.tanh());
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn gather(&mut self, a: Var, rows: &[usize]) -> Var {
        let src = self.value(a);
        let v = src.select(Axis(0), rows);
        self.push(v, Op::Gather(a, rows.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<ArrayView2<T>> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Row sums, as an Rx1 node.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.push(v, Op::SumCols(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape must keep the element count");
        let v = Array2::from_shape_vec((rows, cols), x.iter().copied().collect()).expect("checked length");
        self.push(v, Op::Reshape(a))
    }

    /// Row-wise dot products of two equally shaped nodes, as an Rx1 node.
    pub fn row_dots(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_cols(m)
    }

    /// Column means, as a 1xC node.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let v = self.value(a).mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0));
        self.push(v, Op::MeanRows(a))
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let norms = x
            .map_axis(Axis(1), |r| r.dot(&r).sqrt().max(T::of(NORM_EPS)))
            .insert_axis(Axis(1));
        let v = x / &norms;
        self.push(v, Op::NormalizeRows(a, norms))
    }

    /// Row-wise softmax. With `causal`, entry (i, j) for j > i is masked out.
    pub fn softmax_rows(&mut self, a: Var, causal: bool) -> Var {
        let mut v = self.value(a).clone();
        for (i, mut row) in v.rows_mut().into_iter().enumerate() {
            let limit = if causal { i + 1 } else { row.len() };
            let max = row.iter().take(limit).fold(T::neg_infinity(), |m, &x| m.max(x));
            let mut total = T::zero();
            for (j, x) in row.iter_mut().enumerate() {
                if j < limit {
                    *x = (*x - max).exp();
                    total += *x;
                } else {
                    *x = T::zero();
                }
            }
            row.mapv_inplace(|x| x / total);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise standardisation without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = T::of(x.ncols() as f64);
        let mean = x.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
        let centered = x - &mean;
        let var = (&centered * &centered).sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
        let inv_std = var.mapv(|v| T::one() / (v + T::of(LN_EPS)).sqrt());
        let v = &centered * &inv_std;
        self.push(v, Op::LayerNorm(a, inv_std))
    }

    /// Mean cross-entropy of row-wise softmax(logits) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.nrows(), targets.len(), "one target per logit row");
        let mut probs = x.clone();
        let mut loss = T::zero();
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let n = T::of(targets.len() as f64);
        let v = Array2::from_elem((1, 1), loss / n);
        self.push(v, Op::CrossEntropy(logits, targets.to_vec(), probs))
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Array2<T>) -> Var {
        let x = self.value(logits);
        assert_eq!(x.dim(), targets.dim(), "targets must match logits");
        let n = T::of(x.len() as f64);
        let loss = x
            .iter()
            .zip(targets.iter())
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::BceLogits(logits, targets))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: Array2<T>) -> Var {
        let t = self.constant(target);
        let d = self.sub(pred, t);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward starts from a scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        let mut params: BTreeMap<ParamId, Array2<T>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => grads[idx] = Some(g),
                Op::Param(id) => {
                    match params.get_mut(id) {
                        Some(acc) => *acc += &g,
                        None => {
                            params.insert(*id, g.clone());
                        }
                    }
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[b.0], g.mapv(|x| -x));
                    accumulate(&mut grads[a.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[row.0], gr);
                }
                Op::Scale(a, k) => accumulate(&mut grads[a.0], &g * *k),
                Op::Relu(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= T::zero() {
                            *d = T::zero()
                        }
                    });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |d, &y| *d *= T::one() - y * y);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g.clone();
                    ga.zip_mut_with(&node.value, |d, &y| *d *= y * (T::one() - y));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Gather(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        accumulate(&mut grads[p.0], g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let h = self.value(*p).nrows();
                        accumulate(&mut grads[p.0], g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.t().to_owned()),
                Op::Sum(a) => {
                    let ga = Array2::from_elem(self.value(*a).dim(), g[[0, 0]]);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SumCols(a) => {
                    let ga = g.broadcast(self.value(*a).dim()).expect("column broadcast").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Reshape(a) => {
                    let ga = Array2::from_shape_vec(self.value(*a).dim(), g.iter().copied().collect())
                        .expect("same element count");
                    accumulate(&mut grads[a.0], ga);
                }
                Op::MeanRows(a) => {
                    let (n, c) = self.value(*a).dim();
                    let scaled = &g / T::of(n as f64);
                    let ga = scaled.broadcast((n, c)).expect("row broadcast").to_owned();
                    accumulate(&mut grads[a.0], ga);
                }
                Op::NormalizeRows(a, norms) => {
                    // d/dx (x/|x|) = (g - y (g·y)) / |x|
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = (&g - &(y * &dots)) / norms;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dots = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    let ga = y * &(&g - &dots);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    let y = &node.value;
                    let c = T::of(y.ncols() as f64);
                    let g_mean = g.sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                    let gy_mean = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1)) / c;
                    let ga = &(&(&g - &g_mean) - &(y * &gy_mean)) * inv_std;
                    accumulate(&mut grads[a.0], ga);
                }
                Op::CrossEntropy(a, targets, probs) => {
                    let scale = g[[0, 0]] / T::of(targets.len() as f64);
                    let mut ga = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        ga[[i, t]] -= T::one();
                    }
                    ga.mapv_inplace(|x| x * scale);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::BceLogits(a, targets) => {
                    let x = self.value(*a);
                    let scale = g[[0, 0]] / T::of(x.len() as f64);
                    let mut ga = x.mapv(sigmoid);
                    ga.zip_mut_with(targets, |p, &y| *p = (*p - y) * scale);
                    accumulate(&mut grads[a.0], ga);
                }
            }
        }
        Gradients { nodes: grads, params }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// First-order optimisers over a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug)]
pub struct Optimizer<T> {
    kind: OptimizerKind,
    lr: T,
    step: i32,
    moments: BTreeMap<ParamId, (Array2<T>, Array2<T>)>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self { kind, lr: T::of(lr), step: 0, moments: BTreeMap::new() }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    /// Applies one update to every non-frozen parameter with a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let (b1, b2, eps) = (T::of(0.9), T::of(0.999), T::of(1e-8));
        let bc1 = T::one() - b1.powi(self.step);
        let bc2 = T::one() - b2.powi(self.step);
        for (id, g) in grads.params() {
            if store.is_frozen(*id) {
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    let lr = self.lr;
                    store.value_mut(*id).zip_mut_with(g, |p, &d| *p -= lr * d);
                }
                OptimizerKind::Adam => {
                    let shape = g.dim();
                    let (m, v) = self
                        .moments
                        .entry(*id)
                        .or_insert_with(|| (Array2::zeros(shape), Array2::zeros(shape)));
                    m.zip_mut_with(g, |m, &d| *m = b1 * *m + (T::one() - b1) * d);
                    v.zip_mut_with(g, |v, &d| *v = b2 * *v + (T::one() - b2) * d * d);
                    let lr = self.lr;
                    let p = store.value_mut(*id);
                    ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                        *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                    });
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let eps = 1e-6;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += eps;
            m.as_slice_mut().unwrap()[idx] -= eps;
            g.as_slice_mut().unwrap()[idx] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn check(build: impl Fn(&mut Tape<f64>, Var) -> Var, x: Array2<f64>) {
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let out = build(&mut t, v);
            t.scalar(out)
        };
        let mut t = Tape::new();
        let v = t.constant(x.clone());
        let out = build(&mut t, v);
        let grads = t.backward(out);
        let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = numeric_grad(f, &x);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() < 1e-6 * (1.0 + n.abs()), "analytic {a} vs numeric {n}");
        }
    }

    fn sample() -> Array2<f64> {
        array![[0.3, -1.2, 0.7], [1.1, 0.4, -0.5]]
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        check(|t, x| { let y = t.tanh(x); t.sum(y) }, sample());
        check(|t, x| { let y = t.sigmoid(x); let z = t.mul(y, x); t.sum(z) }, sample());
        check(|t, x| { let y = t.relu(x); let z = t.mul(y, y); t.sum(z) }, sample());
        check(|t, x| { let y = t.scale(x, 3.0); let z = t.sub(y, x); t.mean(z) }, sample());
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        check(|t, x| { let y = t.matmul_t(x, x); let z = t.mul(y, y); t.sum(z) }, sample());
        check(|t, x| { let y = t.reshape(x, 3, 2); let z = t.mul(y, y); let w = t.sum_cols(z); let q = t.mul(w, w); t.sum(q) }, sample());
        check(|t, x| { let y = t.tanh(x); let d = t.row_dots(x, y); let q = t.mul(d, d); t.sum(q) }, sample());
        check(|t, x| { let xt = t.transpose(x); let y = t.matmul(x, xt); let z = t.tanh(y); t.sum(z) }, sample());
        check(|t, x| { let g = t.gather(x, &[1, 0, 1]); let z = t.mul(g, g); t.sum(z) }, sample());
        check(|t, x| {
            let a = t.slice_cols(x, 1, 2);
            let b = t.slice_rows(x, 1, 1);
            let c = t.concat_cols(&[a, a]);
            let r = t.mean_rows(c);
            let bb = t.concat_rows(&[b, b]);
            let q = t.mul(bb, bb);
            let s1 = t.sum(r);
            let s2 = t.sum(q);
            let s3 = t.mul(s1, s2);
            t.tanh(s3)
        }, sample());
        check(|t, x| {
            let row = t.slice_rows(x, 0, 1);
            let y = t.add_row(x, row);
            let z = t.mul(y, y);
            t.sum(z)
        }, sample());
    }

    #[test]
    fn normalising_ops_match_finite_differences() {
        let w = array![[0.2, -0.4, 0.9], [0.5, 0.1, -0.3]];
        check(move |t, x| { let y = t.normalize_rows(x); let c = t.constant(w.clone()); let z = t.mul(y, c); t.sum(z) }, sample());
        let w = array![[0.2, -0.4, 0.9], [0.5, 0.1, -0.3]];
        check(move |t, x| { let y = t.layer_norm(x); let c = t.constant(w.clone()); let z = t.mul(y, c); t.sum(z) }, sample());
        let w = array![[0.2, -0.4], [0.5, 0.1]];
        check(move |t, x| {
            let s = t.matmul_t(x, x);
            let y = t.softmax_rows(s, true);
            let c = t.constant(w.clone());
            let z = t.mul(y, c);
            t.sum(z)
        }, sample());
        check(|t, x| { let y = t.softmax_rows(x, false); let z = t.mul(y, x); t.sum(z) }, sample());
    }

    #[test]
    fn losses_match_finite_differences() {
        check(|t, x| t.cross_entropy(x, &[2, 0]), sample());
        check(|t, x| t.bce_with_logits(x, array![[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]), sample());
        check(|t, x| t.mse(x, array![[1.0, 0.0, 1.0], [0.0, 2.0, 1.0]]), sample());
    }

    #[test]
    fn causal_softmax_masks_future_columns() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Array2::zeros((3, 3)));
        let y = t.softmax_rows(x, true);
        let v = t.value(y);
        assert_eq!(v.row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15 && v[[1, 2]] == 0.0);
    }

    #[test]
    fn bce_at_zero_logit_is_ln_two() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(Array2::zeros((4, 1)));
        let l = t.bce_with_logits(x, array![[1.0], [0.0], [1.0], [0.0]]);
        assert!((t.scalar(l) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_receive_no_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.add("a", Group::Encoder(Stage::Token), array![[1.0, 2.0]]);
        let b = store.add("b", Group::Head("x".into()), array![[3.0, 4.0]]);
        store.freeze(Group::Encoder(Stage::Token));
        let mut t = Tape::new();
        let va = t.param(&store, a);
        let vb = t.param(&store, b);
        let p = t.mul(va, vb);
        let l = t.sum(p);
        let g = t.backward(l);
        assert!(g.param(a).is_none());
        assert_eq!(g.param(b).unwrap(), &array![[1.0, 2.0]]);
        let mut opt = Optimizer::sgd(0.5);
        opt.step(&mut store, &g);
        assert_eq!(store.value(a), &array![[1.0, 2.0]]);
        assert_eq!(store.value(b), &array![[2.5, 3.0]]);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut store = ParamStore::<f32>::new();
        let a = store.add("a", Group::Head("h".into()), array![[1.0f32, -1.0]]);
        let mut opt = Optimizer::adam(0.1);
        for _ in 0..50 {
            let mut t = Tape::new();
            let v = t.param(&store, a);
            let l = t.mse(v, Array2::zeros((1, 2)));
            let g = t.backward(l);
            opt.step(&mut store, &g);
        }
        assert!(store.value(a).iter().all(|x| x.abs() < 0.5));
    }
}
