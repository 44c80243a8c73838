//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters enter the
//! tape through [`Tape::param`], which remembers the [`ParamId`] so that
//! [`Gradients::accumulate_into`] can route gradients back to the owning
//! [`ParamStore`]. Constant inputs enter through [`Tape::leaf`]; their
//! gradients are still available, which lets a caller chain two tapes together
//! (run the downstream tape, read the leaf gradients, seed the upstream tape).

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub module: String,
    pub value: Tensor,
}

/// Named trainable tensors grouped by owning module.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    #[serde(skip)]
    index: HashMap<String, ParamId>,
}

impl PartialEq for ParamStore {
    fn eq(&self, other: &Self) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.module == b.module && a.value == b.value)
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter; `name` must be unique across the store.
    pub fn add(&mut self, module: &str, name: &str, value: Tensor) -> ParamId {
        let full = format!("{module}.{name}");
        assert!(!self.index.contains_key(&full), "duplicate parameter {full}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry { name: full.clone(), module: module.to_string(), value });
        self.index.insert(full, id);
        id
    }

    /// Xavier/Glorot uniform initialisation.
    pub fn add_xavier(&mut self, module: &str, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        self.add(module, name, xavier_uniform(rows, cols, rng))
    }

    pub fn add_zeros(&mut self, module: &str, name: &str, rows: usize, cols: usize) -> ParamId {
        self.add(module, name, Tensor::zeros(rows, cols))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        let slot = &mut self.entries[id.0].value;
        assert_eq!(slot.shape(), value.shape(), "shape change for parameter {}", self.entries[id.0].name);
        *slot = value;
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn module_of(&self, id: ParamId) -> &str {
        &self.entries[id.0].module
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn modules(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.module) {
                out.push(e.module.clone());
            }
        }
        out
    }

    /// Rebuilds the name index; call after deserialising.
    pub fn reindex(&mut self) {
        self.index = self.entries.iter().enumerate().map(|(i, e)| (e.name.clone(), ParamId(i))).collect();
    }

    pub fn from_entries(entries: Vec<ParamEntry>) -> Self {
        let mut s = Self { entries, index: HashMap::new() };
        s.reindex();
        s
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn zero_grads(&self) -> ParamGrads {
        ParamGrads { grads: self.entries.iter().map(|e| Tensor::zeros(e.value.rows(), e.value.cols())).collect() }
    }
}

pub fn xavier_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(rows, cols, data)
}

/// Dense per-parameter gradient buffers, index-aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGrads {
    grads: Vec<Tensor>,
}

impl ParamGrads {
    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn add_assign(&mut self, other: &ParamGrads) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().enumerate().map(|(i, g)| (ParamId(i), g))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Exp(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows(Var, Vec<usize>),
    SegmentSoftmax(Var, Vec<usize>),
    Transpose(Var),
    Reshape(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    BceWithLogits(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// One forward pass worth of recorded operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Output of [`Tape::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `v` when nothing flowed into it.
    pub fn get_or_zeros(&self, tape: &Tape, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| {
            let (r, c) = tape.value(v).shape();
            Tensor::zeros(r, c)
        })
    }

    /// Adds every parameter gradient recorded on `tape` into `out`.
    pub fn accumulate_into(&self, tape: &Tape, out: &mut ParamGrads) {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.get_mut(*id).add_assign(g);
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_nt(self.value(b));
        self.push(v, Op::MatMulNT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 x c` row `row` to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "add_row expects a 1x{} row", av.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `row`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.shape(), (1, av.cols()), "mul_row expects a 1x{} row", av.cols());
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(rv.data()) {
                *o *= b;
            }
        }
        self.push(out, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by `col[i]` for an `r x 1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (av, cv) = (self.value(a), self.value(col));
        assert_eq!(cv.shape(), (av.rows(), 1), "mul_col expects a {}x1 column", av.rows());
        let mut out = av.clone();
        for r in 0..out.rows() {
            let s = cv.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scaled(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    /// Numerically stable `ln σ(x)`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(log_sigmoid);
        self.push(v, Op::LogSigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), false);
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row softmax where entry `(i, j)` with `j > i` is excluded (weight 0).
    pub fn causal_softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a), true);
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let lse = log_sum_exp(row);
            for (o, &v) in out.row_mut(r).iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        self.push(out, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `r x c -> 1 x c`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = vec![0.0; x.cols()];
        for r in 0..x.rows() {
            for (o, v) in out.iter_mut().zip(x.row(r)) {
                *o += v;
            }
        }
        self.push(Tensor::row_vector(out), Op::SumRows(a))
    }

    /// Column means: `r x c -> 1 x c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows() as f64;
        let s = self.sum_rows(a);
        self.scale(s, 1.0 / n)
    }

    /// Row sums: `r x c -> r x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let out = (0..x.rows()).map(|r| x.row(r).iter().sum()).collect();
        self.push(Tensor::col_vector(out), Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let pv = self.value(p);
                assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows col mismatch");
            data.extend_from_slice(pv.data());
            rows += pv.rows();
        }
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols());
        let mut out = Tensor::zeros(x.rows(), len);
        for r in 0..x.rows() {
            out.row_mut(r).copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows());
        let c = x.cols();
        let out = Tensor::from_vec(len, c, x.data()[start * c..(start + len) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = self.value(a);
        let c = x.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(x.row(i));
        }
        self.push(Tensor::from_vec(idx.len(), c, data), Op::GatherRows(a, idx.to_vec()))
    }

    /// `out[idx[i]] += a[i]` into an `n x c` zero matrix.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), idx.len());
        let mut out = Tensor::zeros(n, x.cols());
        for (i, &t) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(t).iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAddRows(a, idx.to_vec()))
    }

    /// Softmax of an `e x 1` score column within groups sharing `segment[i]`.
    pub fn segment_softmax(&mut self, a: Var, segment: &[usize]) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), (segment.len(), 1));
        let out = segment_softmax(x.data(), segment);
        self.push(Tensor::col_vector(out), Op::SegmentSoftmax(a, segment.to_vec()))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).reshape(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// Per-row standardisation without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let (mean, inv) = row_moments(x.row(r), eps);
            for o in out.row_mut(r) {
                *o = (*o - mean) * inv;
            }
        }
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// Scales each row to unit L2 norm; all-zero rows pass through unchanged.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for r in 0..x.rows() {
            let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for o in out.row_mut(r) {
                    *o /= n;
                }
            }
        }
        self.push(out, Op::L2NormalizeRows(a))
    }

    /// Mean sigmoid binary cross-entropy of `logits` against 0/1 `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Tensor) -> Var {
        let x = self.value(logits);
        assert_eq!(x.shape(), targets.shape());
        let n = x.len() as f64;
        let total: f64 = x.data().iter().zip(targets.data()).map(|(&z, &y)| bce_term(z, y)).sum();
        self.push(Tensor::scalar(total / n), Op::BceWithLogits(logits, targets))
    }

    /// Back-propagates from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be scalar");
        self.backward_seeded(&[(root, Tensor::scalar(1.0))])
    }

    /// Back-propagates from arbitrary seeds `(node, dL/dnode)`.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let start = seeds.iter().map(|(v, _)| v.0).max().map_or(0, |m| m + 1);
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape mismatch");
            accumulate(&mut grads, *v, g.clone());
        }
        for i in (0..start).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                accumulate(grads, *a, g.matmul_nt(val(*b)));
                accumulate(grads, *b, val(*a).matmul_tn(g));
            }
            Op::MatMulNT(a, b) => {
                // out = a bᵀ; da = g b; db = gᵀ a
                accumulate(grads, *a, g.matmul(val(*b)));
                accumulate(grads, *b, g.matmul_tn(val(*a)));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                accumulate(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *row, column_sums(g));
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gr = vec![0.0; rv.cols()];
                for r in 0..g.rows() {
                    for (c, (o, gv)) in ga.row_mut(r).iter_mut().zip(g.row(r)).enumerate() {
                        *o = gv * rv.data()[c];
                        gr[c] += gv * av.get(r, c);
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *row, Tensor::row_vector(gr));
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                let av = val(*a);
                let mut ga = g.clone();
                let mut gc = vec![0.0; cv.rows()];
                for r in 0..g.rows() {
                    let s = cv.data()[r];
                    gc[r] = dot(g.row(r), av.row(r));
                    for o in ga.row_mut(r) {
                        *o *= s;
                    }
                }
                accumulate(grads, *a, ga);
                accumulate(grads, *col, Tensor::col_vector(gc));
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scaled(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::Sigmoid(a) => {
                let out = &node.value;
                accumulate(grads, *a, g.zip_map(out, |gv, y| gv * y * (1.0 - y)));
            }
            Op::Relu(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| if x > 0.0 { gv } else { s * gv }));
            }
            Op::Exp(a) => accumulate(grads, *a, g.zip_map(&node.value, |gv, y| gv * y)),
            Op::LogSigmoid(a) => {
                accumulate(grads, *a, g.zip_map(val(*a), |gv, x| gv * sigmoid(-x)));
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let gsum: f64 = g.row(r).iter().sum();
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = g.get(r, c) - y.get(r, c).exp() * gsum;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, Tensor::filled(r, c, g.item()));
            }
            Op::SumRows(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(g.data());
                }
                accumulate(grads, *a, ga);
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    let gv = g.data()[i];
                    ga.row_mut(i).iter_mut().for_each(|o| *o = gv);
                }
                accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for i in 0..r {
                        gp.row_mut(i).copy_from_slice(&g.row(i)[off..off + c]);
                    }
                    off += c;
                    accumulate(grads, p, gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    let gp = Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec());
                    off += r;
                    accumulate(grads, p, gp);
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                accumulate(grads, *a, ga);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                ga.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *a, ga);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, v) in ga.row_mut(src).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::ScatterAddRows(a, idx) => {
                let c = g.cols();
                let mut data = Vec::with_capacity(idx.len() * c);
                for &t in idx {
                    data.extend_from_slice(g.row(t));
                }
                accumulate(grads, *a, Tensor::from_vec(idx.len(), c, data));
            }
            Op::SegmentSoftmax(a, seg) => {
                let y = node.value.data();
                let gd = g.data();
                let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
                let mut inner = vec![0.0; nseg];
                for (k, &s) in seg.iter().enumerate() {
                    inner[s] += y[k] * gd[k];
                }
                let out = (0..y.len()).map(|k| y[k] * (gd[k] - inner[seg[k]])).collect();
                accumulate(grads, *a, Tensor::col_vector(out));
            }
            Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                accumulate(grads, *a, g.reshape(r, c));
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let (_, inv) = row_moments(x.row(r), *eps);
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let gmean = gr.iter().sum::<f64>() / n;
                    let gy = dot(gr, yr) / n;
                    for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                        *o = inv * (gr[c] - gmean - yr[c] * gy);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = Tensor::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    let gr = g.row(r);
                    if n > 0.0 {
                        let gy = dot(gr, y.row(r));
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - y.get(r, c) * gy) / n;
                        }
                    } else {
                        ga.row_mut(r).copy_from_slice(gr);
                    }
                }
                accumulate(grads, *a, ga);
            }
            Op::BceWithLogits(a, targets) => {
                let x = val(*a);
                let scale = g.item() / x.len() as f64;
                accumulate(grads, *a, x.zip_map(targets, |z, y| (sigmoid(z) - y) * scale));
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(g: &Tensor) -> Tensor {
    let mut out = vec![0.0; g.cols()];
    for r in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    Tensor::row_vector(out)
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

#[inline]
fn bce_term(z: f64, y: f64) -> f64 {
    -(y * log_sigmoid(z) + (1.0 - y) * log_sigmoid(-z))
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn softmax_rows(x: &Tensor, causal: bool) -> Tensor {
    let mut out = Tensor::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        let visible = if causal { (r + 1).min(x.cols()) } else { x.cols() };
        let sm = softmax(&x.row(r)[..visible]);
        out.row_mut(r)[..visible].copy_from_slice(&sm);
    }
    out
}

fn segment_softmax(x: &[f64], seg: &[usize]) -> Vec<f64> {
    let nseg = seg.iter().copied().max().map_or(0, |m| m + 1);
    let mut maxes = vec![f64::NEG_INFINITY; nseg];
    for (&v, &s) in x.iter().zip(seg) {
        maxes[s] = maxes[s].max(v);
    }
    let mut sums = vec![0.0; nseg];
    let e: Vec<f64> = x
        .iter()
        .zip(seg)
        .map(|(&v, &s)| {
            let e = (v - maxes[s]).exp();
            sums[s] += e;
            e
        })
        .collect();
    e.iter().zip(seg).map(|(v, &s)| v / sums[s]).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    /// Central-difference check of d(sum(w ⊙ f(x)))/dx for one unary builder.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, x: Tensor, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let xv = t.leaf(x.clone());
        let y = build(&mut t, xv);
        let w = random(t.value(y).rows(), t.value(y).cols(), &mut rng);
        let wv = t.leaf(w.clone());
        let prod = t.mul(y, wv);
        let loss = t.sum_all(prod);
        let grads = t.backward(loss);
        let analytic = grads.get_or_zeros(&t, xv);

        let eval = |x: &Tensor| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone());
            let y = build(&mut t, xv);
            t.value(y).zip_map(&w, |a, b| a * b).sum()
        };
        let eps = 1e-6;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[i] += eps;
            let mut xm = x.clone();
            xm.data_mut()[i] -= eps;
            let numeric = (eval(&xp) - eval(&xm)) / (2.0 * eps);
            let a = analytic.data()[i];
            assert!((a - numeric).abs() <= tol * (1.0 + a.abs()), "index {i}: analytic {a} numeric {numeric}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(3, 4, &mut rng);
        check_unary(|t, v| t.sigmoid(v), x.clone(), 1e-7);
        check_unary(|t, v| t.leaky_relu(v, 0.2), x.clone(), 1e-7);
        check_unary(|t, v| t.exp(v), x.clone(), 1e-7);
        check_unary(|t, v| t.log_sigmoid(v), x.clone(), 1e-7);
        check_unary(|t, v| t.softmax_rows(v), x.clone(), 1e-7);
        check_unary(|t, v| t.causal_softmax_rows(v), random(4, 4, &mut rng), 1e-7);
        check_unary(|t, v| t.log_softmax_rows(v), x.clone(), 1e-7);
        check_unary(|t, v| t.layer_norm_rows(v, 1e-5), x.clone(), 1e-6);
        check_unary(|t, v| t.l2_normalize_rows(v), x.clone(), 1e-7);
        check_unary(|t, v| t.transpose(v), x.clone(), 1e-7);
        check_unary(|t, v| t.reshape(v, 2, 6), x.clone(), 1e-7);
        check_unary(|t, v| t.sum_rows(v), x.clone(), 1e-7);
        check_unary(|t, v| t.sum_cols(v), x.clone(), 1e-7);
        check_unary(|t, v| t.slice_cols(v, 1, 2), x.clone(), 1e-7);
        check_unary(|t, v| t.slice_rows(v, 1, 2), x.clone(), 1e-7);
        check_unary(|t, v| t.gather_rows(v, &[2, 0, 2]), x.clone(), 1e-7);
        check_unary(|t, v| t.scatter_add_rows(v, &[1, 1, 0], 2), x.clone(), 1e-7);
        check_unary(|t, v| t.matmul_nt(v, v), x.clone(), 1e-7);
        check_unary(
            |t, v| {
                let col = t.sum_cols(v);
                t.segment_softmax(col, &[0, 1, 0])
            },
            x.clone(),
            1e-7,
        );
        let y = Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 1.0], vec![1.0; 4]]);
        check_unary(move |t, v| t.bce_with_logits(v, y.clone()), x, 1e-7);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = random(4, 3, &mut rng);
        let row = random(1, 4, &mut rng);
        let col = random(3, 1, &mut rng);
        let x = random(3, 4, &mut rng);
        check_unary(
            {
                let b = b.clone();
                move |t, v| {
                    let bv = t.leaf(b.clone());
                    t.matmul(v, bv)
                }
            },
            x.clone(),
            1e-7,
        );
        check_unary(
            move |t, v| {
                let bv = t.leaf(b.transpose());
                let r = t.leaf(row.clone());
                let c = t.leaf(col.clone());
                let y = t.mul_row(v, r);
                let y = t.mul_col(y, c);
                let y = t.add_row(y, r);
                let y = t.mul(y, v);
                let z = t.matmul_nt(y, bv);
                t.concat_cols(&[z, v])
            },
            x,
            1e-6,
        );
    }

    #[test]
    fn param_grads_route_to_store() {
        let mut store = ParamStore::new();
        let w = store.add("m", "w", Tensor::row_vector(vec![1.0, 2.0]));
        let mut t = Tape::new();
        let a = t.param(&store, w);
        let b = t.param(&store, w);
        let s = t.mul(a, b);
        let loss = t.sum_all(s);
        let g = t.backward(loss);
        let mut pg = store.zero_grads();
        g.accumulate_into(&t, &mut pg);
        assert_eq!(pg.get(w).data(), &[2.0, 4.0]);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_rows(&[vec![1.0, 5.0], vec![1.0, 1.0]]));
        let y = t.causal_softmax_rows(x);
        assert_eq!(t.value(y).row(0), &[1.0, 0.0]);
        assert_eq!(t.value(y).row(1), &[0.5, 0.5]);
    }
}
