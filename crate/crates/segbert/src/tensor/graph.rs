//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every forward operation appends a node to a shared tape; [`Graph::backward`]
//! replays the tape in reverse, accumulating gradients additively at fan-out.
//! Tensors are 2-D (scalars are 1x1), 64-bit, row-major. A graph lives for one
//! forward/backward pass; parameters persist outside it in a [`ParamStore`] and
//! are bound as leaves each pass.

use std::cell::RefCell;
use std::rc::Rc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("attention mask row {row} has no unmasked entries")]
    DegenerateMask { row: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("backward called before any forward computation")]
    BackwardBeforeForward,
    #[error("token id {id} out of vocabulary (size {vocab})")]
    Vocabulary { id: usize, vocab: usize },
    #[error("non-finite gradient for parameter `{name}`; step aborted")]
    PoisonedGradient { name: String },
}

/// Persistent named parameters (the trainable state of a model).
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Id of the i-th entry in creation order (the iteration order of
    /// [`ParamStore::iter`]).
    pub fn index(i: usize) -> Self {
        Self(i)
    }

    pub fn as_index(self) -> usize {
        self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), rows * cols, "param `{}` shape/data mismatch", name);
        assert!(self.find(&name).is_none(), "duplicate param name `{}`", name);
        self.entries.push(ParamEntry { name, rows, cols, data });
        ParamId(self.entries.len() - 1)
    }

    pub fn zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, rows, cols, vec![0.0; rows * cols])
    }

    pub fn constant(&mut self, name: impl Into<String>, rows: usize, cols: usize, v: f64) -> ParamId {
        self.add(name, rows, cols, vec![v; rows * cols])
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry {
        &mut self.entries[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    // c = a . b^T
    MatMulBt { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    // [n x d] + broadcast [1 x d]
    AddRow { a: usize, row: usize },
    Scale { a: usize, c: f64 },
    // elementwise product with a 1x1 tensor
    ScaleByScalar { a: usize, s: usize },
    Relu { a: usize },
    Tanh { a: usize },
    Sigmoid { a: usize },
    // row softmax over unmasked entries; masked outputs are exactly 0
    SoftmaxRows { a: usize, mask: Option<Rc<Vec<bool>>> },
    LayerNorm { a: usize, gamma: usize, beta: usize, eps: f64 },
    GatherRows { a: usize, idx: Rc<Vec<usize>> },
    ConcatCols { parts: Rc<Vec<usize>> },
    ConcatRows { parts: Rc<Vec<usize>> },
    SliceCols { a: usize, start: usize },
    SliceRows { a: usize, start: usize },
    // rows t of the output are the k source rows centred on t, zero-padded
    UnfoldTime { a: usize, k: usize },
    MeanAll { a: usize },
    SumAll { a: usize },
    Dropout { a: usize, keep: Rc<Vec<f64>> },
    // mean binary cross-entropy against fixed targets, from logits
    BceWithLogits { a: usize, targets: Rc<Vec<f64>> },
}

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
}

#[derive(Default)]
struct Tape {
    nodes: Vec<Node>,
    // (param index in the bound store, node id)
    bindings: Vec<(usize, usize)>,
}

/// Handle to a shared tape. Cloning is cheap; a graph is single-threaded.
#[derive(Clone, Default)]
pub struct Graph {
    tape: Rc<RefCell<Tape>>,
}

/// A node handle. All operations append to the owning graph's tape.
#[derive(Clone)]
pub struct Tensor {
    graph: Graph,
    id: usize,
    rows: usize,
    cols: usize,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}


impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), rows * cols);
        let grad = vec![0.0; data.len()];
        let mut tape = self.tape.borrow_mut();
        tape.nodes.push(Node { rows, cols, data, grad, op });
        Tensor { graph: self.clone(), id: tape.nodes.len() - 1, rows, cols }
    }

    /// A constant (non-parameter) leaf.
    pub fn constant(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        assert_eq!(data.len(), rows * cols, "constant shape/data mismatch");
        self.push(rows, cols, data, Op::Leaf)
    }

    pub fn zeros(&self, rows: usize, cols: usize) -> Tensor {
        self.push(rows, cols, vec![0.0; rows * cols], Op::Leaf)
    }

    /// Binds a stored parameter as a leaf of this graph.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Tensor {
        let e = store.get(id);
        let t = self.push(e.rows, e.cols, e.data.clone(), Op::Leaf);
        self.tape.borrow_mut().bindings.push((id.0, t.id));
        t
    }

    pub fn node_count(&self) -> usize {
        self.tape.borrow().nodes.len()
    }

    /// Reverse pass from a scalar loss. Zeroes all gradients first, seeds the
    /// loss with 1, then visits each node exactly once in reverse order.
    pub fn backward(&self, loss: &Tensor) -> Result<(), TensorError> {
        if loss.rows != 1 || loss.cols != 1 {
            return Err(TensorError::NonScalarLoss { rows: loss.rows, cols: loss.cols });
        }
        let mut tape = self.tape.borrow_mut();
        if tape.nodes.is_empty() {
            return Err(TensorError::BackwardBeforeForward);
        }
        for n in tape.nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        tape.nodes[loss.id].grad[0] = 1.0;

        for i in (0..tape.nodes.len()).rev() {
            backprop_node(&mut tape.nodes, i);
        }
        Ok(())
    }

    /// Gradients for every entry of `store`, aligned by index. Parameters that
    /// were never bound to this graph (or are unreachable from the loss) get
    /// zero gradients.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Vec<f64>> {
        let tape = self.tape.borrow();
        let mut out: Vec<Vec<f64>> = store
            .entries
            .iter()
            .map(|e| vec![0.0; e.data.len()])
            .collect();
        for &(pidx, nid) in &tape.bindings {
            let g = &tape.nodes[nid].grad;
            for (dst, src) in out[pidx].iter_mut().zip(g) {
                *dst += *src;
            }
        }
        out
    }
}

impl Tensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    /// Copies the node's values out of the tape.
    pub fn value(&self) -> Vec<f64> {
        self.graph.tape.borrow().nodes[self.id].data.clone()
    }

    pub fn scalar(&self) -> f64 {
        assert!(self.rows == 1 && self.cols == 1, "scalar() on {}x{}", self.rows, self.cols);
        self.graph.tape.borrow().nodes[self.id].data[0]
    }

    pub fn grad(&self) -> Vec<f64> {
        self.graph.tape.borrow().nodes[self.id].grad.clone()
    }

    fn data_of(&self, id: usize) -> (usize, usize, Vec<f64>) {
        let tape = self.graph.tape.borrow();
        let n = &tape.nodes[id];
        (n.rows, n.cols, n.data.clone())
    }

    pub fn matmul(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols, rhs.rows, "matmul {}x{} . {}x{}", self.rows, self.cols, rhs.rows, rhs.cols);
        let (_, _, a) = self.data_of(self.id);
        let (_, _, b) = self.data_of(rhs.id);
        let mut out = vec![0.0; self.rows * rhs.cols];
        matmul_into(&a, &b, self.rows, self.cols, rhs.cols, &mut out);
        self.graph.push(self.rows, rhs.cols, out, Op::MatMul { a: self.id, b: rhs.id })
    }

    /// `self . rhs^T` without materializing the transpose.
    pub fn matmul_bt(&self, rhs: &Tensor) -> Tensor {
        assert_eq!(self.cols, rhs.cols, "matmul_bt {}x{} . ({}x{})^T", self.rows, self.cols, rhs.rows, rhs.cols);
        let (_, _, a) = self.data_of(self.id);
        let (_, _, b) = self.data_of(rhs.id);
        let mut out = vec![0.0; self.rows * rhs.rows];
        matmul_bt_into(&a, &b, self.rows, self.cols, rhs.rows, &mut out);
        self.graph.push(self.rows, rhs.rows, out, Op::MatMulBt { a: self.id, b: rhs.id })
    }

    pub fn add(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, "add", |x, y| x + y, |a, b| Op::Add { a, b })
    }

    pub fn sub(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, "sub", |x, y| x - y, |a, b| Op::Sub { a, b })
    }

    pub fn mul(&self, rhs: &Tensor) -> Tensor {
        self.zip_same_shape(rhs, "mul", |x, y| x * y, |a, b| Op::Mul { a, b })
    }

    fn zip_same_shape(
        &self,
        rhs: &Tensor,
        opname: &str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Tensor {
        assert!(
            self.rows == rhs.rows && self.cols == rhs.cols,
            "{opname} shape mismatch {}x{} vs {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let (_, _, a) = self.data_of(self.id);
        let (_, _, b) = self.data_of(rhs.id);
        let out = a.iter().zip(&b).map(|(x, y)| f(*x, *y)).collect();
        self.graph.push(self.rows, self.cols, out, op(self.id, rhs.id))
    }

    /// Adds a 1xd row vector to every row.
    pub fn add_row(&self, row: &Tensor) -> Tensor {
        assert!(row.rows == 1 && row.cols == self.cols, "add_row {}x{} + {}x{}", self.rows, self.cols, row.rows, row.cols);
        let (_, _, a) = self.data_of(self.id);
        let (_, _, r) = self.data_of(row.id);
        let mut out = a;
        for chunk in out.chunks_mut(self.cols) {
            for (v, b) in chunk.iter_mut().zip(&r) {
                *v += *b;
            }
        }
        self.graph.push(self.rows, self.cols, out, Op::AddRow { a: self.id, row: row.id })
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let out = a.iter().map(|x| x * c).collect();
        self.graph.push(self.rows, self.cols, out, Op::Scale { a: self.id, c })
    }

    /// Elementwise product with a trainable 1x1 scalar.
    pub fn scale_by(&self, s: &Tensor) -> Tensor {
        assert!(s.rows == 1 && s.cols == 1, "scale_by expects 1x1");
        let (_, _, a) = self.data_of(self.id);
        let sv = s.scalar();
        let out = a.iter().map(|x| x * sv).collect();
        self.graph.push(self.rows, self.cols, out, Op::ScaleByScalar { a: self.id, s: s.id })
    }

    pub fn relu(&self) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let out = a.iter().map(|x| x.max(0.0)).collect();
        self.graph.push(self.rows, self.cols, out, Op::Relu { a: self.id })
    }

    pub fn tanh_act(&self) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let out = a.iter().map(|x| x.tanh()).collect();
        self.graph.push(self.rows, self.cols, out, Op::Tanh { a: self.id })
    }

    pub fn sigmoid(&self) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let out = a.iter().map(|x| sigmoid(*x)).collect();
        self.graph.push(self.rows, self.cols, out, Op::Sigmoid { a: self.id })
    }

    /// Row softmax. With a mask, probability mass is distributed over the
    /// unmasked entries only and masked outputs are exactly zero. Rows with no
    /// unmasked entry must be rejected by the caller beforehand.
    pub fn softmax_rows(&self, mask: Option<Rc<Vec<bool>>>) -> Tensor {
        if let Some(m) = &mask {
            assert_eq!(m.len(), self.rows * self.cols, "softmax mask shape");
        }
        let (_, _, a) = self.data_of(self.id);
        let mut out = vec![0.0; a.len()];
        for r in 0..self.rows {
            let lo = r * self.cols;
            let row = &a[lo..lo + self.cols];
            let keep = |j: usize| mask.as_ref().map_or(true, |m| m[lo + j]);
            let mut mx = f64::NEG_INFINITY;
            for (j, v) in row.iter().enumerate() {
                if keep(j) && *v > mx {
                    mx = *v;
                }
            }
            debug_assert!(mx.is_finite(), "softmax row {r} fully masked");
            let mut z = 0.0;
            for (j, v) in row.iter().enumerate() {
                if keep(j) {
                    let e = (*v - mx).exp();
                    out[lo + j] = e;
                    z += e;
                }
            }
            for j in 0..self.cols {
                if keep(j) {
                    out[lo + j] /= z;
                }
            }
        }
        self.graph.push(self.rows, self.cols, out, Op::SoftmaxRows { a: self.id, mask })
    }

    /// Per-row standardization followed by the gamma/beta affine map.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Tensor {
        assert!(gamma.rows == 1 && gamma.cols == self.cols, "layer_norm gamma shape");
        assert!(beta.rows == 1 && beta.cols == self.cols, "layer_norm beta shape");
        let (_, _, a) = self.data_of(self.id);
        let (_, _, g) = self.data_of(gamma.id);
        let (_, _, b) = self.data_of(beta.id);
        let d = self.cols as f64;
        let mut out = vec![0.0; a.len()];
        for r in 0..self.rows {
            let lo = r * self.cols;
            let row = &a[lo..lo + self.cols];
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..self.cols {
                out[lo + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        self.graph.push(self.rows, self.cols, out, Op::LayerNorm { a: self.id, gamma: gamma.id, beta: beta.id, eps })
    }

    /// Row lookup (embedding): out row i = self row idx[i].
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Tensor, TensorError> {
        for &i in idx {
            if i >= self.rows {
                return Err(TensorError::Vocabulary { id: i, vocab: self.rows });
            }
        }
        let (_, _, a) = self.data_of(self.id);
        let mut out = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            out.extend_from_slice(&a[i * self.cols..(i + 1) * self.cols]);
        }
        Ok(self.graph.push(
            idx.len(),
            self.cols,
            out,
            Op::GatherRows { a: self.id, idx: Rc::new(idx.to_vec()) },
        ))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.cols, "slice_cols out of range");
        let (_, _, a) = self.data_of(self.id);
        let mut out = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            let lo = r * self.cols + start;
            out.extend_from_slice(&a[lo..lo + len]);
        }
        self.graph.push(self.rows, len, out, Op::SliceCols { a: self.id, start })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Tensor {
        assert!(start + len <= self.rows, "slice_rows out of range");
        let (_, _, a) = self.data_of(self.id);
        let out = a[start * self.cols..(start + len) * self.cols].to_vec();
        self.graph.push(len, self.cols, out, Op::SliceRows { a: self.id, start })
    }

    /// Unfolds a [T x d] sequence into [T x k*d]: row t holds the k rows
    /// centred on t (zero rows beyond the ends). k must be odd.
    pub fn unfold_time(&self, k: usize) -> Tensor {
        assert!(k % 2 == 1, "unfold_time needs odd k");
        let h = k / 2;
        let (_, _, a) = self.data_of(self.id);
        let d = self.cols;
        let mut out = vec![0.0; self.rows * k * d];
        for t in 0..self.rows {
            for j in 0..k {
                let src = t as isize + j as isize - h as isize;
                if src >= 0 && (src as usize) < self.rows {
                    let src = src as usize;
                    out[t * k * d + j * d..t * k * d + (j + 1) * d]
                        .copy_from_slice(&a[src * d..(src + 1) * d]);
                }
            }
        }
        self.graph.push(self.rows, k * d, out, Op::UnfoldTime { a: self.id, k })
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        let graph = parts[0].graph.clone();
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let datas: Vec<(usize, Vec<f64>)> = parts
            .iter()
            .map(|p| {
                assert_eq!(p.rows, rows, "concat_cols row mismatch");
                (p.cols, p.data_of(p.id).2)
            })
            .collect();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for (c, d) in &datas {
                out.extend_from_slice(&d[r * c..(r + 1) * c]);
            }
        }
        let ids = Rc::new(parts.iter().map(|p| p.id).collect::<Vec<_>>());
        graph.push(rows, cols, out, Op::ConcatCols { parts: ids })
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty());
        let cols = parts[0].cols;
        let graph = parts[0].graph.clone();
        let rows: usize = parts.iter().map(|p| p.rows).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for p in parts {
            assert_eq!(p.cols, cols, "concat_rows column mismatch");
            out.extend_from_slice(&p.data_of(p.id).2);
        }
        let ids = Rc::new(parts.iter().map(|p| p.id).collect::<Vec<_>>());
        graph.push(rows, cols, out, Op::ConcatRows { parts: ids })
    }

    pub fn mean_all(&self) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let m = a.iter().sum::<f64>() / a.len() as f64;
        self.graph.push(1, 1, vec![m], Op::MeanAll { a: self.id })
    }

    pub fn sum_all(&self) -> Tensor {
        let (_, _, a) = self.data_of(self.id);
        let s = a.iter().sum::<f64>();
        self.graph.push(1, 1, vec![s], Op::SumAll { a: self.id })
    }

    /// Inverted dropout with a fixed keep mask (entries 0 or 1/(1-p)).
    pub fn dropout(&self, keep: Rc<Vec<f64>>) -> Tensor {
        assert_eq!(keep.len(), self.rows * self.cols, "dropout mask shape");
        let (_, _, a) = self.data_of(self.id);
        let out = a.iter().zip(keep.iter()).map(|(x, k)| x * k).collect();
        self.graph.push(self.rows, self.cols, out, Op::Dropout { a: self.id, keep })
    }

    /// Numerically stable mean BCE against fixed 0/1 targets, from logits.
    pub fn bce_with_logits_mean(&self, targets: &[f64]) -> Tensor {
        assert_eq!(targets.len(), self.rows * self.cols, "bce target length");
        let (_, _, z) = self.data_of(self.id);
        let n = z.len() as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(z, y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        self.graph.push(1, 1, vec![loss], Op::BceWithLogits { a: self.id, targets: Rc::new(targets.to_vec()) })
    }

    /// Mean squared error against another tensor of the same shape.
    pub fn mse_vs(&self, other: &Tensor) -> Tensor {
        let d = self.sub(other);
        d.mul(&d).mean_all()
    }
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

/// out += a[n x k] . b[k x m]
fn matmul_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (p, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[p * m..(p + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

/// out += a[n x k] . b[m x k]^T
fn matmul_bt_into(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            *o += s;
        }
    }
}

/// out += a[k x n]^T . b[k x m]  (used for dB in matmul backward)
fn matmul_at_into(a: &[f64], b: &[f64], k: usize, n: usize, m: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * n..(p + 1) * n];
        let brow = &b[p * m..(p + 1) * m];
        for (i, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }
}

fn backprop_node(nodes: &mut [Node], i: usize) {
    let op = std::mem::replace(&mut nodes[i].op, Op::Leaf);
    match &op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (n, k, m) = (nodes[i].rows, nodes[*a].cols, nodes[i].cols);
            let g = nodes[i].grad.clone();
            let bdata = nodes[*b].data.clone();
            let adata = nodes[*a].data.clone();
            // dA += G . B^T
            matmul_bt_into(&g, &bdata, n, m, k, &mut nodes[*a].grad);
            // dB += A^T . G
            matmul_at_into(&adata, &g, n, k, m, &mut nodes[*b].grad);
        }
        Op::MatMulBt { a, b } => {
            let (n, k, m) = (nodes[i].rows, nodes[*a].cols, nodes[i].cols);
            let g = nodes[i].grad.clone();
            let bdata = nodes[*b].data.clone();
            let adata = nodes[*a].data.clone();
            // C = A . B^T: dA += G . B ; dB += G^T . A
            matmul_into(&g, &bdata, n, m, k, &mut nodes[*a].grad);
            matmul_at_into(&g, &adata, n, m, k, &mut nodes[*b].grad);
        }
        Op::Add { a, b } => {
            let g = nodes[i].grad.clone();
            add_into(&mut nodes[*a].grad, &g, 1.0);
            add_into(&mut nodes[*b].grad, &g, 1.0);
        }
        Op::Sub { a, b } => {
            let g = nodes[i].grad.clone();
            add_into(&mut nodes[*a].grad, &g, 1.0);
            add_into(&mut nodes[*b].grad, &g, -1.0);
        }
        Op::Mul { a, b } => {
            let g = nodes[i].grad.clone();
            let ad = nodes[*a].data.clone();
            let bd = nodes[*b].data.clone();
            for ((dst, gv), bv) in nodes[*a].grad.iter_mut().zip(&g).zip(&bd) {
                *dst += gv * bv;
            }
            for ((dst, gv), av) in nodes[*b].grad.iter_mut().zip(&g).zip(&ad) {
                *dst += gv * av;
            }
        }
        Op::AddRow { a, row } => {
            let g = nodes[i].grad.clone();
            let cols = nodes[i].cols;
            add_into(&mut nodes[*a].grad, &g, 1.0);
            for chunk in g.chunks(cols) {
                for (dst, gv) in nodes[*row].grad.iter_mut().zip(chunk) {
                    *dst += gv;
                }
            }
        }
        Op::Scale { a, c } => {
            let g = nodes[i].grad.clone();
            add_into(&mut nodes[*a].grad, &g, *c);
        }
        Op::ScaleByScalar { a, s } => {
            let g = nodes[i].grad.clone();
            let sv = nodes[*s].data[0];
            let ad = nodes[*a].data.clone();
            add_into(&mut nodes[*a].grad, &g, sv);
            let ds: f64 = g.iter().zip(&ad).map(|(gv, av)| gv * av).sum();
            nodes[*s].grad[0] += ds;
        }
        Op::Relu { a } => {
            let g = nodes[i].grad.clone();
            let ad = nodes[*a].data.clone();
            for ((dst, gv), x) in nodes[*a].grad.iter_mut().zip(&g).zip(&ad) {
                if *x > 0.0 {
                    *dst += gv;
                }
            }
        }
        Op::Tanh { a } => {
            let g = nodes[i].grad.clone();
            let y = nodes[i].data.clone();
            for ((dst, gv), yv) in nodes[*a].grad.iter_mut().zip(&g).zip(&y) {
                *dst += gv * (1.0 - yv * yv);
            }
        }
        Op::Sigmoid { a } => {
            let g = nodes[i].grad.clone();
            let y = nodes[i].data.clone();
            for ((dst, gv), yv) in nodes[*a].grad.iter_mut().zip(&g).zip(&y) {
                *dst += gv * yv * (1.0 - yv);
            }
        }
        Op::SoftmaxRows { a, mask } => {
            let g = nodes[i].grad.clone();
            let y = nodes[i].data.clone();
            let (rows, cols) = (nodes[i].rows, nodes[i].cols);
            for r in 0..rows {
                let lo = r * cols;
                let keep = |j: usize| mask.as_ref().map_or(true, |m| m[lo + j]);
                let mut dot = 0.0;
                for j in 0..cols {
                    if keep(j) {
                        dot += g[lo + j] * y[lo + j];
                    }
                }
                for j in 0..cols {
                    if keep(j) {
                        nodes[*a].grad[lo + j] += y[lo + j] * (g[lo + j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { a, gamma, beta, eps } => {
            let g = nodes[i].grad.clone();
            let (rows, cols) = (nodes[i].rows, nodes[i].cols);
            let x = nodes[*a].data.clone();
            let gm = nodes[*gamma].data.clone();
            let d = cols as f64;
            for r in 0..rows {
                let lo = r * cols;
                let row = &x[lo..lo + cols];
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                let inv = 1.0 / (var + eps).sqrt();
                // x_hat and the two row means needed by the input gradient
                let mut mean_gh = 0.0;
                let mut mean_ghx = 0.0;
                for j in 0..cols {
                    let xh = (row[j] - mean) * inv;
                    let gh = g[lo + j] * gm[j];
                    mean_gh += gh;
                    mean_ghx += gh * xh;
                    nodes[*gamma].grad[j] += g[lo + j] * xh;
                    nodes[*beta].grad[j] += g[lo + j];
                }
                mean_gh /= d;
                mean_ghx /= d;
                for j in 0..cols {
                    let xh = (row[j] - mean) * inv;
                    let gh = g[lo + j] * gm[j];
                    nodes[*a].grad[lo + j] += (gh - mean_gh - xh * mean_ghx) * inv;
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let g = nodes[i].grad.clone();
            let cols = nodes[i].cols;
            for (r, &src) in idx.iter().enumerate() {
                let grow = &g[r * cols..(r + 1) * cols];
                let dst = &mut nodes[*a].grad[src * cols..(src + 1) * cols];
                for (d, gv) in dst.iter_mut().zip(grow) {
                    *d += gv;
                }
            }
        }
        Op::ConcatCols { parts } => {
            let g = nodes[i].grad.clone();
            let rows = nodes[i].rows;
            let total = nodes[i].cols;
            let mut offset = 0;
            for &p in parts.iter() {
                let pc = nodes[p].cols;
                for r in 0..rows {
                    let src = &g[r * total + offset..r * total + offset + pc];
                    let dst = &mut nodes[p].grad[r * pc..(r + 1) * pc];
                    for (d, gv) in dst.iter_mut().zip(src) {
                        *d += gv;
                    }
                }
                offset += pc;
            }
        }
        Op::ConcatRows { parts } => {
            let g = nodes[i].grad.clone();
            let cols = nodes[i].cols;
            let mut offset = 0;
            for &p in parts.iter() {
                let pr = nodes[p].rows;
                let src = &g[offset * cols..(offset + pr) * cols];
                for (d, gv) in nodes[p].grad.iter_mut().zip(src) {
                    *d += gv;
                }
                offset += pr;
            }
        }
        Op::SliceCols { a, start } => {
            let g = nodes[i].grad.clone();
            let (rows, len) = (nodes[i].rows, nodes[i].cols);
            let acols = nodes[*a].cols;
            for r in 0..rows {
                let dst = &mut nodes[*a].grad[r * acols + start..r * acols + start + len];
                let src = &g[r * len..(r + 1) * len];
                for (d, gv) in dst.iter_mut().zip(src) {
                    *d += gv;
                }
            }
        }
        Op::SliceRows { a, start } => {
            let g = nodes[i].grad.clone();
            let cols = nodes[i].cols;
            let dst = &mut nodes[*a].grad[start * cols..start * cols + g.len()];
            for (d, gv) in dst.iter_mut().zip(&g) {
                *d += gv;
            }
        }
        Op::UnfoldTime { a, k } => {
            let g = nodes[i].grad.clone();
            let rows = nodes[i].rows;
            let d = nodes[*a].cols;
            let h = k / 2;
            for t in 0..rows {
                for j in 0..*k {
                    let src = t as isize + j as isize - h as isize;
                    if src >= 0 && (src as usize) < rows {
                        let src = src as usize;
                        let gv = &g[t * k * d + j * d..t * k * d + (j + 1) * d];
                        let dst = &mut nodes[*a].grad[src * d..(src + 1) * d];
                        for (x, y) in dst.iter_mut().zip(gv) {
                            *x += y;
                        }
                    }
                }
            }
        }
        Op::MeanAll { a } => {
            let g = nodes[i].grad[0];
            let n = nodes[*a].data.len() as f64;
            let gv = g / n;
            for d in nodes[*a].grad.iter_mut() {
                *d += gv;
            }
        }
        Op::SumAll { a } => {
            let g = nodes[i].grad[0];
            for d in nodes[*a].grad.iter_mut() {
                *d += g;
            }
        }
        Op::Dropout { a, keep } => {
            let g = nodes[i].grad.clone();
            for ((dst, gv), kv) in nodes[*a].grad.iter_mut().zip(&g).zip(keep.iter()) {
                *dst += gv * kv;
            }
        }
        Op::BceWithLogits { a, targets } => {
            let g = nodes[i].grad[0];
            let n = targets.len() as f64;
            let z = nodes[*a].data.clone();
            for ((dst, zv), yv) in nodes[*a].grad.iter_mut().zip(&z).zip(targets.iter()) {
                *dst += g * (sigmoid(*zv) - yv) / n;
            }
        }
    }
    nodes[i].op = op;
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s * scale;
    }
}
