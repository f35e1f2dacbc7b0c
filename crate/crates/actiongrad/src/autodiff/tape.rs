//! The recording tape: an append-only arena of operation nodes.
//!
//! Forward values are computed eagerly as nodes are appended, so the tape is
//! always in topological order and the backward pass is a single reverse scan
//! that visits each node exactly once. Shape mismatches in primitive ops are
//! programming errors and panic with a description; fallible validation
//! belongs to the higher-level entry points that accept user configuration.

use super::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Relu(usize),
    Gelu(usize),
    Tanh(usize),
    Exp(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize },
    Transpose(usize),
    SliceCols { x: usize, start: usize, len: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, idx: Vec<usize> },
    Interleave3(usize, usize, usize),
    Expectile { u: usize, tau: f64 },
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    vals: Vec<f64>,
    op: Op,
    rg: bool,
}

/// Gradients of one scalar output with respect to every node that needed them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient buffer for `id`, if that node required gradients and was
    /// reachable from the differentiated output.
    pub fn wrt(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// row-major matmul kernels; the `a != 0` skip pays off on one-hot inputs and
// zero padding.
fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let brow = &b[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
    }
}

// out[m,k] += g[m,n] * b[k,n]^T
fn mm_nt(g: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            orow[kk] += acc;
        }
    }
}

// out[k,n] += a[m,k]^T * g[m,n]
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av != 0.0 {
                let orow = &mut out[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] += av * grow[j];
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

const LN_EPS: f64 = 1e-5;

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

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].vals
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = &self.nodes[id.0];
        (n.rows, n.cols)
    }

    fn push(&mut self, rows: usize, cols: usize, vals: Vec<f64>, op: Op, rg: bool) -> NodeId {
        debug_assert_eq!(vals.len(), rows * cols);
        self.nodes.push(Node { rows, cols, vals, op, rg });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].rg
    }

    /// Record a tensor as a leaf. Gradient participation follows the tensor's
    /// `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims2();
        self.push(r, c, t.values.clone(), Op::Leaf, t.requires_grad)
    }

    /// Constant leaf from raw row-major values.
    pub fn constant(&mut self, rows: usize, cols: usize, vals: Vec<f64>) -> NodeId {
        assert_eq!(vals.len(), rows * cols, "constant shape mismatch");
        self.push(rows, cols, vals, Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![0.0; m * n];
        mm_nn(&self.nodes[a.0].vals, &self.nodes[b.0].vals, m, k, n, &mut out);
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(m, n, out, Op::MatMul(a.0, b.0), rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "add shape mismatch");
        let vals = self.nodes[a.0]
            .vals
            .iter()
            .zip(&self.nodes[b.0].vals)
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(r, c, vals, Op::Add(a.0, b.0), rg)
    }

    /// `[m,n] + [1,n]` row broadcast, the bias pattern.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (m, n) = self.dims(a);
        assert_eq!((1, n), self.dims(row), "add_row wants [1,{n}]");
        let rv = &self.nodes[row.0].vals;
        let mut vals = self.nodes[a.0].vals.clone();
        for i in 0..m {
            for j in 0..n {
                vals[i * n + j] += rv[j];
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(m, n, vals, Op::AddRow(a.0, row.0), rg)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "sub shape mismatch");
        let vals = self.nodes[a.0]
            .vals
            .iter()
            .zip(&self.nodes[b.0].vals)
            .map(|(x, y)| x - y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(r, c, vals, Op::Sub(a.0, b.0), rg)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "mul shape mismatch");
        let vals = self.nodes[a.0]
            .vals
            .iter()
            .zip(&self.nodes[b.0].vals)
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(r, c, vals, Op::Mul(a.0, b.0), rg)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        assert_eq!((r, c), self.dims(b), "div shape mismatch");
        let vals = self.nodes[a.0]
            .vals
            .iter()
            .zip(&self.nodes[b.0].vals)
            .map(|(x, y)| x / y)
            .collect();
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(r, c, vals, Op::Div(a.0, b.0), rg)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cc) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x * c).collect();
        let rg = self.rg(a.0);
        self.push(r, cc, vals, Op::Scale(a.0, c), rg)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let (r, cc) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x + c).collect();
        let rg = self.rg(a.0);
        self.push(r, cc, vals, Op::AddScalar(a.0), rg)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|&x| x.max(0.0)).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Relu(a.0), rg)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Gelu(a.0), rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Tanh(a.0), rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x.exp()).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Exp(a.0), rg)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x.abs()).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Abs(a.0), rg)
    }

    /// Elementwise clamp; gradient passes only where lo <= x <= hi.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        assert!(lo <= hi, "clamp lo > hi");
        let (r, c) = self.dims(a);
        let vals = self.nodes[a.0].vals.iter().map(|x| x.clamp(lo, hi)).collect();
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::Clamp(a.0, lo, hi), rg)
    }

    /// Full reduction to a [1,1] scalar, summed in flat index order.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.nodes[a.0].vals.iter().sum();
        let rg = self.rg(a.0);
        self.push(1, 1, vec![total], Op::Sum(a.0), rg)
    }

    /// Row-wise softmax with max subtraction. A row entry at -1e30 (the mask
    /// convention) underflows to exactly zero probability.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].vals;
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                vals[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                vals[i * c + j] /= z;
            }
        }
        let rg = self.rg(a.0);
        self.push(r, c, vals, Op::SoftmaxRows(a.0), rg)
    }

    /// Per-row layer normalization with learned gain and bias rows.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        assert_eq!((1, c), self.dims(gain), "layer_norm gain wants [1,{c}]");
        assert_eq!((1, c), self.dims(bias), "layer_norm bias wants [1,{c}]");
        let src = &self.nodes[x.0].vals;
        let g = &self.nodes[gain.0].vals;
        let b = &self.nodes[bias.0].vals;
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for j in 0..c {
                vals[i * c + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        self.push(r, c, vals, Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0 }, rg)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].vals;
        let mut vals = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                vals[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(a.0);
        self.push(c, r, vals, Op::Transpose(a.0), rg)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = self.dims(a);
        assert!(start + len <= c, "slice_cols {start}+{len} > {c}");
        let src = &self.nodes[a.0].vals;
        let mut vals = Vec::with_capacity(r * len);
        for i in 0..r {
            vals.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(a.0);
        self.push(r, len, vals, Op::SliceCols { x: a.0, start, len }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let r = self.dims(parts[0]).0;
        let total: usize = parts.iter().map(|p| self.dims(*p).1).sum();
        let mut vals = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let (pr, pc) = self.dims(*p);
                assert_eq!(pr, r, "concat_cols row mismatch");
                let src = &self.nodes[p.0].vals;
                vals.extend_from_slice(&src[i * pc..(i + 1) * pc]);
            }
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        self.push(r, total, vals, Op::ConcatCols(parts.iter().map(|p| p.0).collect()), rg)
    }

    /// Select rows by index (repeats allowed; backward accumulates).
    pub fn gather_rows(&mut self, a: NodeId, idx: &[usize]) -> NodeId {
        let (r, c) = self.dims(a);
        let src = &self.nodes[a.0].vals;
        let mut vals = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            assert!(i < r, "gather_rows index {i} out of {r}");
            vals.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let rg = self.rg(a.0);
        self.push(idx.len(), c, vals, Op::GatherRows { x: a.0, idx: idx.to_vec() }, rg)
    }

    /// Interleave three [L,c] matrices row-wise into [3L,c]:
    /// a0,b0,c0,a1,b1,c1,...
    pub fn interleave3(&mut self, a: NodeId, b: NodeId, c: NodeId) -> NodeId {
        let (l, w) = self.dims(a);
        assert_eq!((l, w), self.dims(b), "interleave3 shape mismatch");
        assert_eq!((l, w), self.dims(c), "interleave3 shape mismatch");
        let mut vals = Vec::with_capacity(3 * l * w);
        for i in 0..l {
            vals.extend_from_slice(&self.nodes[a.0].vals[i * w..(i + 1) * w]);
            vals.extend_from_slice(&self.nodes[b.0].vals[i * w..(i + 1) * w]);
            vals.extend_from_slice(&self.nodes[c.0].vals[i * w..(i + 1) * w]);
        }
        let rg = self.rg(a.0) || self.rg(b.0) || self.rg(c.0);
        self.push(3 * l, w, vals, Op::Interleave3(a.0, b.0, c.0), rg)
    }

    /// Elementwise asymmetric squared loss `|tau - 1(u<0)| * u^2`. Its
    /// derivative `2 |tau - 1(u<0)| u` is continuous at zero.
    pub fn expectile(&mut self, u: NodeId, tau: f64) -> NodeId {
        let (r, c) = self.dims(u);
        let vals = self.nodes[u.0]
            .vals
            .iter()
            .map(|&x| {
                let w = if x < 0.0 { 1.0 - tau } else { tau };
                w * x * x
            })
            .collect();
        let rg = self.rg(u.0);
        self.push(r, c, vals, Op::Expectile { u: u.0, tau }, rg)
    }

    /// Reverse pass from a [1,1] scalar output. Errors if `output` is not on
    /// this tape or is not scalar.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if output.0 >= self.nodes.len() {
            return Err(Error::Usage(format!(
                "backward: node {} is not on this tape (len {})",
                output.0,
                self.nodes.len()
            )));
        }
        let (r, c) = self.dims(output);
        if (r, c) != (1, 1) {
            return Err(Error::Usage(format!(
                "backward: output must be scalar, got [{r},{c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);

        for i in (0..=output.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[i].rg {
                continue;
            }
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn ensure<'a>(
        grads: &'a mut [Option<Vec<f64>>],
        nodes: &[Node],
        i: usize,
    ) -> &'a mut Vec<f64> {
        if grads[i].is_none() {
            grads[i] = Some(vec![0.0; nodes[i].vals.len()]);
        }
        grads[i].as_mut().unwrap()
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[*a].rows, nodes[*a].cols);
                let n = nodes[*b].cols;
                if nodes[*a].rg {
                    let bv = &nodes[*b].vals;
                    let ga = Self::ensure(grads, nodes, *a);
                    mm_nt(g, bv, m, n, k, ga);
                }
                if nodes[*b].rg {
                    let av = &nodes[*a].vals;
                    let gb = Self::ensure(grads, nodes, *b);
                    mm_tn(av, g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for &inp in &[*a, *b] {
                    if nodes[inp].rg {
                        let gi = Self::ensure(grads, nodes, inp);
                        for (d, s) in gi.iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::AddRow(a, row) => {
                if nodes[*a].rg {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if nodes[*row].rg {
                    let (m, n) = (node.rows, node.cols);
                    let gr = Self::ensure(grads, nodes, *row);
                    for i2 in 0..m {
                        for j in 0..n {
                            gr[j] += g[i2 * n + j];
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if nodes[*a].rg {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if nodes[*b].rg {
                    let gb = Self::ensure(grads, nodes, *b);
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                if nodes[*a].rg {
                    let bv = nodes[*b].vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((d, s), bv) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s * bv;
                    }
                }
                if nodes[*b].rg {
                    let av = nodes[*a].vals.clone();
                    let gb = Self::ensure(grads, nodes, *b);
                    for ((d, s), av) in gb.iter_mut().zip(g).zip(&av) {
                        *d += s * av;
                    }
                }
            }
            Op::Div(a, b) => {
                if nodes[*a].rg {
                    let bv = nodes[*b].vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for ((d, s), bv) in ga.iter_mut().zip(g).zip(&bv) {
                        *d += s / bv;
                    }
                }
                if nodes[*b].rg {
                    let av = nodes[*a].vals.clone();
                    let bv = nodes[*b].vals.clone();
                    let gb = Self::ensure(grads, nodes, *b);
                    for i2 in 0..gb.len() {
                        gb[i2] -= g[i2] * av[i2] / (bv[i2] * bv[i2]);
                    }
                }
            }
            Op::Scale(a, c) => {
                if nodes[*a].rg {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s * c;
                    }
                }
            }
            Op::AddScalar(a) => {
                if nodes[*a].rg {
                    let ga = Self::ensure(grads, nodes, *a);
                    for (d, s) in ga.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Relu(a) => {
                if nodes[*a].rg {
                    let xv = nodes[*a].vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        if xv[i2] > 0.0 {
                            ga[i2] += g[i2];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if nodes[*a].rg {
                    let xv = nodes[*a].vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        ga[i2] += g[i2] * gelu_grad(xv[i2]);
                    }
                }
            }
            Op::Tanh(a) => {
                if nodes[*a].rg {
                    let yv = node.vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        ga[i2] += g[i2] * (1.0 - yv[i2] * yv[i2]);
                    }
                }
            }
            Op::Exp(a) => {
                if nodes[*a].rg {
                    let yv = node.vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        ga[i2] += g[i2] * yv[i2];
                    }
                }
            }
            Op::Abs(a) => {
                if nodes[*a].rg {
                    let xv = nodes[*a].vals.clone();
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        ga[i2] += g[i2] * if xv[i2] > 0.0 { 1.0 } else if xv[i2] < 0.0 { -1.0 } else { 0.0 };
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if nodes[*a].rg {
                    let xv = nodes[*a].vals.clone();
                    let (lo, hi) = (*lo, *hi);
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..ga.len() {
                        if xv[i2] >= lo && xv[i2] <= hi {
                            ga[i2] += g[i2];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if nodes[*a].rg {
                    let ga = Self::ensure(grads, nodes, *a);
                    for d in ga.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if nodes[*a].rg {
                    let yv = node.vals.clone();
                    let (r, c) = (node.rows, node.cols);
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..r {
                        let yrow = &yv[i2 * c..(i2 + 1) * c];
                        let grow = &g[i2 * c..(i2 + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(y, gg)| y * gg).sum();
                        for j in 0..c {
                            ga[i2 * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let (r, c) = (node.rows, node.cols);
                let xv = nodes[*x].vals.clone();
                let gv = nodes[*gain].vals.clone();
                // Recompute per-row statistics; cheaper than caching for these sizes.
                let mut xhat = vec![0.0; r * c];
                let mut inv = vec![0.0; r];
                for i2 in 0..r {
                    let row = &xv[i2 * c..(i2 + 1) * c];
                    let mean = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                    inv[i2] = 1.0 / (var + LN_EPS).sqrt();
                    for j in 0..c {
                        xhat[i2 * c + j] = (row[j] - mean) * inv[i2];
                    }
                }
                if nodes[*bias].rg {
                    let gb = Self::ensure(grads, nodes, *bias);
                    for i2 in 0..r {
                        for j in 0..c {
                            gb[j] += g[i2 * c + j];
                        }
                    }
                }
                if nodes[*gain].rg {
                    let gg = Self::ensure(grads, nodes, *gain);
                    for i2 in 0..r {
                        for j in 0..c {
                            gg[j] += g[i2 * c + j] * xhat[i2 * c + j];
                        }
                    }
                }
                if nodes[*x].rg {
                    let gx = Self::ensure(grads, nodes, *x);
                    for i2 in 0..r {
                        let mut mean_dy = 0.0;
                        let mut mean_dy_xhat = 0.0;
                        for j in 0..c {
                            let dy = g[i2 * c + j] * gv[j];
                            mean_dy += dy;
                            mean_dy_xhat += dy * xhat[i2 * c + j];
                        }
                        mean_dy /= c as f64;
                        mean_dy_xhat /= c as f64;
                        for j in 0..c {
                            let dy = g[i2 * c + j] * gv[j];
                            gx[i2 * c + j] +=
                                inv[i2] * (dy - mean_dy - xhat[i2 * c + j] * mean_dy_xhat);
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                if nodes[*a].rg {
                    let (r, c) = (node.rows, node.cols); // output dims
                    let ga = Self::ensure(grads, nodes, *a);
                    for i2 in 0..r {
                        for j in 0..c {
                            ga[j * r + i2] += g[i2 * c + j];
                        }
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                if nodes[*x].rg {
                    let c_in = nodes[*x].cols;
                    let (r, _) = (node.rows, node.cols);
                    let gx = Self::ensure(grads, nodes, *x);
                    for i2 in 0..r {
                        for j in 0..*len {
                            gx[i2 * c_in + start + j] += g[i2 * len + j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.rows;
                let mut offset = 0usize;
                let total = node.cols;
                for &p in parts {
                    let pc = nodes[p].cols;
                    if nodes[p].rg {
                        let gp = Self::ensure(grads, nodes, p);
                        for i2 in 0..r {
                            for j in 0..pc {
                                gp[i2 * pc + j] += g[i2 * total + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::GatherRows { x, idx } => {
                if nodes[*x].rg {
                    let c = node.cols;
                    let gx = Self::ensure(grads, nodes, *x);
                    for (out_i, &src_i) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src_i * c + j] += g[out_i * c + j];
                        }
                    }
                }
            }
            Op::Interleave3(a, b, c3) => {
                let l = node.rows / 3;
                let w = node.cols;
                for (slot, &inp) in [(0usize, a), (1, b), (2, c3)].iter().map(|(s, i3)| (*s, *i3)) {
                    if nodes[inp].rg {
                        let gi = Self::ensure(grads, nodes, inp);
                        for i2 in 0..l {
                            for j in 0..w {
                                gi[i2 * w + j] += g[(3 * i2 + slot) * w + j];
                            }
                        }
                    }
                }
            }
            Op::Expectile { u, tau } => {
                if nodes[*u].rg {
                    let uv = nodes[*u].vals.clone();
                    let tau = *tau;
                    let gu = Self::ensure(grads, nodes, *u);
                    for i2 in 0..gu.len() {
                        let w = if uv[i2] < 0.0 { 1.0 - tau } else { tau };
                        gu[i2] += g[i2] * 2.0 * w * uv[i2];
                    }
                }
            }
        }
    }
}
