//! Reverse-mode tape.
//!
//! Operations are recorded in execution order; `backward` replays them in
//! exact reverse order, accumulating adjoints. The graph is rebuilt per
//! batch (it is dynamic across variable-length utterances), so a tape is
//! cheap to create and is discarded after one backward pass.

use super::{DiffArray, ParamStore};
use crate::error::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    MulScalar(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    LogSumExp(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Ln(NodeId),
    Concat(Vec<NodeId>),
    Row(NodeId, usize),
    Index(NodeId, usize),
    Slice(NodeId, usize),
    Dot(NodeId, NodeId),
    MultiDot(NodeId, Vec<NodeId>),
    WeightedSum(NodeId, Vec<NodeId>),
    Cosine(NodeId, NodeId),
    Sum(NodeId),
    NllGather(NodeId, usize),
}

struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    op: Op,
}

/// Ordered record of primitive operations over flat f64 buffers.
pub struct Tape {
    nodes: Vec<Node>,
    // (param name, mount) pairs; grads per name are summed on write-back.
    params: Vec<(String, NodeId)>,
    backward_done: bool,
}

const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params: Vec::new(),
            backward_done: false,
        }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        assert!(!values.is_empty(), "zero-sized nodes are not supported");
        self.nodes.push(Node { shape, values, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].values
    }

    /// Value of a single-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let n = &self.nodes[id.0];
        assert_eq!(n.values.len(), 1, "node is not a scalar: {:?}", n.shape);
        n.values[0]
    }

    // ── leaves ──────────────────────────────────────────────────────

    /// Constant leaf; receives an adjoint buffer but is not a parameter.
    pub fn leaf(&mut self, array: &DiffArray) -> NodeId {
        self.push(array.shape().to_vec(), array.values().to_vec(), Op::Leaf)
    }

    pub fn leaf_vector(&mut self, values: Vec<f64>) -> NodeId {
        let shape = vec![values.len()];
        self.push(shape, values, Op::Leaf)
    }

    pub fn leaf_scalar(&mut self, x: f64) -> NodeId {
        self.push(vec![1], vec![x], Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        let n = shape.iter().product();
        self.push(shape, vec![0.0; n], Op::Leaf)
    }

    /// Mounts a named parameter from the store as a leaf. Gradients of all
    /// mounts of the same name are summed on `write_param_grads`.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let array = store.get(name);
        let id = self.push(array.shape().to_vec(), array.values().to_vec(), Op::Leaf);
        self.params.push((name.to_string(), id));
        id
    }

    // ── elementwise and linear algebra ──────────────────────────────

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "add shape mismatch: {:?} vs {:?}", sa, sb);
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Scale(a, c))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "mul shape mismatch: {:?} vs {:?}", sa, sb);
        let values = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Mul(a, b))
    }

    /// Broadcast product of any-shape `a` with scalar node `s`.
    pub fn mul_scalar(&mut self, a: NodeId, s: NodeId) -> NodeId {
        assert_eq!(
            self.nodes[s.0].values.len(),
            1,
            "mul_scalar multiplier must be a scalar, got {:?}",
            self.shape(s)
        );
        let sv = self.nodes[s.0].values[0];
        let values = self.nodes[a.0].values.iter().map(|x| x * sv).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::MulScalar(a, s))
    }

    /// [m×k] · [k×n] → [m×n].
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shape mismatch: {:?} vs {:?}",
            sa,
            sb
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let av = &self.nodes[a.0].values;
        let bv = &self.nodes[b.0].values;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let aip = av[i * k + p];
                if aip == 0.0 {
                    continue;
                }
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bpj) in orow.iter_mut().zip(brow) {
                    *o += aip * bpj;
                }
            }
        }
        self.push(vec![m, n], out, Op::MatMul(a, b))
    }

    /// [k] · [k×n] → [n]. Row-vector times matrix; the model's workhorse.
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(
            sx.len() == 1 && sw.len() == 2 && sx[0] == sw[0],
            "vecmat shape mismatch: {:?} vs {:?}",
            sx,
            sw
        );
        let (k, n) = (sw[0], sw[1]);
        let xv = &self.nodes[x.0].values;
        let wv = &self.nodes[w.0].values;
        let mut out = vec![0.0; n];
        for p in 0..k {
            let xp = xv[p];
            if xp == 0.0 {
                continue;
            }
            let wrow = &wv[p * n..(p + 1) * n];
            for (o, &wpj) in out.iter_mut().zip(wrow) {
                *o += xp * wpj;
            }
        }
        self.push(vec![n], out, Op::VecMat(x, w))
    }

    // ── nonlinearities ──────────────────────────────────────────────

    /// Max-shifted softmax over a rank-1 node. NaN input is a hard error.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (shape, values) = self.softmax_values(a)?;
        Ok(self.push(shape, values, Op::Softmax(a)))
    }

    fn softmax_values(&self, a: NodeId) -> Result<(Vec<usize>, Vec<f64>)> {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 1, "softmax needs rank 1, got {:?}", node.shape);
        if node.values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("softmax input".into()));
        }
        let max = node.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = node.values.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        Ok((node.shape.clone(), exps.iter().map(|e| e / sum).collect()))
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 1, "log_softmax needs rank 1, got {:?}", node.shape);
        if node.values.iter().any(|v| v.is_nan()) {
            return Err(Error::NonFinite("log_softmax input".into()));
        }
        let max = node.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + node
                .values
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        let values = node.values.iter().map(|v| v - lse).collect();
        let shape = node.shape.clone();
        Ok(self.push(shape, values, Op::LogSoftmax(a)))
    }

    /// log Σ exp over a rank-1 node, max-shifted.
    pub fn logsumexp(&mut self, a: NodeId) -> NodeId {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 1, "logsumexp needs rank 1, got {:?}", node.shape);
        let max = node.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let v = max
            + node
                .values
                .iter()
                .map(|v| (v - max).exp())
                .sum::<f64>()
                .ln();
        self.push(vec![1], vec![v], Op::LogSumExp(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0]
            .values
            .iter()
            .map(|x| 1.0 / (1.0 + (-x).exp()))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|x| x.tanh()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Tanh(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(shape, values, Op::Ln(a))
    }

    // ── structure ───────────────────────────────────────────────────

    /// Concatenation of rank-1 parts into one rank-1 node.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let mut values = Vec::new();
        for &p in parts {
            assert_eq!(
                self.nodes[p.0].shape.len(),
                1,
                "concat needs rank-1 parts, got {:?}",
                self.nodes[p.0].shape
            );
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let shape = vec![values.len()];
        self.push(shape, values, Op::Concat(parts.to_vec()))
    }

    /// Row `i` of a rank-2 node as a rank-1 node. Also the embedding lookup.
    pub fn row(&mut self, a: NodeId, i: usize) -> NodeId {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 2, "row needs rank 2, got {:?}", node.shape);
        let (rows, cols) = (node.shape[0], node.shape[1]);
        assert!(i < rows, "row {} out of bounds for {} rows", i, rows);
        let values = node.values[i * cols..(i + 1) * cols].to_vec();
        self.push(vec![cols], values, Op::Row(a, i))
    }

    /// Single element at flat index `i`, as a scalar node.
    pub fn index(&mut self, a: NodeId, i: usize) -> NodeId {
        let node = &self.nodes[a.0];
        assert!(i < node.values.len(), "index {} out of bounds ({})", i, node.values.len());
        let v = node.values[i];
        self.push(vec![1], vec![v], Op::Index(a, i))
    }

    /// Contiguous sub-vector `[start, start+len)` of a rank-1 node.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 1, "slice needs rank 1, got {:?}", node.shape);
        assert!(start + len <= node.values.len(), "slice {}..{} out of bounds ({})", start, start + len, node.values.len());
        let values = node.values[start..start + len].to_vec();
        self.push(vec![len], values, Op::Slice(a, start))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "dot shape mismatch: {:?} vs {:?}", sa, sb);
        let v = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .sum();
        self.push(vec![1], vec![v], Op::Dot(a, b))
    }

    /// Dot products of `q` against each item: out[m] = q · items[m].
    /// The attention-score kernel.
    pub fn multi_dot(&mut self, q: NodeId, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty(), "multi_dot over zero items");
        let qs = self.shape(q).to_vec();
        let mut out = Vec::with_capacity(items.len());
        for &it in items {
            assert_eq!(
                self.shape(it),
                &qs[..],
                "multi_dot shape mismatch: {:?} vs {:?}",
                qs,
                self.shape(it)
            );
            let v: f64 = self.nodes[q.0]
                .values
                .iter()
                .zip(&self.nodes[it.0].values)
                .map(|(x, y)| x * y)
                .sum();
            out.push(v);
        }
        let shape = vec![out.len()];
        self.push(shape, out, Op::MultiDot(q, items.to_vec()))
    }

    /// Weighted sum of same-shape items: out = Σ_m w[m] · items[m],
    /// accumulated in item order. The attention-context kernel.
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> NodeId {
        assert!(!items.is_empty(), "weighted_sum over zero items");
        assert_eq!(
            self.shape(weights),
            &[items.len()],
            "weighted_sum needs one weight per item"
        );
        let shape = self.shape(items[0]).to_vec();
        let mut out = vec![0.0; shape.iter().product()];
        for (m, &it) in items.iter().enumerate() {
            assert_eq!(
                self.shape(it),
                &shape[..],
                "weighted_sum item {m} shape mismatch"
            );
            let w = self.nodes[weights.0].values[m];
            for (o, &v) in out.iter_mut().zip(&self.nodes[it.0].values) {
                *o += w * v;
            }
        }
        self.push(shape, out, Op::WeightedSum(weights, items.to_vec()))
    }

    /// Cosine similarity of two rank-1 nodes; errors if either norm < 1e-12.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert_eq!(sa, sb, "cosine shape mismatch: {:?} vs {:?}", sa, sb);
        let na = norm(&self.nodes[a.0].values);
        let nb = norm(&self.nodes[b.0].values);
        if na < NORM_EPS {
            return Err(Error::ZeroNorm { side: "first" });
        }
        if nb < NORM_EPS {
            return Err(Error::ZeroNorm { side: "second" });
        }
        let d: f64 = self.nodes[a.0]
            .values
            .iter()
            .zip(&self.nodes[b.0].values)
            .map(|(x, y)| x * y)
            .sum();
        let v = (d / (na * nb)).clamp(-1.0, 1.0);
        Ok(self.push(vec![1], vec![v], Op::Cosine(a, b)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = self.nodes[a.0].values.iter().sum();
        self.push(vec![1], vec![v], Op::Sum(a))
    }

    /// Negative log-likelihood gather: `-a[target]` where `a` holds
    /// log-probabilities.
    pub fn nll_gather(&mut self, a: NodeId, target: usize) -> NodeId {
        let node = &self.nodes[a.0];
        assert_eq!(node.shape.len(), 1, "nll_gather needs rank 1, got {:?}", node.shape);
        assert!(target < node.values.len(), "target {} out of bounds ({})", target, node.values.len());
        let v = -node.values[target];
        self.push(vec![1], vec![v], Op::NllGather(a, target))
    }

    // ── backward ────────────────────────────────────────────────────

    /// Reverse sweep seeding d(loss)/d(loss) = 1 at `loss` (a scalar node).
    /// Running backward twice without re-recording is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        self.backward_done = true;
        assert_eq!(
            self.nodes[loss.0].values.len(),
            1,
            "backward seed must be a scalar, got {:?}",
            self.nodes[loss.0].shape
        );

        // Adjoint buffers allocate on first write; an empty buffer marks a
        // node the loss never reached.
        let mut adj: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        adj[loss.0] = vec![1.0];

        for i in (0..=loss.0).rev() {
            let g = std::mem::take(&mut adj[i]);
            if g.is_empty() {
                continue;
            }
            let ensure = |adj: &mut Vec<Vec<f64>>, nodes: &[Node], id: NodeId| {
                if adj[id.0].is_empty() {
                    adj[id.0] = vec![0.0; nodes[id.0].values.len()];
                }
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    ensure(&mut adj, &self.nodes, *a);
                    ensure(&mut adj, &self.nodes, *b);
                    axpy(&mut adj[a.0], &g, 1.0);
                    axpy(&mut adj[b.0], &g, 1.0);
                }
                Op::Scale(a, c) => {
                    ensure(&mut adj, &self.nodes, *a);
                    axpy(&mut adj[a.0], &g, *c);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    ensure(&mut adj, &self.nodes, a);
                    ensure(&mut adj, &self.nodes, b);
                    for (k, gk) in g.iter().enumerate() {
                        adj[a.0][k] += gk * self.nodes[b.0].values[k];
                    }
                    for (k, gk) in g.iter().enumerate() {
                        adj[b.0][k] += gk * self.nodes[a.0].values[k];
                    }
                }
                Op::MulScalar(a, s) => {
                    let (a, s) = (*a, *s);
                    ensure(&mut adj, &self.nodes, a);
                    ensure(&mut adj, &self.nodes, s);
                    let sv = self.nodes[s.0].values[0];
                    for (k, gk) in g.iter().enumerate() {
                        adj[a.0][k] += gk * sv;
                    }
                    adj[s.0][0] += g
                        .iter()
                        .zip(&self.nodes[a.0].values)
                        .map(|(gk, ak)| gk * ak)
                        .sum::<f64>();
                }
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    ensure(&mut adj, &self.nodes, a);
                    ensure(&mut adj, &self.nodes, b);
                    let m = self.nodes[a.0].shape[0];
                    let k = self.nodes[a.0].shape[1];
                    let n = self.nodes[b.0].shape[1];
                    // dA = G · Bᵀ
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i2 * n + j] * self.nodes[b.0].values[p * n + j];
                            }
                            adj[a.0][i2 * k + p] += acc;
                        }
                    }
                    // dB = Aᵀ · G
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += self.nodes[a.0].values[i2 * k + p] * g[i2 * n + j];
                            }
                            adj[b.0][p * n + j] += acc;
                        }
                    }
                }
                Op::VecMat(x, w) => {
                    let (x, w) = (*x, *w);
                    ensure(&mut adj, &self.nodes, x);
                    ensure(&mut adj, &self.nodes, w);
                    let k = self.nodes[w.0].shape[0];
                    let n = self.nodes[w.0].shape[1];
                    for p in 0..k {
                        let wrow = &self.nodes[w.0].values[p * n..(p + 1) * n];
                        adj[x.0][p] += g.iter().zip(wrow).map(|(gj, wj)| gj * wj).sum::<f64>();
                    }
                    for p in 0..k {
                        let xp = self.nodes[x.0].values[p];
                        if xp == 0.0 {
                            continue;
                        }
                        let wgrad = &mut adj[w.0][p * n..(p + 1) * n];
                        for (wg, gj) in wgrad.iter_mut().zip(&g) {
                            *wg += xp * gj;
                        }
                    }
                }
                Op::Softmax(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    let y = &self.nodes[i].values;
                    let inner: f64 = g.iter().zip(y).map(|(gk, yk)| gk * yk).sum();
                    for (k, yk) in y.iter().enumerate() {
                        adj[a.0][k] += yk * (g[k] - inner);
                    }
                }
                Op::LogSoftmax(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    let y = &self.nodes[i].values;
                    let gsum: f64 = g.iter().sum();
                    for (k, yk) in y.iter().enumerate() {
                        adj[a.0][k] += g[k] - yk.exp() * gsum;
                    }
                }
                Op::LogSumExp(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    let s = self.nodes[i].values[0];
                    for (k, xk) in self.nodes[a.0].values.iter().enumerate() {
                        adj[a.0][k] += g[0] * (xk - s).exp();
                    }
                }
                Op::Sigmoid(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    for (k, yk) in self.nodes[i].values.iter().enumerate() {
                        adj[a.0][k] += g[k] * yk * (1.0 - yk);
                    }
                }
                Op::Tanh(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    for (k, yk) in self.nodes[i].values.iter().enumerate() {
                        adj[a.0][k] += g[k] * (1.0 - yk * yk);
                    }
                }
                Op::Ln(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    for (k, xk) in self.nodes[a.0].values.iter().enumerate() {
                        adj[a.0][k] += g[k] / xk;
                    }
                }
                Op::Concat(parts) => {
                    let parts = parts.clone();
                    let mut off = 0;
                    for p in parts {
                        ensure(&mut adj, &self.nodes, p);
                        let len = self.nodes[p.0].values.len();
                        axpy(&mut adj[p.0], &g[off..off + len], 1.0);
                        off += len;
                    }
                }
                Op::Row(a, r) => {
                    let (a, r) = (*a, *r);
                    ensure(&mut adj, &self.nodes, a);
                    let cols = self.nodes[a.0].shape[1];
                    axpy_at(&mut adj[a.0], r * cols, &g);
                }
                Op::Index(a, k) => {
                    ensure(&mut adj, &self.nodes, *a);
                    adj[a.0][*k] += g[0];
                }
                Op::Slice(a, start) => {
                    let (a, start) = (*a, *start);
                    ensure(&mut adj, &self.nodes, a);
                    axpy_at(&mut adj[a.0], start, &g);
                }
                Op::Dot(a, b) => {
                    let (a, b) = (*a, *b);
                    ensure(&mut adj, &self.nodes, a);
                    ensure(&mut adj, &self.nodes, b);
                    for (k, bk) in self.nodes[b.0].values.iter().enumerate() {
                        adj[a.0][k] += g[0] * bk;
                    }
                    for (k, ak) in self.nodes[a.0].values.iter().enumerate() {
                        adj[b.0][k] += g[0] * ak;
                    }
                }
                Op::MultiDot(q, items) => {
                    let q = *q;
                    let items = items.clone();
                    ensure(&mut adj, &self.nodes, q);
                    for &it in &items {
                        ensure(&mut adj, &self.nodes, it);
                    }
                    for (m, &it) in items.iter().enumerate() {
                        let gm = g[m];
                        if gm == 0.0 {
                            continue;
                        }
                        for (k, v) in self.nodes[it.0].values.iter().enumerate() {
                            adj[q.0][k] += gm * v;
                        }
                        for (k, qk) in self.nodes[q.0].values.iter().enumerate() {
                            adj[it.0][k] += gm * qk;
                        }
                    }
                }
                Op::WeightedSum(w, items) => {
                    let w = *w;
                    let items = items.clone();
                    ensure(&mut adj, &self.nodes, w);
                    for &it in &items {
                        ensure(&mut adj, &self.nodes, it);
                    }
                    for (m, &it) in items.iter().enumerate() {
                        adj[w.0][m] += g
                            .iter()
                            .zip(&self.nodes[it.0].values)
                            .map(|(gk, vk)| gk * vk)
                            .sum::<f64>();
                        let wm = self.nodes[w.0].values[m];
                        if wm == 0.0 {
                            continue;
                        }
                        for (k, gk) in g.iter().enumerate() {
                            adj[it.0][k] += wm * gk;
                        }
                    }
                }
                Op::Cosine(a, b) => {
                    let (a, b) = (*a, *b);
                    ensure(&mut adj, &self.nodes, a);
                    ensure(&mut adj, &self.nodes, b);
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    let (na, nb) = (norm(av), norm(bv));
                    let c = self.nodes[i].values[0];
                    for k in 0..av.len() {
                        adj[a.0][k] += g[0] * (bv[k] / (na * nb) - c * av[k] / (na * na));
                    }
                    for k in 0..bv.len() {
                        adj[b.0][k] += g[0] * (av[k] / (na * nb) - c * bv[k] / (nb * nb));
                    }
                }
                Op::Sum(a) => {
                    let a = *a;
                    ensure(&mut adj, &self.nodes, a);
                    for x in adj[a.0].iter_mut() {
                        *x += g[0];
                    }
                }
                Op::NllGather(a, t) => {
                    ensure(&mut adj, &self.nodes, *a);
                    adj[a.0][*t] -= g[0];
                }
            }
            adj[i] = g;
        }

        Ok(Grads { adj })
    }

    /// Names of mounted parameters, in mount order.
    pub fn mounted_params(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.params.iter().map(|(n, id)| (n.as_str(), *id))
    }

    /// Writes gradients back into the store, summing over repeated mounts
    /// of the same name. Parameters the loss never reached get zeros.
    pub fn write_param_grads(&self, grads: &Grads, store: &mut ParamStore) {
        for (name, g) in self.param_grad_map(grads) {
            store.get_mut(&name).set_grad(g);
        }
    }

    /// Gradients of every mounted parameter, dense, keyed by name and
    /// summed over repeated mounts.
    pub fn param_grad_map(&self, grads: &Grads) -> std::collections::BTreeMap<String, Vec<f64>> {
        let mut acc = std::collections::BTreeMap::new();
        for (name, id) in &self.params {
            let len = self.nodes[id.0].values.len();
            let buf = acc
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; len]);
            let g = &grads.adj[id.0];
            for (b, gi) in buf.iter_mut().zip(g) {
                *b += gi;
            }
        }
        acc
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Adjoints from one backward pass, indexed by `NodeId`. Nodes the loss
/// never reached keep an empty buffer, meaning a zero gradient.
pub struct Grads {
    adj: Vec<Vec<f64>>,
}

impl Grads {
    /// Adjoint of `id`; empty slice means identically zero.
    pub fn get(&self, id: NodeId) -> &[f64] {
        &self.adj[id.0]
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

fn axpy_at(dst: &mut [f64], offset: usize, src: &[f64]) {
    for (d, s) in dst[offset..offset + src.len()].iter_mut().zip(src) {
        *d += s;
    }
}

/// One step of the standard LSTM recurrence.
///
/// Gate layout in the fused buffers is `[input, forget, candidate, output]`;
/// the forget-gate bias is initialised to 1.0 at registration time.
/// `wx` is `[d_in × 4h]`, `wh` is `[h × 4h]`, `b` is `[4h]`.
pub fn lstm_cell(
    tape: &mut Tape,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
    wx: NodeId,
    wh: NodeId,
    b: NodeId,
) -> (NodeId, NodeId) {
    let h = tape.shape(h_prev)[0];
    assert_eq!(
        tape.shape(wx)[1],
        4 * h,
        "lstm_cell wx shape {:?} does not match hidden {}",
        tape.shape(wx),
        h
    );
    assert_eq!(
        tape.shape(wh),
        &[h, 4 * h],
        "lstm_cell wh shape {:?} does not match hidden {}",
        tape.shape(wh),
        h
    );
    assert_eq!(tape.shape(c_prev), &[h], "lstm_cell c_prev shape mismatch");

    let from_x = tape.vecmat(x, wx);
    let from_h = tape.vecmat(h_prev, wh);
    let pre = tape.add(from_x, from_h);
    let pre = tape.add(pre, b);

    let i_pre = tape.slice(pre, 0, h);
    let f_pre = tape.slice(pre, h, h);
    let g_pre = tape.slice(pre, 2 * h, h);
    let o_pre = tape.slice(pre, 3 * h, h);

    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);

    let keep = tape.mul(f, c_prev);
    let write = tape.mul(i, g);
    let c = tape.add(keep, write);
    let c_act = tape.tanh(c);
    let h_out = tape.mul(o, c_act);
    (h_out, c)
}
