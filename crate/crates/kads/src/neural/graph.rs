//! Reverse-mode automatic differentiation on a tape of f64 tensors.
//!
//! A [`Graph`] is an append-only tape. Every operation computes its value
//! eagerly on insertion and records the saved state needed for an exact
//! backward pass (softmax rows, layer-norm statistics, attention
//! probabilities). Node ids only ever reference earlier nodes, so one
//! reverse walk over the tape is a valid topological order.
//!
//! Gradients propagate only to nodes that actually feed the loss: a node
//! receives a gradient buffer the first time a consumer writes into it, and
//! nodes that never receive one are skipped. Parameters enter through
//! [`Graph::param`], which deduplicates by name so a tensor used in several
//! places accumulates all of its gradient on a single node.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::neural::linalg::{matmul_nn_acc, matmul_nt_acc, matmul_tn_acc};
use crate::neural::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

/// Masking applied to attention scores before the row softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query attends to every key.
    Full,
    /// Query i attends to keys 0..=i. Requires equal query/key length.
    Causal,
    /// Only the first `n` keys are valid; the rest are padding.
    KeyValid(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul {
        a: NodeId,
        b: NodeId,
    },
    /// A · Bᵀ with B stored row-major as [n, k].
    MatmulNt {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Lookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    Softmax {
        a: NodeId,
    },
    LogSoftmax {
        a: NodeId,
    },
    LayerNorm {
        a: NodeId,
        /// Saved (mean, 1/std) per row.
        stats: Vec<(f64, f64)>,
    },
    Gelu {
        a: NodeId,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        /// Saved softmax probabilities, heads * lq * lk.
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        /// Saved row softmax of the logits.
        probs: Vec<f64>,
    },
    MeanPool {
        a: NodeId,
    },
    Stack {
        parts: Vec<NodeId>,
    },
    LogSumExp {
        a: NodeId,
        /// Saved softmax weights of the inputs.
        weights: Vec<f64>,
    },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
}

/// The autodiff tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: BTreeMap<String, NodeId>,
    grads: Vec<Option<Vec<f64>>>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::Shape {
            op,
            left: vec![self.nodes[a.0].rows, self.nodes[a.0].cols],
            right: vec![self.nodes[b.0].rows, self.nodes[b.0].cols],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id.0].rows, self.nodes[id.0].cols)
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    /// Insert a constant leaf.
    pub fn leaf(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        assert_eq!(value.len(), rows * cols, "leaf value length mismatch");
        self.push(rows, cols, value, Op::Leaf)
    }

    /// Insert (or fetch) a named parameter leaf. The same name always maps
    /// to the same node so gradient contributions accumulate in one place.
    pub fn param(&mut self, name: &str, t: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let (r, c) = t.dims2();
        let id = self.push(r, c, t.data().to_vec(), Op::Leaf);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn_acc(self.value(a), self.value(b), m, ka, n, &mut out);
        Ok(self.push(m, n, out, Op::Matmul { a, b }))
    }

    /// A[m,k] · B[n,k]ᵀ -> [m,n]. Used for tied output projections.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, ka) = self.shape(a);
        let (n, kb) = self.shape(b);
        if ka != kb {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a), self.value(b), m, ka, n, &mut out);
        Ok(self.push(m, n, out, Op::MatmulNt { a, b }))
    }

    /// Elementwise add; `b` may also be a single row broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if bn != n || (bm != m && bm != 1) {
            return Err(self.shape_err("add", a, b));
        }
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        if bm == m {
            for (o, x) in out.iter_mut().zip(bv) {
                *o += x;
            }
        } else {
            for r in 0..m {
                for j in 0..n {
                    out[r * n + j] += bv[j];
                }
            }
        }
        Ok(self.push(m, n, out, Op::Add { a, b }))
    }

    /// Elementwise multiply; `b` may also be a single row broadcast over `a`.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        let (bm, bn) = self.shape(b);
        if bn != n || (bm != m && bm != 1) {
            return Err(self.shape_err("mul", a, b));
        }
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        if bm == m {
            for (o, x) in out.iter_mut().zip(bv) {
                *o *= x;
            }
        } else {
            for r in 0..m {
                for j in 0..n {
                    out[r * n + j] *= bv[j];
                }
            }
        }
        Ok(self.push(m, n, out, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(m, n, out, Op::Scale { a, c })
    }

    /// Gather rows of `table` by id: out[i] = table[ids[i]].
    pub fn lookup(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let (v, d) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Input("embedding lookup of zero ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Vocab(format!(
                "token id {bad} out of range for table with {v} rows"
            )));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&self.value(table)[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            ids.len(),
            d,
            out,
            Op::Lookup {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            softmax_row(&mut out[r * n..(r + 1) * n]);
        }
        self.push(m, n, out, Op::Softmax { a })
    }

    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        for r in 0..m {
            log_softmax_row(&mut out[r * n..(r + 1) * n]);
        }
        self.push(m, n, out, Op::LogSoftmax { a })
    }

    /// Row-wise normalization to zero mean and unit variance. Gain and bias
    /// are applied separately with [`Graph::mul`] and [`Graph::add`].
    pub fn layer_norm(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = self.value(a).to_vec();
        let mut stats = Vec::with_capacity(m);
        for r in 0..m {
            let row = &mut out[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let rstd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * rstd;
            }
            stats.push((mean, rstd));
        }
        self.push(m, n, out, Op::LayerNorm { a, stats })
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(m, n, out, Op::Gelu { a })
    }

    /// Multi-head scaled dot-product attention. `q` is [lq, d], `k` and `v`
    /// are [lk, d]; d must divide evenly into `heads`.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        let (lv, dv) = self.shape(v);
        if d != dk || d != dv || lk != lv {
            return Err(self.shape_err("attention", q, k));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention: {d} dims not divisible into {heads} heads"
            )));
        }
        match mask {
            AttnMask::Causal if lq != lk => {
                return Err(self.shape_err("attention_causal", q, k));
            }
            AttnMask::KeyValid(t) if t == 0 || t > lk => {
                return Err(Error::Bounds(format!(
                    "attention key-valid length {t} out of range 1..={lk}"
                )));
            }
            _ => {}
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; lq * d];
        let mut probs = vec![0.0; heads * lq * lk];
        let (mut qh, mut kh, mut vh) = (vec![0.0; lq * dh], vec![0.0; lk * dh], vec![0.0; lk * dh]);
        for h in 0..heads {
            gather_cols(self.value(q), lq, d, h * dh, dh, &mut qh);
            gather_cols(self.value(k), lk, d, h * dh, dh, &mut kh);
            gather_cols(self.value(v), lk, d, h * dh, dh, &mut vh);
            let p = &mut probs[h * lq * lk..(h + 1) * lq * lk];
            matmul_nt_acc(&qh, &kh, lq, dh, lk, p);
            for i in 0..lq {
                let row = &mut p[i * lk..(i + 1) * lk];
                for x in row.iter_mut() {
                    *x *= scale;
                }
                let valid = match mask {
                    AttnMask::Full => lk,
                    AttnMask::Causal => i + 1,
                    AttnMask::KeyValid(t) => t,
                };
                for x in row[valid..].iter_mut() {
                    *x = f64::NEG_INFINITY;
                }
                softmax_row(row);
            }
            let mut oh = vec![0.0; lq * dh];
            matmul_nn_acc(p, &vh, lq, lk, dh, &mut oh);
            scatter_cols(&oh, lq, d, h * dh, dh, &mut out);
        }
        Ok(self.push(
            lq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    /// Summed negative log-likelihood: -Σᵢ log softmax(logits)[i, targets[i]].
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let (m, n) = self.shape(logits);
        if targets.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: vec![m, n],
                right: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Vocab(format!(
                "target id {bad} out of range for {n} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut nll = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            let row = &mut probs[r * n..(r + 1) * n];
            softmax_row(row);
            nll -= row[t].max(f64::MIN_POSITIVE).ln();
        }
        Ok(self.push(
            1,
            1,
            vec![nll],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Mean over rows: [l, d] -> [1, d].
    pub fn mean_pool(&mut self, a: NodeId) -> NodeId {
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for j in 0..n {
                out[j] += self.nodes[a.0].value[r * n + j];
            }
        }
        for x in out.iter_mut() {
            *x /= m as f64;
        }
        self.push(1, n, out, Op::MeanPool { a })
    }

    /// Concatenate scalar nodes into a single row vector.
    pub fn stack(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::Input("stack of zero nodes".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.shape(p) != (1, 1) {
                return Err(Error::Shape {
                    op: "stack",
                    left: vec![self.nodes[p.0].rows, self.nodes[p.0].cols],
                    right: vec![1, 1],
                });
            }
            out.push(self.scalar(p));
        }
        Ok(self.push(
            1,
            parts.len(),
            out,
            Op::Stack {
                parts: parts.to_vec(),
            },
        ))
    }

    /// log Σ exp over a single row; computed with the max trick.
    pub fn logsumexp(&mut self, a: NodeId) -> Result<NodeId> {
        let (m, n) = self.shape(a);
        if m != 1 {
            return Err(Error::Shape {
                op: "logsumexp",
                left: vec![m, n],
                right: vec![1, n],
            });
        }
        let row = self.value(a);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|x| (x - mx).exp()).sum();
        let out = mx + sum.ln();
        let weights = row.iter().map(|x| (x - mx).exp() / sum).collect();
        Ok(self.push(1, 1, vec![out], Op::LogSumExp { a, weights }))
    }

    /// Backward sweep from a finite scalar loss. Gradients are retained on
    /// the graph; read them back per node with [`Graph::grad`] or per
    /// parameter with [`Graph::param_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Shape {
                op: "backward",
                left: vec![self.nodes[loss.0].rows, self.nodes[loss.0].cols],
                right: vec![1, 1],
            });
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite: {}",
                self.scalar(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if self.grads[id].is_none() {
                continue;
            }
            self.backprop_node(id);
        }
        Ok(())
    }

    /// Gradient of the last backward target w.r.t. a node, if it received one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every named parameter, zero-filled where the parameter
    /// did not influence the loss.
    pub fn param_grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, &id) in &self.params {
            let g = match self.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; self.nodes[id.0].value.len()],
            };
            out.insert(name.clone(), g);
        }
        out
    }

    fn backprop_node(&mut self, id: usize) {
        // Inputs always precede the output on the tape, so split the grad
        // buffer there: everything below `id` stays mutable while the
        // output gradient is read from the upper half.
        let (node_grads, out_grads) = self.grads.split_at_mut(id);
        let g = out_grads[0].as_deref().expect("grad present");
        let node = &self.nodes[id];
        let (m, n) = (node.rows, node.cols);
        let nodes = &self.nodes;
        let sized = |nid: NodeId| nodes[nid.0].value.len();
        fn acc<'a>(slot: &'a mut [Option<Vec<f64>>], nid: NodeId, len: usize) -> &'a mut [f64] {
            slot[nid.0].get_or_insert_with(|| vec![0.0; len]).as_mut()
        }
        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let k = nodes[a.0].cols;
                matmul_nt_acc(g, &nodes[b.0].value, m, n, k, acc(node_grads, *a, sized(*a)));
                matmul_tn_acc(&nodes[a.0].value, g, m, k, n, acc(node_grads, *b, sized(*b)));
            }
            Op::MatmulNt { a, b } => {
                let k = nodes[a.0].cols;
                matmul_nn_acc(g, &nodes[b.0].value, m, n, k, acc(node_grads, *a, sized(*a)));
                matmul_tn_acc(g, &nodes[a.0].value, m, n, k, acc(node_grads, *b, sized(*b)));
            }
            Op::Add { a, b } => {
                let da = acc(node_grads, *a, sized(*a));
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += x;
                }
                let db = acc(node_grads, *b, sized(*b));
                if db.len() == g.len() {
                    for (d, &x) in db.iter_mut().zip(g) {
                        *d += x;
                    }
                } else {
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let bm = nodes[b.0].rows;
                {
                    let da = acc(node_grads, *a, sized(*a));
                    let bv = &nodes[b.0].value;
                    if bm == m {
                        for i in 0..m * n {
                            da[i] += g[i] * bv[i];
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..n {
                                da[r * n + j] += g[r * n + j] * bv[j];
                            }
                        }
                    }
                }
                let db = acc(node_grads, *b, sized(*b));
                let av = &nodes[a.0].value;
                if bm == m {
                    for i in 0..m * n {
                        db[i] += g[i] * av[i];
                    }
                } else {
                    for r in 0..m {
                        for j in 0..n {
                            db[j] += g[r * n + j] * av[r * n + j];
                        }
                    }
                }
            }
            Op::Scale { a, c } => {
                let da = acc(node_grads, *a, sized(*a));
                for (d, &x) in da.iter_mut().zip(g) {
                    *d += c * x;
                }
            }
            Op::Lookup { table, ids } => {
                let d = n;
                let dt = acc(node_grads, *table, sized(*table));
                for (r, &tok) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[tok * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Softmax { a } => {
                let y = &node.value;
                let da = acc(node_grads, *a, sized(*a));
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        da[r * n + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::LogSoftmax { a } => {
                let y = &node.value;
                let da = acc(node_grads, *a, sized(*a));
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..n {
                        da[r * n + j] += gr[j] - y[r * n + j].exp() * gsum;
                    }
                }
            }
            Op::LayerNorm { a, stats } => {
                let y = &node.value;
                let da = acc(node_grads, *a, sized(*a));
                for r in 0..m {
                    let (_, rstd) = stats[r];
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let gmean: f64 = gr.iter().sum::<f64>() / n as f64;
                    let gydot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum::<f64>() / n as f64;
                    for j in 0..n {
                        da[r * n + j] += rstd * (gr[j] - gmean - yr[j] * gydot);
                    }
                }
            }
            Op::Gelu { a } => {
                let av = &nodes[a.0].value;
                let da = acc(node_grads, *a, sized(*a));
                for i in 0..m * n {
                    da[i] += g[i] * gelu_grad(av[i]);
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                let d = n;
                let lq = m;
                let lk = nodes[k.0].rows;
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (mut qh, mut kh, mut vh) =
                    (vec![0.0; lq * dh], vec![0.0; lk * dh], vec![0.0; lk * dh]);
                let mut goh = vec![0.0; lq * dh];
                let mut dqh = vec![0.0; lq * dh];
                let mut dkh = vec![0.0; lk * dh];
                let mut dvh = vec![0.0; lk * dh];
                let mut dp = vec![0.0; lq * lk];
                let mut ds = vec![0.0; lq * lk];
                // Accumulated locally, scattered into the input grads at the end.
                let mut dq = vec![0.0; lq * d];
                let mut dk = vec![0.0; lk * d];
                let mut dv = vec![0.0; lk * d];
                for h in 0..*heads {
                    gather_cols(&nodes[q.0].value, lq, d, h * dh, dh, &mut qh);
                    gather_cols(&nodes[k.0].value, lk, d, h * dh, dh, &mut kh);
                    gather_cols(&nodes[v.0].value, lk, d, h * dh, dh, &mut vh);
                    gather_cols(g, lq, d, h * dh, dh, &mut goh);
                    let p = &probs[h * lq * lk..(h + 1) * lq * lk];
                    dp.fill(0.0);
                    matmul_nt_acc(&goh, &vh, lq, dh, lk, &mut dp);
                    dvh.fill(0.0);
                    matmul_tn_acc(p, &goh, lq, lk, dh, &mut dvh);
                    // softmax backward rows: masked entries have p = 0.
                    for i in 0..lq {
                        let pr = &p[i * lk..(i + 1) * lk];
                        let dpr = &dp[i * lk..(i + 1) * lk];
                        let dot: f64 = pr.iter().zip(dpr).map(|(p, d)| p * d).sum();
                        for j in 0..lk {
                            ds[i * lk + j] = pr[j] * (dpr[j] - dot) * scale;
                        }
                    }
                    dqh.fill(0.0);
                    matmul_nn_acc(&ds, &kh, lq, lk, dh, &mut dqh);
                    dkh.fill(0.0);
                    matmul_tn_acc(&ds, &qh, lq, lk, dh, &mut dkh);
                    scatter_cols(&dqh, lq, d, h * dh, dh, &mut dq);
                    scatter_cols(&dkh, lk, d, h * dh, dh, &mut dk);
                    scatter_cols(&dvh, lk, d, h * dh, dh, &mut dv);
                }
                add_into(acc(node_grads, *q, sized(*q)), &dq);
                add_into(acc(node_grads, *k, sized(*k)), &dk);
                add_into(acc(node_grads, *v, sized(*v)), &dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let (_, nv) = (nodes[logits.0].rows, nodes[logits.0].cols);
                let gs = g[0];
                let dl = acc(node_grads, *logits, sized(*logits));
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..nv {
                        let delta = if j == t { 1.0 } else { 0.0 };
                        dl[r * nv + j] += gs * (probs[r * nv + j] - delta);
                    }
                }
            }
            Op::MeanPool { a } => {
                let l = nodes[a.0].rows;
                let da = acc(node_grads, *a, sized(*a));
                let inv = 1.0 / l as f64;
                for r in 0..l {
                    for j in 0..n {
                        da[r * n + j] += g[j] * inv;
                    }
                }
            }
            Op::Stack { parts } => {
                for (i, p) in parts.clone().iter().enumerate() {
                    acc(node_grads, *p, 1)[0] += g[i];
                }
            }
            Op::LogSumExp { a, weights } => {
                let da = acc(node_grads, *a, sized(*a));
                for (d, &w) in da.iter_mut().zip(weights) {
                    *d += g[0] * w;
                }
            }
        }
    }
}

/// In-place stable softmax of one row.
fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// In-place stable log-softmax of one row.
fn log_softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln() + mx;
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// Tanh-approximation GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn gather_cols(src: &[f64], rows: usize, stride: usize, start: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        dst[r * width..(r + 1) * width]
            .copy_from_slice(&src[r * stride + start..r * stride + start + width]);
    }
}

fn scatter_cols(src: &[f64], rows: usize, stride: usize, start: usize, width: usize, dst: &mut [f64]) {
    for r in 0..rows {
        for j in 0..width {
            dst[r * stride + start + j] += src[r * width + j];
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
