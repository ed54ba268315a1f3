//! Eager tape for reverse-mode autodiff.
//!
//! Every op computes its value immediately and records itself on the tape;
//! [`Graph::backward`] replays the tape in reverse, accumulating gradients
//! exactly once per use site. A graph lives for one forward/backward pass;
//! parameters bound via [`Graph::param`] receive their gradients when the
//! backward sweep finishes.

use std::cell::RefCell;

use rand::Rng;

use super::{Param, Tensor, TensorError, TensorResult};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

struct Node {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    needs_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, f32),
    AddConst(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Gelu(NodeId),
    SoftmaxRows(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, x_hat: Vec<f32>, inv_std: Vec<f32> },
    GatherRows { table: NodeId, ids: Vec<usize> },
    SelectRow { x: NodeId, row: usize },
    MeanRows(NodeId),
    SumAll(NodeId),
    /// out[:, j] = x[:, gather[j]]
    GatherCols { x: NodeId, gather: Vec<usize> },
    SliceCols { x: NodeId, start: usize, len: usize },
    ConcatCols { parts: Vec<NodeId> },
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Vec<f32> },
    Dropout { x: NodeId, mask: Vec<f32> },
    /// out[i*k+a, j*k+b] = x[i, j] * [a == b]
    KronIdentity { x: NodeId, block: usize },
}

pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f32>>>>,
    bound: RefCell<Vec<(NodeId, Param)>>,
    grad_enabled: bool,
}

impl Graph {
    /// Tape with gradient recording enabled.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
            bound: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: parameters bind as constants, backward is an error.
    pub fn inference() -> Self {
        Graph { grad_enabled: false, ..Graph::new() }
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Constant leaf from a tensor (no gradient).
    pub fn input(&self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, false)
    }

    /// Constant leaf from raw rows × cols data.
    pub fn input_slice(&self, rows: usize, cols: usize, data: &[f32]) -> NodeId {
        assert_eq!(rows * cols, data.len(), "input_slice length mismatch");
        self.push(rows, cols, data.to_vec(), Op::Leaf, false)
    }

    pub fn scalar(&self, v: f32) -> NodeId {
        self.push(1, 1, vec![v], Op::Leaf, false)
    }

    /// Trainable leaf bound to a shared parameter; after backward the
    /// accumulated gradient is flushed into the parameter.
    pub fn param(&self, p: &Param) -> NodeId {
        let (r, c) = p.borrow().dims2();
        let data = p.borrow().data().to_vec();
        let id = self.push(r, c, data, Op::Leaf, self.grad_enabled);
        if self.grad_enabled {
            self.bound.borrow_mut().push((id, p.clone()));
        }
        id
    }

    /// Read-only leaf from a parameter (no gradient even when enabled).
    pub fn frozen(&self, p: &Param) -> NodeId {
        let (r, c) = p.borrow().dims2();
        let data = p.borrow().data().to_vec();
        self.push(r, c, data, Op::Leaf, false)
    }

    /// Leaf that wants a gradient without being bound to a parameter.
    /// Query it with [`Graph::grad_of`] after backward.
    pub fn variable(&self, t: &Tensor) -> NodeId {
        let (r, c) = t.dims2();
        self.push(r, c, t.data().to_vec(), Op::Leaf, true)
    }

    // ── Accessors ────────────────────────────────────────────────────────

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[id.0].rows, nodes[id.0].cols)
    }

    pub fn data(&self, id: NodeId) -> Vec<f32> {
        self.nodes.borrow()[id.0].data.clone()
    }

    pub fn to_tensor(&self, id: NodeId) -> Tensor {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        Tensor::from_vec(&[n.rows, n.cols], n.data.clone()).expect("node shape consistent")
    }

    /// Value of a 1×1 node.
    pub fn value(&self, id: NodeId) -> f32 {
        let nodes = self.nodes.borrow();
        let n = &nodes[id.0];
        assert_eq!(n.data.len(), 1, "value() on non-scalar node");
        n.data[0]
    }

    /// Gradient accumulated at a node by the last backward pass.
    pub fn grad_of(&self, id: NodeId) -> Option<Vec<f32>> {
        self.grads.borrow().get(id.0).and_then(|g| g.clone())
    }

    pub fn is_finite(&self, id: NodeId) -> bool {
        self.nodes.borrow()[id.0].data.iter().all(|v| v.is_finite())
    }

    fn push(&self, rows: usize, cols: usize, data: Vec<f32>, op: Op, needs_grad: bool) -> NodeId {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { rows, cols, data, needs_grad, op });
        NodeId(nodes.len() - 1)
    }

    fn ng(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|i| nodes[i.0].needs_grad)
    }

    // ── Ops ──────────────────────────────────────────────────────────────

    pub fn matmul(&self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (out, m, n) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.cols != nb.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    detail: format!("{}x{} x {}x{}", na.rows, na.cols, nb.rows, nb.cols),
                });
            }
            let mut out = vec![0.0; na.rows * nb.cols];
            matmul_nn(&na.data, &nb.data, &mut out, na.rows, na.cols, nb.cols);
            (out, na.rows, nb.cols)
        };
        Ok(self.push(m, n, out, Op::Matmul(a, b), self.ng(&[a, b])))
    }

    pub fn transpose(&self, a: NodeId) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut out = vec![0.0; na.data.len()];
            transpose(&na.data, &mut out, na.rows, na.cols);
            (out, na.cols, na.rows)
        };
        self.push(r, c, out, Op::Transpose(a), self.ng(&[a]))
    }

    fn zip_same_shape(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f32, f32) -> f32,
    ) -> TensorResult<(Vec<f32>, usize, usize)> {
        let nodes = self.nodes.borrow();
        let (na, nb) = (&nodes[a.0], &nodes[b.0]);
        if na.rows != nb.rows || na.cols != nb.cols {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{}x{} vs {}x{}", na.rows, na.cols, nb.rows, nb.cols),
            });
        }
        let out = na.data.iter().zip(&nb.data).map(|(&x, &y)| f(x, y)).collect();
        Ok((out, na.rows, na.cols))
    }

    pub fn add(&self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (out, r, c) = self.zip_same_shape("add", a, b, |x, y| x + y)?;
        Ok(self.push(r, c, out, Op::Add(a, b), self.ng(&[a, b])))
    }

    pub fn sub(&self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (out, r, c) = self.zip_same_shape("sub", a, b, |x, y| x - y)?;
        Ok(self.push(r, c, out, Op::Sub(a, b), self.ng(&[a, b])))
    }

    pub fn mul(&self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (out, r, c) = self.zip_same_shape("mul", a, b, |x, y| x * y)?;
        Ok(self.push(r, c, out, Op::Mul(a, b), self.ng(&[a, b])))
    }

    pub fn div(&self, a: NodeId, b: NodeId) -> TensorResult<NodeId> {
        let (out, r, c) = self.zip_same_shape("div", a, b, |x, y| x / y)?;
        Ok(self.push(r, c, out, Op::Div(a, b), self.ng(&[a, b])))
    }

    /// Add a row vector to every row of a matrix.
    pub fn add_bias(&self, a: NodeId, bias: NodeId) -> TensorResult<NodeId> {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[bias.0]);
            if nb.rows != 1 || nb.cols != na.cols {
                return Err(TensorError::ShapeMismatch {
                    op: "add_bias",
                    detail: format!("{}x{} + bias {}x{}", na.rows, na.cols, nb.rows, nb.cols),
                });
            }
            let mut out = na.data.clone();
            for i in 0..na.rows {
                for j in 0..na.cols {
                    out[i * na.cols + j] += nb.data[j];
                }
            }
            (out, na.rows, na.cols)
        };
        Ok(self.push(r, c, out, Op::AddBias(a, bias), self.ng(&[a, bias])))
    }

    pub fn scale(&self, a: NodeId, factor: f32) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.data.iter().map(|&v| v * factor).collect(), na.rows, na.cols)
        };
        self.push(r, c, out, Op::Scale(a, factor), self.ng(&[a]))
    }

    pub fn add_const(&self, a: NodeId, value: f32) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.data.iter().map(|&v| v + value).collect(), na.rows, na.cols)
        };
        self.push(r, c, out, Op::AddConst(a), self.ng(&[a]))
    }

    pub fn sqrt(&self, a: NodeId) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.data.iter().map(|&v| v.sqrt()).collect(), na.rows, na.cols)
        };
        self.push(r, c, out, Op::Sqrt(a), self.ng(&[a]))
    }

    pub fn relu(&self, a: NodeId) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.data.iter().map(|&v| v.max(0.0)).collect(), na.rows, na.cols)
        };
        self.push(r, c, out, Op::Relu(a), self.ng(&[a]))
    }

    pub fn gelu(&self, a: NodeId) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            (na.data.iter().map(|&v| gelu_fwd(v)).collect(), na.rows, na.cols)
        };
        self.push(r, c, out, Op::Gelu(a), self.ng(&[a]))
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax_rows(&self, a: NodeId) -> NodeId {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let na = &nodes[a.0];
            let mut out = vec![0.0; na.data.len()];
            for i in 0..na.rows {
                let row = &na.data[i * na.cols..(i + 1) * na.cols];
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let dst = &mut out[i * na.cols..(i + 1) * na.cols];
                let mut sum = 0.0;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - m).exp();
                    sum += *d;
                }
                for d in dst.iter_mut() {
                    *d /= sum;
                }
            }
            (out, na.rows, na.cols)
        };
        self.push(r, c, out, Op::SoftmaxRows(a), self.ng(&[a]))
    }

    /// Per-row layer normalization with affine transform, ε = 1e-5.
    pub fn layernorm(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> TensorResult<NodeId> {
        const EPS: f32 = 1e-5;
        let (out, x_hat, inv_std, r, c) = {
            let nodes = self.nodes.borrow();
            let (nx, ng_, nb) = (&nodes[x.0], &nodes[gamma.0], &nodes[beta.0]);
            if ng_.data.len() != nx.cols || nb.data.len() != nx.cols {
                return Err(TensorError::ShapeMismatch {
                    op: "layernorm",
                    detail: format!(
                        "x {}x{}, gamma {}, beta {}",
                        nx.rows,
                        nx.cols,
                        ng_.data.len(),
                        nb.data.len()
                    ),
                });
            }
            let (rows, cols) = (nx.rows, nx.cols);
            let mut out = vec![0.0; rows * cols];
            let mut x_hat = vec![0.0; rows * cols];
            let mut inv_std = vec![0.0; rows];
            for i in 0..rows {
                let row = &nx.data[i * cols..(i + 1) * cols];
                let mean = row.iter().sum::<f32>() / cols as f32;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
                let inv = 1.0 / (var + EPS).sqrt();
                inv_std[i] = inv;
                for j in 0..cols {
                    let xh = (row[j] - mean) * inv;
                    x_hat[i * cols + j] = xh;
                    out[i * cols + j] = xh * ng_.data[j] + nb.data[j];
                }
            }
            (out, x_hat, inv_std, rows, cols)
        };
        let needs = self.ng(&[x, gamma, beta]);
        Ok(self.push(r, c, out, Op::LayerNorm { x, gamma, beta, x_hat, inv_std }, needs))
    }

    /// Row lookup: out[i, :] = table[ids[i], :]. Backward scatter-adds.
    pub fn gather_rows(&self, table: NodeId, ids: &[usize]) -> TensorResult<NodeId> {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let nt = &nodes[table.0];
            if let Some(&bad) = ids.iter().find(|&&i| i >= nt.rows) {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_rows",
                    detail: format!("row id {} out of range (table has {})", bad, nt.rows),
                });
            }
            let mut out = Vec::with_capacity(ids.len() * nt.cols);
            for &i in ids {
                out.extend_from_slice(&nt.data[i * nt.cols..(i + 1) * nt.cols]);
            }
            (out, ids.len(), nt.cols)
        };
        let needs = self.ng(&[table]);
        Ok(self.push(r, c, out, Op::GatherRows { table, ids: ids.to_vec() }, needs))
    }

    pub fn select_row(&self, x: NodeId, row: usize) -> TensorResult<NodeId> {
        let (out, c) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if row >= nx.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "select_row",
                    detail: format!("row {} of {}", row, nx.rows),
                });
            }
            (nx.data[row * nx.cols..(row + 1) * nx.cols].to_vec(), nx.cols)
        };
        let needs = self.ng(&[x]);
        Ok(self.push(1, c, out, Op::SelectRow { x, row }, needs))
    }

    /// Column means: out[0, j] = mean_i x[i, j].
    pub fn mean_rows(&self, x: NodeId) -> NodeId {
        let (out, c) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let mut out = vec![0.0; nx.cols];
            for i in 0..nx.rows {
                for j in 0..nx.cols {
                    out[j] += nx.data[i * nx.cols + j];
                }
            }
            for v in out.iter_mut() {
                *v /= nx.rows as f32;
            }
            (out, nx.cols)
        };
        self.push(1, c, out, Op::MeanRows(x), self.ng(&[x]))
    }

    pub fn sum_all(&self, x: NodeId) -> NodeId {
        let s = {
            let nodes = self.nodes.borrow();
            nodes[x.0].data.iter().sum::<f32>()
        };
        self.push(1, 1, vec![s], Op::SumAll(x), self.ng(&[x]))
    }

    /// Reorder columns: out[:, j] = x[:, gather[j]]. Pure data movement,
    /// bit-exact and exactly invertible.
    pub fn gather_cols(&self, x: NodeId, gather: &[usize]) -> TensorResult<NodeId> {
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if gather.len() != nx.cols {
                return Err(TensorError::ShapeMismatch {
                    op: "gather_cols",
                    detail: format!("map length {} vs {} columns", gather.len(), nx.cols),
                });
            }
            let mut out = vec![0.0; nx.data.len()];
            for i in 0..nx.rows {
                for (j, &src) in gather.iter().enumerate() {
                    out[i * nx.cols + j] = nx.data[i * nx.cols + src];
                }
            }
            (out, nx.rows, nx.cols)
        };
        let needs = self.ng(&[x]);
        Ok(self.push(r, c, out, Op::GatherCols { x, gather: gather.to_vec() }, needs))
    }

    pub fn slice_cols(&self, x: NodeId, start: usize, len: usize) -> TensorResult<NodeId> {
        let (out, r) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            if start + len > nx.cols {
                return Err(TensorError::ShapeMismatch {
                    op: "slice_cols",
                    detail: format!("[{}, {}) of {} columns", start, start + len, nx.cols),
                });
            }
            let mut out = Vec::with_capacity(nx.rows * len);
            for i in 0..nx.rows {
                out.extend_from_slice(&nx.data[i * nx.cols + start..i * nx.cols + start + len]);
            }
            (out, nx.rows)
        };
        let needs = self.ng(&[x]);
        Ok(self.push(r, len, out, Op::SliceCols { x, start, len }, needs))
    }

    pub fn concat_cols(&self, parts: &[NodeId]) -> TensorResult<NodeId> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (out, r, c) = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].rows;
            if let Some(bad) = parts.iter().find(|p| nodes[p.0].rows != rows) {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    detail: format!("rows {} vs {}", nodes[bad.0].rows, rows),
                });
            }
            let total: usize = parts.iter().map(|p| nodes[p.0].cols).sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for p in parts {
                    let np = &nodes[p.0];
                    out.extend_from_slice(&np.data[i * np.cols..(i + 1) * np.cols]);
                }
            }
            (out, rows, total)
        };
        let needs = self.ng(parts);
        Ok(self.push(r, c, out, Op::ConcatCols { parts: parts.to_vec() }, needs))
    }

    /// Mean cross-entropy of row logits against class targets,
    /// computed via a stabilized log-sum-exp.
    pub fn cross_entropy(&self, logits: NodeId, targets: &[usize]) -> TensorResult<NodeId> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let nl = &nodes[logits.0];
            if targets.len() != nl.rows {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("{} targets for {} rows", targets.len(), nl.rows),
                });
            }
            if let Some(&bad) = targets.iter().find(|&&t| t >= nl.cols) {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy",
                    detail: format!("target {} out of {} classes", bad, nl.cols),
                });
            }
            let mut probs = vec![0.0; nl.data.len()];
            let mut total = 0.0;
            for i in 0..nl.rows {
                let row = &nl.data[i * nl.cols..(i + 1) * nl.cols];
                let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for (j, &v) in row.iter().enumerate() {
                    let e = (v - m).exp();
                    probs[i * nl.cols + j] = e;
                    sum += e;
                }
                for j in 0..nl.cols {
                    probs[i * nl.cols + j] /= sum;
                }
                total += sum.ln() + m - row[targets[i]];
            }
            (total / nl.rows as f32, probs)
        };
        let needs = self.ng(&[logits]);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs }, needs))
    }

    /// Inverted dropout: each element kept with probability 1−rate and scaled
    /// by 1/(1−rate). The mask is drawn at record time.
    pub fn dropout(&self, x: NodeId, rate: f32, rng: &mut impl Rng) -> NodeId {
        assert!((0.0..1.0).contains(&rate), "dropout rate must be in [0,1)");
        let keep = 1.0 - rate;
        let (out, mask, r, c) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let mask: Vec<f32> = (0..nx.data.len())
                .map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            let out = nx.data.iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (out, mask, nx.rows, nx.cols)
        };
        let needs = self.ng(&[x]);
        self.push(r, c, out, Op::Dropout { x, mask }, needs)
    }

    /// Kronecker product with the identity: out = x ⊗ I_block.
    pub fn kron_identity(&self, x: NodeId, block: usize) -> NodeId {
        let (out, n) = {
            let nodes = self.nodes.borrow();
            let nx = &nodes[x.0];
            let n = nx.rows * block;
            let mut out = vec![0.0; n * n];
            for i in 0..nx.rows {
                for j in 0..nx.cols {
                    let v = nx.data[i * nx.cols + j];
                    for a in 0..block {
                        out[(i * block + a) * n + j * block + a] = v;
                    }
                }
            }
            (out, n)
        };
        let needs = self.ng(&[x]);
        self.push(n, n, out, Op::KronIdentity { x, block }, needs)
    }

    // ── Composite helpers ────────────────────────────────────────────────

    /// Cosine similarity of two equal-length vectors (any shape, flattened).
    /// Errors on (near-)zero norms.
    pub fn cosine(&self, u: NodeId, v: NodeId) -> TensorResult<NodeId> {
        let (nu, nv) = {
            let nodes = self.nodes.borrow();
            let norm = |id: NodeId| nodes[id.0].data.iter().map(|x| x * x).sum::<f32>().sqrt();
            (norm(u), norm(v))
        };
        if nu < 1e-12 || nv < 1e-12 {
            return Err(TensorError::NumericFault {
                op: "cosine",
                detail: format!("zero-norm operand (|u|={nu:.3e}, |v|={nv:.3e})"),
            });
        }
        let dot = self.sum_all(self.mul(u, v)?);
        let u2 = self.sqrt(self.sum_all(self.mul(u, u)?));
        let v2 = self.sqrt(self.sum_all(self.mul(v, v)?));
        self.div(dot, self.mul(u2, v2)?)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of bound parameters are
    /// accumulated into their shared storage.
    pub fn backward(&self, loss: NodeId) -> TensorResult<()> {
        assert!(self.grad_enabled, "backward on an inference graph");
        let nodes = self.nodes.borrow();
        {
            let n = &nodes[loss.0];
            if n.data.len() != 1 {
                return Err(TensorError::ShapeMismatch {
                    op: "backward",
                    detail: format!("loss must be scalar, got {}x{}", n.rows, n.cols),
                });
            }
            if !n.data[0].is_finite() {
                return Err(TensorError::NumericFault {
                    op: "backward",
                    detail: format!("loss is {}", n.data[0]),
                });
            }
        }

        let mut grads: Vec<Option<Vec<f32>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..nodes.len()).rev() {
            if grads[idx].is_none() || !nodes[idx].needs_grad {
                continue;
            }
            let g = grads[idx].take().expect("checked above");
            self.backward_op(&nodes, &mut grads, idx, &g);
            grads[idx] = Some(g);
        }

        drop(nodes);
        *self.grads.borrow_mut() = grads;

        let grads = self.grads.borrow();
        for (id, param) in self.bound.borrow().iter() {
            if let Some(Some(g)) = grads.get(id.0) {
                param.borrow_mut().accumulate_grad(g);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_lines)]
    fn backward_op(&self, nodes: &[Node], grads: &mut [Option<Vec<f32>>], idx: usize, g: &[f32]) {
        let acc = |grads: &mut [Option<Vec<f32>>], id: NodeId, contrib: &[f32]| {
            if !nodes[id.0].needs_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(buf) => {
                    for (b, c) in buf.iter_mut().zip(contrib) {
                        *b += c;
                    }
                }
                slot => *slot = Some(contrib.to_vec()),
            }
        };
        let node = &nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                if na.needs_grad {
                    let mut da = vec![0.0; na.data.len()];
                    matmul_nt(g, &nb.data, &mut da, na.rows, nb.cols, na.cols);
                    acc(grads, *a, &da);
                }
                if nb.needs_grad {
                    let mut db = vec![0.0; nb.data.len()];
                    matmul_tn(&na.data, g, &mut db, na.cols, na.rows, nb.cols);
                    acc(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let na = &nodes[a.0];
                let mut da = vec![0.0; na.data.len()];
                transpose(g, &mut da, node.rows, node.cols);
                acc(grads, *a, &da);
            }
            Op::Add(a, b) => {
                acc(grads, *a, g);
                acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g);
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                acc(grads, *b, &neg);
            }
            Op::Mul(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                if na.needs_grad {
                    let da: Vec<f32> = g.iter().zip(&nb.data).map(|(&gv, &bv)| gv * bv).collect();
                    acc(grads, *a, &da);
                }
                if nb.needs_grad {
                    let db: Vec<f32> = g.iter().zip(&na.data).map(|(&gv, &av)| gv * av).collect();
                    acc(grads, *b, &db);
                }
            }
            Op::Div(a, b) => {
                let (na, nb) = (&nodes[a.0], &nodes[b.0]);
                if na.needs_grad {
                    let da: Vec<f32> = g.iter().zip(&nb.data).map(|(&gv, &bv)| gv / bv).collect();
                    acc(grads, *a, &da);
                }
                if nb.needs_grad {
                    let db: Vec<f32> = g
                        .iter()
                        .zip(na.data.iter().zip(&nb.data))
                        .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                        .collect();
                    acc(grads, *b, &db);
                }
            }
            Op::AddBias(a, bias) => {
                acc(grads, *a, g);
                if nodes[bias.0].needs_grad {
                    let mut db = vec![0.0; node.cols];
                    for i in 0..node.rows {
                        for j in 0..node.cols {
                            db[j] += g[i * node.cols + j];
                        }
                    }
                    acc(grads, *bias, &db);
                }
            }
            Op::Scale(a, f) => {
                let da: Vec<f32> = g.iter().map(|v| v * f).collect();
                acc(grads, *a, &da);
            }
            Op::AddConst(a) => acc(grads, *a, g),
            Op::Sqrt(a) => {
                let da: Vec<f32> =
                    g.iter().zip(&node.data).map(|(&gv, &y)| gv / (2.0 * y)).collect();
                acc(grads, *a, &da);
            }
            Op::Relu(a) => {
                let na = &nodes[a.0];
                let da: Vec<f32> = g
                    .iter()
                    .zip(&na.data)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                acc(grads, *a, &da);
            }
            Op::Gelu(a) => {
                let na = &nodes[a.0];
                let da: Vec<f32> =
                    g.iter().zip(&na.data).map(|(&gv, &x)| gv * gelu_bwd(x)).collect();
                acc(grads, *a, &da);
            }
            Op::SoftmaxRows(a) => {
                let cols = node.cols;
                let mut da = vec![0.0; node.data.len()];
                for i in 0..node.rows {
                    let y = &node.data[i * cols..(i + 1) * cols];
                    let gy = &g[i * cols..(i + 1) * cols];
                    let dot: f32 = y.iter().zip(gy).map(|(&yv, &gv)| yv * gv).sum();
                    for j in 0..cols {
                        da[i * cols + j] = y[j] * (gy[j] - dot);
                    }
                }
                acc(grads, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, x_hat, inv_std } => {
                let (rows, cols) = (node.rows, node.cols);
                let ng_ = &nodes[gamma.0];
                if nodes[beta.0].needs_grad {
                    let mut db = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            db[j] += g[i * cols + j];
                        }
                    }
                    acc(grads, *beta, &db);
                }
                if ng_.needs_grad {
                    let mut dg = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[i * cols + j] * x_hat[i * cols + j];
                        }
                    }
                    acc(grads, *gamma, &dg);
                }
                if nodes[x.0].needs_grad {
                    let mut dx = vec![0.0; rows * cols];
                    for i in 0..rows {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..cols {
                            let dxh = g[i * cols + j] * ng_.data[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * x_hat[i * cols + j];
                        }
                        mean_dxh /= cols as f32;
                        mean_dxh_xh /= cols as f32;
                        for j in 0..cols {
                            let dxh = g[i * cols + j] * ng_.data[j];
                            dx[i * cols + j] =
                                inv_std[i] * (dxh - mean_dxh - x_hat[i * cols + j] * mean_dxh_xh);
                        }
                    }
                    acc(grads, *x, &dx);
                }
            }
            Op::GatherRows { table, ids } => {
                let nt = &nodes[table.0];
                let mut dt = vec![0.0; nt.data.len()];
                for (i, &src) in ids.iter().enumerate() {
                    for j in 0..node.cols {
                        dt[src * node.cols + j] += g[i * node.cols + j];
                    }
                }
                acc(grads, *table, &dt);
            }
            Op::SelectRow { x, row } => {
                let nx = &nodes[x.0];
                let mut dx = vec![0.0; nx.data.len()];
                dx[row * nx.cols..(row + 1) * nx.cols].copy_from_slice(g);
                acc(grads, *x, &dx);
            }
            Op::MeanRows(x) => {
                let nx = &nodes[x.0];
                let inv = 1.0 / nx.rows as f32;
                let mut dx = vec![0.0; nx.data.len()];
                for i in 0..nx.rows {
                    for j in 0..nx.cols {
                        dx[i * nx.cols + j] = g[j] * inv;
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::SumAll(x) => {
                let nx = &nodes[x.0];
                let dx = vec![g[0]; nx.data.len()];
                acc(grads, *x, &dx);
            }
            Op::GatherCols { x, gather } => {
                let nx = &nodes[x.0];
                let mut dx = vec![0.0; nx.data.len()];
                for i in 0..node.rows {
                    for (j, &src) in gather.iter().enumerate() {
                        dx[i * nx.cols + src] += g[i * node.cols + j];
                    }
                }
                acc(grads, *x, &dx);
            }
            Op::SliceCols { x, start, len } => {
                let nx = &nodes[x.0];
                let mut dx = vec![0.0; nx.data.len()];
                for i in 0..node.rows {
                    dx[i * nx.cols + start..i * nx.cols + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *x, &dx);
            }
            Op::ConcatCols { parts } => {
                let mut offset = 0;
                for p in parts {
                    let np = &nodes[p.0];
                    if np.needs_grad {
                        let mut dp = vec![0.0; np.data.len()];
                        for i in 0..node.rows {
                            dp[i * np.cols..(i + 1) * np.cols].copy_from_slice(
                                &g[i * node.cols + offset..i * node.cols + offset + np.cols],
                            );
                        }
                        acc(grads, *p, &dp);
                    }
                    offset += np.cols;
                }
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let nl = &nodes[logits.0];
                let scale = g[0] / nl.rows as f32;
                let mut dl = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    dl[i * nl.cols + t] -= 1.0;
                }
                for v in dl.iter_mut() {
                    *v *= scale;
                }
                acc(grads, *logits, &dl);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f32> = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                acc(grads, *x, &dx);
            }
            Op::KronIdentity { x, block } => {
                let nx = &nodes[x.0];
                let n = node.rows;
                let mut dx = vec![0.0; nx.data.len()];
                for i in 0..nx.rows {
                    for j in 0..nx.cols {
                        let mut s = 0.0;
                        for a in 0..*block {
                            s += g[(i * block + a) * n + j * block + a];
                        }
                        dx[i * nx.cols + j] = s;
                    }
                }
                acc(grads, *x, &dx);
            }
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Graph::new()
    }
}

// ── Matrix kernels ──────────────────────────────────────────────────────────

/// out += a(m×k) · b(k×n)
fn matmul_nn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a(m×k) · b(n×k)ᵀ
fn matmul_nt(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] += s;
        }
    }
}

/// out += a(k×m)ᵀ · b(k×n)
fn matmul_tn(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn transpose(x: &[f32], out: &mut [f32], rows: usize, cols: usize) {
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
}

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)

fn gelu_fwd(x: f32) -> f32 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_bwd(x: f32) -> f32 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_passthrough() {
        let g = Graph::inference();
        let eye = g.input(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b = g.input(&t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
        let c = g.matmul(eye, b).unwrap();
        assert_eq!(g.data(c), vec![2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_row_times_col() {
        let g = Graph::inference();
        let a = g.input(&t(&[1, 2], &[1.0, 2.0]));
        let b = g.input(&t(&[2, 1], &[3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), vec![11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let g = Graph::inference();
        let a = g.input(&t(&[1, 3], &[1.0, 2.0, 3.0]));
        let b = g.input(&t(&[2, 1], &[3.0, 4.0]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_symmetry_and_stabilization() {
        let g = Graph::inference();
        let a = g.softmax_rows(g.input(&t(&[1, 2], &[0.0, 0.0])));
        assert_eq!(g.data(a), vec![0.5, 0.5]);
        let b = g.softmax_rows(g.input(&t(&[1, 2], &[1000.0, 1000.0])));
        assert_eq!(g.data(b), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g = Graph::inference();
        let x = g.input(&t(&[2, 3], &[1.0, -2.0, 0.5, 30.0, 31.0, 29.0]));
        let y = g.data(g.softmax_rows(x));
        for i in 0..2 {
            let s: f32 = y[i * 3..(i + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-6, "row {i} sums to {s}");
        }
    }

    #[test]
    fn layernorm_constant_row_is_zero() {
        let g = Graph::inference();
        let x = g.input(&t(&[1, 4], &[1.0, 1.0, 1.0, 1.0]));
        let gamma = g.input(&t(&[4], &[1.0; 4]));
        let beta = g.input(&t(&[4], &[0.0; 4]));
        let y = g.data(g.layernorm(x, gamma, beta).unwrap());
        for v in y {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layernorm_two_point_row_is_unit_variance() {
        let g = Graph::inference();
        let x = g.input(&t(&[1, 2], &[1.0, -1.0]));
        let gamma = g.input(&t(&[2], &[1.0, 1.0]));
        let beta = g.input(&t(&[2], &[0.0, 0.0]));
        let y = g.data(g.layernorm(x, gamma, beta).unwrap());
        // closed form: mean 0, var 1, so x_hat = x / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f32 + 1e-5).sqrt();
        assert!((y[0] - expect).abs() < 1e-6);
        assert!((y[1] + expect).abs() < 1e-6);
    }

    #[test]
    fn cross_entropy_dominant_logit_is_near_zero() {
        let g = Graph::inference();
        let logits = g.input(&t(&[1, 3], &[20.0, 0.0, 0.0]));
        let ce = g.cross_entropy(logits, &[0]).unwrap();
        assert!(g.value(ce) < 1e-6);
    }

    #[test]
    fn cosine_basic_identities() {
        let g = Graph::inference();
        let u = g.input(&t(&[3], &[1.0, 2.0, 2.0]));
        let nu = g.scale(u, -1.0);
        assert!((g.value(g.cosine(u, u).unwrap()) - 1.0).abs() < 1e-6);
        assert!((g.value(g.cosine(u, nu).unwrap()) + 1.0).abs() < 1e-6);
        let a = g.input(&t(&[2], &[1.0, 0.0]));
        let b = g.input(&t(&[2], &[0.0, 1.0]));
        assert_eq!(g.value(g.cosine(a, b).unwrap()), 0.0);
    }

    #[test]
    fn cosine_zero_norm_is_numeric_error() {
        let g = Graph::inference();
        let u = g.input(&t(&[2], &[0.0, 0.0]));
        let v = g.input(&t(&[2], &[1.0, 0.0]));
        assert!(matches!(g.cosine(u, v), Err(TensorError::NumericFault { .. })));
    }

    #[test]
    fn backward_flushes_into_params() {
        // loss = sum(w * x), dw = x
        let g = Graph::new();
        let w = Param::new("w", t(&[2], &[1.0, 2.0]));
        let wid = g.param(&w);
        let x = g.input(&t(&[2], &[3.0, 4.0]));
        let loss = g.sum_all(g.mul(wid, x).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(w.borrow().grad().unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn grads_accumulate_across_reuse() {
        // loss = sum(w*w) → dw = 2w
        let g = Graph::new();
        let w = Param::new("w", t(&[2], &[3.0, -5.0]));
        let wid = g.param(&w);
        let loss = g.sum_all(g.mul(wid, wid).unwrap());
        g.backward(loss).unwrap();
        assert_eq!(w.borrow().grad().unwrap(), &[6.0, -10.0]);
    }

    #[test]
    fn frozen_subgraphs_receive_no_gradient() {
        let g = Graph::new();
        let w = Param::new("w", t(&[2], &[1.0, 1.0]));
        let frozen = g.frozen(&w);
        let x = g.input(&t(&[2], &[1.0, 1.0]));
        let loss = g.sum_all(g.mul(frozen, x).unwrap());
        g.backward(loss).unwrap();
        assert!(w.borrow().grad().is_none());
    }

    #[test]
    fn gather_cols_round_trip_is_bit_exact() {
        let g = Graph::inference();
        let x = g.input(&t(&[2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let fwd = g.gather_cols(x, &[2, 0, 1]).unwrap();
        let back = g.gather_cols(fwd, &[1, 2, 0]).unwrap();
        assert_eq!(g.data(back), g.data(x));
    }

    #[test]
    fn kron_identity_layout() {
        let g = Graph::inference();
        let h = g.input(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = g.kron_identity(h, 2);
        let d = g.data(k);
        // block (0,1) should be 2·I
        assert_eq!(d[0 * 4 + 2], 2.0);
        assert_eq!(d[1 * 4 + 3], 2.0);
        assert_eq!(d[0 * 4 + 3], 0.0);
        assert_eq!(d[2 * 4 + 0], 3.0);
    }

    #[test]
    fn nan_loss_is_rejected() {
        let g = Graph::new();
        let w = Param::new("w", Tensor::scalar(-1.0));
        let wid = g.param(&w);
        let loss = g.sqrt(wid); // sqrt(-1) = NaN
        assert!(matches!(g.backward(loss), Err(TensorError::NumericFault { .. })));
    }
}
