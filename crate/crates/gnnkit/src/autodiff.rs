//! Minimal reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] is an append-only arena of nodes; recording an operation
//! computes its forward value immediately and stores what backward needs.
//! [`Var`] is a copyable handle (an index into the arena). Backward walks
//! the arena in reverse recording order — which is a topological order by
//! construction — and accumulates gradients into every node on a path to
//! a parameter.
//!
//! Besides the usual dense ops (matmul, elementwise arithmetic,
//! activations, row softmax, layer norm, dropout, masked cross-entropy),
//! the tape has *edge-valued* operations: variables of shape
//! `(n_directed_edges, 1)` living on an [`EdgePattern`]. These express
//! neighborhood attention (score → segment softmax → weighted
//! aggregation) without ever materializing an `n x n` matrix, and carry
//! the per-edge aggregation weights that the structural-entropy loss
//! differentiates through.
//!
//! Design notes: ReLU and LeakyReLU use subgradient 0 at the kink; layer
//! norm uses epsilon 1e-5 inside the variance square root; dropout uses
//! inverted scaling (division by the keep probability at training time)
//! so evaluation requires no rescaling; all randomness comes from an
//! explicit generator passed by the caller.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::graph::EdgePattern;
use crate::tensor::{CsrMatrix, DenseMatrix};

/// Handle to a tape node. Cheap to copy; only valid for the tape that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Layer-norm epsilon inside the variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    requires_grad: bool,
    op: Op,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * bᵀ` without materializing the transpose.
    MatMulNt(Var, Var),
    /// Constant sparse matrix times variable dense matrix.
    Spmm(Rc<CsrMatrix>, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Log(Var),
    RowSoftmax(Var),
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    Dropout {
        x: Var,
        multiplier: DenseMatrix,
    },
    CrossEntropy {
        logits: Var,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
        probs: DenseMatrix,
        count: usize,
    },
    SumAll(Var),
    /// Per-edge score from two node columns: `s_e = left[dst(e)] + right[src(e)]`.
    EdgePairScores {
        left: Var,
        right: Var,
        pattern: Rc<EdgePattern>,
    },
    /// Per-edge scaled dot product: `s_e = scale * <q[dst(e)], k[src(e)]>`.
    EdgeDotScores {
        q: Var,
        k: Var,
        pattern: Rc<EdgePattern>,
        scale: f64,
    },
    /// Softmax over each destination's edge segment.
    MaskedRowSoftmax {
        scores: Var,
        pattern: Rc<EdgePattern>,
    },
    /// Renormalization of nonnegative edge weights per destination segment.
    EdgeNormalize {
        w: Var,
        pattern: Rc<EdgePattern>,
    },
    /// `out[v] = Σ_{e in segment(v)} w_e * h[src(e)]`.
    EdgeAggregate {
        w: Var,
        h: Var,
        pattern: Rc<EdgePattern>,
    },
    /// Per-directed-edge gate from per-undirected-edge logits:
    /// `sigmoid(logit)` on off-diagonal edges, fixed 1 on self-loops.
    EdgeGate {
        logits: Var,
        pattern: Rc<EdgePattern>,
    },
    /// Class posterior: one-hot labels on fixed rows, row softmax of the
    /// logits elsewhere. Labels shape the forward value only; backward
    /// needs just the fixed-row mask.
    ClassPosterior {
        logits: Var,
        fixed: Rc<Vec<bool>>,
        stop_grad: bool,
    },
    /// Structural entropy of the weighted support under a soft partition;
    /// see [`Tape::struct_entropy`] for the formula.
    StructEntropy {
        omega: Var,
        p: Var,
        pattern: Rc<EdgePattern>,
        detach_omega: bool,
    },
}

/// Append-only reverse-mode tape.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    /// Creates an empty tape.
    #[must_use]
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    #[must_use]
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    /// Whether the tape is empty.
    #[must_use]
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a trainable parameter leaf.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Records a constant leaf (no gradient).
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Forward value of a node.
    #[must_use]
    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    /// Gradient of a node from the latest backward pass, if any was
    /// accumulated.
    #[must_use]
    pub fn grad(&self, v: Var) -> Option<&DenseMatrix> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Gradient of a node, densified to zeros when the node received none
    /// (a function independent of a parameter has exactly zero gradient).
    #[must_use]
    pub fn grad_or_zeros(&self, v: Var) -> DenseMatrix {
        self.nodes[v.0].grad.clone().unwrap_or_else(|| {
            DenseMatrix::zeros(self.nodes[v.0].value.rows(), self.nodes[v.0].value.cols())
        })
    }

    fn push(&mut self, value: DenseMatrix, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Matrix product.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on inner-dimension mismatch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    /// Matrix product with the second operand transposed: `a * bᵀ`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on column-count mismatch.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul_nt(self.value(b))?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::MatMulNt(a, b)))
    }

    /// Constant sparse times variable dense.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on dimension mismatch.
    pub fn spmm(&mut self, m: Rc<CsrMatrix>, x: Var) -> Result<Var> {
        let value = m.spmm(self.value(x))?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::Spmm(m, x)))
    }

    /// Elementwise sum.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if the operands differ in shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// Elementwise difference `a − b`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if the operands differ in shape.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let mut value = self.value(a).clone();
        value.add_scaled_assign(-1.0, self.value(b));
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Sub(a, b)))
    }

    /// Scalar multiple `c * a`.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| c * v);
        let rg = self.requires(a);
        self.push(value, rg, Op::Scale(a, c))
    }

    /// Elementwise (Hadamard) product.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] if the operands differ in shape.
    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("elementwise_mul", a, b)?;
        let bv = self.value(b);
        let value = DenseMatrix::from_vec(
            bv.rows(),
            bv.cols(),
            self.value(a)
                .data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| x * y)
                .collect(),
        )?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Rectified linear unit; subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.requires(a);
        self.push(value, rg, Op::Relu(a))
    }

    /// Leaky rectified linear unit with the given negative-side slope.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.requires(a);
        self.push(value, rg, Op::LeakyRelu(a, slope))
    }

    /// Elementwise natural logarithm.
    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let rg = self.requires(a);
        self.push(value, rg, Op::Log(a))
    }

    /// Softmax over every full row.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = DenseMatrix::zeros(x.rows(), x.cols());
        for i in 0..x.rows() {
            softmax_into(x.row(i), value.row_mut(i));
        }
        let rg = self.requires(a);
        self.push(value, rg, Op::RowSoftmax(a))
    }

    /// Horizontal concatenation of equal-height matrices.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] when heights differ or the list is empty.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat_cols", "empty part list".to_string()));
        };
        let rows = self.value(first).rows();
        let mut total_cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::shape(
                    "concat_cols",
                    format!("{} rows vs {rows}", self.value(p).rows()),
                ));
            }
            total_cols += self.value(p).cols();
        }
        let mut value = DenseMatrix::zeros(rows, total_cols);
        let mut offset = 0;
        for &p in parts {
            let pv = self.value(p);
            for i in 0..rows {
                let src = pv.row(i);
                value.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
            }
            offset += pv.cols();
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(value, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Per-row layer normalization with learnable gain and bias
    /// (each `1 x d`).
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] when the gain/bias widths do not match `x`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        for (name, v) in [("gain", gain), ("bias", bias)] {
            let m = self.value(v);
            if m.rows() != 1 || m.cols() != d {
                return Err(Error::shape(
                    "layer_norm",
                    format!("{name} must be 1x{d}, got {}x{}", m.rows(), m.cols()),
                ));
            }
        }
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let xv = self.value(x);
        let mut value = DenseMatrix::zeros(xv.rows(), d);
        for i in 0..xv.rows() {
            let row = xv.row(i);
            let (mu, var) = mean_var(row);
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            let out = value.row_mut(i);
            for j in 0..d {
                out[j] = (row[j] - mu) * inv * gv.get(0, j) + bv.get(0, j);
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(value, rg, Op::LayerNorm { x, gain, bias }))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and
    /// divides survivors by `1 − rate`. Rate 0 is the identity.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] unless `0 ≤ rate < 1`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!(
                "dropout rate must be in [0, 1), got {rate}"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let xv = self.value(x);
        let keep = 1.0 - rate;
        let multiplier = DenseMatrix::from_fn(xv.rows(), xv.cols(), |_, _| {
            if rng.gen_bool(keep) {
                1.0 / keep
            } else {
                0.0
            }
        });
        let value = DenseMatrix::from_vec(
            xv.rows(),
            xv.cols(),
            xv.data()
                .iter()
                .zip(multiplier.data())
                .map(|(&a, &m)| a * m)
                .collect(),
        )?;
        let rg = self.requires(x);
        Ok(self.push(value, rg, Op::Dropout { x, multiplier }))
    }

    /// Masked mean cross-entropy between logits and integer labels.
    ///
    /// The loss is the mean over rows with `mask[i] = true` of
    /// `logsumexp(logits[i]) − logits[i][labels[i]]`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] if the mask selects no rows or if a
    /// selected label is out of range; [`Error::Shape`] on length
    /// mismatches.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || mask.len() != n {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("{n} logit rows, {} labels, {} mask bits", labels.len(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("cross-entropy mask selects no rows"));
        }
        let mut probs = DenseMatrix::zeros(n, c);
        let mut total = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if labels[i] >= c {
                return Err(Error::invalid(format!(
                    "label {} of row {i} out of range for {c} classes",
                    labels[i]
                )));
            }
            let row = lv.row(i);
            let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
            for j in 0..c {
                probs.set(i, j, (row[j] - m).exp() / z);
            }
            total += z.ln() + m - row[labels[i]];
        }
        let value = DenseMatrix::from_vec(1, 1, vec![total / count as f64])?;
        let rg = self.requires(logits);
        Ok(self.push(
            value,
            rg,
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            },
        ))
    }

    /// Sum of all entries, as a `1 x 1` variable.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        let value = DenseMatrix::from_vec(1, 1, vec![s]).expect("1x1");
        let rg = self.requires(a);
        self.push(value, rg, Op::SumAll(a))
    }

    /// Per-edge additive scores from two `n x 1` node columns:
    /// `s_e = left[dst(e)] + right[src(e)]`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] unless both operands are `n x 1` columns
    /// over the pattern's node count.
    pub fn edge_pair_scores(
        &mut self,
        left: Var,
        right: Var,
        pattern: Rc<EdgePattern>,
    ) -> Result<Var> {
        for (name, v) in [("left", left), ("right", right)] {
            let m = self.value(v);
            if m.rows() != pattern.n() || m.cols() != 1 {
                return Err(Error::shape(
                    "edge_pair_scores",
                    format!(
                        "{name} must be {}x1, got {}x{}",
                        pattern.n(),
                        m.rows(),
                        m.cols()
                    ),
                ));
            }
        }
        let lv = self.value(left);
        let rv = self.value(right);
        let mut value = DenseMatrix::zeros(pattern.n_directed(), 1);
        for e in 0..pattern.n_directed() {
            value.set(
                e,
                0,
                lv.get(pattern.row()[e], 0) + rv.get(pattern.col()[e], 0),
            );
        }
        let rg = self.requires(left) || self.requires(right);
        Ok(self.push(value, rg, Op::EdgePairScores { left, right, pattern }))
    }

    /// Per-edge scaled dot-product scores:
    /// `s_e = scale * <q[dst(e)], k[src(e)]>`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] unless `q` and `k` are `n x d_h` with the
    /// pattern's node count.
    pub fn edge_dot_scores(
        &mut self,
        q: Var,
        k: Var,
        pattern: Rc<EdgePattern>,
        scale: f64,
    ) -> Result<Var> {
        let qv = self.value(q);
        let kv = self.value(k);
        if qv.rows() != pattern.n() || kv.rows() != pattern.n() || qv.cols() != kv.cols() {
            return Err(Error::shape(
                "edge_dot_scores",
                format!(
                    "q {}x{}, k {}x{} on {} nodes",
                    qv.rows(),
                    qv.cols(),
                    kv.rows(),
                    kv.cols(),
                    pattern.n()
                ),
            ));
        }
        let mut value = DenseMatrix::zeros(pattern.n_directed(), 1);
        for e in 0..pattern.n_directed() {
            let qr = qv.row(pattern.row()[e]);
            let kr = kv.row(pattern.col()[e]);
            let dot: f64 = qr.iter().zip(kr).map(|(&a, &b)| a * b).sum();
            value.set(e, 0, scale * dot);
        }
        let rg = self.requires(q) || self.requires(k);
        Ok(self.push(value, rg, Op::EdgeDotScores { q, k, pattern, scale }))
    }

    /// Softmax over each destination's neighborhood segment (the sparse
    /// counterpart of a masked row softmax; the mask is the pattern).
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] unless `scores` is `(n_directed, 1)`;
    /// [`Error::Invalid`] if any segment is empty.
    pub fn masked_row_softmax(&mut self, scores: Var, pattern: Rc<EdgePattern>) -> Result<Var> {
        let sv = self.value(scores);
        if sv.rows() != pattern.n_directed() || sv.cols() != 1 {
            return Err(Error::shape(
                "masked_row_softmax",
                format!(
                    "scores must be {}x1, got {}x{}",
                    pattern.n_directed(),
                    sv.rows(),
                    sv.cols()
                ),
            ));
        }
        let mut value = DenseMatrix::zeros(sv.rows(), 1);
        for v in 0..pattern.n() {
            let range = pattern.row_range(v);
            if range.is_empty() {
                return Err(Error::invalid(format!(
                    "node {v} has an empty attention neighborhood"
                )));
            }
            let seg: Vec<f64> = range.clone().map(|e| sv.get(e, 0)).collect();
            let mut out = vec![0.0; seg.len()];
            softmax_into(&seg, &mut out);
            for (off, e) in range.enumerate() {
                value.set(e, 0, out[off]);
            }
        }
        let rg = self.requires(scores);
        Ok(self.push(value, rg, Op::MaskedRowSoftmax { scores, pattern }))
    }

    /// Renormalizes nonnegative edge weights so each destination segment
    /// sums to 1.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] unless `w` is `(n_directed, 1)`;
    /// [`Error::Invalid`] if a segment sums to zero.
    pub fn edge_normalize(&mut self, w: Var, pattern: Rc<EdgePattern>) -> Result<Var> {
        let wv = self.value(w);
        if wv.rows() != pattern.n_directed() || wv.cols() != 1 {
            return Err(Error::shape(
                "edge_normalize",
                format!(
                    "weights must be {}x1, got {}x{}",
                    pattern.n_directed(),
                    wv.rows(),
                    wv.cols()
                ),
            ));
        }
        let mut value = DenseMatrix::zeros(wv.rows(), 1);
        for v in 0..pattern.n() {
            let range = pattern.row_range(v);
            let total: f64 = range.clone().map(|e| wv.get(e, 0)).sum();
            if total <= 0.0 {
                return Err(Error::invalid(format!(
                    "edge weights of node {v} sum to {total}; cannot renormalize"
                )));
            }
            for e in range {
                value.set(e, 0, wv.get(e, 0) / total);
            }
        }
        let rg = self.requires(w);
        Ok(self.push(value, rg, Op::EdgeNormalize { w, pattern }))
    }

    /// Aggregates node features along edges:
    /// `out[v] = Σ_{e in segment(v)} w_e · h[src(e)]`.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on operand-shape mismatch.
    pub fn edge_aggregate(&mut self, w: Var, h: Var, pattern: Rc<EdgePattern>) -> Result<Var> {
        let wv = self.value(w);
        let hv = self.value(h);
        if wv.rows() != pattern.n_directed() || wv.cols() != 1 || hv.rows() != pattern.n() {
            return Err(Error::shape(
                "edge_aggregate",
                format!(
                    "weights {}x{}, features {}x{} on pattern with {} edges / {} nodes",
                    wv.rows(),
                    wv.cols(),
                    hv.rows(),
                    hv.cols(),
                    pattern.n_directed(),
                    pattern.n()
                ),
            ));
        }
        let d = hv.cols();
        let mut value = DenseMatrix::zeros(pattern.n(), d);
        for v in 0..pattern.n() {
            for e in pattern.row_range(v) {
                let w_e = wv.get(e, 0);
                if w_e == 0.0 {
                    continue;
                }
                let src = hv.row(pattern.col()[e]);
                let out = value.row_mut(v);
                for (o, &s) in out.iter_mut().zip(src) {
                    *o += w_e * s;
                }
            }
        }
        let rg = self.requires(w) || self.requires(h);
        Ok(self.push(value, rg, Op::EdgeAggregate { w, h, pattern }))
    }

    /// Per-directed-edge gate from per-undirected-edge logits: both
    /// orientations of undirected edge `k` get `sigmoid(logits[k])`;
    /// self-loops are fixed at 1.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] unless `logits` is `(n_undirected, 1)`.
    pub fn edge_gate(&mut self, logits: Var, pattern: Rc<EdgePattern>) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rows() != pattern.n_undirected() || lv.cols() != 1 {
            return Err(Error::shape(
                "edge_gate",
                format!(
                    "logits must be {}x1, got {}x{}",
                    pattern.n_undirected(),
                    lv.rows(),
                    lv.cols()
                ),
            ));
        }
        let mut value = DenseMatrix::zeros(pattern.n_directed(), 1);
        for e in 0..pattern.n_directed() {
            let gate = match pattern.undirected_id(e) {
                None => 1.0,
                Some(k) => sigmoid(lv.get(k, 0)),
            };
            value.set(e, 0, gate);
        }
        let rg = self.requires(logits);
        Ok(self.push(value, rg, Op::EdgeGate { logits, pattern }))
    }

    /// Class-posterior matrix: rows with `fixed[i] = true` are the one-hot
    /// encoding of `labels[i]`; all other rows are the softmax of the
    /// logits row. With `stop_grad` the result is treated as a constant.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on length mismatches; [`Error::Invalid`]
    /// if a fixed label is out of range.
    pub fn class_posterior(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        fixed: Rc<Vec<bool>>,
        stop_grad: bool,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, c) = (lv.rows(), lv.cols());
        if labels.len() != n || fixed.len() != n {
            return Err(Error::shape(
                "class_posterior",
                format!("{n} logit rows, {} labels, {} fixed bits", labels.len(), fixed.len()),
            ));
        }
        let mut value = DenseMatrix::zeros(n, c);
        for i in 0..n {
            if fixed[i] {
                if labels[i] >= c {
                    return Err(Error::invalid(format!(
                        "label {} of row {i} out of range for {c} classes",
                        labels[i]
                    )));
                }
                value.set(i, labels[i], 1.0);
            } else {
                softmax_into(lv.row(i), value.row_mut(i));
            }
        }
        let rg = !stop_grad && self.requires(logits);
        Ok(self.push(
            value,
            rg,
            Op::ClassPosterior {
                logits,
                fixed,
                stop_grad,
            },
        ))
    }

    /// Structural entropy of the weighted augmented support under a soft
    /// class partition.
    ///
    /// With per-directed-edge weights `ω` (destination rows `v`, source
    /// columns `u`) and soft assignments `P (n x c)`:
    ///
    /// * `d_v = Σ_u ω_vu` (weighted degree), `V = Σ_v d_v` (volume)
    /// * `vol_j = Σ_v P_vj d_v` (class volume)
    /// * `g_j = Σ_{vu} ω_vu P_vj (1 − P_uj)` (boundary weight)
    /// * `loss = −Σ_j (g_j / V) ln(vol_j / V)`
    ///
    /// Classes with zero volume contribute zero (their boundary weight is
    /// necessarily zero as well). The loss is nonnegative whenever
    /// `ω ≥ 0` and `P` has rows in the simplex, and invariant to scaling
    /// all of `ω` by a constant. `detach_omega` blocks the gradient into
    /// `ω` (the assignment path stays live).
    ///
    /// # Errors
    ///
    /// Returns [`Error::Shape`] on operand-shape mismatch.
    pub fn struct_entropy(
        &mut self,
        omega: Var,
        p: Var,
        pattern: Rc<EdgePattern>,
        detach_omega: bool,
    ) -> Result<Var> {
        let wv = self.value(omega);
        let pv = self.value(p);
        if wv.rows() != pattern.n_directed() || wv.cols() != 1 || pv.rows() != pattern.n() {
            return Err(Error::shape(
                "struct_entropy",
                format!(
                    "omega {}x{}, P {}x{} on pattern with {} edges / {} nodes",
                    wv.rows(),
                    wv.cols(),
                    pv.rows(),
                    pv.cols(),
                    pattern.n_directed(),
                    pattern.n()
                ),
            ));
        }
        if wv.data().iter().sum::<f64>() <= 0.0 {
            return Err(Error::invalid(
                "structural entropy is degenerate: aggregation weights have zero total volume",
            ));
        }
        let loss = struct_entropy_forward(wv, pv, &pattern);
        let value = DenseMatrix::from_vec(1, 1, vec![loss])?;
        let rg = (!detach_omega && self.requires(omega)) || self.requires(p);
        Ok(self.push(
            value,
            rg,
            Op::StructEntropy {
                omega,
                p,
                pattern,
                detach_omega,
            },
        ))
    }

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::shape(
                op,
                format!("{}x{} vs {}x{}", av.rows(), av.cols(), bv.rows(), bv.cols()),
            ));
        }
        Ok(())
    }

    /// Runs reverse-mode accumulation from a scalar loss. All gradients
    /// are reset first, so repeated backward passes over one tape are
    /// deterministic and identical.
    ///
    /// # Errors
    ///
    /// Returns [`Error::Invalid`] if `loss` is not `1 x 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if lv.rows() != 1 || lv.cols() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a scalar loss, got {}x{}",
                lv.rows(),
                lv.cols()
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(DenseMatrix::from_vec(1, 1, vec![1.0])?);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let g = self.nodes[i].grad.take().expect("checked above");
            let deltas = self.parent_deltas(i, &g);
            self.nodes[i].grad = Some(g);
            for (parent, delta) in deltas {
                match &mut self.nodes[parent].grad {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            }
        }
        Ok(())
    }

    /// Computes the gradient contributions of node `i` to its parents.
    fn parent_deltas(&self, i: usize, g: &DenseMatrix) -> Vec<(usize, DenseMatrix)> {
        let mut out: Vec<(usize, DenseMatrix)> = Vec::new();
        let push = |v: Var, d: DenseMatrix, out: &mut Vec<(usize, DenseMatrix)>| {
            out.push((v.0, d));
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    let d = g.matmul_nt(self.value(*b)).expect("backward shapes");
                    push(*a, d, &mut out);
                }
                if self.requires(*b) {
                    let d = self.value(*a).matmul_tn(g).expect("backward shapes");
                    push(*b, d, &mut out);
                }
            }
            Op::MatMulNt(a, b) => {
                // y = a bᵀ: da = g b; db = gᵀ a.
                if self.requires(*a) {
                    let d = g.matmul(self.value(*b)).expect("backward shapes");
                    push(*a, d, &mut out);
                }
                if self.requires(*b) {
                    let d = g.matmul_tn(self.value(*a)).expect("backward shapes");
                    push(*b, d, &mut out);
                }
            }
            Op::Spmm(m, x) => {
                if self.requires(*x) {
                    let d = m.transpose().spmm(g).expect("backward shapes");
                    push(*x, d, &mut out);
                }
            }
            Op::Add(a, b) => {
                if self.requires(*a) {
                    push(*a, g.clone(), &mut out);
                }
                if self.requires(*b) {
                    push(*b, g.clone(), &mut out);
                }
            }
            Op::Sub(a, b) => {
                if self.requires(*a) {
                    push(*a, g.clone(), &mut out);
                }
                if self.requires(*b) {
                    push(*b, g.map(|v| -v), &mut out);
                }
            }
            Op::Scale(a, c) => {
                if self.requires(*a) {
                    push(*a, g.map(|v| c * v), &mut out);
                }
            }
            Op::Mul(a, b) => {
                if self.requires(*a) {
                    let d = hadamard(g, self.value(*b));
                    push(*a, d, &mut out);
                }
                if self.requires(*b) {
                    let d = hadamard(g, self.value(*a));
                    push(*b, d, &mut out);
                }
            }
            Op::Relu(a) => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let d = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                        if x.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            0.0
                        }
                    });
                    push(*a, d, &mut out);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let d = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                        if x.get(r, c) > 0.0 {
                            g.get(r, c)
                        } else {
                            slope * g.get(r, c)
                        }
                    });
                    push(*a, d, &mut out);
                }
            }
            Op::Log(a) => {
                if self.requires(*a) {
                    let x = self.value(*a);
                    let d = DenseMatrix::from_fn(x.rows(), x.cols(), |r, c| {
                        g.get(r, c) / x.get(r, c)
                    });
                    push(*a, d, &mut out);
                }
            }
            Op::RowSoftmax(a) => {
                if self.requires(*a) {
                    let y = &self.nodes[i].value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(&p, &gg)| p * gg).sum();
                        let drow = d.row_mut(r);
                        for ((dv, &p), &gg) in drow.iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *dv = p * (gg - dot);
                        }
                    }
                    push(*a, d, &mut out);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    if self.requires(p) {
                        let d = DenseMatrix::from_fn(pv.rows(), w, |r, c| g.get(r, offset + c));
                        push(p, d, &mut out);
                    }
                    offset += w;
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = self.value(*x);
                let gv = self.value(*gain);
                let (n, d) = (xv.rows(), xv.cols());
                let mut dx = DenseMatrix::zeros(n, d);
                let mut dgain = DenseMatrix::zeros(1, d);
                let mut dbias = DenseMatrix::zeros(1, d);
                for r in 0..n {
                    let row = xv.row(r);
                    let (mu, var) = mean_var(row);
                    let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) * inv).collect();
                    let grow = g.row(r);
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let dxh = grow[j] * gv.get(0, j);
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[j];
                        dgain.set(0, j, dgain.get(0, j) + grow[j] * xhat[j]);
                        dbias.set(0, j, dbias.get(0, j) + grow[j]);
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    let drow = dx.row_mut(r);
                    for j in 0..d {
                        let dxh = grow[j] * gv.get(0, j);
                        drow[j] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
                if self.requires(*x) {
                    push(*x, dx, &mut out);
                }
                if self.requires(*gain) {
                    push(*gain, dgain, &mut out);
                }
                if self.requires(*bias) {
                    push(*bias, dbias, &mut out);
                }
            }
            Op::Dropout { x, multiplier } => {
                if self.requires(*x) {
                    push(*x, hadamard(g, multiplier), &mut out);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                mask,
                probs,
                count,
            } => {
                if self.requires(*logits) {
                    let upstream = g.get(0, 0);
                    let scale = upstream / *count as f64;
                    let d = DenseMatrix::from_fn(probs.rows(), probs.cols(), |r, c| {
                        if mask[r] {
                            let onehot = if labels[r] == c { 1.0 } else { 0.0 };
                            scale * (probs.get(r, c) - onehot)
                        } else {
                            0.0
                        }
                    });
                    push(*logits, d, &mut out);
                }
            }
            Op::SumAll(a) => {
                if self.requires(*a) {
                    let av = self.value(*a);
                    let upstream = g.get(0, 0);
                    push(
                        *a,
                        DenseMatrix::from_fn(av.rows(), av.cols(), |_, _| upstream),
                        &mut out,
                    );
                }
            }
            Op::EdgePairScores { left, right, pattern } => {
                let n = pattern.n();
                if self.requires(*left) {
                    let mut d = DenseMatrix::zeros(n, 1);
                    for e in 0..pattern.n_directed() {
                        let v = pattern.row()[e];
                        d.set(v, 0, d.get(v, 0) + g.get(e, 0));
                    }
                    push(*left, d, &mut out);
                }
                if self.requires(*right) {
                    let mut d = DenseMatrix::zeros(n, 1);
                    for e in 0..pattern.n_directed() {
                        let u = pattern.col()[e];
                        d.set(u, 0, d.get(u, 0) + g.get(e, 0));
                    }
                    push(*right, d, &mut out);
                }
            }
            Op::EdgeDotScores { q, k, pattern, scale } => {
                let qv = self.value(*q);
                let kv = self.value(*k);
                let dh = qv.cols();
                if self.requires(*q) {
                    let mut d = DenseMatrix::zeros(qv.rows(), dh);
                    for e in 0..pattern.n_directed() {
                        let coeff = scale * g.get(e, 0);
                        if coeff == 0.0 {
                            continue;
                        }
                        let v = pattern.row()[e];
                        let u = pattern.col()[e];
                        let krow = kv.row(u);
                        let drow = d.row_mut(v);
                        for (dv, &kk) in drow.iter_mut().zip(krow) {
                            *dv += coeff * kk;
                        }
                    }
                    push(*q, d, &mut out);
                }
                if self.requires(*k) {
                    let mut d = DenseMatrix::zeros(kv.rows(), dh);
                    for e in 0..pattern.n_directed() {
                        let coeff = scale * g.get(e, 0);
                        if coeff == 0.0 {
                            continue;
                        }
                        let v = pattern.row()[e];
                        let u = pattern.col()[e];
                        let qrow = qv.row(v);
                        let drow = d.row_mut(u);
                        for (dv, &qq) in drow.iter_mut().zip(qrow) {
                            *dv += coeff * qq;
                        }
                    }
                    push(*k, d, &mut out);
                }
            }
            Op::MaskedRowSoftmax { scores, pattern } => {
                if self.requires(*scores) {
                    let y = &self.nodes[i].value;
                    let mut d = DenseMatrix::zeros(y.rows(), 1);
                    for v in 0..pattern.n() {
                        let range = pattern.row_range(v);
                        let dot: f64 = range
                            .clone()
                            .map(|e| y.get(e, 0) * g.get(e, 0))
                            .sum();
                        for e in range {
                            d.set(e, 0, y.get(e, 0) * (g.get(e, 0) - dot));
                        }
                    }
                    push(*scores, d, &mut out);
                }
            }
            Op::EdgeNormalize { w, pattern } => {
                if self.requires(*w) {
                    let wv = self.value(*w);
                    let y = &self.nodes[i].value;
                    let mut d = DenseMatrix::zeros(wv.rows(), 1);
                    for v in 0..pattern.n() {
                        let range = pattern.row_range(v);
                        let total: f64 = range.clone().map(|e| wv.get(e, 0)).sum();
                        // y_e = w_e / T: dw_e = (g_e - Σ_f g_f y_f) / T.
                        let dot: f64 = range
                            .clone()
                            .map(|e| g.get(e, 0) * y.get(e, 0))
                            .sum();
                        for e in range {
                            d.set(e, 0, (g.get(e, 0) - dot) / total);
                        }
                    }
                    push(*w, d, &mut out);
                }
            }
            Op::EdgeAggregate { w, h, pattern } => {
                let wv = self.value(*w);
                let hv = self.value(*h);
                if self.requires(*w) {
                    let mut d = DenseMatrix::zeros(wv.rows(), 1);
                    for e in 0..pattern.n_directed() {
                        let v = pattern.row()[e];
                        let u = pattern.col()[e];
                        let dot: f64 = g.row(v).iter().zip(hv.row(u)).map(|(&a, &b)| a * b).sum();
                        d.set(e, 0, dot);
                    }
                    push(*w, d, &mut out);
                }
                if self.requires(*h) {
                    let mut d = DenseMatrix::zeros(hv.rows(), hv.cols());
                    for e in 0..pattern.n_directed() {
                        let w_e = wv.get(e, 0);
                        if w_e == 0.0 {
                            continue;
                        }
                        let v = pattern.row()[e];
                        let u = pattern.col()[e];
                        let grow = g.row(v);
                        let drow = d.row_mut(u);
                        for (dv, &gg) in drow.iter_mut().zip(grow) {
                            *dv += w_e * gg;
                        }
                    }
                    push(*h, d, &mut out);
                }
            }
            Op::EdgeGate { logits, pattern } => {
                if self.requires(*logits) {
                    let lv = self.value(*logits);
                    let mut d = DenseMatrix::zeros(lv.rows(), 1);
                    for e in 0..pattern.n_directed() {
                        if let Some(k) = pattern.undirected_id(e) {
                            let s = sigmoid(lv.get(k, 0));
                            d.set(k, 0, d.get(k, 0) + g.get(e, 0) * s * (1.0 - s));
                        }
                    }
                    push(*logits, d, &mut out);
                }
            }
            Op::ClassPosterior {
                logits,
                fixed,
                stop_grad,
            } => {
                if !stop_grad && self.requires(*logits) {
                    let y = &self.nodes[i].value;
                    let mut d = DenseMatrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        if fixed[r] {
                            continue;
                        }
                        let dot: f64 = y.row(r).iter().zip(g.row(r)).map(|(&p, &gg)| p * gg).sum();
                        let drow = d.row_mut(r);
                        for ((dv, &p), &gg) in drow.iter_mut().zip(y.row(r)).zip(g.row(r)) {
                            *dv = p * (gg - dot);
                        }
                    }
                    push(*logits, d, &mut out);
                }
            }
            Op::StructEntropy {
                omega,
                p,
                pattern,
                detach_omega,
            } => {
                let upstream = g.get(0, 0);
                let (d_omega, d_p) = struct_entropy_backward(
                    self.value(*omega),
                    self.value(*p),
                    pattern,
                    upstream,
                    !detach_omega && self.requires(*omega),
                    self.requires(*p),
                );
                if let Some(d) = d_omega {
                    push(*omega, d, &mut out);
                }
                if let Some(d) = d_p {
                    push(*p, d, &mut out);
                }
            }
        }
        out
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(row: &[f64], out: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

fn mean_var(row: &[f64]) -> (f64, f64) {
    let d = row.len() as f64;
    let mu = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / d;
    (mu, var)
}

fn hadamard(a: &DenseMatrix, b: &DenseMatrix) -> DenseMatrix {
    DenseMatrix::from_vec(
        a.rows(),
        a.cols(),
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x * y)
            .collect(),
    )
    .expect("matching shapes")
}

/// Forward value of the structural-entropy loss; shared with
/// [`Tape::struct_entropy`] and usable on plain matrices (no tape).
#[must_use]
pub fn struct_entropy_forward(omega: &DenseMatrix, p: &DenseMatrix, pattern: &EdgePattern) -> f64 {
    let c = p.cols();
    let n = pattern.n();
    let mut deg = vec![0.0f64; n];
    for e in 0..pattern.n_directed() {
        deg[pattern.row()[e]] += omega.get(e, 0);
    }
    let volume: f64 = deg.iter().sum();
    if volume <= 0.0 {
        return 0.0;
    }
    let mut vol = vec![0.0f64; c];
    for v in 0..n {
        for j in 0..c {
            vol[j] += p.get(v, j) * deg[v];
        }
    }
    let mut boundary = vec![0.0f64; c];
    for e in 0..pattern.n_directed() {
        let w = omega.get(e, 0);
        if w == 0.0 {
            continue;
        }
        let v = pattern.row()[e];
        let u = pattern.col()[e];
        for j in 0..c {
            boundary[j] += w * p.get(v, j) * (1.0 - p.get(u, j));
        }
    }
    let mut loss = 0.0;
    for j in 0..c {
        if vol[j] > 0.0 {
            loss -= boundary[j] / volume * (vol[j] / volume).ln();
        }
    }
    loss
}

/// Hand-derived gradients of the structural-entropy loss with respect to
/// the edge weights and the assignment matrix. Runs in
/// `O(edges * classes)`.
fn struct_entropy_backward(
    omega: &DenseMatrix,
    p: &DenseMatrix,
    pattern: &EdgePattern,
    upstream: f64,
    want_omega: bool,
    want_p: bool,
) -> (Option<DenseMatrix>, Option<DenseMatrix>) {
    let c = p.cols();
    let n = pattern.n();
    let n_dir = pattern.n_directed();

    let mut deg = vec![0.0f64; n];
    for e in 0..n_dir {
        deg[pattern.row()[e]] += omega.get(e, 0);
    }
    let volume: f64 = deg.iter().sum();
    if volume <= 0.0 {
        // Loss is constant 0 on the all-zero-weight boundary.
        let zo = want_omega.then(|| DenseMatrix::zeros(n_dir, 1));
        let zp = want_p.then(|| DenseMatrix::zeros(n, c));
        return (zo, zp);
    }
    let mut vol = vec![0.0f64; c];
    for v in 0..n {
        for j in 0..c {
            vol[j] += p.get(v, j) * deg[v];
        }
    }
    let mut boundary = vec![0.0f64; c];
    for e in 0..n_dir {
        let w = omega.get(e, 0);
        if w == 0.0 {
            continue;
        }
        let (v, u) = (pattern.row()[e], pattern.col()[e]);
        for j in 0..c {
            boundary[j] += w * p.get(v, j) * (1.0 - p.get(u, j));
        }
    }

    // Partials of the loss with respect to the three aggregates:
    //   dL/d boundary_j = -ln(vol_j / V) / V            (c1)
    //   dL/d vol_j      = -boundary_j / (V * vol_j)     (c2)
    //   dL/d V          = Σ_j boundary_j (ln(vol_j/V) + 1) / V²  (c3)
    let mut c1 = vec![0.0f64; c];
    let mut c2 = vec![0.0f64; c];
    let mut c3 = 0.0f64;
    for j in 0..c {
        if vol[j] > 0.0 {
            let log_ratio = (vol[j] / volume).ln();
            c1[j] = -log_ratio / volume;
            c2[j] = -boundary[j] / (volume * vol[j]);
            c3 += boundary[j] * (log_ratio + 1.0) / (volume * volume);
        }
    }

    let d_omega = want_omega.then(|| {
        // dω_vu = Σ_j c1_j P_vj (1 - P_uj) + Σ_j c2_j P_vj + c3.
        let mut s1 = vec![0.0f64; n]; // Σ_j c1_j P_vj
        let mut s2 = vec![0.0f64; n]; // Σ_j c2_j P_vj
        for v in 0..n {
            for j in 0..c {
                s1[v] += c1[j] * p.get(v, j);
                s2[v] += c2[j] * p.get(v, j);
            }
        }
        let mut d = DenseMatrix::zeros(n_dir, 1);
        for e in 0..n_dir {
            let (v, u) = (pattern.row()[e], pattern.col()[e]);
            let mut cross = 0.0;
            for j in 0..c {
                cross += c1[j] * p.get(v, j) * p.get(u, j);
            }
            d.set(e, 0, upstream * (s1[v] - cross + s2[v] + c3));
        }
        d
    });

    let d_p = want_p.then(|| {
        // dP_wj = c1_j (out_wj - in_wj) + c2_j d_w, where
        //   out_wj = Σ_{u} ω_wu (1 - P_uj)  (w as destination)
        //   in_wj  = Σ_{v} ω_vw P_vj        (w as source)
        let mut d = DenseMatrix::zeros(n, c);
        for e in 0..n_dir {
            let w_e = omega.get(e, 0);
            if w_e == 0.0 {
                continue;
            }
            let (v, u) = (pattern.row()[e], pattern.col()[e]);
            for j in 0..c {
                // out contribution at row v; in contribution at row u.
                d.set(v, j, d.get(v, j) + c1[j] * w_e * (1.0 - p.get(u, j)));
                d.set(u, j, d.get(u, j) - c1[j] * w_e * p.get(v, j));
            }
        }
        for w in 0..n {
            for j in 0..c {
                d.set(w, j, upstream * (d.get(w, j) + c2[j] * deg[w]));
            }
        }
        d
    });

    (d_omega, d_p)
}
