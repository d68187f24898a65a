//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations execute eagerly: each builder method on [`Tape`] computes the
//! forward value immediately, records the operation, and returns a [`Var`]
//! handle. Creation order is therefore already a topological order, and
//! [`Tape::backward`] replays the ops in reverse, accumulating vector-Jacobian
//! products into per-node gradient buffers.
//!
//! The op set is deliberately closed and small enough to audit by hand:
//! broadcasting is limited to scalar-with-tensor, trailing-suffix (bias), and
//! leading-prefix (per-sample / per-token gates) forms. Each backward rule is
//! covered by a finite-difference test at the bottom of this file.

use std::rc::Rc;

use crate::tensor::{strides_of, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    // max(x, 0) + ln(1 + exp(-|x|)): exact and overflow-safe.
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Softplus,
    Exp,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    /// `b` has the trailing shape of `a` (bias / per-channel affine).
    AddSuffix { a: Var, b: Var },
    /// `b` has the leading shape of `a` (per-sample or per-token gates).
    MulPrefix { a: Var, b: Var },
    /// Elementwise product with a constant factor vector (dropout masks,
    /// pair-selection masks). The factors receive no gradient.
    MulConst { a: Var, factors: Rc<Vec<f64>> },
    /// `c / x` elementwise. A single rounding per element, so `c / c == 1`
    /// exactly.
    RecipScale { a: Var, c: f64 },
    /// `a * s` where `s` is a scalar variable (learnable temperature, scale).
    MulScalarVar { a: Var, s: Var },
    Unary { a: Var, kind: UnaryKind },
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize, transpose_b: bool },
    BatchMatmul { a: Var, b: Var, g: usize, m: usize, k: usize, n: usize, transpose_b: bool },
    /// Row softmax over the last axis; masked-out entries get probability 0
    /// (their gradient vanishes through the zero output, so the mask itself
    /// is not saved).
    Softmax { a: Var, rows: usize, cols: usize },
    LogSumExp { a: Var, rows: usize, cols: usize },
    MaxLast { a: Var, rows: usize, cols: usize, argmax: Vec<usize> },
    MeanLast { a: Var, rows: usize, cols: usize },
    SumAll(Var),
    MeanAll(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, rows: usize, cols: usize, mu: Vec<f64>, rstd: Vec<f64> },
    Permute { a: Var, in_shape: Vec<usize>, perm: Vec<usize> },
    Reshape(Var),
    /// `out[i] = idx[i] < 0 ? 0 : a[idx[i]]`; backward scatter-adds.
    Gather { a: Var, idx: Rc<Vec<i64>> },
    /// Cosine similarity between every token and every prototype row, with
    /// norms clamped below at `eps`. Saves the clamped norms.
    CosineSim { tokens: Var, protos: Var, b: usize, t: usize, d: usize, kp: usize, eps: f64, tok_norms: Vec<f64>, proto_norms: Vec<f64> },
    AbsPow { a: Var, q: f64 },
    CrossEntropy { logits: Var, labels: Rc<Vec<usize>>, rows: usize, cols: usize },
    BceWithLogits { logits: Var, targets: Rc<Vec<f64>>, weights: Rc<Vec<f64>>, denom: f64 },
}

struct Node {
    op: Op,
    value: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
}

/// Linear tape of eagerly evaluated operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        assert_eq!(self.numel(v), 1, "contract error: expected scalar node");
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
    }

    /// Accumulated gradient of `v` from previous [`Tape::backward`] calls.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node { op, value, shape, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ── Leaves ───────────────────────────────────────────────────────────

    /// Register a tensor as a leaf; it receives a gradient iff
    /// `tensor.requires_grad`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape().to_vec(), t.data().to_vec(), t.requires_grad)
    }

    /// Constant leaf: participates in the forward value only.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "dimension error: constant shape/data mismatch");
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(Op::Leaf, vec![], vec![value], false)
    }

    /// Copy of `v`'s value through which no gradient flows.
    pub fn detach(&mut self, v: Var) -> Var {
        let shape = self.shape(v).to_vec();
        let value = self.value(v).to_vec();
        self.push(Op::Leaf, shape, value, false)
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "dimension error: {} operands must share a shape ({:?} vs {:?})",
            what,
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Add(a, b), shape, value, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Sub(a, b), shape, value, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let value: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a) || self.req(b);
        self.push(Op::Mul(a, b), shape, value, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x + c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        let _ = c;
        self.push(Op::AddScalar(a), shape, value, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self.value(a).iter().map(|x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::MulScalar(a, c), shape, value, rg)
    }

    /// `a + b` where `b`'s shape equals the trailing axes of `a` (e.g. a bias
    /// vector added to every row).
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == sb[..],
            "dimension error: suffix shape {:?} does not match trailing axes of {:?}",
            sb,
            sa
        );
        let bn = self.numel(b);
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x + self.value(b)[i % bn])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::AddSuffix { a, b }, sa, value, rg)
    }

    /// `a * b` where `b`'s shape equals the leading axes of `a` (per-sample or
    /// per-token gate broadcast over the remaining axes).
    pub fn mul_prefix(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sb.len() <= sa.len() && sa[..sb.len()] == sb[..],
            "dimension error: prefix shape {:?} does not match leading axes of {:?}",
            sb,
            sa
        );
        let trailing: usize = sa[sb.len()..].iter().product();
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .enumerate()
            .map(|(i, x)| x * self.value(b)[i / trailing])
            .collect();
        let rg = self.req(a) || self.req(b);
        self.push(Op::MulPrefix { a, b }, sa, value, rg)
    }

    /// Elementwise product with constant factors (no gradient to the factors).
    pub fn mul_const(&mut self, a: Var, factors: Rc<Vec<f64>>) -> Var {
        assert_eq!(self.numel(a), factors.len(), "dimension error: factor length mismatch");
        let value: Vec<f64> = self.value(a).iter().zip(factors.iter()).map(|(x, f)| x * f).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::MulConst { a, factors }, shape, value, rg)
    }

    /// `c / a` elementwise; every element of `a` must be nonzero.
    pub fn recip_scale(&mut self, a: Var, c: f64) -> Var {
        let value: Vec<f64> = self
            .value(a)
            .iter()
            .map(|&x| {
                assert!(x != 0.0, "domain error: division by zero element");
                c / x
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::RecipScale { a, c }, shape, value, rg)
    }

    /// `a * s` with `s` a scalar variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Var {
        assert_eq!(self.numel(s), 1, "dimension error: scale must be a scalar node");
        let sv = self.value(s)[0];
        let value: Vec<f64> = self.value(a).iter().map(|x| x * sv).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a) || self.req(s);
        self.push(Op::MulScalarVar { a, s }, shape, value, rg)
    }

    fn unary(&mut self, a: Var, kind: UnaryKind) -> Var {
        let value: Vec<f64> = match kind {
            UnaryKind::Relu => self.value(a).iter().map(|&x| x.max(0.0)).collect(),
            UnaryKind::Gelu => self.value(a).iter().map(|&x| gelu(x)).collect(),
            UnaryKind::Sigmoid => self.value(a).iter().map(|&x| sigmoid(x)).collect(),
            UnaryKind::Softplus => self.value(a).iter().map(|&x| softplus(x)).collect(),
            UnaryKind::Exp => self.value(a).iter().map(|&x| x.exp()).collect(),
            UnaryKind::Log => self
                .value(a)
                .iter()
                .map(|&x| {
                    assert!(x > 0.0, "domain error: log of non-positive value {x}");
                    x.ln()
                })
                .collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Unary { a, kind }, shape, value, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Relu)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Gelu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, UnaryKind::Log)
    }

    // ── Linear algebra ───────────────────────────────────────────────────

    /// 2-D matrix product. With `transpose_b`, `b` is stored `[n, k]` and the
    /// product is `a @ b^T`.
    pub fn matmul_t(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 2, "dimension error: matmul lhs must be rank 2, got {:?}", sa);
        assert_eq!(sb.len(), 2, "dimension error: matmul rhs must be rank 2, got {:?}", sb);
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if transpose_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        assert_eq!(k, kb, "dimension error: matmul inner dims {k} vs {kb} (lhs {:?}, rhs {:?})", sa, sb);
        let mut value = vec![0.0; m * n];
        matmul_kernel(self.value(a), self.value(b), &mut value, m, k, n, transpose_b);
        let rg = self.req(a) || self.req(b);
        self.push(Op::Matmul { a, b, m, k, n, transpose_b }, vec![m, n], value, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false)
    }

    /// Grouped matrix product over a leading group axis: `a` is `[g, m, k]`,
    /// `b` is `[g, k, n]` (or `[g, n, k]` with `transpose_b`).
    pub fn batch_matmul_t(&mut self, a: Var, b: Var, transpose_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert_eq!(sa.len(), 3, "dimension error: batch matmul lhs must be rank 3, got {:?}", sa);
        assert_eq!(sb.len(), 3, "dimension error: batch matmul rhs must be rank 3, got {:?}", sb);
        assert_eq!(sa[0], sb[0], "dimension error: group counts differ ({} vs {})", sa[0], sb[0]);
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        assert_eq!(k, kb, "dimension error: batch matmul inner dims {k} vs {kb}");
        let mut value = vec![0.0; g * m * n];
        for gi in 0..g {
            matmul_kernel(
                &self.value(a)[gi * m * k..(gi + 1) * m * k],
                &self.value(b)[gi * k * n..(gi + 1) * k * n],
                &mut value[gi * m * n..(gi + 1) * m * n],
                m,
                k,
                n,
                transpose_b,
            );
        }
        let rg = self.req(a) || self.req(b);
        self.push(Op::BatchMatmul { a, b, g, m, k, n, transpose_b }, vec![g, m, n], value, rg)
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var) -> Var {
        self.batch_matmul_t(a, b, false)
    }

    // ── Structured ops ───────────────────────────────────────────────────

    fn rows_cols(&self, a: Var, what: &str) -> (usize, usize) {
        let shape = self.shape(a);
        assert!(!shape.is_empty(), "dimension error: {what} needs at least one axis");
        let cols = *shape.last().unwrap();
        assert!(cols > 0, "domain error: {what} over an empty last axis");
        (self.numel(a) / cols, cols)
    }

    /// Softmax over the last axis, max-shifted for stability.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_masked(a, None)
    }

    /// Softmax over the last axis restricted to `mask`-true entries; masked
    /// entries get probability exactly 0. Every row must keep at least one
    /// admissible entry.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<Rc<Vec<bool>>>) -> Var {
        let (rows, cols) = self.rows_cols(a, "softmax");
        if let Some(m) = &mask {
            assert_eq!(m.len(), rows * cols, "dimension error: softmax mask length mismatch");
        }
        let x = self.value(a);
        let mut value = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let admit = |c: usize| mask.as_ref().map_or(true, |m| m[r * cols + c]);
            let mut mx = f64::NEG_INFINITY;
            for c in 0..cols {
                if admit(c) && row[c] > mx {
                    mx = row[c];
                }
            }
            assert!(mx > f64::NEG_INFINITY, "domain error: softmax row {r} has no admissible entries");
            let mut denom = 0.0;
            for c in 0..cols {
                if admit(c) {
                    let e = (row[c] - mx).exp();
                    value[r * cols + c] = e;
                    denom += e;
                }
            }
            for c in 0..cols {
                value[r * cols + c] /= denom;
            }
        }
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Softmax { a, rows, cols }, shape, value, rg)
    }

    /// Log-sum-exp over the last axis (max-shifted; finite for any finite
    /// input). The reduced axis must be non-empty.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a, "logsumexp");
        let x = self.value(a);
        let mut value = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            value[r] = mx + s.ln();
        }
        let shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        let rg = self.req(a);
        self.push(Op::LogSumExp { a, rows, cols }, shape, value, rg)
    }

    /// Max over the last axis; ties resolve to the lowest index, and the
    /// gradient flows only to that element.
    pub fn max_last(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a, "max");
        let x = self.value(a);
        let mut value = vec![0.0; rows];
        let mut argmax = vec![0usize; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut best = 0usize;
            for c in 1..cols {
                if row[c] > row[best] {
                    best = c;
                }
            }
            value[r] = row[best];
            argmax[r] = best;
        }
        let shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        let rg = self.req(a);
        self.push(Op::MaxLast { a, rows, cols, argmax }, shape, value, rg)
    }

    /// Mean over the last axis.
    pub fn mean_last(&mut self, a: Var) -> Var {
        let (rows, cols) = self.rows_cols(a, "mean");
        let x = self.value(a);
        let value: Vec<f64> = (0..rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum::<f64>() / cols as f64).collect();
        let shape = self.shape(a)[..self.shape(a).len() - 1].to_vec();
        let rg = self.req(a);
        self.push(Op::MeanLast { a, rows, cols }, shape, value, rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = vec![self.value(a).iter().sum::<f64>()];
        let rg = self.req(a);
        self.push(Op::SumAll(a), vec![], value, rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        assert!(n > 0, "domain error: mean of an empty tensor");
        let value = vec![self.value(a).iter().sum::<f64>() / n as f64];
        let rg = self.req(a);
        self.push(Op::MeanAll(a), vec![], value, rg)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let (rows, cols) = self.rows_cols(x, "layer_norm");
        assert_eq!(self.shape(gamma), &[cols], "dimension error: layer_norm gamma must be [{cols}]");
        assert_eq!(self.shape(beta), &[cols], "dimension error: layer_norm beta must be [{cols}]");
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut value = vec![0.0; rows * cols];
        let mut mu = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let m = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mu[r] = m;
            rstd[r] = rs;
            for c in 0..cols {
                value[r * cols + c] = (row[c] - m) * rs * gv[c] + bv[c];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        self.push(Op::LayerNorm { x, gamma, beta, rows, cols, mu, rstd }, shape, value, rg)
    }

    /// Reorder axes. `perm[i]` names the input axis that becomes output axis
    /// `i`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Var {
        let in_shape = self.shape(a).to_vec();
        assert_eq!(perm.len(), in_shape.len(), "dimension error: permute rank mismatch");
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            assert!(p < perm.len() && !seen[p], "dimension error: invalid permutation {perm:?}");
            seen[p] = true;
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let value = permute_data(self.value(a), &in_shape, perm, &out_shape);
        let rg = self.req(a);
        self.push(Op::Permute { a, in_shape, perm: perm.to_vec() }, out_shape, value, rg)
    }

    /// Reinterpret under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        assert_eq!(
            shape.iter().product::<usize>(),
            self.numel(a),
            "dimension error: cannot reshape {:?} to {:?}",
            self.shape(a),
            shape
        );
        let value = self.value(a).to_vec();
        let rg = self.req(a);
        self.push(Op::Reshape(a), shape, value, rg)
    }

    /// Gather by flat index; negative indices read as 0.0 (zero padding).
    pub fn gather(&mut self, a: Var, idx: Rc<Vec<i64>>, out_shape: Vec<usize>) -> Var {
        assert_eq!(out_shape.iter().product::<usize>(), idx.len(), "dimension error: gather shape/index mismatch");
        let an = self.numel(a) as i64;
        let av = self.value(a);
        let value: Vec<f64> = idx
            .iter()
            .map(|&i| {
                if i < 0 {
                    0.0
                } else {
                    assert!(i < an, "dimension error: gather index {i} out of bounds {an}");
                    av[i as usize]
                }
            })
            .collect();
        let rg = self.req(a);
        self.push(Op::Gather { a, idx }, out_shape, value, rg)
    }

    /// Cosine similarity between tokens `[b, t, d]` and prototypes `[kp, d]`,
    /// producing `[b, t, kp]`. Norms are clamped below at `eps` so zero
    /// vectors stay finite.
    pub fn cosine_sim(&mut self, tokens: Var, protos: Var, eps: f64) -> Var {
        let st = self.shape(tokens).to_vec();
        let sp = self.shape(protos).to_vec();
        assert_eq!(st.len(), 3, "dimension error: cosine_sim tokens must be rank 3, got {:?}", st);
        assert_eq!(sp.len(), 2, "dimension error: cosine_sim prototypes must be rank 2, got {:?}", sp);
        assert_eq!(st[2], sp[1], "dimension error: token dim {} != prototype dim {}", st[2], sp[1]);
        let (b, t, d, kp) = (st[0], st[1], st[2], sp[0]);
        let tv = self.value(tokens);
        let pv = self.value(protos);
        let tok_norms: Vec<f64> = (0..b * t)
            .map(|i| tv[i * d..(i + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt().max(eps))
            .collect();
        let proto_norms: Vec<f64> =
            (0..kp).map(|k| pv[k * d..(k + 1) * d].iter().map(|v| v * v).sum::<f64>().sqrt().max(eps)).collect();
        let mut value = vec![0.0; b * t * kp];
        for i in 0..b * t {
            let z = &tv[i * d..(i + 1) * d];
            for k in 0..kp {
                let p = &pv[k * d..(k + 1) * d];
                let dot: f64 = z.iter().zip(p).map(|(x, y)| x * y).sum();
                value[i * kp + k] = dot / (tok_norms[i] * proto_norms[k]);
            }
        }
        let rg = self.req(tokens) || self.req(protos);
        self.push(
            Op::CosineSim { tokens, protos, b, t, d, kp, eps, tok_norms, proto_norms },
            vec![b, t, kp],
            value,
            rg,
        )
    }

    /// `|x|^q` elementwise, `q >= 1`.
    pub fn abs_pow(&mut self, a: Var, q: f64) -> Var {
        assert!(q >= 1.0, "domain error: abs_pow exponent must be >= 1, got {q}");
        let value: Vec<f64> = self.value(a).iter().map(|&x| x.abs().powf(q)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.req(a);
        self.push(Op::AbsPow { a, q }, shape, value, rg)
    }

    /// Mean cross-entropy of `logits [rows, cols]` against integer labels,
    /// fused with a max-shifted log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: Rc<Vec<usize>>) -> Var {
        let (rows, cols) = self.rows_cols(logits, "cross_entropy");
        assert_eq!(labels.len(), rows, "dimension error: {} labels for {} rows", labels.len(), rows);
        let x = self.value(logits);
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            assert!(y < cols, "contract error: label {y} out of range for {cols} classes");
            let row = &x[r * cols..(r + 1) * cols];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            total += lse - row[y];
        }
        let value = vec![total / rows as f64];
        let rg = self.req(logits);
        self.push(Op::CrossEntropy { logits, labels, rows, cols }, vec![], value, rg)
    }

    /// Weighted binary cross-entropy with logits, computed with the stable
    /// `max(l,0) - l*t + ln(1 + exp(-|l|))` form and divided by `denom`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Rc<Vec<f64>>, weights: Rc<Vec<f64>>, denom: f64) -> Var {
        let n = self.numel(logits);
        assert_eq!(targets.len(), n, "dimension error: bce target length mismatch");
        assert_eq!(weights.len(), n, "dimension error: bce weight length mismatch");
        assert!(denom > 0.0, "contract error: bce denominator must be positive");
        let x = self.value(logits);
        let mut total = 0.0;
        for i in 0..n {
            let l = x[i];
            total += weights[i] * (l.max(0.0) - l * targets[i] + (-l.abs()).exp().ln_1p());
        }
        let value = vec![total / denom];
        let rg = self.req(logits);
        self.push(Op::BceWithLogits { logits, targets, weights, denom }, vec![], value, rg)
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients of leaves accumulate
    /// additively across repeated calls; use a fresh tape or read-and-reset
    /// between steps when that is not wanted.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.numel(loss), 1, "contract error: backward requires a scalar loss, got shape {:?}", self.shape(loss));
        let mut local: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = local[i].take() else { continue };
            self.propagate(i, &g, &mut local);
            // Merge into the persistent accumulator.
            match &mut self.grads[i] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                slot => *slot = Some(g),
            }
        }
    }

    fn accum(&self, local: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut local[v.0] {
            Some(acc) => {
                for (a, d) in acc.iter_mut().zip(delta) {
                    *a += d;
                }
            }
            slot => *slot = Some(delta.to_vec()),
        }
    }

    fn propagate(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(local, *a, g);
                self.accum(local, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(local, *a, g);
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                self.accum(local, *b, &neg);
            }
            Op::Mul(a, b) => {
                let da: Vec<f64> = g.iter().zip(self.value(*b)).map(|(gi, bi)| gi * bi).collect();
                let db: Vec<f64> = g.iter().zip(self.value(*a)).map(|(gi, ai)| gi * ai).collect();
                self.accum(local, *a, &da);
                self.accum(local, *b, &db);
            }
            Op::AddScalar(a) => self.accum(local, *a, g),
            Op::MulScalar(a, c) => {
                let da: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                self.accum(local, *a, &da);
            }
            Op::AddSuffix { a, b } => {
                self.accum(local, *a, g);
                let bn = self.numel(*b);
                let mut db = vec![0.0; bn];
                for (i, gi) in g.iter().enumerate() {
                    db[i % bn] += gi;
                }
                self.accum(local, *b, &db);
            }
            Op::MulPrefix { a, b } => {
                let bn = self.numel(*b);
                let trailing = self.numel(*a) / bn;
                let bv = self.value(*b);
                let av = self.value(*a);
                let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i / trailing]).collect();
                let mut db = vec![0.0; bn];
                for (i, gi) in g.iter().enumerate() {
                    db[i / trailing] += gi * av[i];
                }
                self.accum(local, *a, &da);
                self.accum(local, *b, &db);
            }
            Op::MulConst { a, factors } => {
                let da: Vec<f64> = g.iter().zip(factors.iter()).map(|(gi, f)| gi * f).collect();
                self.accum(local, *a, &da);
            }
            Op::RecipScale { a, c } => {
                let x = self.value(*a);
                let da: Vec<f64> = g.iter().zip(x).map(|(gi, &xi)| -gi * c / (xi * xi)).collect();
                self.accum(local, *a, &da);
            }
            Op::MulScalarVar { a, s } => {
                let sv = self.value(*s)[0];
                let da: Vec<f64> = g.iter().map(|gi| gi * sv).collect();
                let ds: f64 = g.iter().zip(self.value(*a)).map(|(gi, ai)| gi * ai).sum();
                self.accum(local, *a, &da);
                self.accum(local, *s, &[ds]);
            }
            Op::Unary { a, kind } => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let da: Vec<f64> = match kind {
                    UnaryKind::Relu => g.iter().zip(x).map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 }).collect(),
                    UnaryKind::Gelu => g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect(),
                    UnaryKind::Sigmoid => g.iter().zip(y).map(|(gi, &yi)| gi * yi * (1.0 - yi)).collect(),
                    UnaryKind::Softplus => g.iter().zip(x).map(|(gi, &xi)| gi * sigmoid(xi)).collect(),
                    UnaryKind::Exp => g.iter().zip(y).map(|(gi, &yi)| gi * yi).collect(),
                    UnaryKind::Log => g.iter().zip(x).map(|(gi, &xi)| gi / xi).collect(),
                };
                self.accum(local, *a, &da);
            }
            Op::Matmul { a, b, m, k, n, transpose_b } => {
                let (m, k, n) = (*m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; self.numel(*b)];
                matmul_backward(av, bv, g, &mut da, &mut db, m, k, n, *transpose_b);
                self.accum(local, *a, &da);
                self.accum(local, *b, &db);
            }
            Op::BatchMatmul { a, b, g: groups, m, k, n, transpose_b } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let av = self.value(*a);
                let bv = self.value(*b);
                let mut da = vec![0.0; groups * m * k];
                let mut db = vec![0.0; groups * k * n];
                for gi in 0..groups {
                    matmul_backward(
                        &av[gi * m * k..(gi + 1) * m * k],
                        &bv[gi * k * n..(gi + 1) * k * n],
                        &g[gi * m * n..(gi + 1) * m * n],
                        &mut da[gi * m * k..(gi + 1) * m * k],
                        &mut db[gi * k * n..(gi + 1) * k * n],
                        m,
                        k,
                        n,
                        *transpose_b,
                    );
                }
                self.accum(local, *a, &da);
                self.accum(local, *b, &db);
            }
            Op::Softmax { a, rows, cols } => {
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let dot: f64 = (0..*cols).map(|c| g[base + c] * y[base + c]).sum();
                    for c in 0..*cols {
                        da[base + c] = y[base + c] * (g[base + c] - dot);
                    }
                }
                self.accum(local, *a, &da);
            }
            Op::LogSumExp { a, rows, cols } => {
                let x = self.value(*a);
                let y = &self.nodes[i].value;
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[r] * (x[r * cols + c] - y[r]).exp();
                    }
                }
                self.accum(local, *a, &da);
            }
            Op::MaxLast { a, rows, cols, argmax } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    da[r * cols + argmax[r]] = g[r];
                }
                self.accum(local, *a, &da);
            }
            Op::MeanLast { a, rows, cols } => {
                let mut da = vec![0.0; rows * cols];
                for r in 0..*rows {
                    for c in 0..*cols {
                        da[r * cols + c] = g[r] / *cols as f64;
                    }
                }
                self.accum(local, *a, &da);
            }
            Op::SumAll(a) => {
                let da = vec![g[0]; self.numel(*a)];
                self.accum(local, *a, &da);
            }
            Op::MeanAll(a) => {
                let n = self.numel(*a);
                let da = vec![g[0] / n as f64; n];
                self.accum(local, *a, &da);
            }
            Op::LayerNorm { x, gamma, beta, rows, cols, mu, rstd } => {
                let xv = self.value(*x);
                let gv = self.value(*gamma);
                let mut dx = vec![0.0; rows * cols];
                let mut dgamma = vec![0.0; *cols];
                let mut dbeta = vec![0.0; *cols];
                for r in 0..*rows {
                    let base = r * cols;
                    let rs = rstd[r];
                    let m = mu[r];
                    // xhat and the two row means the VJP needs.
                    let mut mean_gy = 0.0;
                    let mut mean_gy_xhat = 0.0;
                    for c in 0..*cols {
                        let xhat = (xv[base + c] - m) * rs;
                        let gy = g[base + c] * gv[c];
                        mean_gy += gy;
                        mean_gy_xhat += gy * xhat;
                        dgamma[c] += g[base + c] * xhat;
                        dbeta[c] += g[base + c];
                    }
                    mean_gy /= *cols as f64;
                    mean_gy_xhat /= *cols as f64;
                    for c in 0..*cols {
                        let xhat = (xv[base + c] - m) * rs;
                        let gy = g[base + c] * gv[c];
                        dx[base + c] = rs * (gy - mean_gy - xhat * mean_gy_xhat);
                    }
                }
                self.accum(local, *x, &dx);
                self.accum(local, *gamma, &dgamma);
                self.accum(local, *beta, &dbeta);
            }
            Op::Permute { a, in_shape, perm } => {
                let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
                let in_strides = strides_of(in_shape);
                let out_strides = strides_of(&out_shape);
                let mut da = vec![0.0; self.numel(*a)];
                for (o, gi) in g.iter().enumerate() {
                    let mut rem = o;
                    let mut src = 0usize;
                    for (axis, os) in out_strides.iter().enumerate() {
                        let coord = rem / os;
                        rem %= os;
                        src += coord * in_strides[perm[axis]];
                    }
                    da[src] = *gi;
                }
                self.accum(local, *a, &da);
            }
            Op::Reshape(a) => self.accum(local, *a, g),
            Op::Gather { a, idx } => {
                let mut da = vec![0.0; self.numel(*a)];
                for (o, &src) in idx.iter().enumerate() {
                    if src >= 0 {
                        da[src as usize] += g[o];
                    }
                }
                self.accum(local, *a, &da);
            }
            Op::CosineSim { tokens, protos, b, t, d, kp, eps, tok_norms, proto_norms } => {
                let (bt, d, kp) = (b * t, *d, *kp);
                let tv = self.value(*tokens);
                let pv = self.value(*protos);
                let y = &self.nodes[i].value;
                let mut dtok = vec![0.0; bt * d];
                let mut dproto = vec![0.0; kp * d];
                for ti in 0..bt {
                    let z = &tv[ti * d..(ti + 1) * d];
                    let zn = tok_norms[ti];
                    let z_active = zn > *eps;
                    let mut g_dot_s = 0.0;
                    for k in 0..kp {
                        let gi = g[ti * kp + k];
                        if gi == 0.0 {
                            continue;
                        }
                        let p = &pv[k * d..(k + 1) * d];
                        let pn = proto_norms[k];
                        let s = y[ti * kp + k];
                        // d(dot)/dz and d(dot)/dp terms.
                        for j in 0..d {
                            dtok[ti * d + j] += gi * p[j] / (zn * pn);
                            dproto[k * d + j] += gi * z[j] / (zn * pn);
                        }
                        // Norm-clamp terms (zero inside the clamp region).
                        if pn > *eps {
                            for j in 0..d {
                                dproto[k * d + j] -= gi * s * p[j] / (pn * pn);
                            }
                        }
                        g_dot_s += gi * s;
                    }
                    if z_active && g_dot_s != 0.0 {
                        for j in 0..d {
                            dtok[ti * d + j] -= g_dot_s * z[j] / (zn * zn);
                        }
                    }
                }
                self.accum(local, *tokens, &dtok);
                self.accum(local, *protos, &dproto);
            }
            Op::AbsPow { a, q } => {
                let x = self.value(*a);
                let da: Vec<f64> = g
                    .iter()
                    .zip(x)
                    .map(|(gi, &xi)| {
                        if xi == 0.0 {
                            0.0
                        } else {
                            gi * q * xi.abs().powf(q - 1.0) * xi.signum()
                        }
                    })
                    .collect();
                self.accum(local, *a, &da);
            }
            Op::CrossEntropy { logits, labels, rows, cols } => {
                let x = self.value(*logits);
                let scale = g[0] / *rows as f64;
                let mut da = vec![0.0; rows * cols];
                for (r, &y) in labels.iter().enumerate() {
                    let row = &x[r * cols..(r + 1) * cols];
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let denom: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                    for c in 0..*cols {
                        let p = (row[c] - mx).exp() / denom;
                        da[r * cols + c] = scale * (p - if c == y { 1.0 } else { 0.0 });
                    }
                }
                self.accum(local, *logits, &da);
            }
            Op::BceWithLogits { logits, targets, weights, denom } => {
                let x = self.value(*logits);
                let scale = g[0] / denom;
                let da: Vec<f64> = (0..x.len()).map(|j| scale * weights[j] * (sigmoid(x[j]) - targets[j])).collect();
                self.accum(local, *logits, &da);
            }
        }
    }
}

/// `c = a @ b` (or `a @ b^T`), accumulating into `c`.
fn matmul_kernel(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, transpose_b: bool) {
    if transpose_b {
        // b stored [n, k]
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let br = &b[j * k..(j + 1) * k];
                let mut s = 0.0;
                for p in 0..k {
                    s += ar[p] * br[p];
                }
                c[i * n + j] += s;
            }
        }
    } else {
        for i in 0..m {
            let ar = &a[i * k..(i + 1) * k];
            let cr = &mut c[i * n..(i + 1) * n];
            for (p, &av) in ar.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let br = &b[p * n..(p + 1) * n];
                for j in 0..n {
                    cr[j] += av * br[j];
                }
            }
        }
    }
}

/// Gradients of a (possibly transposed) matmul, accumulated into `da`/`db`.
fn matmul_backward(
    a: &[f64],
    b: &[f64],
    g: &[f64],
    da: &mut [f64],
    db: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    transpose_b: bool,
) {
    if transpose_b {
        // out = A @ B^T with B stored [n, k]:
        // dA = G @ B, dB = G^T @ A.
        matmul_kernel(g, b, da, m, n, k, false);
        for j in 0..n {
            for i in 0..m {
                let gv = g[i * n + j];
                if gv == 0.0 {
                    continue;
                }
                for p in 0..k {
                    db[j * k + p] += gv * a[i * k + p];
                }
            }
        }
    } else {
        // dA = G @ B^T, dB = A^T @ G.
        matmul_kernel(g, b, da, m, n, k, true);
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    db[p * n + j] += av * g[i * n + j];
                }
            }
        }
    }
}

fn permute_data(input: &[f64], in_shape: &[usize], perm: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(out_shape);
    let mut out = vec![0.0; input.len()];
    for (o, slot) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src = 0usize;
        for (axis, os) in out_strides.iter().enumerate() {
            let coord = rem / os;
            rem %= os;
            src += coord * in_strides[perm[axis]];
        }
        *slot = input[src];
    }
    out
}
