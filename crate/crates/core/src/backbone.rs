//! Hierarchical transformer backbone pieces.
//!
//! A two-conv strided stem embeds the image into a token grid (stride 4
//! total); each stage stacks pre-norm blocks of multi-head attention and an
//! MLP, optionally halving resolution on entry. Attention is pluggable: full,
//! or per-query top-k key selection standing in for the sparse attention of
//! the reference architecture. Pooling is channel-wise layer norm followed by
//! a token mean.

use std::rc::Rc;

use crate::params::Bound;
use crate::tape::{Tape, Var};

/// Attention strategy inside every block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionKind {
    Full,
    /// Each query attends to the `ceil(topk_ratio * N)` highest-scoring keys
    /// (ties to the lower token index).
    TopkSparse,
}

impl AttentionKind {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "full" => Ok(AttentionKind::Full),
            "topk_sparse" => Ok(AttentionKind::TopkSparse),
            other => Err(crate::Error::Config(format!("unknown attention kind {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AttentionKind::Full => "full",
            AttentionKind::TopkSparse => "topk_sparse",
        }
    }
}

/// One stage of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct StageConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    /// Halve H and W on entry to this stage.
    pub downsample: bool,
}

/// Backbone hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stages: Vec<StageConfig>,
    pub attention: AttentionKind,
    pub topk_ratio: f64,
    /// Stage index from which routing/refinement is enabled (>= 1: stage 0
    /// always runs plain blocks).
    pub ugtr_from_stage: usize,
    /// Per-stage uncertainty gate coefficient beta in [0, 1].
    pub beta_schedule: Vec<f64>,
    pub mlp_ratio: usize,
    pub dropout_rate: f64,
}

impl BackboneConfig {
    /// Two stages, dims 16/32, depth 1/1. Small enough for tests and the
    /// synthetic benchmark.
    pub fn toy() -> Self {
        BackboneConfig {
            stem_channels: 8,
            stages: vec![
                StageConfig { depth: 1, dim: 16, heads: 2, downsample: false },
                StageConfig { depth: 1, dim: 32, heads: 4, downsample: true },
            ],
            attention: AttentionKind::Full,
            topk_ratio: 1.0,
            ugtr_from_stage: 1,
            beta_schedule: vec![0.4, 0.8],
            mlp_ratio: 4,
            dropout_rate: 0.1,
        }
    }

    /// Four-stage layout with depth-increasing gate coefficients.
    pub fn paper4stage() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stages: vec![
                StageConfig { depth: 2, dim: 32, heads: 2, downsample: false },
                StageConfig { depth: 2, dim: 64, heads: 4, downsample: true },
                StageConfig { depth: 4, dim: 128, heads: 8, downsample: true },
                StageConfig { depth: 2, dim: 256, heads: 8, downsample: true },
            ],
            attention: AttentionKind::TopkSparse,
            topk_ratio: 0.5,
            ugtr_from_stage: 1,
            beta_schedule: vec![0.2, 0.4, 0.6, 0.8],
            mlp_ratio: 4,
            dropout_rate: 0.1,
        }
    }

    pub fn preset(name: &str) -> crate::Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper4stage" => Ok(Self::paper4stage()),
            other => Err(crate::Error::Config(format!("unknown backbone preset {other}"))),
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.stages.is_empty() {
            return Err(crate::Error::Config("backbone needs at least one stage".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.dim == 0 || s.heads == 0 || s.dim % s.heads != 0 {
                return Err(crate::Error::Config(format!(
                    "stage {i}: dim {} must be a positive multiple of heads {}",
                    s.dim, s.heads
                )));
            }
            if s.depth == 0 {
                return Err(crate::Error::Config(format!("stage {i}: depth must be >= 1")));
            }
        }
        if !(self.topk_ratio > 0.0 && self.topk_ratio <= 1.0) {
            return Err(crate::Error::Config(format!("topk_ratio must be in (0, 1], got {}", self.topk_ratio)));
        }
        if self.ugtr_from_stage < 1 {
            return Err(crate::Error::Config("ugtr_from_stage must be >= 1".into()));
        }
        if self.beta_schedule.len() != self.stages.len() {
            return Err(crate::Error::Config(format!(
                "beta_schedule has {} entries for {} stages",
                self.beta_schedule.len(),
                self.stages.len()
            )));
        }
        if self.beta_schedule.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return Err(crate::Error::Config("beta values must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(crate::Error::Config(format!("dropout_rate must be in [0, 1), got {}", self.dropout_rate)));
        }
        if self.mlp_ratio == 0 {
            return Err(crate::Error::Config("mlp_ratio must be >= 1".into()));
        }
        Ok(())
    }

    /// Whether routing/refinement applies to blocks of `stage`.
    pub fn stage_routed(&self, stage: usize) -> bool {
        stage >= self.ugtr_from_stage
    }
}

/// Flat gather indices mapping a channels-last `[B, H, W, C]` tensor to
/// im2col rows `[B*Ho*Wo, kh*kw*C]`; -1 marks zero padding.
pub fn im2col_indices(
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i64>, usize, usize) {
    let ho = (h + 2 * pad - kernel) / stride + 1;
    let wo = (w + 2 * pad - kernel) / stride + 1;
    let mut idx = Vec::with_capacity(b * ho * wo * kernel * kernel * c);
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let y = (oy * stride + ky) as isize - pad as isize;
                        let x = (ox * stride + kx) as isize - pad as isize;
                        for ci in 0..c {
                            if y < 0 || y >= h as isize || x < 0 || x >= w as isize {
                                idx.push(-1);
                            } else {
                                idx.push((((bi * h + y as usize) * w + x as usize) * c + ci) as i64);
                            }
                        }
                    }
                }
            }
        }
    }
    (idx, ho, wo)
}

/// Strided 2-D convolution over channels-last input via im2col + matmul.
/// `weight` is `[kernel*kernel*Cin, Cout]`. Returns `([B, Ho*Wo, Cout], Ho,
/// Wo)`.
pub fn conv2d(
    tape: &mut Tape,
    input: Var,
    weight: Var,
    bias: Var,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> (Var, usize, usize) {
    let shape = tape.shape(input).to_vec();
    assert_eq!(shape.len(), 4, "dimension error: conv input must be [B, H, W, C], got {:?}", shape);
    let (b, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
    let cout = tape.shape(weight)[1];
    assert_eq!(
        tape.shape(weight)[0],
        kernel * kernel * c,
        "dimension error: conv weight rows {} != kernel^2 * Cin {}",
        tape.shape(weight)[0],
        kernel * kernel * c
    );
    let (idx, ho, wo) = im2col_indices(b, h, w, c, kernel, stride, pad);
    let cols = tape.gather(input, Rc::new(idx), vec![b * ho * wo, kernel * kernel * c]);
    let out = tape.matmul(cols, weight);
    let out = tape.add_suffix(out, bias);
    let out = tape.reshape(out, vec![b, ho * wo, cout]);
    (out, ho, wo)
}

/// Tape handles for one attention block's projections.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

impl AttentionVars {
    pub fn lookup(bound: &Bound, prefix: &str) -> Self {
        AttentionVars {
            wq: bound.var(&format!("{prefix}.wq")),
            bq: bound.var(&format!("{prefix}.bq")),
            wk: bound.var(&format!("{prefix}.wk")),
            bk: bound.var(&format!("{prefix}.bk")),
            wv: bound.var(&format!("{prefix}.wv")),
            bv: bound.var(&format!("{prefix}.bv")),
            wo: bound.var(&format!("{prefix}.wo")),
            bo: bound.var(&format!("{prefix}.bo")),
        }
    }
}

/// Per-row top-k admission mask over `[rows, cols]` scores. Ties break
/// toward the lower column index.
pub fn topk_mask(scores: &[f64], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    assert!(k >= 1 && k <= cols, "contract error: top-k {k} outside 1..={cols}");
    let mut mask = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let row = &scores[r * cols..(r + 1) * cols];
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &c in &order[..k] {
            mask[r * cols + c] = true;
        }
    }
    mask
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Var {
    let y = tape.matmul(x, w);
    tape.add_suffix(y, b)
}

/// Multi-head attention branch over `[B, N, D]` tokens (no residual). With
/// `TopkSparse`, each query's keys are restricted to the top
/// `ceil(topk_ratio * N)` scores; at ratio 1 the code path is identical to
/// full attention.
pub fn attention_branch(
    tape: &mut Tape,
    tokens: Var,
    vars: &AttentionVars,
    heads: usize,
    kind: AttentionKind,
    topk_ratio: f64,
) -> Var {
    let shape = tape.shape(tokens).to_vec();
    assert_eq!(shape.len(), 3, "dimension error: attention input must be [B, N, D], got {:?}", shape);
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    assert!(d % heads == 0, "dimension error: dim {d} not divisible by {heads} heads");
    let hd = d / heads;

    let flat = tape.reshape(tokens, vec![b * n, d]);
    let split = |tape: &mut Tape, x: Var| -> Var {
        let x = tape.reshape(x, vec![b, n, heads, hd]);
        let x = tape.permute(x, &[0, 2, 1, 3]);
        tape.reshape(x, vec![b * heads, n, hd])
    };
    let q = linear(tape, flat, vars.wq, vars.bq);
    let q = split(tape, q);
    let k = linear(tape, flat, vars.wk, vars.bk);
    let k = split(tape, k);
    let v = linear(tape, flat, vars.wv, vars.bv);
    let v = split(tape, v);

    let scores = tape.batch_matmul_t(q, k, true);
    let scores = tape.mul_scalar(scores, 1.0 / (hd as f64).sqrt());

    let keep = match kind {
        AttentionKind::Full => n,
        AttentionKind::TopkSparse => ((topk_ratio * n as f64).ceil() as usize).clamp(1, n),
    };
    let weights = if keep >= n {
        tape.softmax(scores)
    } else {
        let mask = topk_mask(tape.value(scores), b * heads * n, n, keep);
        tape.softmax_masked(scores, Some(Rc::new(mask)))
    };

    let ctx = tape.batch_matmul(weights, v);
    let ctx = tape.reshape(ctx, vec![b, heads, n, hd]);
    let ctx = tape.permute(ctx, &[0, 2, 1, 3]);
    let ctx = tape.reshape(ctx, vec![b * n, d]);
    let out = linear(tape, ctx, vars.wo, vars.bo);
    tape.reshape(out, vec![b, n, d])
}

/// Tape handles for a block's MLP.
#[derive(Debug, Clone, Copy)]
pub struct MlpVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl MlpVars {
    pub fn lookup(bound: &Bound, prefix: &str) -> Self {
        MlpVars {
            w1: bound.var(&format!("{prefix}.w1")),
            b1: bound.var(&format!("{prefix}.b1")),
            w2: bound.var(&format!("{prefix}.w2")),
            b2: bound.var(&format!("{prefix}.b2")),
        }
    }
}

/// Token mean over `[B, N, D]` into `[B, D]` (no normalization; callers
/// normalize first when composing the pooled representation).
pub fn global_average_pool(tape: &mut Tape, tokens: Var) -> Var {
    let shape = tape.shape(tokens).to_vec();
    assert_eq!(shape.len(), 3, "dimension error: pooling input must be [B, N, D], got {:?}", shape);
    assert!(shape[1] >= 1, "domain error: pooling over an empty token axis");
    let by_channel = tape.permute(tokens, &[0, 2, 1]);
    tape.mean_last(by_channel)
}
