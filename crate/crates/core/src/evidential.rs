//! Per-token evidential heads and Dirichlet uncertainty.
//!
//! Each uncertainty-enhanced block carries a small head mapping token
//! features to non-negative per-class evidence `e = softplus(g(z))` with
//! `g: Linear -> GELU -> Linear`. Evidence parameterizes a Dirichlet via
//! `alpha = e + 1`; the per-token uncertainty is `sigma_i = C / S_i` with
//! strength `S_i = sum_c alpha_ic`, and the per-sample uncertainty is the
//! token mean of `sigma_i`.

use rand_chacha::ChaCha8Rng;

use crate::model::init;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Hidden width of the evidential MLP for a given token dimension.
pub fn head_hidden_dim(d: usize) -> usize {
    (d / 2).max(8)
}

/// Tape handles for one evidential head's parameters.
#[derive(Debug, Clone, Copy)]
pub struct EvidentialHeadVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl EvidentialHeadVars {
    pub fn lookup(bound: &Bound, prefix: &str) -> Self {
        EvidentialHeadVars {
            w1: bound.var(&format!("{prefix}.w1")),
            b1: bound.var(&format!("{prefix}.b1")),
            w2: bound.var(&format!("{prefix}.w2")),
            b2: bound.var(&format!("{prefix}.b2")),
        }
    }
}

/// Register evidential-head parameters under `prefix`.
pub fn init_evidential_head(store: &mut ParamStore, prefix: &str, d: usize, classes: usize, rng: &mut ChaCha8Rng) {
    let hidden = head_hidden_dim(d);
    store.insert(&format!("{prefix}.w1"), init::linear_weight(d, hidden, rng));
    store.insert(&format!("{prefix}.b1"), init::zeros(vec![hidden]));
    store.insert(&format!("{prefix}.w2"), init::linear_weight(hidden, classes, rng));
    store.insert(&format!("{prefix}.b2"), init::zeros(vec![classes]));
}

/// Evidence `e = softplus(W2 gelu(W1 z + b1) + b2) >= 0` for every token.
///
/// `tokens` is `[B, N, D]`; the result is `[B, N, C]`.
pub fn compute_evidence(tape: &mut Tape, tokens: Var, head: &EvidentialHeadVars) -> Var {
    let shape = tape.shape(tokens).to_vec();
    assert_eq!(shape.len(), 3, "dimension error: evidence input must be [B, N, D], got {:?}", shape);
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let hidden = tape.shape(head.w1)[1];
    let classes = tape.shape(head.w2)[1];
    let flat = tape.reshape(tokens, vec![b * n, d]);
    let h = tape.matmul(flat, head.w1);
    let h = tape.add_suffix(h, head.b1);
    let h = tape.gelu(h);
    let raw = tape.matmul(h, head.w2);
    let raw = tape.add_suffix(raw, head.b2);
    let raw = tape.reshape(raw, vec![b, n, classes]);
    let _ = hidden;
    tape.softplus(raw)
}

/// Dirichlet quantities derived from a `[B, N, C]` evidence tensor.
#[derive(Debug, Clone, Copy)]
pub struct DirichletVars {
    /// Non-negative evidence, `[B, N, C]`.
    pub evidence: Var,
    /// `alpha = evidence + 1`, `[B, N, C]`.
    pub alpha: Var,
    /// Dirichlet strength `S_i = sum_c alpha_ic`, `[B, N]`.
    pub strength: Var,
    /// Token-level uncertainty `sigma_i = C / S_i`, `[B, N]`.
    pub sigma_tok: Var,
    /// Per-sample uncertainty `sigma = mean_i sigma_i`, `[B]`.
    pub sigma_global: Var,
    pub classes: usize,
}

/// Build the Dirichlet state for evidence. Evidence must be elementwise
/// non-negative (softplus output always is; direct callers are checked).
pub fn dirichlet_state(tape: &mut Tape, evidence: Var) -> DirichletVars {
    let shape = tape.shape(evidence).to_vec();
    assert_eq!(shape.len(), 3, "dimension error: evidence must be [B, N, C], got {:?}", shape);
    assert!(
        tape.value(evidence).iter().all(|&e| e >= 0.0),
        "contract error: evidence must be non-negative"
    );
    let classes = shape[2];
    let alpha = tape.add_scalar(evidence, 1.0);
    // S = C * mean_c(alpha); exact when evidence is 0 (mean of ones is 1).
    let mean_c = tape.mean_last(alpha);
    let strength = tape.mul_scalar(mean_c, classes as f64);
    let sigma_tok = tape.recip_scale(strength, classes as f64);
    let sigma_global = tape.mean_last(sigma_tok);
    DirichletVars { evidence, alpha, strength, sigma_tok, sigma_global, classes }
}

/// Expected class probabilities `E[p_ic] = alpha_ic / S_i`, `[B, N, C]`.
pub fn expected_probs(tape: &mut Tape, state: &DirichletVars) -> Var {
    let inv_strength = tape.recip_scale(state.strength, 1.0);
    tape.mul_prefix(state.alpha, inv_strength)
}

/// Softmax predictive distribution over logits `[B, C]` (max-shifted).
pub fn softmax_predict(tape: &mut Tape, logits: Var) -> Var {
    assert!(
        tape.value(logits).iter().all(|v| v.is_finite()),
        "domain error: softmax_predict requires finite logits"
    );
    tape.softmax(logits)
}
