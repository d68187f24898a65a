//! Uncertainty-guided routing and feature refinement.
//!
//! Inside an enabled block, a per-token predictor produces routing logits
//! `l` and a soft mask `M = sigmoid(l)`. The effective mask folds in an
//! optional tissue mask `m` and token uncertainty: `M_eff = M ⊙ m ⊙ (1-σ)`.
//! The refinement branch output `R` yields the update
//! `Δ = M_eff ⊙ λ (R - A)`, globally gated by per-sample uncertainty:
//! `Δ' = (1 - βσ) Δ`, and the routed features are `A + Δ'`.

use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::model::init;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};

/// Tape handles for one block's routing parameters.
#[derive(Debug, Clone, Copy)]
pub struct RoutingBlockVars {
    /// Per-token routing predictor, `D -> 1`.
    pub pred_w: Var,
    pub pred_b: Var,
    /// Refinement branch: two 1x1 convs with GELU between, width `D`.
    pub ref1_w: Var,
    pub ref1_b: Var,
    pub ref2_w: Var,
    pub ref2_b: Var,
    /// Learnable scalar controlling the refinement magnitude.
    pub lambda: Var,
}

impl RoutingBlockVars {
    pub fn lookup(bound: &Bound, prefix: &str) -> Self {
        RoutingBlockVars {
            pred_w: bound.var(&format!("{prefix}.pred.w")),
            pred_b: bound.var(&format!("{prefix}.pred.b")),
            ref1_w: bound.var(&format!("{prefix}.ref1.w")),
            ref1_b: bound.var(&format!("{prefix}.ref1.b")),
            ref2_w: bound.var(&format!("{prefix}.ref2.w")),
            ref2_b: bound.var(&format!("{prefix}.ref2.b")),
            lambda: bound.var(&format!("{prefix}.lambda")),
        }
    }
}

/// Initial value of the per-block refinement scale; small so early training
/// stays close to the attention-only path.
pub const LAMBDA_REF_INIT: f64 = 0.1;

/// Register routing parameters for a block of width `d` under `prefix`.
pub fn init_routing_block(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    store.insert(&format!("{prefix}.pred.w"), init::linear_weight(d, 1, rng));
    store.insert(&format!("{prefix}.pred.b"), init::zeros(vec![1]));
    store.insert(&format!("{prefix}.ref1.w"), init::linear_weight(d, d, rng));
    store.insert(&format!("{prefix}.ref1.b"), init::zeros(vec![d]));
    store.insert(&format!("{prefix}.ref2.w"), init::linear_weight(d, d, rng));
    store.insert(&format!("{prefix}.ref2.b"), init::zeros(vec![d]));
    store.insert(&format!("{prefix}.lambda"), init::scalar(LAMBDA_REF_INIT));
}

/// Routing logits and mask from normalized token features `[B, N, D]`.
///
/// Returns `(logits [B,N], mask [B,N])` with `mask = sigmoid(logits)`.
pub fn routing_mask(tape: &mut Tape, tokens_norm: Var, pred_w: Var, pred_b: Var) -> (Var, Var) {
    let shape = tape.shape(tokens_norm).to_vec();
    assert_eq!(shape.len(), 3, "dimension error: routing input must be [B, N, D], got {:?}", shape);
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(tokens_norm, vec![b * n, d]);
    let logits = tape.matmul(flat, pred_w);
    let logits = tape.add_suffix(logits, pred_b);
    let logits = tape.reshape(logits, vec![b, n]);
    let mask = tape.sigmoid(logits);
    (logits, mask)
}

/// Effective routing mask `M_eff = M ⊙ m ⊙ (1 - σ)`.
///
/// `tissue`, when present, must be binary `{0, 1}` per token; when absent it
/// is treated as all-ones (uncertainty-guided routing only).
pub fn effective_mask(tape: &mut Tape, mask: Var, tissue: Option<&[f64]>, sigma_tok: Var) -> Var {
    assert_eq!(tape.shape(mask), tape.shape(sigma_tok), "dimension error: mask/sigma shape mismatch");
    let gated = if let Some(m) = tissue {
        assert_eq!(m.len(), tape.numel(mask), "dimension error: tissue mask length mismatch");
        assert!(
            m.iter().all(|&v| v == 0.0 || v == 1.0),
            "contract error: tissue mask values must be 0 or 1"
        );
        let shape = tape.shape(mask).to_vec();
        let m_const = tape.constant(shape, m.to_vec());
        tape.mul(mask, m_const)
    } else {
        mask
    };
    let neg_sigma = tape.mul_scalar(sigma_tok, -1.0);
    let one_minus_sigma = tape.add_scalar(neg_sigma, 1.0);
    tape.mul(gated, one_minus_sigma)
}

/// Output of the gated refinement step.
#[derive(Debug, Clone, Copy)]
pub struct RefineVars {
    /// `Δ = M_eff ⊙ λ (R - A)`, `[B, N, D]`.
    pub delta: Var,
    /// `Δ' = (1 - βσ) Δ`.
    pub delta_gated: Var,
    /// `A_routed = A + Δ'`.
    pub routed: Var,
}

/// Refinement branch: two 1x1 convolutions with GELU, width `D` throughout.
pub fn refinement_branch(tape: &mut Tape, tokens_norm: Var, vars: &RoutingBlockVars) -> Var {
    let shape = tape.shape(tokens_norm).to_vec();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    let flat = tape.reshape(tokens_norm, vec![b * n, d]);
    let h = tape.matmul(flat, vars.ref1_w);
    let h = tape.add_suffix(h, vars.ref1_b);
    let h = tape.gelu(h);
    let r = tape.matmul(h, vars.ref2_w);
    let r = tape.add_suffix(r, vars.ref2_b);
    tape.reshape(r, vec![b, n, d])
}

/// Masked, uncertainty-gated refinement update.
///
/// `attention` and `refined` are `[B, N, D]`; `eff_mask` is `[B, N]`;
/// `sigma_global` is `[B]`; `beta` must lie in `[0, 1]`.
pub fn refine(
    tape: &mut Tape,
    attention: Var,
    refined: Var,
    eff_mask: Var,
    lambda: Var,
    beta: f64,
    sigma_global: Var,
) -> RefineVars {
    assert!((0.0..=1.0).contains(&beta), "contract error: beta must be in [0, 1], got {beta}");
    let diff = tape.sub(refined, attention);
    let scaled = tape.mul_scalar_var(diff, lambda);
    let delta = tape.mul_prefix(scaled, eff_mask);
    let neg_beta_sigma = tape.mul_scalar(sigma_global, -beta);
    let gate = tape.add_scalar(neg_beta_sigma, 1.0);
    let delta_gated = tape.mul_prefix(delta, gate);
    let routed = tape.add(attention, delta_gated);
    RefineVars { delta, delta_gated, routed }
}

/// Routing supervision loss: mean BCE-with-logits over supervised samples and
/// their tokens. `targets` are per-token `{0,1}` labels; `sample_mask[b]`
/// selects which samples carry supervision. Returns a zero constant when no
/// sample does.
pub fn routing_loss(tape: &mut Tape, logits: Var, targets: &[f64], sample_mask: &[bool]) -> Var {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape.len(), 2, "dimension error: routing logits must be [B, N], got {:?}", shape);
    let (b, n) = (shape[0], shape[1]);
    assert_eq!(targets.len(), b * n, "dimension error: routing target length mismatch");
    assert_eq!(sample_mask.len(), b, "dimension error: sample mask length mismatch");
    assert!(
        targets.iter().all(|&v| v == 0.0 || v == 1.0),
        "contract error: routing targets must be 0 or 1"
    );
    let supervised = sample_mask.iter().filter(|&&s| s).count();
    if supervised == 0 {
        return tape.scalar(0.0);
    }
    let mut weights = vec![0.0; b * n];
    for (bi, &keep) in sample_mask.iter().enumerate() {
        if keep {
            weights[bi * n..(bi + 1) * n].fill(1.0);
        }
    }
    let denom = (supervised * n) as f64;
    tape.bce_with_logits(logits, Rc::new(targets.to_vec()), Rc::new(weights), denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;

    fn leaf(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        let t = Tensor::new(shape, data).with_grad();
        tape.leaf(&t)
    }

    #[test]
    fn mask_is_sigmoid_of_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        init_routing_block(&mut store, "r", 4, &mut rng);
        // Zero weights, bias b: mask = sigmoid(b) everywhere.
        store.get_mut("r.pred.w").data_mut().fill(0.0);
        store.get_mut("r.pred.b").data_mut()[0] = 1.5;

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let vars = RoutingBlockVars::lookup(&bound, "r");
        let tokens = tape.constant(vec![1, 3, 4], (0..12).map(|i| i as f64 / 3.0).collect());
        let (logits, mask) = routing_mask(&mut tape, tokens, vars.pred_w, vars.pred_b);
        for &l in tape.value(logits) {
            assert!((l - 1.5).abs() < 1e-15);
        }
        let expect = 1.0 / (1.0 + (-1.5f64).exp());
        for &m in tape.value(mask) {
            assert!((m - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn mask_limits() {
        let mut tape = Tape::new();
        let zero = leaf(&mut tape, vec![1, 1], vec![0.0]);
        let m = tape.sigmoid(zero);
        assert_eq!(tape.value(m), &[0.5]);
        let large = leaf(&mut tape, vec![1, 1], vec![80.0]);
        let m = tape.sigmoid(large);
        assert!(tape.value(m)[0] > 1.0 - 1e-12);
    }

    #[test]
    fn effective_mask_hand_cases() {
        let mut tape = Tape::new();
        // M=1, m=1, sigma=0 -> 1
        let m = leaf(&mut tape, vec![1, 1], vec![1.0]);
        let sigma = leaf(&mut tape, vec![1, 1], vec![0.0]);
        let eff = effective_mask(&mut tape, m, Some(&[1.0]), sigma);
        assert_eq!(tape.value(eff), &[1.0]);

        // sigma = 1 -> 0 regardless of M, m
        let m = leaf(&mut tape, vec![1, 1], vec![0.9]);
        let sigma = leaf(&mut tape, vec![1, 1], vec![1.0]);
        let eff = effective_mask(&mut tape, m, Some(&[1.0]), sigma);
        assert_eq!(tape.value(eff), &[0.0]);

        // M=0.5, m=1, sigma=0.2 -> 0.4
        let m = leaf(&mut tape, vec![1, 1], vec![0.5]);
        let sigma = leaf(&mut tape, vec![1, 1], vec![0.2]);
        let eff = effective_mask(&mut tape, m, Some(&[1.0]), sigma);
        assert!((tape.value(eff)[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    #[should_panic(expected = "contract error")]
    fn tissue_mask_must_be_binary() {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, vec![1, 1], vec![0.5]);
        let sigma = leaf(&mut tape, vec![1, 1], vec![0.2]);
        let _ = effective_mask(&mut tape, m, Some(&[0.3]), sigma);
    }

    #[test]
    fn missing_tissue_mask_means_ones() {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, vec![1, 2], vec![0.5, 0.25]);
        let sigma = leaf(&mut tape, vec![1, 2], vec![0.2, 0.5]);
        let eff = effective_mask(&mut tape, m, None, sigma);
        assert!((tape.value(eff)[0] - 0.4).abs() < 1e-15);
        assert!((tape.value(eff)[1] - 0.125).abs() < 1e-15);
    }

    #[test]
    fn refine_limit_cases() {
        let run = |beta: f64, sigma: f64, r_eq_a: bool| -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
            let mut tape = Tape::new();
            let a = leaf(&mut tape, vec![1, 2, 2], vec![1.0, -2.0, 0.5, 3.0]);
            let r_data = if r_eq_a { vec![1.0, -2.0, 0.5, 3.0] } else { vec![2.0, 0.0, 1.5, -1.0] };
            let r = leaf(&mut tape, vec![1, 2, 2], r_data);
            let eff = leaf(&mut tape, vec![1, 2], vec![0.8, 0.6]);
            let lam = leaf(&mut tape, vec![], vec![0.5]);
            let sg = leaf(&mut tape, vec![1], vec![sigma]);
            let out = refine(&mut tape, a, r, eff, lam, beta, sg);
            (
                tape.value(out.delta).to_vec(),
                tape.value(out.delta_gated).to_vec(),
                tape.value(out.routed).to_vec(),
                tape.value(a).to_vec(),
            )
        };

        // beta = 0: delta' = delta.
        let (delta, gated, _, _) = run(0.0, 0.7, false);
        assert_eq!(delta, gated);

        // beta = 1, sigma = 1: delta' = 0, routed = A exactly.
        let (_, gated, routed, a) = run(1.0, 1.0, false);
        assert!(gated.iter().all(|&x| x == 0.0));
        assert_eq!(routed, a);

        // R = A: delta = 0, routed = A.
        let (delta, _, routed, a) = run(0.6, 0.4, true);
        assert!(delta.iter().all(|&x| x == 0.0));
        assert_eq!(routed, a);
    }

    #[test]
    fn gated_update_never_exceeds_raw_update() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let beta: f64 = rng.gen_range(0.0..=1.0);
            let sigma: f64 = rng.gen_range(0.001..=1.0);
            let mut tape = Tape::new();
            let a_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let r_data: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = leaf(&mut tape, vec![1, 4, 2], a_data);
            let r = leaf(&mut tape, vec![1, 4, 2], r_data);
            let eff = leaf(&mut tape, vec![1, 4], (0..4).map(|_| rng.gen_range(0.0..1.0)).collect());
            let lam = leaf(&mut tape, vec![], vec![rng.gen_range(-1.0..1.0)]);
            let sg = leaf(&mut tape, vec![1], vec![sigma]);
            let out = refine(&mut tape, a, r, eff, lam, beta, sg);
            for (d, dg) in tape.value(out.delta).iter().zip(tape.value(out.delta_gated)) {
                assert!(dg.abs() <= d.abs() + 1e-15, "|delta'|={} > |delta|={}", dg.abs(), d.abs());
            }
        }
    }

    #[test]
    fn effective_mask_monotone_in_sigma() {
        let mut tape = Tape::new();
        let m = leaf(&mut tape, vec![1, 3], vec![0.7, 0.7, 0.7]);
        let sigma = leaf(&mut tape, vec![1, 3], vec![0.1, 0.5, 0.9]);
        let eff = effective_mask(&mut tape, m, None, sigma);
        let v = tape.value(eff);
        assert!(v[0] > v[1] && v[1] > v[2]);
    }

    #[test]
    fn routing_loss_hand_values() {
        // l = 0, m = 1 -> ln 2 per token.
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1, 2], vec![0.0, 0.0]);
        let loss = routing_loss(&mut tape, l, &[1.0, 1.0], &[true]);
        assert!((tape.scalar_value(loss) - 2f64.ln()).abs() < 1e-15);

        // l = +50, m = 1 -> ~0.
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1, 1], vec![50.0]);
        let loss = routing_loss(&mut tape, l, &[1.0], &[true]);
        assert!(tape.scalar_value(loss).abs() < 1e-15);

        // l = -50, m = 1 -> ~50 (linear regime).
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![1, 1], vec![-50.0]);
        let loss = routing_loss(&mut tape, l, &[1.0], &[true]);
        assert!((tape.scalar_value(loss) - 50.0).abs() < 1e-9);
    }

    #[test]
    fn routing_loss_matches_naive_bce_on_well_scaled_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let b = 3;
        let n = 5;
        let logits: Vec<f64> = (0..b * n).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let targets: Vec<f64> = (0..b * n).map(|_| f64::from(rng.gen_bool(0.5))).collect();

        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![b, n], logits.clone());
        let loss = routing_loss(&mut tape, l, &targets, &[true; 3]);

        // Naive formulation through explicit sigmoid and log.
        let naive: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&l, &t)| {
                let p = 1.0 / (1.0 + (-l).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / (b * n) as f64;
        assert!((tape.scalar_value(loss) - naive).abs() < 1e-9);
    }

    #[test]
    fn unsupervised_batch_gives_zero_loss() {
        let mut tape = Tape::new();
        let l = leaf(&mut tape, vec![2, 3], vec![1.0; 6]);
        let loss = routing_loss(&mut tape, l, &[1.0; 6], &[false, false]);
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn partially_supervised_batch_averages_over_supervised_only() {
        let mut tape = Tape::new();
        // Sample 0 supervised (l=0, t=1 -> ln 2); sample 1 not.
        let l = leaf(&mut tape, vec![2, 2], vec![0.0, 0.0, 99.0, -99.0]);
        let loss = routing_loss(&mut tape, l, &[1.0, 1.0, 0.0, 1.0], &[true, false]);
        assert!((tape.scalar_value(loss) - 2f64.ln()).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn gate_contracts_updates(
            beta in 0.0f64..=1.0,
            sigma in 0.01f64..=1.0,
            vals in proptest::collection::vec(-3.0f64..3.0, 6)
        ) {
            let mut tape = Tape::new();
            let delta = tape.constant(vec![1, 3, 2], vals);
            let sg = tape.constant(vec![1], vec![sigma]);
            let neg = tape.mul_scalar(sg, -beta);
            let gate = tape.add_scalar(neg, 1.0);
            let gated = tape.mul_prefix(delta, gate);
            for (d, dg) in tape.value(delta).iter().zip(tape.value(gated)) {
                proptest::prop_assert!(dg.abs() <= d.abs() + 1e-15);
            }
        }
    }
}
