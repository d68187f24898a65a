//! Prototype-based classification head.
//!
//! Each class owns `K` learned reference vectors. Token–prototype similarity
//! is cosine (scaled by a learnable temperature `tau = exp(log_temp)`) or a
//! raw dot product. Similarities are aggregated log-sum-exp over tokens into
//! per-prototype evidence, then over each class's prototypes into class
//! logits (max and mean aggregation are also supported). Two regularizers
//! shape the bank: a cluster loss pulling every prototype toward its best
//! matching token, and a diversity loss penalizing collinear prototype pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::model::init;
use crate::params::{Bound, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Norm clamp used by cosine similarity and prototype normalization.
pub const NORM_EPS: f64 = 1e-12;

/// How evidence aggregates across tokens and across a class's prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggMode {
    LogSumExp,
    Max,
    Mean,
}

/// Which prototype pairs the diversity loss penalizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivScope {
    /// Off-diagonal pairs within the same class (default).
    WithinClass,
    /// All off-diagonal pairs.
    Global,
}

/// Static configuration of the prototype head.
#[derive(Debug, Clone)]
pub struct PrototypeConfig {
    /// Prototypes per class (K).
    pub per_class: usize,
    pub use_cosine: bool,
    pub agg: AggMode,
    pub div_scope: DivScope,
    /// Diversity power `q >= 1`.
    pub q: f64,
}

impl Default for PrototypeConfig {
    fn default() -> Self {
        PrototypeConfig { per_class: 3, use_cosine: true, agg: AggMode::LogSumExp, div_scope: DivScope::WithinClass, q: 2.0 }
    }
}

impl PrototypeConfig {
    pub fn validate(&self) {
        assert!(self.per_class >= 1, "contract error: need at least one prototype per class");
        assert!(self.q >= 1.0, "contract error: diversity power must be >= 1");
    }
}

/// Tape handles for the prototype bank.
#[derive(Debug, Clone, Copy)]
pub struct PrototypeBankVars {
    /// `[C*K, D]`; class `c` owns rows `c*K .. (c+1)*K`.
    pub vectors: Var,
    /// Scalar `log T`; `tau = exp(log T) > 0` always.
    pub log_temp: Var,
}

impl PrototypeBankVars {
    pub fn lookup(bound: &Bound, prefix: &str) -> Self {
        PrototypeBankVars {
            vectors: bound.var(&format!("{prefix}.vectors")),
            log_temp: bound.var(&format!("{prefix}.log_temp")),
        }
    }
}

/// Class owning prototype `k` under the contiguous-block layout.
pub fn class_of(k: usize, per_class: usize) -> usize {
    k / per_class
}

/// Register bank parameters: unit-norm Gaussian prototypes and
/// `log_temp = ln 10`.
pub fn init_prototype_bank(
    store: &mut ParamStore,
    prefix: &str,
    classes: usize,
    per_class: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) {
    let k_tot = classes * per_class;
    let mut data = Vec::with_capacity(k_tot * dim);
    for _ in 0..k_tot {
        let mut row: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        for v in &mut row {
            *v /= norm;
        }
        data.extend(row);
    }
    store.insert(&format!("{prefix}.vectors"), Tensor::new(vec![k_tot, dim], data));
    store.insert(&format!("{prefix}.log_temp"), init::scalar(10f64.ln()));
}

/// Token–prototype similarities `[B, T, K_tot]`.
///
/// Cosine mode: `s = tau * <z, p> / (max(|z|, eps) * max(|p|, eps))`.
/// Dot mode: raw dot products, no temperature.
pub fn similarity(tape: &mut Tape, tokens: Var, bank: &PrototypeBankVars, cfg: &PrototypeConfig) -> Var {
    let ts = tape.shape(tokens).to_vec();
    assert_eq!(ts.len(), 3, "dimension error: similarity tokens must be [B, T, D], got {:?}", ts);
    if cfg.use_cosine {
        let cos = tape.cosine_sim(tokens, bank.vectors, NORM_EPS);
        let tau = tape.exp(bank.log_temp);
        tape.mul_scalar_var(cos, tau)
    } else {
        let (b, t, d) = (ts[0], ts[1], ts[2]);
        let kp = tape.shape(bank.vectors)[0];
        let flat = tape.reshape(tokens, vec![b * t, d]);
        let s = tape.matmul_t(flat, bank.vectors, true);
        tape.reshape(s, vec![b, t, kp])
    }
}

/// Per-prototype evidence aggregated over tokens: `[B, K_tot]`.
fn prototype_evidence(tape: &mut Tape, sims: Var, agg: AggMode) -> Var {
    let ss = tape.shape(sims).to_vec();
    let (b, t, kp) = (ss[0], ss[1], ss[2]);
    let by_proto = tape.permute(sims, &[0, 2, 1]); // [B, K_tot, T]
    let reduced = match agg {
        AggMode::LogSumExp => tape.logsumexp(by_proto),
        AggMode::Max => tape.max_last(by_proto),
        AggMode::Mean => tape.mean_last(by_proto),
    };
    debug_assert_eq!(tape.shape(reduced), &[b, kp]);
    let _ = t;
    reduced
}

/// Class logits `[B, C]` from similarities `[B, T, K_tot]`: token-level
/// aggregation into prototype evidence, then aggregation over each class's
/// prototypes.
pub fn class_logits(tape: &mut Tape, sims: Var, classes: usize, per_class: usize, agg: AggMode) -> Var {
    let kp = tape.shape(sims)[2];
    assert_eq!(kp, classes * per_class, "dimension error: {kp} prototypes != {classes} classes * {per_class}");
    let b = tape.shape(sims)[0];
    let evidence = prototype_evidence(tape, sims, agg);
    let grouped = tape.reshape(evidence, vec![b * classes, per_class]);
    let logits = match agg {
        AggMode::LogSumExp => tape.logsumexp(grouped),
        AggMode::Max => tape.max_last(grouped),
        AggMode::Mean => tape.mean_last(grouped),
    };
    tape.reshape(logits, vec![b, classes])
}

/// Cluster loss: `-(1/(B*K_tot)) * sum_b sum_k max_i s[b,i,k]`. Encourages
/// every prototype to strongly match at least one token per image.
pub fn cluster_loss(tape: &mut Tape, sims: Var) -> Var {
    let ss = tape.shape(sims).to_vec();
    assert_eq!(ss.len(), 3, "dimension error: cluster loss input must be [B, T, K], got {:?}", ss);
    assert!(ss[1] >= 1, "domain error: cluster loss needs at least one token");
    let by_proto = tape.permute(sims, &[0, 2, 1]);
    let best = tape.max_last(by_proto); // [B, K_tot]
    let mean = tape.mean_all(best);
    tape.mul_scalar(mean, -1.0)
}

/// Diversity loss over normalized prototype pairs: mean of `|cos(p_k, p_l)|^q`
/// over the selected off-diagonal pairs. Zero when no pair is selected.
pub fn diversity_loss(tape: &mut Tape, bank: &PrototypeBankVars, classes: usize, cfg: &PrototypeConfig) -> Var {
    let k_tot = tape.shape(bank.vectors)[0];
    if k_tot < 2 {
        return tape.scalar(0.0);
    }
    let mut pair_mask = vec![0.0; k_tot * k_tot];
    let mut count = 0usize;
    for k in 0..k_tot {
        for l in 0..k_tot {
            if k == l {
                continue;
            }
            let selected = match cfg.div_scope {
                DivScope::Global => true,
                DivScope::WithinClass => class_of(k, cfg.per_class) == class_of(l, cfg.per_class),
            };
            if selected {
                pair_mask[k * k_tot + l] = 1.0;
                count += 1;
            }
        }
    }
    let _ = classes;
    if count == 0 {
        return tape.scalar(0.0);
    }
    let as_tokens = tape.reshape(bank.vectors, vec![1, k_tot, tape.shape(bank.vectors)[1]]);
    let gram = tape.cosine_sim(as_tokens, bank.vectors, NORM_EPS); // [1, K, K]
    let powed = tape.abs_pow(gram, cfg.q);
    let selected = tape.mul_const(powed, std::rc::Rc::new(pair_mask));
    let total = tape.sum_all(selected);
    tape.mul_scalar(total, 1.0 / count as f64)
}

/// Weighted prototype regularizer `lambda_c * L_cluster + lambda_d * L_div`.
pub fn prototype_regularizer(tape: &mut Tape, lambda_c: f64, lambda_d: f64, cluster: Var, diversity: Var) -> Var {
    assert!(lambda_c >= 0.0 && lambda_d >= 0.0, "contract error: regularizer weights must be non-negative");
    let c = tape.mul_scalar(cluster, lambda_c);
    let d = tape.mul_scalar(diversity, lambda_d);
    tape.add(c, d)
}

/// One row of a prototype ranking: best-matching token and its similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct TopMatch {
    pub prototype: usize,
    pub class: usize,
    pub token: usize,
    pub similarity: f64,
}

/// Rank prototypes for a single image by their best token similarity,
/// descending; ties break toward the lower prototype id. `sims` is the
/// `[T, K_tot]` similarity slice for one image.
pub fn top_matches(sims: &Tensor, per_class: usize, n: usize) -> Vec<TopMatch> {
    let shape = sims.shape();
    assert_eq!(shape.len(), 2, "dimension error: top_matches expects [T, K_tot], got {:?}", shape);
    let (t, kp) = (shape[0], shape[1]);
    assert!(n <= kp, "contract error: requested {n} matches from {kp} prototypes");
    assert!(t >= 1, "domain error: need at least one token");
    let data = sims.data();
    let mut entries: Vec<TopMatch> = (0..kp)
        .map(|k| {
            let mut best_token = 0;
            for i in 1..t {
                if data[i * kp + k] > data[best_token * kp + k] {
                    best_token = i;
                }
            }
            TopMatch { prototype: k, class: class_of(k, per_class), token: best_token, similarity: data[best_token * kp + k] }
        })
        .collect();
    entries.sort_by(|a, b| b.similarity.total_cmp(&a.similarity).then(a.prototype.cmp(&b.prototype)));
    entries.truncate(n);
    entries
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;

    fn bank_with(tape_protos: Vec<f64>, k_tot: usize, d: usize, log_temp: f64) -> (ParamStore, usize, usize) {
        let mut store = ParamStore::new();
        store.insert("proto.vectors", Tensor::new(vec![k_tot, d], tape_protos));
        store.insert("proto.log_temp", Tensor::scalar(log_temp));
        (store, k_tot, d)
    }

    fn cfg_cosine() -> PrototypeConfig {
        PrototypeConfig { per_class: 1, use_cosine: true, agg: AggMode::LogSumExp, div_scope: DivScope::WithinClass, q: 2.0 }
    }

    #[test]
    fn self_similarity_is_tau() {
        let (store, ..) = bank_with(vec![0.6, 0.8], 1, 2, 10f64.ln());
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let tokens = tape.constant(vec![1, 1, 2], vec![0.6, 0.8]);
        let s = similarity(&mut tape, tokens, &bank, &cfg_cosine());
        assert!((tape.value(s)[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_similarity_is_zero_and_scale_invariant() {
        let (store, ..) = bank_with(vec![1.0, 0.0], 1, 2, 10f64.ln());
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let tokens = tape.constant(vec![1, 1, 2], vec![0.0, 3.0]);
        let s = similarity(&mut tape, tokens, &bank, &cfg_cosine());
        assert!(tape.value(s)[0].abs() < 1e-15);

        let t1 = tape.constant(vec![1, 1, 2], vec![0.3, 0.4]);
        let t5 = tape.constant(vec![1, 1, 2], vec![1.5, 2.0]);
        let s1 = similarity(&mut tape, t1, &bank, &cfg_cosine());
        let s5 = similarity(&mut tape, t5, &bank, &cfg_cosine());
        assert!((tape.value(s1)[0] - tape.value(s5)[0]).abs() <= 1e-12);
    }

    #[test]
    fn cosine_similarities_bounded_by_tau() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_prototype_bank(&mut store, "proto", 2, 3, 5, &mut rng);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let data: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tokens = tape.constant(vec![2, 4, 5], data);
        let cfg = PrototypeConfig { per_class: 3, ..cfg_cosine() };
        let s = similarity(&mut tape, tokens, &bank, &cfg);
        let tau = tape.value(bank.log_temp)[0].exp();
        for &v in tape.value(s) {
            assert!(v.abs() <= tau + 1e-9);
        }
    }

    #[test]
    fn single_token_single_prototype_identity() {
        // T=1, K=1: LSE of a singleton twice is the similarity itself.
        let (store, ..) = bank_with(vec![1.0, 0.0], 1, 2, 0.0);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let tokens = tape.constant(vec![1, 1, 2], vec![0.5, 0.5]);
        let cfg = cfg_cosine();
        let s = similarity(&mut tape, tokens, &bank, &cfg);
        let logits = class_logits(&mut tape, s, 1, 1, cfg.agg);
        assert!((tape.value(logits)[0] - tape.value(s)[0]).abs() < 1e-15);
    }

    #[test]
    fn equal_tokens_add_ln2_under_lse() {
        let (store, ..) = bank_with(vec![1.0, 0.0], 1, 2, 0.0);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let tokens = tape.constant(vec![1, 2, 2], vec![0.5, 0.5, 0.5, 0.5]);
        let cfg = cfg_cosine();
        let s = similarity(&mut tape, tokens, &bank, &cfg);
        let logits = class_logits(&mut tape, s, 1, 1, cfg.agg);
        let s0 = tape.value(s)[0];
        assert!((tape.value(logits)[0] - (s0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn max_aggregation_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (b, t, c, k) = (3, 5, 2, 2);
        let kp = c * k;
        let data: Vec<f64> = (0..b * t * kp).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let mut tape = Tape::new();
        let sims = tape.constant(vec![b, t, kp], data.clone());
        let logits = class_logits(&mut tape, sims, c, k, AggMode::Max);
        for bi in 0..b {
            for ci in 0..c {
                let mut brute = f64::NEG_INFINITY;
                for ki in ci * k..(ci + 1) * k {
                    for ti in 0..t {
                        brute = brute.max(data[bi * t * kp + ti * kp + ki]);
                    }
                }
                assert_eq!(tape.value(logits)[bi * c + ci], brute);
            }
        }
    }

    #[test]
    fn lse_logits_bounded_by_max_plus_log_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (b, t, c, k) = (2, 4, 3, 2);
        let kp = c * k;
        let data: Vec<f64> = (0..b * t * kp).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut tape = Tape::new();
        let sims = tape.constant(vec![b, t, kp], data.clone());
        let logits = class_logits(&mut tape, sims, c, k, AggMode::LogSumExp);
        for bi in 0..b {
            for ci in 0..c {
                let mut mx = f64::NEG_INFINITY;
                for ki in ci * k..(ci + 1) * k {
                    for ti in 0..t {
                        mx = mx.max(data[bi * t * kp + ti * kp + ki]);
                    }
                }
                let got = tape.value(logits)[bi * c + ci];
                assert!(got >= mx - 1e-12);
                assert!(got <= mx + ((t * k) as f64).ln() + 1e-12);
            }
        }
    }

    #[test]
    fn cluster_loss_hand_cases_and_brute_force() {
        // All similarities equal c -> loss = -c.
        let mut tape = Tape::new();
        let sims = tape.constant(vec![2, 3, 4], vec![0.37; 24]);
        let loss = cluster_loss(&mut tape, sims);
        assert!((tape.scalar_value(loss) + 0.37).abs() < 1e-15);

        // B=1, K_tot=2, maxima {0.9, 0.5} -> -0.7.
        let mut tape = Tape::new();
        let sims = tape.constant(vec![1, 2, 2], vec![0.9, 0.1, 0.2, 0.5]);
        let loss = cluster_loss(&mut tape, sims);
        assert!((tape.scalar_value(loss) + 0.7).abs() < 1e-15);

        // Random case vs explicit loop.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (b, t, kp) = (3, 4, 5);
        let data: Vec<f64> = (0..b * t * kp).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut tape = Tape::new();
        let sims = tape.constant(vec![b, t, kp], data.clone());
        let loss = cluster_loss(&mut tape, sims);
        let mut brute = 0.0;
        for bi in 0..b {
            for ki in 0..kp {
                let mut mx = f64::NEG_INFINITY;
                for ti in 0..t {
                    mx = mx.max(data[bi * t * kp + ti * kp + ki]);
                }
                brute += mx;
            }
        }
        brute = -brute / (b * kp) as f64;
        assert!((tape.scalar_value(loss) - brute).abs() < 1e-12);
    }

    #[test]
    fn diversity_loss_cases() {
        // Two identical prototypes in one class, q=1 -> loss 1.
        let (store, ..) = bank_with(vec![1.0, 0.0, 1.0, 0.0], 2, 2, 0.0);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let cfg = PrototypeConfig { per_class: 2, q: 1.0, ..cfg_cosine() };
        let loss = diversity_loss(&mut tape, &bank, 1, &cfg);
        assert!((tape.scalar_value(loss) - 1.0).abs() < 1e-12);

        // Orthogonal prototypes -> 0.
        let (store, ..) = bank_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2, 0.0);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let loss = diversity_loss(&mut tape, &bank, 1, &cfg);
        assert!(tape.scalar_value(loss).abs() < 1e-15);

        // K=1 per class, within-class scope -> no pairs -> 0.
        let (store, ..) = bank_with(vec![1.0, 0.0, 0.5, 0.5], 2, 2, 0.0);
        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let cfg1 = PrototypeConfig { per_class: 1, ..cfg_cosine() };
        let loss = diversity_loss(&mut tape, &bank, 2, &cfg1);
        assert_eq!(tape.scalar_value(loss), 0.0);
    }

    #[test]
    fn diversity_loss_invariant_to_prototype_rescaling() {
        let base = vec![0.8, 0.6, -0.3, 1.1, 0.2, 0.9];
        let scaled: Vec<f64> = base.iter().enumerate().map(|(i, v)| v * [2.0, 5.0, 0.25][i / 2]).collect();
        let cfg = PrototypeConfig { per_class: 3, q: 2.0, ..cfg_cosine() };
        let eval = |protos: Vec<f64>| {
            let (store, ..) = bank_with(protos, 3, 2, 0.0);
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &store);
            let bank = PrototypeBankVars::lookup(&bound, "proto");
            let loss = diversity_loss(&mut tape, &bank, 1, &cfg);
            tape.scalar_value(loss)
        };
        assert!((eval(base) - eval(scaled)).abs() < 1e-12);
    }

    #[test]
    fn regularizer_weighting() {
        let mut tape = Tape::new();
        let cluster = tape.scalar(-0.6);
        let diversity = tape.scalar(0.25);
        let zero = prototype_regularizer(&mut tape, 0.0, 0.0, cluster, diversity);
        assert_eq!(tape.scalar_value(zero), 0.0);
        let only_c = prototype_regularizer(&mut tape, 1.0, 0.0, cluster, diversity);
        assert_eq!(tape.scalar_value(only_c), -0.6);
        let both = prototype_regularizer(&mut tape, 0.5, 2.0, cluster, diversity);
        assert!((tape.scalar_value(both) - (0.5 * -0.6 + 2.0 * 0.25)).abs() < 1e-15);
    }

    #[test]
    fn top_matches_ranking() {
        // Token 1 equals prototype 2: that prototype must rank first.
        let sims = Tensor::new(vec![2, 3], vec![0.1, 0.3, 0.2, 0.0, 0.1, 0.9]);
        let ranked = top_matches(&sims, 1, 3);
        assert_eq!(ranked[0].prototype, 2);
        assert_eq!(ranked[0].token, 1);
        assert_eq!(ranked.len(), 3);
        // Full ranking is a permutation of all prototypes.
        let mut ids: Vec<usize> = ranked.iter().map(|m| m.prototype).collect();
        ids.sort_unstable();
        assert_eq!(ids, vec![0, 1, 2]);
    }

    #[test]
    fn top_matches_agrees_with_brute_force_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (t, kp) = (6, 8);
        let data: Vec<f64> = (0..t * kp).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sims = Tensor::new(vec![t, kp], data.clone());
        let ranked = top_matches(&sims, 2, kp);

        let mut brute: Vec<(usize, f64)> = (0..kp)
            .map(|k| {
                let best = (0..t).map(|i| data[i * kp + k]).fold(f64::NEG_INFINITY, f64::max);
                (k, best)
            })
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        for (m, (k, s)) in ranked.iter().zip(&brute) {
            assert_eq!(m.prototype, *k);
            assert_eq!(m.similarity, *s);
        }
    }

    #[test]
    fn prototype_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut store = ParamStore::new();
        init_prototype_bank(&mut store, "proto", 2, 2, 3, &mut rng);
        let token_data: Vec<f64> = (0..2 * 3 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = PrototypeConfig { per_class: 2, q: 2.0, ..cfg_cosine() };
        let labels = std::rc::Rc::new(vec![0usize, 1]);

        let eval = |s: &ParamStore| -> f64 {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, s);
            let bank = PrototypeBankVars::lookup(&bound, "proto");
            let tokens = tape.constant(vec![2, 3, 3], token_data.clone());
            let sims = similarity(&mut tape, tokens, &bank, &cfg);
            let logits = class_logits(&mut tape, sims, 2, 2, cfg.agg);
            let ce = tape.cross_entropy(logits, labels.clone());
            let cl = cluster_loss(&mut tape, sims);
            let dv = diversity_loss(&mut tape, &bank, 2, &cfg);
            let reg = prototype_regularizer(&mut tape, 0.1, 0.05, cl, dv);
            let total = tape.add(ce, reg);
            tape.scalar_value(total)
        };
        let fd = crate::gradcheck::finite_diff_grads(&mut store, eval, 1e-4);

        let mut tape = Tape::new();
        let bound = Bound::bind(&mut tape, &store);
        let bank = PrototypeBankVars::lookup(&bound, "proto");
        let tokens = tape.constant(vec![2, 3, 3], token_data);
        let sims = similarity(&mut tape, tokens, &bank, &cfg);
        let logits = class_logits(&mut tape, sims, 2, 2, cfg.agg);
        let ce = tape.cross_entropy(logits, labels);
        let cl = cluster_loss(&mut tape, sims);
        let dv = diversity_loss(&mut tape, &bank, 2, &cfg);
        let reg = prototype_regularizer(&mut tape, 0.1, 0.05, cl, dv);
        let total = tape.add(ce, reg);
        tape.backward(total);
        bound.pull_grads(&tape, &mut store);

        let report = crate::gradcheck::compare_grads(&store, &fd, 1e-3, 1e-7);
        assert!(report.ok(), "{:?}", report.failures);
    }

    #[test]
    fn cosine_class_logits_invariant_to_positive_token_rescaling() {
        let (store, ..) = bank_with(vec![1.0, 0.0, 0.0, 1.0], 2, 2, 10f64.ln());
        let cfg = PrototypeConfig { per_class: 1, ..cfg_cosine() };
        let eval = |tokens_data: Vec<f64>| {
            let mut tape = Tape::new();
            let bound = Bound::bind(&mut tape, &store);
            let bank = PrototypeBankVars::lookup(&bound, "proto");
            let tokens = tape.constant(vec![1, 2, 2], tokens_data);
            let sims = similarity(&mut tape, tokens, &bank, &cfg);
            let logits = class_logits(&mut tape, sims, 2, 1, cfg.agg);
            tape.value(logits).to_vec()
        };
        let base = vec![0.4, 0.3, -0.2, 0.8];
        let scaled: Vec<f64> = base.iter().enumerate().map(|(i, v)| v * [3.0, 0.5][i / 2]).collect();
        let (a, b) = (eval(base), eval(scaled));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
