//! Model assembly: parameters, forward passes, and auxiliary outputs.
//!
//! A [`Model`] owns every parameter the configuration implies — backbone,
//! routing, evidential heads, and both classification heads — regardless of
//! the forward mode, so a baseline pass is by construction invariant to the
//! presence of the routing/evidential/prototype parameters it never touches.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{attention_branch, conv2d, global_average_pool, AttentionVars, BackboneConfig, MlpVars};
use crate::data::Sample;
use crate::evidential::{self, DirichletVars, EvidentialHeadVars};
use crate::params::{Bound, ParamStore};
use crate::prototypes::{self, PrototypeBankVars, PrototypeConfig};
use crate::routing::{self, RoutingBlockVars};
use crate::rng::{stream, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;

/// Parameter initializers shared by every module.
pub mod init {
    use super::*;

    /// Gaussian fan-in scaled weight matrix `[rows, cols]`.
    pub fn linear_weight(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        let std = 1.0 / (rows as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal) * std).collect();
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        Tensor::zeros(shape)
    }

    pub fn ones(shape: Vec<usize>) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }
}

/// Which classification head produces the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Linear,
    Prototype,
}

impl HeadKind {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "linear" => Ok(HeadKind::Linear),
            "prototype" => Ok(HeadKind::Prototype),
            other => Err(crate::Error::Config(format!("unknown head kind {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Linear => "linear",
            HeadKind::Prototype => "prototype",
        }
    }
}

/// Forward mode: plain attention blocks, or uncertainty-gated refinement in
/// the enabled stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Baseline,
    Ug2rlpr,
}

impl Mode {
    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "baseline" => Ok(Mode::Baseline),
            "ug2rlpr" => Ok(Mode::Ug2rlpr),
            other => Err(crate::Error::Config(format!("unknown mode {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Ug2rlpr => "ug2rlpr",
        }
    }
}

/// Full model configuration.
#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub classes: usize,
    pub head: HeadKind,
    pub proto: PrototypeConfig,
    /// Detach the uncertainty entering the routing gates from gradient flow
    /// (the forward value is unchanged).
    pub detach_gate_sigma: bool,
    /// Force zero evidence everywhere (sigma = 1 exactly); diagnostic hook.
    pub force_zero_evidence: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> crate::Result<()> {
        self.backbone.validate()?;
        if self.classes < 2 {
            return Err(crate::Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        self.proto.validate();
        Ok(())
    }
}

/// One training/evaluation batch in channels-last layout.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, H, W, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    /// Per-sample full-resolution binary masks, when present.
    pub masks: Vec<Option<Tensor>>,
}

impl Batch {
    pub fn from_samples(samples: &[&Sample]) -> Self {
        assert!(!samples.is_empty(), "contract error: empty batch");
        let shape = samples[0].image.shape().to_vec();
        let (h, w) = (shape[0], shape[1]);
        let mut images = Vec::with_capacity(samples.len() * h * w);
        let mut labels = Vec::with_capacity(samples.len());
        let mut masks = Vec::with_capacity(samples.len());
        for s in samples {
            assert_eq!(s.image.shape(), shape.as_slice(), "dimension error: mixed image sizes in batch");
            images.extend_from_slice(s.image.data());
            labels.push(s.label);
            masks.push(s.mask.clone());
        }
        Batch { images: Tensor::new(vec![samples.len(), h, w, 1], images), labels, masks }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Dropout driven by an externally owned RNG stream.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, tape: &mut Tape, x: Var) -> Var {
        if self.rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - self.rate;
        let factors: Vec<f64> =
            (0..tape.numel(x)).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        tape.mul_const(x, std::rc::Rc::new(factors))
    }
}

/// Per-forward options.
pub struct ForwardOptions<'a> {
    pub mode: Mode,
    pub dropout: Option<Dropout<'a>>,
    /// Replace every stage's beta at forward time (the beta sweep hook).
    pub beta_override: Option<f64>,
}

impl ForwardOptions<'_> {
    pub fn deterministic(mode: Mode) -> Self {
        ForwardOptions { mode, dropout: None, beta_override: None }
    }
}

/// Auxiliary outputs of one routed block.
pub struct BlockAux {
    pub stage: usize,
    pub block: usize,
    pub grid: (usize, usize),
    pub dirichlet: DirichletVars,
    pub routing_logits: Var,
    pub mask: Var,
    pub eff_mask: Var,
}

/// Everything a forward pass produces.
pub struct ForwardOutput {
    pub bound: Bound,
    pub logits: Var,
    pub pooled: Var,
    /// Final-stage tokens after the final channel-wise layer norm, `[B,T,D]`.
    pub final_tokens: Var,
    pub final_grid: (usize, usize),
    /// Final features of every stage (pre final-norm), with grid dims.
    pub stage_grids: Vec<(Var, usize, usize)>,
    pub blocks: Vec<BlockAux>,
    /// Scalar: summed supervised routing loss over routed blocks (0 without
    /// supervision or in baseline mode).
    pub routing_loss: Var,
    /// Scalar prototype regularizer parts (0 for the linear head).
    pub cluster_loss: Var,
    pub diversity_loss: Var,
    /// Per-sample uncertainty `[B]`: mean of the routed blocks' global
    /// sigmas. Absent in baseline mode.
    pub sigma_sample: Option<Var>,
    /// Token–prototype similarities `[B, T, K_tot]` when the prototype head
    /// ran.
    pub similarities: Option<Var>,
}

/// A trainable network: configuration plus named parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministically initialize every parameter the config implies.
    pub fn init(cfg: ModelConfig, seed: u64) -> crate::Result<Self> {
        cfg.validate()?;
        let rng = &mut stream(seed, Stream::ParamInit);
        let mut p = ParamStore::new();
        let bb = &cfg.backbone;
        let d0 = bb.stages[0].dim;

        p.insert("stem.conv1.w", init::linear_weight(9, bb.stem_channels, rng));
        p.insert("stem.conv1.b", init::zeros(vec![bb.stem_channels]));
        p.insert("stem.conv2.w", init::linear_weight(9 * bb.stem_channels, d0, rng));
        p.insert("stem.conv2.b", init::zeros(vec![d0]));

        let mut prev_dim = d0;
        for (i, stage) in bb.stages.iter().enumerate() {
            let d = stage.dim;
            if i > 0 {
                if stage.downsample {
                    p.insert(&format!("stage{i}.down.w"), init::linear_weight(9 * prev_dim, d, rng));
                    p.insert(&format!("stage{i}.down.b"), init::zeros(vec![d]));
                } else if prev_dim != d {
                    p.insert(&format!("stage{i}.proj.w"), init::linear_weight(prev_dim, d, rng));
                    p.insert(&format!("stage{i}.proj.b"), init::zeros(vec![d]));
                }
            }
            for j in 0..stage.depth {
                let pre = format!("stage{i}.block{j}");
                p.insert(&format!("{pre}.ln1.gamma"), init::ones(vec![d]));
                p.insert(&format!("{pre}.ln1.beta"), init::zeros(vec![d]));
                for proj in ["wq", "wk", "wv", "wo"] {
                    p.insert(&format!("{pre}.attn.{proj}"), init::linear_weight(d, d, rng));
                }
                for bias in ["bq", "bk", "bv", "bo"] {
                    p.insert(&format!("{pre}.attn.{bias}"), init::zeros(vec![d]));
                }
                p.insert(&format!("{pre}.ln2.gamma"), init::ones(vec![d]));
                p.insert(&format!("{pre}.ln2.beta"), init::zeros(vec![d]));
                p.insert(&format!("{pre}.mlp.w1"), init::linear_weight(d, d * bb.mlp_ratio, rng));
                p.insert(&format!("{pre}.mlp.b1"), init::zeros(vec![d * bb.mlp_ratio]));
                p.insert(&format!("{pre}.mlp.w2"), init::linear_weight(d * bb.mlp_ratio, d, rng));
                p.insert(&format!("{pre}.mlp.b2"), init::zeros(vec![d]));
                if bb.stage_routed(i) {
                    routing::init_routing_block(&mut p, &format!("{pre}.route"), d, rng);
                    evidential::init_evidential_head(&mut p, &format!("{pre}.evid"), d, cfg.classes, rng);
                }
            }
            prev_dim = d;
        }

        p.insert("final.ln.gamma", init::ones(vec![prev_dim]));
        p.insert("final.ln.beta", init::zeros(vec![prev_dim]));
        p.insert("head.linear.w", init::linear_weight(prev_dim, cfg.classes, rng));
        p.insert("head.linear.b", init::zeros(vec![cfg.classes]));
        prototypes::init_prototype_bank(&mut p, "proto", cfg.classes, cfg.proto.per_class, prev_dim, rng);

        Ok(Model { cfg, params: p })
    }

    /// Convolutional stem: two stride-2 3x3 convolutions with GELU between.
    /// Input must be `[B, H, W, 1]` with H and W divisible by 4.
    pub fn patch_embed(&self, tape: &mut Tape, bound: &Bound, images: Var) -> (Var, usize, usize) {
        let shape = tape.shape(images).to_vec();
        assert_eq!(shape.len(), 4, "dimension error: images must be [B, H, W, C], got {:?}", shape);
        let (b, h, w) = (shape[0], shape[1], shape[2]);
        assert!(
            h % 4 == 0 && w % 4 == 0,
            "dimension error: image size {h}x{w} must be divisible by the stem stride 4"
        );
        let (x, h1, w1) = conv2d(
            tape,
            images,
            bound.var("stem.conv1.w"),
            bound.var("stem.conv1.b"),
            3,
            2,
            1,
        );
        let x = tape.gelu(x);
        let x = tape.reshape(x, vec![b, h1, w1, self.cfg.backbone.stem_channels]);
        let (x, h2, w2) = conv2d(tape, x, bound.var("stem.conv2.w"), bound.var("stem.conv2.b"), 3, 2, 1);
        (x, h2, w2)
    }

    /// Full forward pass over a batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, opts: &mut ForwardOptions) -> ForwardOutput {
        let bound = Bound::bind(tape, &self.params);
        let bb = &self.cfg.backbone;
        let b = batch.len();
        let images = tape.leaf(&batch.images);
        let (mut x, mut h, mut w) = self.patch_embed(tape, &bound, images);

        let sample_mask: Vec<bool> = batch.masks.iter().map(Option::is_some).collect();
        let any_supervised = sample_mask.iter().any(|&s| s);

        let mut stage_grids = Vec::with_capacity(bb.stages.len());
        let mut blocks = Vec::new();
        let mut routing_losses: Vec<Var> = Vec::new();
        let mut sigma_terms: Vec<Var> = Vec::new();
        let mut prev_dim = bb.stages[0].dim;

        for (i, stage) in bb.stages.iter().enumerate() {
            let d = stage.dim;
            if i > 0 {
                if stage.downsample {
                    let grid = tape.reshape(x, vec![b, h, w, prev_dim]);
                    let (nx, nh, nw) =
                        conv2d(tape, grid, bound.var(&format!("stage{i}.down.w")), bound.var(&format!("stage{i}.down.b")), 3, 2, 1);
                    x = nx;
                    h = nh;
                    w = nw;
                } else if prev_dim != d {
                    let flat = tape.reshape(x, vec![b * h * w, prev_dim]);
                    let projected = tape.matmul(flat, bound.var(&format!("stage{i}.proj.w")));
                    let projected = tape.add_suffix(projected, bound.var(&format!("stage{i}.proj.b")));
                    x = tape.reshape(projected, vec![b, h * w, d]);
                }
            }
            let n = h * w;
            let routed = bb.stage_routed(i) && opts.mode == Mode::Ug2rlpr;
            // Token-grid tissue targets for this stage's resolution.
            let stage_targets = if routed { Some(stage_mask_targets(batch, h, w)) } else { None };
            let beta = opts.beta_override.unwrap_or(bb.beta_schedule[i]);

            for j in 0..stage.depth {
                let pre = format!("stage{i}.block{j}");
                let ln1 = {
                    let gamma = bound.var(&format!("{pre}.ln1.gamma"));
                    let beta_p = bound.var(&format!("{pre}.ln1.beta"));
                    tape.layer_norm(x, gamma, beta_p, LN_EPS)
                };
                let attn_vars = AttentionVars::lookup(&bound, &format!("{pre}.attn"));
                let mut a = attention_branch(tape, ln1, &attn_vars, stage.heads, bb.attention, bb.topk_ratio);
                if let Some(drop) = opts.dropout.as_mut() {
                    a = drop.apply(tape, a);
                }

                let a_final = if routed {
                    let route_vars = RoutingBlockVars::lookup(&bound, &format!("{pre}.route"));
                    let head_vars = EvidentialHeadVars::lookup(&bound, &format!("{pre}.evid"));
                    let evidence = if self.cfg.force_zero_evidence {
                        tape.constant(vec![b, n, self.cfg.classes], vec![0.0; b * n * self.cfg.classes])
                    } else {
                        evidential::compute_evidence(tape, ln1, &head_vars)
                    };
                    let dirichlet = evidential::dirichlet_state(tape, evidence);
                    let (sigma_tok_gate, sigma_global_gate) = if self.cfg.detach_gate_sigma {
                        (tape.detach(dirichlet.sigma_tok), tape.detach(dirichlet.sigma_global))
                    } else {
                        (dirichlet.sigma_tok, dirichlet.sigma_global)
                    };
                    let (route_logits, mask) = routing::routing_mask(tape, ln1, route_vars.pred_w, route_vars.pred_b);
                    let targets = stage_targets.as_ref().unwrap();
                    let eff_mask = routing::effective_mask(tape, mask, Some(&targets.gate), sigma_tok_gate);
                    let refined = routing::refinement_branch(tape, ln1, &route_vars);
                    let out = routing::refine(tape, a, refined, eff_mask, route_vars.lambda, beta, sigma_global_gate);
                    if any_supervised {
                        routing_losses.push(routing::routing_loss(tape, route_logits, &targets.supervision, &sample_mask));
                    }
                    sigma_terms.push(dirichlet.sigma_global);
                    blocks.push(BlockAux {
                        stage: i,
                        block: j,
                        grid: (h, w),
                        dirichlet,
                        routing_logits: route_logits,
                        mask,
                        eff_mask,
                    });
                    out.routed
                } else {
                    a
                };
                x = tape.add(x, a_final);

                let ln2 = {
                    let gamma = bound.var(&format!("{pre}.ln2.gamma"));
                    let beta_p = bound.var(&format!("{pre}.ln2.beta"));
                    tape.layer_norm(x, gamma, beta_p, LN_EPS)
                };
                let mlp = MlpVars::lookup(&bound, &format!("{pre}.mlp"));
                let flat = tape.reshape(ln2, vec![b * n, d]);
                let hmid = tape.matmul(flat, mlp.w1);
                let hmid = tape.add_suffix(hmid, mlp.b1);
                let mut hmid = tape.gelu(hmid);
                if let Some(drop) = opts.dropout.as_mut() {
                    hmid = drop.apply(tape, hmid);
                }
                let out = tape.matmul(hmid, mlp.w2);
                let out = tape.add_suffix(out, mlp.b2);
                let out = tape.reshape(out, vec![b, n, d]);
                x = tape.add(x, out);
            }
            stage_grids.push((x, h, w));
            prev_dim = d;
        }

        // Final channel-wise norm feeds both the pooled representation and
        // the prototype head.
        let final_tokens = {
            let gamma = bound.var("final.ln.gamma");
            let beta_p = bound.var("final.ln.beta");
            tape.layer_norm(x, gamma, beta_p, LN_EPS)
        };
        let pooled = global_average_pool(tape, final_tokens);

        let (logits, cluster, diversity, similarities) = match self.cfg.head {
            HeadKind::Linear => {
                let logits = tape.matmul(pooled, bound.var("head.linear.w"));
                let logits = tape.add_suffix(logits, bound.var("head.linear.b"));
                let zero_c = tape.scalar(0.0);
                let zero_d = tape.scalar(0.0);
                (logits, zero_c, zero_d, None)
            }
            HeadKind::Prototype => {
                let bank = PrototypeBankVars::lookup(&bound, "proto");
                let sims = prototypes::similarity(tape, final_tokens, &bank, &self.cfg.proto);
                let logits = prototypes::class_logits(tape, sims, self.cfg.classes, self.cfg.proto.per_class, self.cfg.proto.agg);
                let cluster = prototypes::cluster_loss(tape, sims);
                let diversity = prototypes::diversity_loss(tape, &bank, self.cfg.classes, &self.cfg.proto);
                (logits, cluster, diversity, Some(sims))
            }
        };

        let routing_loss = match routing_losses.len() {
            0 => tape.scalar(0.0),
            _ => {
                let mut acc = routing_losses[0];
                for &l in &routing_losses[1..] {
                    acc = tape.add(acc, l);
                }
                acc
            }
        };
        let sigma_sample = match sigma_terms.len() {
            0 => None,
            count => {
                let mut acc = sigma_terms[0];
                for &s in &sigma_terms[1..] {
                    acc = tape.add(acc, s);
                }
                Some(tape.mul_scalar(acc, 1.0 / count as f64))
            }
        };

        ForwardOutput {
            bound,
            logits,
            pooled,
            final_tokens,
            final_grid: (h, w),
            stage_grids,
            blocks,
            routing_loss,
            cluster_loss: cluster,
            diversity_loss: diversity,
            sigma_sample,
            similarities,
        }
    }
}

/// Per-stage tissue targets: `gate` feeds the effective mask (all-ones rows
/// for unsupervised samples), `supervision` feeds the routing loss.
struct StageMaskTargets {
    gate: Vec<f64>,
    supervision: Vec<f64>,
}

fn stage_mask_targets(batch: &Batch, h: usize, w: usize) -> StageMaskTargets {
    let n = h * w;
    let b = batch.len();
    let mut gate = vec![1.0; b * n];
    let mut supervision = vec![0.0; b * n];
    for (bi, mask) in batch.masks.iter().enumerate() {
        if let Some(m) = mask {
            let resampled = crate::data::resample_for_grid(m, h, w);
            for (t, &v) in resampled.data().iter().enumerate() {
                gate[bi * n + t] = v;
                supervision[bi * n + t] = v;
            }
        }
    }
    StageMaskTargets { gate, supervision }
}
