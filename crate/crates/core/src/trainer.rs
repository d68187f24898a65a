//! Deterministic training loop, optimization, checkpoints, and evaluation.
//!
//! Every source of randomness (shuffling, dropout, MC passes) is a ChaCha
//! stream derived from the run seed plus epoch/step counters, so identical
//! configurations reproduce byte-identical histories and checkpoints, and a
//! resumed run continues bit-for-bit.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::data::{Dataset, GeneratedData};
use crate::error::{Error, Result};
use crate::metrics::{self, McConfig, MetricsRow, PassOutput, PredictionSet};
use crate::model::{Batch, ForwardOptions, Mode, Model};
use crate::objectives::{self, LossBreakdown, LossParts, LossWeights};
use crate::params::ParamStore;
use crate::rng::{stream, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Quantity tracked for early stopping and best-checkpoint selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Monitor {
    ValLoss,
    ValAccuracy,
    ValAuroc,
}

impl Monitor {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "val_loss" => Ok(Monitor::ValLoss),
            "val_accuracy" => Ok(Monitor::ValAccuracy),
            "val_auroc" => Ok(Monitor::ValAuroc),
            other => Err(Error::Config(format!("unknown monitor {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Monitor::ValLoss => "val_loss",
            Monitor::ValAccuracy => "val_accuracy",
            Monitor::ValAuroc => "val_auroc",
        }
    }

    fn improved(&self, candidate: f64, best: f64) -> bool {
        match self {
            Monitor::ValLoss => candidate < best,
            Monitor::ValAccuracy | Monitor::ValAuroc => candidate > best,
        }
    }

    fn of(&self, row: &EpochRow) -> f64 {
        match self {
            Monitor::ValLoss => row.val_loss,
            Monitor::ValAccuracy => row.val_accuracy,
            Monitor::ValAuroc => row.val_auroc,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Sgd,
    Adam,
}

impl OptKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptKind::Sgd),
            "adam" => Ok(OptKind::Adam),
            other => Err(Error::Config(format!("unknown optimizer {other}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptKind::Sgd => "sgd",
            OptKind::Adam => "adam",
        }
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam over a [`ParamStore`], keyed by parameter name.
pub struct Optimizer {
    pub kind: OptKind,
    pub lr: f64,
    pub t: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        Optimizer { kind, lr, t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// One update from the gradients currently on the store.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        for (name, tensor) in store.iter_mut() {
            let Some(grad) = tensor.grad.clone() else { continue };
            match self.kind {
                OptKind::Sgd => {
                    for (p, g) in tensor.data_mut().iter_mut().zip(&grad) {
                        *p -= self.lr * g;
                    }
                }
                OptKind::Adam => {
                    let n = grad.len();
                    let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
                    for i in 0..n {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * grad[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * grad[i] * grad[i];
                        let mhat = m[i] / bc1;
                        let vhat = v[i] / bc2;
                        tensor.data_mut()[i] -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// Training-run hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptKind,
    pub patience: usize,
    pub monitor: Monitor,
    pub seed: u64,
    pub mode: Mode,
    pub weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            lr: 1e-3,
            optimizer: OptKind::Adam,
            patience: 10,
            monitor: Monitor::ValLoss,
            seed: 0,
            mode: Mode::Ug2rlpr,
            weights: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch_size and epochs must be >= 1".into()));
        }
        self.weights.validate();
        Ok(())
    }
}

/// One history row (losses are per-sample means over the epoch).
#[derive(Debug, Clone)]
pub struct EpochRow {
    pub epoch: u32,
    pub train: LossBreakdown,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_macro_f1: f64,
    pub val_auroc: f64,
}

pub fn history_csv_header() -> &'static str {
    "epoch,train_total,train_ce,train_routing,train_cluster,train_diversity,val_loss,val_accuracy,val_macro_f1,val_auroc"
}

pub fn history_csv_line(row: &EpochRow) -> String {
    format!(
        "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9}",
        row.epoch,
        row.train.total,
        row.train.ce,
        row.train.routing,
        row.train.cluster,
        row.train.diversity,
        row.val_loss,
        row.val_accuracy,
        row.val_macro_f1,
        row.val_auroc
    )
}

pub fn write_history_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut out = String::from(history_csv_header());
    out.push('\n');
    for row in rows {
        out.push_str(&history_csv_line(row));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ── Checkpoints ──────────────────────────────────────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"MFUR";
const CKPT_VERSION: u32 = 1;

/// A resumable training state: parameters, optimizer moments, epoch, seed,
/// and the resolved configuration text.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub epoch: u32,
    pub seed: u64,
    pub opt_t: u64,
    pub config_echo: String,
    pub params: ParamStore,
    pub opt_m: BTreeMap<String, Vec<f64>>,
    pub opt_v: BTreeMap<String, Vec<f64>>,
}

impl Checkpoint {
    fn capture(model: &Model, opt: &Optimizer, epoch: u32, seed: u64, config_echo: &str) -> Self {
        let mut params = model.params.clone();
        params.zero_grad();
        Checkpoint {
            epoch,
            seed,
            opt_t: opt.t,
            config_echo: config_echo.to_string(),
            params,
            opt_m: opt.m.clone(),
            opt_v: opt.v.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&self.opt_t.to_le_bytes());
        let echo = self.config_echo.as_bytes();
        buf.extend_from_slice(&(echo.len() as u32).to_le_bytes());
        buf.extend_from_slice(echo);

        let write_name = |buf: &mut Vec<u8>, name: &str| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
        };
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, tensor) in self.params.iter() {
            write_name(&mut buf, name);
            buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for table in [&self.opt_m, &self.opt_v] {
            buf.extend_from_slice(&(table.len() as u32).to_le_bytes());
            for (name, values) in table {
                write_name(&mut buf, name);
                buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
                for &v in values {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize, what: &str| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format { offset: *pos as u64, msg: format!("truncated checkpoint while reading {what}") });
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        let magic = take(&mut pos, 4, "magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::Format { offset: 0, msg: format!("bad checkpoint magic {magic:?}") });
        }
        let version = u32::from_le_bytes(take(&mut pos, 4, "version")?.try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(Error::Format { offset: 4, msg: format!("unsupported checkpoint version {version}") });
        }
        let epoch = u32::from_le_bytes(take(&mut pos, 4, "epoch")?.try_into().unwrap());
        let seed = u64::from_le_bytes(take(&mut pos, 8, "seed")?.try_into().unwrap());
        let opt_t = u64::from_le_bytes(take(&mut pos, 8, "opt_t")?.try_into().unwrap());
        let echo_len = u32::from_le_bytes(take(&mut pos, 4, "config length")?.try_into().unwrap()) as usize;
        let config_echo = String::from_utf8(take(&mut pos, echo_len, "config echo")?.to_vec())
            .map_err(|_| Error::Format { offset: pos as u64, msg: "config echo is not UTF-8".into() })?;

        let read_name = |pos: &mut usize| -> Result<String> {
            let len = u32::from_le_bytes(take(pos, 4, "name length")?.try_into().unwrap()) as usize;
            String::from_utf8(take(pos, len, "name")?.to_vec())
                .map_err(|_| Error::Format { offset: *pos as u64, msg: "name is not UTF-8".into() })
        };

        let n_params = u32::from_le_bytes(take(&mut pos, 4, "param count")?.try_into().unwrap()) as usize;
        let mut params = ParamStore::new();
        for _ in 0..n_params {
            let name = read_name(&mut pos)?;
            let rank = u32::from_le_bytes(take(&mut pos, 4, "rank")?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(&mut pos, 8, "dim")?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = take(&mut pos, numel * 8, "param payload")?;
            let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            params.insert(&name, Tensor::new(shape, data));
        }
        let mut tables = Vec::with_capacity(2);
        for what in ["adam m", "adam v"] {
            let count = u32::from_le_bytes(take(&mut pos, 4, what)?.try_into().unwrap()) as usize;
            let mut table = BTreeMap::new();
            for _ in 0..count {
                let name = read_name(&mut pos)?;
                let len = u64::from_le_bytes(take(&mut pos, 8, "moment length")?.try_into().unwrap()) as usize;
                let payload = take(&mut pos, len * 8, "moment payload")?;
                let data: Vec<f64> = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                table.insert(name, data);
            }
            tables.push(table);
        }
        if pos != bytes.len() {
            return Err(Error::Format { offset: pos as u64, msg: format!("{} trailing bytes", bytes.len() - pos) });
        }
        let opt_v = tables.pop().unwrap();
        let opt_m = tables.pop().unwrap();
        Ok(Checkpoint { epoch, seed, opt_t, config_echo, params, opt_m, opt_v })
    }

    /// Instantiate a model from this checkpoint's parameters.
    pub fn restore_into(&self, model: &mut Model) {
        model.params = self.params.clone();
    }
}

/// Outcome of a training run.
pub struct TrainOutput {
    pub history: Vec<EpochRow>,
    pub best: Checkpoint,
    pub best_epoch: u32,
    pub last: Checkpoint,
    /// Set when training aborted on a non-finite loss; `best`/`last` then
    /// hold the final finite state.
    pub diverged: Option<String>,
}

fn batch_indices(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size)
}

fn forward_loss(
    model: &Model,
    tape: &mut Tape,
    batch: &Batch,
    opts: &mut ForwardOptions,
    weights: &LossWeights,
) -> (crate::tape::Var, LossBreakdown, crate::params::Bound) {
    let out = model.forward(tape, batch, opts);
    let ce = objectives::cross_entropy(tape, out.logits, &batch.labels);
    let parts = LossParts { ce, routing: out.routing_loss, cluster: out.cluster_loss, diversity: out.diversity_loss };
    let (total, breakdown) = objectives::total_loss(tape, parts, weights);
    (total, breakdown, out.bound)
}

/// Deterministic (dropout-free) evaluation of a split: mean loss breakdown
/// plus the prediction set with evidential uncertainties when available.
pub fn eval_split(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    mode: Mode,
    weights: &LossWeights,
    beta_override: Option<f64>,
) -> (PredictionSet, LossBreakdown) {
    assert!(!dataset.is_empty(), "domain error: cannot evaluate an empty split");
    let n = dataset.len();
    let classes = dataset.classes;
    let mut probs = Vec::with_capacity(n * classes);
    let mut sigmas: Vec<f64> = Vec::new();
    let mut have_sigma = true;
    let mut sums = LossBreakdown { total: 0.0, ce: 0.0, routing: 0.0, cluster: 0.0, diversity: 0.0 };
    let order: Vec<usize> = (0..n).collect();
    for chunk in batch_indices(&order, batch_size) {
        let samples: Vec<&crate::data::Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
        let batch = Batch::from_samples(&samples);
        let mut tape = Tape::new();
        let mut opts = ForwardOptions { mode, dropout: None, beta_override };
        let out = model.forward(&mut tape, &batch, &mut opts);
        let ce = objectives::cross_entropy(&mut tape, out.logits, &batch.labels);
        let parts =
            LossParts { ce, routing: out.routing_loss, cluster: out.cluster_loss, diversity: out.diversity_loss };
        let (_, breakdown) = objectives::total_loss(&mut tape, parts, weights);
        let w = batch.len() as f64;
        sums.total += breakdown.total * w;
        sums.ce += breakdown.ce * w;
        sums.routing += breakdown.routing * w;
        sums.cluster += breakdown.cluster * w;
        sums.diversity += breakdown.diversity * w;
        let pr = tape.softmax(out.logits);
        probs.extend_from_slice(tape.value(pr));
        match out.sigma_sample {
            Some(s) => sigmas.extend_from_slice(tape.value(s)),
            None => have_sigma = false,
        }
    }
    let scale = 1.0 / n as f64;
    let mean = LossBreakdown {
        total: sums.total * scale,
        ce: sums.ce * scale,
        routing: sums.routing * scale,
        cluster: sums.cluster * scale,
        diversity: sums.diversity * scale,
    };
    let mut preds = PredictionSet::new(Tensor::new(vec![n, classes], probs), dataset.labels());
    if have_sigma && !sigmas.is_empty() {
        preds = preds.with_uncertainty(sigmas);
    }
    (preds, mean)
}

/// MC-dropout evaluation: `cfg.passes` stochastic passes with per-pass RNG
/// streams, probabilities averaged.
pub fn eval_split_mc(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    mode: Mode,
    mc: &McConfig,
    beta_override: Option<f64>,
) -> PredictionSet {
    let n = dataset.len();
    let classes = dataset.classes;
    let order: Vec<usize> = (0..n).collect();
    let out = metrics::mc_predict(mc, dataset.labels(), |_pass, rng| {
        let mut probs = Vec::with_capacity(n * classes);
        let mut sigmas: Vec<f64> = Vec::new();
        let mut have_sigma = true;
        for chunk in batch_indices(&order, batch_size) {
            let samples: Vec<&crate::data::Sample> = chunk.iter().map(|&i| &dataset.samples[i]).collect();
            let batch = Batch::from_samples(&samples);
            let mut tape = Tape::new();
            let mut opts = ForwardOptions {
                mode,
                dropout: Some(crate::model::Dropout { rate: mc.dropout_rate, rng }),
                beta_override,
            };
            let fwd = model.forward(&mut tape, &batch, &mut opts);
            let pr = tape.softmax(fwd.logits);
            probs.extend_from_slice(tape.value(pr));
            match fwd.sigma_sample {
                Some(s) => sigmas.extend_from_slice(tape.value(s)),
                None => have_sigma = false,
            }
        }
        PassOutput {
            probs: Tensor::new(vec![n, classes], probs),
            sigma: if have_sigma { Some(sigmas) } else { None },
        }
    });
    out.mean
}

/// Evaluate a split into a schema-complete metrics row.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    batch_size: usize,
    mode: Mode,
    weights: &LossWeights,
    mc: Option<&McConfig>,
    beta_override: Option<f64>,
    run_id: &str,
    bins: usize,
) -> (PredictionSet, MetricsRow) {
    let preds = match mc {
        None => eval_split(model, dataset, batch_size, mode, weights, beta_override).0,
        Some(cfg) => eval_split_mc(model, dataset, batch_size, mode, cfg, beta_override),
    };
    let beta_label = beta_override.unwrap_or(f64::NAN);
    let beta_label = if beta_label.is_nan() { -1.0 } else { beta_label };
    let row = MetricsRow::compute(run_id, beta_label, &preds, bins);
    (preds, row)
}

/// Run the training loop. `resume` continues from a checkpoint (same data
/// and config expected). Divergence aborts with the last finite state.
pub fn train(
    model: &mut Model,
    data: &GeneratedData,
    cfg: &TrainConfig,
    config_echo: &str,
    resume: Option<&Checkpoint>,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut start_epoch = 0u32;
    if let Some(ck) = resume {
        ck.restore_into(model);
        opt.t = ck.opt_t;
        opt.m = ck.opt_m.clone();
        opt.v = ck.opt_v.clone();
        start_epoch = ck.epoch;
    }

    let n_train = data.train.len();
    let mut history: Vec<EpochRow> = Vec::new();
    let mut best: Option<(f64, u32, Checkpoint)> = None;
    let mut last = Checkpoint::capture(model, &opt, start_epoch, cfg.seed, config_echo);
    let mut wait = 0usize;
    let mut diverged = None;

    'epochs: for epoch in (start_epoch + 1)..=(cfg.epochs as u32) {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut stream(cfg.seed, Stream::EpochShuffle { epoch }));

        let mut sums = LossBreakdown { total: 0.0, ce: 0.0, routing: 0.0, cluster: 0.0, diversity: 0.0 };
        for (step, chunk) in batch_indices(&order, cfg.batch_size).enumerate() {
            let samples: Vec<&crate::data::Sample> = chunk.iter().map(|&i| &data.train.samples[i]).collect();
            let batch = Batch::from_samples(&samples);
            let mut tape = Tape::new();
            let mut dropout_rng = stream(cfg.seed, Stream::Dropout { epoch, step: step as u32 });
            let mut opts = ForwardOptions {
                mode: cfg.mode,
                dropout: Some(crate::model::Dropout {
                    rate: model.cfg.backbone.dropout_rate,
                    rng: &mut dropout_rng,
                }),
                beta_override: None,
            };
            let (total, breakdown, bound) = forward_loss(model, &mut tape, &batch, &mut opts, &cfg.weights);
            if !breakdown.total.is_finite() {
                diverged = Some(format!("non-finite loss {} at epoch {epoch} step {step}", breakdown.total));
                break 'epochs;
            }
            tape.backward(total);
            model.params.zero_grad();
            bound.pull_grads(&tape, &mut model.params);
            opt.step(&mut model.params);
            model.params.zero_grad();

            let w = batch.len() as f64;
            sums.total += breakdown.total * w;
            sums.ce += breakdown.ce * w;
            sums.routing += breakdown.routing * w;
            sums.cluster += breakdown.cluster * w;
            sums.diversity += breakdown.diversity * w;
        }
        let scale = 1.0 / n_train as f64;
        let train_mean = LossBreakdown {
            total: sums.total * scale,
            ce: sums.ce * scale,
            routing: sums.routing * scale,
            cluster: sums.cluster * scale,
            diversity: sums.diversity * scale,
        };

        let (val_preds, val_loss) = eval_split(model, &data.val, cfg.batch_size, cfg.mode, &cfg.weights, None);
        let row = EpochRow {
            epoch,
            train: train_mean,
            val_loss: val_loss.total,
            val_accuracy: metrics::accuracy(&val_preds),
            val_macro_f1: metrics::macro_f1(&val_preds),
            val_auroc: metrics::auroc_macro_ovr(&val_preds),
        };
        let candidate = cfg.monitor.of(&row);
        history.push(row);
        last = Checkpoint::capture(model, &opt, epoch, cfg.seed, config_echo);

        let improved = match &best {
            None => true,
            Some((best_val, ..)) => cfg.monitor.improved(candidate, *best_val),
        };
        if improved {
            best = Some((candidate, epoch, last.clone()));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                break;
            }
        }
    }

    let (best_epoch, best_ckpt) = match best {
        Some((_, epoch, ckpt)) => (epoch, ckpt),
        None => (start_epoch, last.clone()),
    };
    Ok(TrainOutput { history, best: best_ckpt, best_epoch, last, diverged })
}

/// Append-or-create a metrics CSV with a fixed header.
pub fn append_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut out = String::new();
    if !path.exists() {
        out.push_str(MetricsRow::csv_header());
        out.push('\n');
    }
    for row in rows {
        out.push_str(&row.csv_line());
        out.push('\n');
    }
    let mut file = fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
