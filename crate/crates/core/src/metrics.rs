//! Calibration metrics, selective prediction, and the MC-dropout harness.
//!
//! All metrics are pure functions over a [`PredictionSet`]. Binning for
//! ECE/MCE uses equal-width bins on (0, 1]: sample with confidence `p`
//! belongs to bin `b` iff `p > b/bins` and `p <= (b+1)/bins` (bin 0 also
//! absorbs anything at or below `1/bins`). Risk–coverage curves rank samples
//! by ascending `uncertainty_score`, breaking ties by original index.

use rand_chacha::ChaCha8Rng;

use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Per-sample class probabilities, labels, and the scores used for
/// calibration and selective prediction.
#[derive(Debug, Clone)]
pub struct PredictionSet {
    /// `[B, C]`, rows on the simplex.
    pub probs: Tensor,
    pub labels: Vec<usize>,
    /// Max class probability per sample.
    pub confidence: Vec<f64>,
    /// Ascending-sorts-first score used to rank samples for selective
    /// prediction. Defaults to `1 - confidence`.
    pub uncertainty_score: Vec<f64>,
}

impl PredictionSet {
    /// Validate shapes and the simplex constraint (rows sum to 1 ± 1e-6) and
    /// derive confidences. Uncertainty defaults to `1 - confidence`.
    pub fn new(probs: Tensor, labels: Vec<usize>) -> Self {
        let shape = probs.shape().to_vec();
        assert_eq!(shape.len(), 2, "dimension error: probs must be [B, C], got {:?}", shape);
        let (b, c) = (shape[0], shape[1]);
        assert_eq!(labels.len(), b, "dimension error: {} labels for {} samples", labels.len(), b);
        assert!(labels.iter().all(|&y| y < c), "contract error: label out of range");
        let mut confidence = Vec::with_capacity(b);
        for row in probs.data().chunks(c) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6, "contract error: probability row sums to {sum}");
            assert!(row.iter().all(|&p| p >= 0.0), "contract error: negative probability");
            confidence.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
        }
        let uncertainty_score = confidence.iter().map(|c| 1.0 - c).collect();
        PredictionSet { probs, labels, confidence, uncertainty_score }
    }

    /// Replace the ranking score (e.g. with an evidential uncertainty).
    pub fn with_uncertainty(mut self, score: Vec<f64>) -> Self {
        assert_eq!(score.len(), self.labels.len(), "dimension error: uncertainty score length mismatch");
        self.uncertainty_score = score;
        self
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[1]
    }

    /// Argmax prediction per sample (ties to the lower class index).
    pub fn predictions(&self) -> Vec<usize> {
        let c = self.classes();
        self.probs
            .data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &p) in row.iter().enumerate().skip(1) {
                    if p > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }

    pub fn correct(&self) -> Vec<bool> {
        self.predictions().iter().zip(&self.labels).map(|(p, y)| p == y).collect()
    }
}

/// Bin index of a confidence under the documented (0, 1] convention.
fn bin_index(conf: f64, bins: usize) -> usize {
    debug_assert!(bins >= 1);
    // Start from the arithmetic guess, then settle boundary cases with the
    // defining comparisons so the result is exact.
    let mut b = ((conf * bins as f64).ceil() as isize - 1).clamp(0, bins as isize - 1) as usize;
    while b > 0 && conf <= b as f64 / bins as f64 {
        b -= 1;
    }
    while b + 1 < bins && conf > (b + 1) as f64 / bins as f64 {
        b += 1;
    }
    b
}

fn bin_stats(preds: &PredictionSet, bins: usize) -> Vec<(usize, f64, f64)> {
    assert!(bins >= 1, "contract error: need at least one bin");
    let correct = preds.correct();
    let mut acc = vec![(0usize, 0.0f64, 0.0f64); bins];
    for (i, &conf) in preds.confidence.iter().enumerate() {
        let b = bin_index(conf, bins);
        acc[b].0 += 1;
        acc[b].1 += f64::from(correct[i]);
        acc[b].2 += conf;
    }
    acc
}

/// Expected calibration error over equal-width confidence bins; empty bins
/// contribute nothing.
pub fn ece(preds: &PredictionSet, bins: usize) -> f64 {
    let n = preds.len() as f64;
    bin_stats(preds, bins)
        .iter()
        .filter(|(count, ..)| *count > 0)
        .map(|&(count, hits, conf_sum)| {
            let c = count as f64;
            (c / n) * (hits / c - conf_sum / c).abs()
        })
        .sum()
}

/// Maximum calibration error: worst |accuracy - confidence| over non-empty
/// bins.
pub fn mce(preds: &PredictionSet, bins: usize) -> f64 {
    bin_stats(preds, bins)
        .iter()
        .filter(|(count, ..)| *count > 0)
        .map(|&(count, hits, conf_sum)| {
            let c = count as f64;
            (hits / c - conf_sum / c).abs()
        })
        .fold(0.0, f64::max)
}

/// Brier score: mean squared distance between the probability row and the
/// one-hot label.
pub fn brier(preds: &PredictionSet) -> f64 {
    let c = preds.classes();
    let mut total = 0.0;
    for (row, &y) in preds.probs.data().chunks(c).zip(&preds.labels) {
        for (j, &p) in row.iter().enumerate() {
            let target = f64::from(j == y);
            total += (p - target) * (p - target);
        }
    }
    total / preds.len() as f64
}

/// Negative log-likelihood with probabilities clamped at 1e-12.
pub fn nll(preds: &PredictionSet) -> f64 {
    let c = preds.classes();
    let mut total = 0.0;
    for (row, &y) in preds.probs.data().chunks(c).zip(&preds.labels) {
        total += -(row[y].max(1e-12)).ln();
    }
    total / preds.len() as f64
}

/// Risk–coverage analysis of an uncertainty ranking.
#[derive(Debug, Clone)]
pub struct RiskCoverage {
    /// Mean selective risk over prefix sizes 1..=B.
    pub aurc: f64,
    /// `(coverage, selective risk)` for every prefix size.
    pub curve: Vec<(f64, f64)>,
}

impl RiskCoverage {
    /// Accuracy keeping the `ceil(coverage * B)` most confident samples.
    pub fn accuracy_at(&self, coverage: f64) -> f64 {
        assert!(coverage > 0.0 && coverage <= 1.0, "contract error: coverage must be in (0, 1]");
        let b = self.curve.len();
        let k = ((coverage * b as f64).ceil() as usize).clamp(1, b);
        1.0 - self.curve[k - 1].1
    }
}

/// Sort ascending by uncertainty score (ties by original index) and compute
/// the selective risk of every prefix.
pub fn risk_coverage(preds: &PredictionSet) -> RiskCoverage {
    let b = preds.len();
    assert!(b >= 1, "domain error: risk_coverage needs at least one sample");
    let correct = preds.correct();
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| preds.uncertainty_score[i].total_cmp(&preds.uncertainty_score[j]).then(i.cmp(&j)));
    let mut errors = 0usize;
    let mut curve = Vec::with_capacity(b);
    let mut aurc = 0.0;
    for (k, &idx) in order.iter().enumerate() {
        errors += usize::from(!correct[idx]);
        let risk = errors as f64 / (k + 1) as f64;
        curve.push(((k + 1) as f64 / b as f64, risk));
        aurc += risk;
    }
    aurc /= b as f64;
    RiskCoverage { aurc, curve }
}

/// Fraction of argmax predictions matching the labels.
pub fn accuracy(preds: &PredictionSet) -> f64 {
    preds.correct().iter().map(|&c| f64::from(c)).sum::<f64>() / preds.len() as f64
}

/// Macro-averaged F1 over classes (per-class F1 is 0 when precision+recall
/// is 0).
pub fn macro_f1(preds: &PredictionSet) -> f64 {
    let c = preds.classes();
    let yhat = preds.predictions();
    let mut f1_sum = 0.0;
    for class in 0..c {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fun = 0.0;
        for (p, y) in yhat.iter().zip(&preds.labels) {
            match (*p == class, *y == class) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fun += 1.0,
                _ => {}
            }
        }
        let denom = 2.0 * tp + fp + fun;
        f1_sum += if denom == 0.0 { 0.0 } else { 2.0 * tp / denom };
    }
    f1_sum / c as f64
}

/// Macro one-vs-rest AUROC via tie-averaged ranks. Classes without both a
/// positive and a negative sample are skipped; 0.5 if none qualify.
pub fn auroc_macro_ovr(preds: &PredictionSet) -> f64 {
    let c = preds.classes();
    let b = preds.len();
    let mut total = 0.0;
    let mut counted = 0usize;
    for class in 0..c {
        let scores: Vec<f64> = (0..b).map(|i| preds.probs.data()[i * c + class]).collect();
        let positives: Vec<bool> = preds.labels.iter().map(|&y| y == class).collect();
        let n_pos = positives.iter().filter(|&&p| p).count();
        let n_neg = b - n_pos;
        if n_pos == 0 || n_neg == 0 {
            continue;
        }
        // Tie-averaged ranks (1-based).
        let mut order: Vec<usize> = (0..b).collect();
        order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]));
        let mut ranks = vec![0.0; b];
        let mut i = 0;
        while i < b {
            let mut j = i;
            while j + 1 < b && scores[order[j + 1]] == scores[order[i]] {
                j += 1;
            }
            let avg = (i + j + 2) as f64 / 2.0;
            for &o in &order[i..=j] {
                ranks[o] = avg;
            }
            i = j + 1;
        }
        let rank_sum: f64 = (0..b).filter(|&i| positives[i]).map(|i| ranks[i]).sum();
        let auc = (rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64;
        total += auc;
        counted += 1;
    }
    if counted == 0 {
        0.5
    } else {
        total / counted as f64
    }
}

/// Monte Carlo dropout inference settings.
#[derive(Debug, Clone, Copy)]
pub struct McConfig {
    /// Stochastic forward passes per sample (T).
    pub passes: usize,
    pub dropout_rate: f64,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { passes: 20, dropout_rate: 0.1, seed: 0 }
    }
}

/// One stochastic pass: class probabilities plus an optional per-sample
/// evidential uncertainty.
pub struct PassOutput {
    pub probs: Tensor,
    pub sigma: Option<Vec<f64>>,
}

/// Aggregated MC-dropout prediction.
pub struct McOutput {
    /// Probabilities averaged over passes; uncertainty score is the mean
    /// evidential sigma when every pass reported one, else `1 - confidence`.
    pub mean: PredictionSet,
    /// `[T]` per-pass probability tensors, each `[B, C]`.
    pub per_pass: Vec<Tensor>,
    /// Population variance of the per-pass probabilities, `[B, C]`.
    pub variance: Tensor,
}

/// Run `cfg.passes` stochastic passes. Each pass receives its own derived RNG
/// stream, so the result is identical regardless of scheduling.
pub fn mc_predict(
    cfg: &McConfig,
    labels: Vec<usize>,
    mut run_pass: impl FnMut(usize, &mut ChaCha8Rng) -> PassOutput,
) -> McOutput {
    assert!(cfg.passes >= 1, "contract error: MC passes must be >= 1");
    let mut per_pass = Vec::with_capacity(cfg.passes);
    let mut sigmas: Vec<Vec<f64>> = Vec::new();
    let mut all_have_sigma = true;
    for pass in 0..cfg.passes {
        let mut rng = stream(cfg.seed, Stream::McPass { pass: pass as u32 });
        let out = run_pass(pass, &mut rng);
        match out.sigma {
            Some(s) => sigmas.push(s),
            None => all_have_sigma = false,
        }
        per_pass.push(out.probs);
    }
    let shape = per_pass[0].shape().to_vec();
    let n = per_pass[0].numel();
    let t = cfg.passes as f64;
    let mut mean = vec![0.0; n];
    for p in &per_pass {
        assert_eq!(p.shape(), shape.as_slice(), "dimension error: pass output shape changed");
        for (m, &v) in mean.iter_mut().zip(p.data()) {
            *m += v / t;
        }
    }
    let mut variance = vec![0.0; n];
    for p in &per_pass {
        for ((vr, &v), &m) in variance.iter_mut().zip(p.data()).zip(&mean) {
            *vr += (v - m) * (v - m) / t;
        }
    }
    let mut set = PredictionSet::new(Tensor::new(shape.clone(), mean), labels);
    if all_have_sigma && !sigmas.is_empty() {
        let b = shape[0];
        let mut score = vec![0.0; b];
        for s in &sigmas {
            assert_eq!(s.len(), b, "dimension error: sigma length mismatch");
            for (acc, &v) in score.iter_mut().zip(s) {
                *acc += v / t;
            }
        }
        set = set.with_uncertainty(score);
    }
    McOutput { mean: set, per_pass, variance: Tensor::new(shape, variance) }
}

/// One metrics report row; the CSV schema covers discrimination,
/// calibration, and selective prediction in one record.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub run_id: String,
    pub beta: f64,
    pub ece: f64,
    pub brier: f64,
    pub nll: f64,
    pub mce: f64,
    pub aurc: f64,
    pub acc_at_50: f64,
    pub acc_at_70: f64,
    pub acc_at_90: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc: f64,
}

impl MetricsRow {
    /// Compute every column from a prediction set.
    pub fn compute(run_id: &str, beta: f64, preds: &PredictionSet, bins: usize) -> Self {
        let rc = risk_coverage(preds);
        MetricsRow {
            run_id: run_id.to_string(),
            beta,
            ece: ece(preds, bins),
            brier: brier(preds),
            nll: nll(preds),
            mce: mce(preds, bins),
            aurc: rc.aurc,
            acc_at_50: rc.accuracy_at(0.5),
            acc_at_70: rc.accuracy_at(0.7),
            acc_at_90: rc.accuracy_at(0.9),
            accuracy: accuracy(preds),
            macro_f1: macro_f1(preds),
            auroc: auroc_macro_ovr(preds),
        }
    }

    pub fn csv_header() -> &'static str {
        "run_id,beta,ece,brier,nll,mce,aurc,acc_at_50,acc_at_70,acc_at_90,accuracy,macro_f1,auroc"
    }

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.run_id,
            self.beta,
            self.ece,
            self.brier,
            self.nll,
            self.mce,
            self.aurc,
            self.acc_at_50,
            self.acc_at_70,
            self.acc_at_90,
            self.accuracy,
            self.macro_f1,
            self.auroc
        )
    }
}
