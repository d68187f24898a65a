//! Synthetic grayscale classification data with controllable ambiguity.
//!
//! Each class renders an oriented elliptical blob (orientation spans [0, pi)
//! across classes) overlaid with a class-specific sinusoidal texture on a
//! noisy background. Ambiguity `rho` corrupts samples two ways: with
//! probability `rho/2` the image is a blend of two classes' recipes (label
//! kept), and with probability `rho/2` the label is flipped to another class
//! (image kept clean). Tissue masks are the blob support at half maximum.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Generation recipe. The same spec always produces byte-identical data.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    /// Square image edge length in pixels (one channel).
    pub image_size: usize,
    /// Ambiguity level in [0, 1]: half goes to recipe mixing, half to label
    /// flips.
    pub ambiguity: f64,
    /// Fraction of samples carrying a tissue mask.
    pub mask_fraction: f64,
    pub seed: u64,
    /// Optional per-class sampling weights; uniform (balanced within ±1)
    /// when absent.
    pub class_weights: Option<Vec<f64>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: 3,
            train_samples: 800,
            val_samples: 200,
            test_samples: 200,
            image_size: 32,
            ambiguity: 0.25,
            mask_fraction: 1.0,
            seed: 0,
            class_weights: None,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> crate::Result<()> {
        if self.classes < 2 {
            return Err(crate::Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !(0.0..=1.0).contains(&self.ambiguity) {
            return Err(crate::Error::Config(format!("ambiguity must be in [0, 1], got {}", self.ambiguity)));
        }
        if !(0.0..=1.0).contains(&self.mask_fraction) {
            return Err(crate::Error::Config(format!("mask_fraction must be in [0, 1], got {}", self.mask_fraction)));
        }
        if self.image_size < 8 {
            return Err(crate::Error::Config(format!("image_size must be >= 8, got {}", self.image_size)));
        }
        if let Some(w) = &self.class_weights {
            if w.len() != self.classes || w.iter().any(|&x| x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
                return Err(crate::Error::Config("class_weights must be non-negative with positive sum".into()));
            }
        }
        Ok(())
    }
}

/// The three generated splits.
#[derive(Debug, Clone)]
pub struct GeneratedData {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl GeneratedData {
    pub fn split(&self, name: &str) -> crate::Result<&Dataset> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(crate::Error::Config(format!("unknown split {other}"))),
        }
    }
}

/// Per-class rendering parameters.
struct ClassRecipe {
    orientation: f64,
    radius: f64,
    texture_freq: f64,
    texture_orientation: f64,
}

fn recipe(class: usize, classes: usize, image_size: usize) -> ClassRecipe {
    let s = image_size as f64;
    ClassRecipe {
        orientation: std::f64::consts::PI * class as f64 / classes as f64,
        radius: s * (0.16 + 0.02 * (class % 3) as f64),
        texture_freq: 3.0 + 2.0 * class as f64,
        texture_orientation: std::f64::consts::PI * (class as f64 + 0.5) / classes as f64,
    }
}

/// Blob intensity field in [0, 1] (peak 1 at the blob center).
fn blob_field(size: usize, cx: f64, cy: f64, rec: &ClassRecipe) -> Vec<f64> {
    let aspect: f64 = 2.2;
    let sx = rec.radius * aspect.sqrt();
    let sy = rec.radius / aspect.sqrt();
    let (cos_t, sin_t) = (rec.orientation.cos(), rec.orientation.sin());
    let mut field = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let u = dx * cos_t + dy * sin_t;
            let v = -dx * sin_t + dy * cos_t;
            field[y * size + x] = (-0.5 * ((u / sx).powi(2) + (v / sy).powi(2))).exp();
        }
    }
    field
}

/// Render one clean image of `class`; returns the pixels and the blob field
/// used for the mask.
fn render(class: usize, classes: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let rec = recipe(class, classes, size);
    let s = size as f64;
    let jitter = 0.08 * s;
    let cx = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let cy = s / 2.0 + rng.gen_range(-jitter..=jitter);
    let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let blob = blob_field(size, cx, cy, &rec);
    let (cos_t, sin_t) = (rec.texture_orientation.cos(), rec.texture_orientation.sin());
    let mut pixels = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let noise: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) * 0.08;
            let t = (std::f64::consts::TAU * rec.texture_freq * (cos_t * x as f64 + sin_t * y as f64) / s + phase).sin();
            let b = blob[y * size + x];
            pixels[y * size + x] = (0.15 + noise + b * (0.55 + 0.25 * t)).clamp(0.0, 1.0);
        }
    }
    (pixels, blob)
}

/// Half-maximum support of the blob field as a binary mask.
fn mask_from_blob(blob: &[f64]) -> Vec<f64> {
    let peak = blob.iter().cloned().fold(0.0, f64::max);
    blob.iter().map(|&b| f64::from(b >= 0.5 * peak)).collect()
}

fn generate_split(spec: &SyntheticSpec, n: usize, split_id: u32) -> Dataset {
    let size = spec.image_size;
    let rng = &mut stream(spec.seed, Stream::DataSplit { split: split_id });

    // Label assignment: balanced round-robin (±1 per class) shuffled, or
    // weighted draws when class_weights is set.
    let mut labels: Vec<usize> = match &spec.class_weights {
        None => {
            let mut l: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
            l.shuffle(rng);
            l
        }
        Some(w) => {
            let total: f64 = w.iter().sum();
            (0..n)
                .map(|_| {
                    let draw: f64 = rng.gen_range(0.0..total);
                    let mut acc = 0.0;
                    for (c, &wc) in w.iter().enumerate() {
                        acc += wc;
                        if draw < acc {
                            return c;
                        }
                    }
                    spec.classes - 1
                })
                .collect()
        }
    };

    let mut samples = Vec::with_capacity(n);
    for label in labels.drain(..) {
        let corruption: f64 = rng.gen_range(0.0..1.0);
        let (pixels, blob, final_label) = if corruption < spec.ambiguity / 2.0 {
            // Recipe mixture: visually ambiguous, label kept.
            let other = (label + rng.gen_range(1..spec.classes)) % spec.classes;
            let alpha: f64 = rng.gen_range(0.35..=0.65);
            let (own, own_blob) = render(label, spec.classes, size, rng);
            let (oth, _) = render(other, spec.classes, size, rng);
            let mixed: Vec<f64> = own.iter().zip(&oth).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            (mixed, own_blob, label)
        } else if corruption < spec.ambiguity {
            // Label flip: clean image, wrong label.
            let flipped = (label + rng.gen_range(1..spec.classes)) % spec.classes;
            let (pixels, blob) = render(label, spec.classes, size, rng);
            (pixels, blob, flipped)
        } else {
            let (pixels, blob) = render(label, spec.classes, size, rng);
            (pixels, blob, label)
        };

        let with_mask: f64 = rng.gen_range(0.0..1.0);
        let mask = if with_mask < spec.mask_fraction {
            Some(Tensor::new(vec![size, size], mask_from_blob(&blob)))
        } else {
            None
        };
        samples.push(Sample { image: Tensor::new(vec![size, size, 1], pixels), label: final_label, mask });
    }
    Dataset { samples, classes: spec.classes, image_size: size }
}

/// Generate train/val/test splits. Fails when the spec is inconsistent
/// (`classes < 2`, out-of-range fractions).
pub fn generate(spec: &SyntheticSpec) -> crate::Result<GeneratedData> {
    spec.validate()?;
    Ok(GeneratedData {
        train: generate_split(spec, spec.train_samples, 0),
        val: generate_split(spec, spec.val_samples, 1),
        test: generate_split(spec, spec.test_samples, 2),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(ambiguity: f64) -> SyntheticSpec {
        SyntheticSpec {
            classes: 3,
            train_samples: 60,
            val_samples: 12,
            test_samples: 12,
            image_size: 32,
            ambiguity,
            mask_fraction: 1.0,
            seed: 5,
            class_weights: None,
        }
    }

    #[test]
    fn same_spec_is_byte_identical() {
        let a = generate(&small_spec(0.3)).unwrap();
        let b = generate(&small_spec(0.3)).unwrap();
        for (sa, sb) in a.train.samples.iter().zip(&b.train.samples) {
            assert_eq!(sa.label, sb.label);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&sa.image), bits(&sb.image));
        }
    }

    #[test]
    fn labels_balanced_at_zero_ambiguity() {
        let data = generate(&small_spec(0.0)).unwrap();
        let mut counts = vec![0usize; 3];
        for s in &data.train.samples {
            counts[s.label] += 1;
        }
        let min = *counts.iter().min().unwrap() as isize;
        let max = *counts.iter().max().unwrap() as isize;
        assert!(max - min <= 1, "class counts {counts:?}");
    }

    #[test]
    fn masks_binary_and_nonempty() {
        let data = generate(&small_spec(0.4)).unwrap();
        for s in &data.train.samples {
            let m = s.mask.as_ref().expect("mask_fraction = 1");
            assert!(m.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert!(m.data().iter().any(|&v| v == 1.0));
        }
    }

    #[test]
    fn zero_mask_fraction_means_no_masks() {
        let mut spec = small_spec(0.0);
        spec.mask_fraction = 0.0;
        let data = generate(&spec).unwrap();
        assert!(data.train.samples.iter().all(|s| s.mask.is_none()));
    }

    #[test]
    fn too_few_classes_rejected() {
        let mut spec = small_spec(0.0);
        spec.classes = 1;
        assert!(generate(&spec).is_err());
    }

    /// Template-matching classifier with oracle access to the recipes:
    /// scores a test image against each class's rendered templates over a
    /// small grid of nuisance parameters.
    fn template_accuracy(data: &Dataset, classes: usize, size: usize) -> f64 {
        // Noise-free class templates at the canonical center, a few phases.
        let mut templates: Vec<Vec<f64>> = Vec::new();
        let mut template_class = Vec::new();
        for c in 0..classes {
            let rec = recipe(c, classes, size);
            let s = size as f64;
            for phase_idx in 0..6 {
                let phase = std::f64::consts::TAU * phase_idx as f64 / 6.0;
                let blob = blob_field(size, s / 2.0, s / 2.0, &rec);
                let (cos_t, sin_t) = (rec.texture_orientation.cos(), rec.texture_orientation.sin());
                let mut t = vec![0.0; size * size];
                for y in 0..size {
                    for x in 0..size {
                        let tx = (std::f64::consts::TAU * rec.texture_freq * (cos_t * x as f64 + sin_t * y as f64) / s
                            + phase)
                            .sin();
                        t[y * size + x] = 0.15 + blob[y * size + x] * (0.55 + 0.25 * tx);
                    }
                }
                templates.push(t);
                template_class.push(c);
            }
        }
        let mut hits = 0;
        for sample in &data.samples {
            let img = sample.image.data();
            let mut best = (f64::INFINITY, 0usize);
            for (t, &c) in templates.iter().zip(&template_class) {
                let dist: f64 = img.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best.0 {
                    best = (dist, c);
                }
            }
            hits += usize::from(best.1 == sample.label);
        }
        hits as f64 / data.samples.len() as f64
    }

    #[test]
    fn recipe_accuracy_decreases_with_ambiguity() {
        let acc0 = template_accuracy(&generate(&small_spec(0.0)).unwrap().test, 3, 32);
        let acc6 = template_accuracy(&generate(&small_spec(0.6)).unwrap().test, 3, 32);
        assert!(acc0 > acc6 + 0.1, "acc(rho=0)={acc0} vs acc(rho=0.6)={acc6}");
        assert!(acc0 >= 0.9, "clean recipes should be nearly separable, got {acc0}");
    }

    #[test]
    fn linear_probe_reaches_95_percent_on_clean_data() {
        // Multinomial logistic regression on raw pixels, plain gradient
        // descent. Oracle for the "well-separated classes" contract.
        let mut spec = small_spec(0.0);
        spec.train_samples = 240;
        spec.test_samples = 120;
        let data = generate(&spec).unwrap();
        let (c, d) = (3usize, 32 * 32);
        let mut w = vec![0.0; c * d];
        let mut b = vec![0.0; c];
        let lr = 0.5;
        for _epoch in 0..120 {
            let mut gw = vec![0.0; c * d];
            let mut gb = vec![0.0; c];
            for s in &data.train.samples {
                let x = s.image.data();
                let mut logits = vec![0.0; c];
                for ci in 0..c {
                    logits[ci] = b[ci] + w[ci * d..(ci + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for ci in 0..c {
                    let p = exps[ci] / z - f64::from(ci == s.label);
                    gb[ci] += p;
                    for (gwi, xi) in gw[ci * d..(ci + 1) * d].iter_mut().zip(x) {
                        *gwi += p * xi;
                    }
                }
            }
            let n = data.train.samples.len() as f64;
            for (wi, gwi) in w.iter_mut().zip(&gw) {
                *wi -= lr * gwi / n;
            }
            for (bi, gbi) in b.iter_mut().zip(&gb) {
                *bi -= lr * gbi / n;
            }
        }
        let mut hits = 0;
        for s in &data.test.samples {
            let x = s.image.data();
            let mut best = (f64::NEG_INFINITY, 0usize);
            for ci in 0..c {
                let l = b[ci] + w[ci * d..(ci + 1) * d].iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>();
                if l > best.0 {
                    best = (l, ci);
                }
            }
            hits += usize::from(best.1 == s.label);
        }
        let acc = hits as f64 / data.test.samples.len() as f64;
        assert!(acc >= 0.95, "linear probe accuracy {acc}");
    }
}
