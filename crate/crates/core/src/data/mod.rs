//! Datasets: synthetic generation, binary tensor files, PGM images, and
//! manifest-driven loading.

mod files;
mod synth;

pub use files::{
    load_dataset_dir, load_image_dir, read_pgm, read_tensor, save_dataset, write_pgm, write_tensor, write_tensor_u8,
};
pub use synth::{generate, GeneratedData, SyntheticSpec};

use crate::tensor::Tensor;

/// Nearest-neighbor resample of a full-resolution `[H, W]` map onto a token
/// grid.
pub fn resample_for_grid(map: &Tensor, h: usize, w: usize) -> Tensor {
    files::resample_nearest(map, h, w)
}

/// One labelled image with an optional binary tissue mask.
#[derive(Debug, Clone)]
pub struct Sample {
    /// `[H, W, 1]`, values in [0, 1].
    pub image: Tensor,
    pub label: usize,
    /// `[H, W]` binary mask, when supervision exists for this sample.
    pub mask: Option<Tensor>,
}

/// An immutable split of samples with consistent shapes.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: usize,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }
}
