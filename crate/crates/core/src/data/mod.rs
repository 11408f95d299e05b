//! Samples, datasets, synthetic generation, and dataset directories on disk.

mod io;
pub mod netpbm;
mod synth;
mod vocab;

use serde::{Deserialize, Serialize};

pub use io::{load_dataset, write_dataset};
pub use synth::{category_seed, clean_image, generate_synthetic, Category, Counts, Split};
pub use vocab::{bag_of_words, build_vocab, tokenize, words, UNK_TOKEN};

use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Normal,
    Anomalous,
}

impl Label {
    pub fn is_anomalous(self) -> bool {
        self == Label::Anomalous
    }
}

/// One image with its descriptor tokens and, for anomalous test images, a defect mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// Stable name, `<split dir>/<basename>`.
    pub id: String,
    /// `[C, H, W]` in [0, 1].
    pub image: Tensor<f32>,
    /// Descriptor ids against the owning dataset's vocabulary.
    pub tokens: Vec<usize>,
    pub label: Label,
    /// `[H, W]` of {0, 1}.
    pub mask: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub category: String,
    pub descriptor: String,
    pub image_size: usize,
    pub channels: usize,
    pub vocab: Vec<String>,
    pub train_normal: Vec<Sample>,
    pub test_normal: Vec<Sample>,
    pub test_anomalous: Vec<Sample>,
}

impl Dataset {
    /// Test samples, normal first.
    pub fn test_samples(&self) -> impl Iterator<Item = &Sample> {
        self.test_normal.iter().chain(&self.test_anomalous)
    }
}
