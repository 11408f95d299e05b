//! Procedural industrial textures with injected defects.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::data::vocab::{build_vocab, tokenize};
use crate::data::{Dataset, Label, Sample};
use crate::error::{CladError, Result};
use crate::numerics::Tensor;
use crate::rng::{derive_seed, Rng};

/// Clean pixels stay inside [TEXTURE_LO - JITTER, TEXTURE_HI + JITTER], so any
/// defect offset of at least 0.3 moves a pixel by at least 0.3 after clamping.
const TEXTURE_LO: f64 = 0.36;
const TEXTURE_HI: f64 = 0.64;
const JITTER: f64 = 0.05;
const MAX_DEFECT_FRACTION: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    Stripes,
    Checker,
    Blotch,
    Gradient,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Stripes, Category::Checker, Category::Blotch, Category::Gradient];

    pub fn name(self) -> &'static str {
        match self {
            Category::Stripes => "stripes",
            Category::Checker => "checker",
            Category::Blotch => "blotch",
            Category::Gradient => "gradient",
        }
    }

    pub fn descriptor(self) -> String {
        format!("uniform {} texture no defects", self.name())
    }

    fn index(self) -> u64 {
        Category::ALL.iter().position(|&c| c == self).unwrap() as u64
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = CladError;

    fn from_str(s: &str) -> Result<Self> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| CladError::usage(format!("unknown category {s:?} (expected stripes, checker, blotch or gradient)")))
    }
}

/// Which split a generated sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    TestNormal,
    TestAnomalous,
}

impl Split {
    fn stream(self, index: usize) -> u64 {
        let base = match self {
            Split::Train => 1u64,
            Split::TestNormal => 2,
            Split::TestAnomalous => 3,
        };
        (base << 32) | index as u64
    }

    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train/normal",
            Split::TestNormal => "test/normal",
            Split::TestAnomalous => "test/anomalous",
        }
    }
}

/// Sample counts per split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Counts {
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
}

impl Default for Counts {
    fn default() -> Self {
        Counts {
            train: 64,
            test_normal: 16,
            test_anomalous: 16,
        }
    }
}

impl FromStr for Counts {
    type Err = CladError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| CladError::usage(format!("counts must be three integers a,b,c, got {s:?}")))?;
        match parts[..] {
            [train, test_normal, test_anomalous] => Ok(Counts {
                train,
                test_normal,
                test_anomalous,
            }),
            _ => Err(CladError::usage(format!("counts must be three integers a,b,c, got {s:?}"))),
        }
    }
}

fn base_texture(seed: u64, category: Category, size: usize) -> Vec<f64> {
    let unit: Vec<f64> = match category {
        Category::Stripes => (0..size * size)
            .map(|i| 0.5 + 0.5 * (2.0 * PI * (i / size) as f64 / 8.0).sin())
            .collect(),
        Category::Checker => (0..size * size)
            .map(|i| (((i / size) / 8 + (i % size) / 8) % 2) as f64)
            .collect(),
        Category::Gradient => (0..size * size)
            .map(|i| (i % size) as f64 / (size - 1).max(1) as f64)
            .collect(),
        Category::Blotch => value_noise(&mut Rng::seeded(derive_seed(seed, 0)), size),
    };
    unit.into_iter()
        .map(|v| TEXTURE_LO + (TEXTURE_HI - TEXTURE_LO) * v)
        .collect()
}

/// Smoothstep-interpolated lattice noise in [0, 1].
fn value_noise(rng: &mut Rng, size: usize) -> Vec<f64> {
    let cell = (size / 4).max(2);
    let n = size / cell + 2;
    let lattice: Vec<f64> = (0..n * n).map(|_| rng.uniform()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (gx, gy) = (x / cell, y / cell);
            let tx = smooth((x % cell) as f64 / cell as f64);
            let ty = smooth((y % cell) as f64 / cell as f64);
            let at = |i: usize, j: usize| lattice[j * n + i];
            let top = at(gx, gy) * (1.0 - tx) + at(gx + 1, gy) * tx;
            let bottom = at(gx, gy + 1) * (1.0 - tx) + at(gx + 1, gy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

fn jittered(base: &[f64], rng: &mut Rng) -> Vec<f64> {
    base.iter()
        .map(|&b| (b + rng.range(-JITTER, JITTER)).clamp(0.0, 1.0))
        .collect()
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Rect,
    Ellipse,
    Scratch,
}

fn defect_support(rng: &mut Rng, size: usize) -> Vec<usize> {
    let s = size as f64;
    let shape = [Shape::Rect, Shape::Ellipse, Shape::Scratch][rng.below(3)];
    let mut pixels = Vec::new();
    match shape {
        Shape::Rect => {
            let (lo, hi) = ((size / 16).max(1), (size / 4).max(1));
            let (w, h) = (rng.between(lo, hi), rng.between(lo, hi));
            let (x0, y0) = (rng.below(size - w + 1), rng.below(size - h + 1));
            for y in y0..y0 + h {
                for x in x0..x0 + w {
                    pixels.push(y * size + x);
                }
            }
        }
        Shape::Ellipse => {
            let (lo, hi) = ((size / 32).max(1), (size / 8).max(1));
            let (rx, ry) = (rng.between(lo, hi), rng.between(lo, hi));
            let cx = rng.between(rx, size - 1 - rx);
            let cy = rng.between(ry, size - 1 - ry);
            for y in cy - ry..=cy + ry {
                for x in cx - rx..=cx + rx {
                    let dx = (x as f64 - cx as f64) / rx as f64;
                    let dy = (y as f64 - cy as f64) / ry as f64;
                    if dx * dx + dy * dy <= 1.0 {
                        pixels.push(y * size + x);
                    }
                }
            }
        }
        Shape::Scratch => {
            let length = rng.range(s / 4.0, s / 2.0);
            let angle = rng.range(0.0, PI);
            let (ax, ay) = (rng.range(0.0, s), rng.range(0.0, s));
            let (bx, by) = (ax + length * angle.cos(), ay + length * angle.sin());
            for y in 0..size {
                for x in 0..size {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    if segment_distance(px, py, ax, ay, bx, by) < 1.0 {
                        pixels.push(y * size + x);
                    }
                }
            }
        }
    }
    pixels
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - ax) * dx + (py - ay) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((px - qx).powi(2) + (py - qy).powi(2)).sqrt()
}

/// Clean image of one generated sample: base texture plus its pixel jitter.
pub fn clean_image(seed: u64, category: Category, image_size: usize, split: Split, index: usize) -> Tensor<f32> {
    let base = base_texture(seed, category, image_size);
    let mut rng = Rng::seeded(derive_seed(seed, split.stream(index)));
    to_image(&jittered(&base, &mut rng), image_size)
}

fn to_image(values: &[f64], size: usize) -> Tensor<f32> {
    Tensor::new(vec![1, size, size], values.iter().map(|&v| v as f32).collect()).expect("square image")
}

fn render(base: &[f64], seed: u64, split: Split, index: usize, size: usize) -> (Tensor<f32>, Option<Tensor<f32>>) {
    let mut rng = Rng::seeded(derive_seed(seed, split.stream(index)));
    let clean = jittered(base, &mut rng);
    if split != Split::TestAnomalous {
        return (to_image(&clean, size), None);
    }
    let mut pixels = clean.clone();
    let mut mask = vec![0.0f32; size * size];
    let mut covered = 0usize;
    let budget = (MAX_DEFECT_FRACTION * (size * size) as f64) as usize;
    for _ in 0..rng.between(1, 3) {
        let support = defect_support(&mut rng, size);
        let magnitude = rng.range(0.3, 0.6);
        let offset = if rng.below(2) == 0 { magnitude } else { -magnitude };
        let fresh = support.iter().filter(|&&p| mask[p] == 0.0).count();
        if covered + fresh > budget {
            continue;
        }
        covered += fresh;
        for p in support {
            pixels[p] = (clean[p] + offset).clamp(0.0, 1.0);
            mask[p] = 1.0;
        }
    }
    let mask = Tensor::new(vec![size, size], mask).expect("square mask");
    (to_image(&pixels, size), Some(mask))
}

/// Deterministic dataset for one texture category.
pub fn generate_synthetic(seed: u64, category: Category, counts: Counts, image_size: usize) -> Result<Dataset> {
    if counts.train == 0 {
        return Err(CladError::usage("the training split needs at least one sample"));
    }
    if image_size < 8 || image_size % 8 != 0 {
        return Err(CladError::usage(format!("image size must be a positive multiple of 8, got {image_size}")));
    }
    // decorrelate categories generated from the same seed
    let seed = derive_seed(seed, 0xC0DE_0000 + category.index());
    let base = base_texture(seed, category, image_size);
    let descriptor = category.descriptor();
    let vocab = build_vocab(&descriptor);
    let tokens = tokenize(&descriptor, &vocab)?;
    let make = |split: Split, n: usize| -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let (image, mask) = render(&base, seed, split, i, image_size);
                Sample {
                    id: format!("{}/{i:03}", split.dir()),
                    image,
                    tokens: tokens.clone(),
                    label: if split == Split::TestAnomalous {
                        Label::Anomalous
                    } else {
                        Label::Normal
                    },
                    mask,
                }
            })
            .collect()
    };
    Ok(Dataset {
        category: category.name().to_string(),
        descriptor: descriptor.clone(),
        image_size,
        channels: 1,
        vocab: vocab.clone(),
        train_normal: make(Split::Train, counts.train),
        test_normal: make(Split::TestNormal, counts.test_normal),
        test_anomalous: make(Split::TestAnomalous, counts.test_anomalous),
    })
}

/// The internal per-category seed used by [`generate_synthetic`]; exposed so
/// callers can regenerate clean images with [`clean_image`].
pub fn category_seed(seed: u64, category: Category) -> u64 {
    derive_seed(seed, 0xC0DE_0000 + category.index())
}
