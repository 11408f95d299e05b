//! Dataset directory layout:
//!
//! ```text
//! meta.json
//! train/normal/NNN.pgm
//! test/normal/NNN.pgm
//! test/anomalous/NNN.pgm
//! test/masks/NNN.pgm
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::netpbm;
use crate::data::vocab::{build_vocab, tokenize};
use crate::data::{Dataset, Label, Sample};
use crate::error::{CladError, Result};
use crate::numerics::Tensor;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    category: String,
    descriptor: String,
    image_size: usize,
    channels: usize,
}

fn image_ext(channels: usize) -> &'static str {
    if channels == 3 {
        "ppm"
    } else {
        "pgm"
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CladError::io(path, e))
}

fn basename(id: &str) -> &str {
    id.rsplit('/').next().unwrap_or(id)
}

/// Writes `dataset` under `root`, creating directories as needed.
pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    for dir in ["train/normal", "test/normal", "test/anomalous", "test/masks"] {
        let p = root.join(dir);
        fs::create_dir_all(&p).map_err(|e| CladError::io(&p, e))?;
    }
    let meta = Meta {
        category: dataset.category.clone(),
        descriptor: dataset.descriptor.clone(),
        image_size: dataset.image_size,
        channels: dataset.channels,
    };
    let mut json = serde_json::to_string_pretty(&meta)?;
    json.push('\n');
    write_file(&root.join("meta.json"), json.as_bytes())?;
    let ext = image_ext(dataset.channels);
    let splits = [
        ("train/normal", &dataset.train_normal),
        ("test/normal", &dataset.test_normal),
        ("test/anomalous", &dataset.test_anomalous),
    ];
    for (dir, samples) in splits {
        for s in samples {
            let name = basename(&s.id);
            write_file(&root.join(dir).join(format!("{name}.{ext}")), &netpbm::encode(&s.image)?)?;
            if let Some(mask) = &s.mask {
                write_file(&root.join("test/masks").join(format!("{name}.pgm")), &netpbm::encode_gray(mask)?)?;
            }
        }
    }
    Ok(())
}

fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| CladError::io(path, e))?;
    netpbm::decode(&bytes, path)
}

/// Image files of a split directory sorted by name; a missing directory is empty.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let entries = fs::read_dir(dir).map_err(|e| CladError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CladError::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or_default();
        if path.is_file() && (ext == "pgm" || ext == "ppm") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

/// Loads a dataset directory, validating sizes against `meta.json` and
/// pairing every anomalous image with its mask.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| CladError::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text)
        .map_err(|e| CladError::integrity(format!("{}: {e}", meta_path.display())))?;
    let vocab = build_vocab(&meta.descriptor);
    let tokens = tokenize(&meta.descriptor, &vocab)?;
    let expected = [meta.channels, meta.image_size, meta.image_size];
    let train_dir = root.join("train/normal");
    if !train_dir.is_dir() {
        return Err(CladError::integrity(format!("missing directory {}", train_dir.display())));
    }

    let load_split = |dir: &str, label: Label| -> Result<Vec<Sample>> {
        let mut samples = Vec::new();
        for path in list_images(&root.join(dir))? {
            let image = read_image(&path)?;
            if image.shape() != expected {
                return Err(CladError::integrity(format!(
                    "{}: shape {:?} does not match meta.json {:?}",
                    path.display(),
                    image.shape(),
                    expected
                )));
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            let mask = if label == Label::Anomalous {
                let mask_path = root.join("test/masks").join(format!("{stem}.pgm"));
                if !mask_path.is_file() {
                    return Err(CladError::integrity(format!(
                        "anomalous image {} has no mask {}",
                        path.display(),
                        mask_path.display()
                    )));
                }
                let raw = read_image(&mask_path)?;
                if raw.shape() != [1, meta.image_size, meta.image_size] {
                    return Err(CladError::integrity(format!(
                        "{}: mask shape {:?} does not match image size {}",
                        mask_path.display(),
                        raw.shape(),
                        meta.image_size
                    )));
                }
                let bits = raw.map(|v| if v > 0.5 { 1.0 } else { 0.0 });
                if !bits.data().contains(&1.0) {
                    return Err(CladError::integrity(format!("{}: mask is empty", mask_path.display())));
                }
                Some(bits.reshape(&[meta.image_size, meta.image_size])?)
            } else {
                None
            };
            samples.push(Sample {
                id: format!("{dir}/{stem}"),
                image,
                tokens: tokens.clone(),
                label,
                mask,
            });
        }
        Ok(samples)
    };

    Ok(Dataset {
        category: meta.category.clone(),
        descriptor: meta.descriptor.clone(),
        image_size: meta.image_size,
        channels: meta.channels,
        vocab,
        train_normal: load_split("train/normal", Label::Normal)?,
        test_normal: load_split("test/normal", Label::Normal)?,
        test_anomalous: load_split("test/anomalous", Label::Anomalous)?,
    })
}
