//! Image- and pixel-level metrics, the evaluation protocol, and the ablation runner.

mod ablation;
mod metrics;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{tokenize, Dataset, Label, Sample};
use crate::error::{CladError, Result};
use crate::model::{Config, ModelParams};
use crate::numerics::Tensor;
use crate::scoring::{classify, localize, score_image, Verdict};

pub use ablation::{ablate, ablate_with, AblationResult, Variant, VariantSummary};
pub use metrics::{binarize, iou, mean_std, pixel_auc, quantile, roc_auc};

/// Quantile of validation-normal scores used as the decision threshold.
pub const THRESHOLD_QUANTILE: f64 = 0.05;
pub const CSV_HEADER: &str = "name,image_auc_mean,image_auc_std,pixel_auc_mean,pixel_auc_std,iou";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScore {
    pub id: String,
    pub score: f64,
    pub squared_distance: f64,
    pub label: Label,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_auc: f64,
    pub pixel_auc: f64,
    pub iou: f64,
    /// Heatmap cutoff chosen on the validation anomalous samples.
    pub iou_cutoff: f64,
    pub threshold: f64,
    pub samples: Vec<SampleScore>,
    pub config_hash: String,
    pub seed: u64,
    pub runtime_seconds: f64,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_csv(&self, name: &str) -> String {
        format!(
            "{CSV_HEADER}\n{name},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            self.image_auc, 0.0, self.pixel_auc, 0.0, self.iou
        )
    }
}

/// Table row `name & mean±std & mean±std`, metrics given as fractions and shown in percent.
pub fn render_row(name: &str, image_auc: (f64, f64), pixel_auc: (f64, f64)) -> String {
    let cell = |(m, s): (f64, f64)| format!("{:.1}±{:.1}", 100.0 * m, 100.0 * s);
    format!("{name} & {} & {}", cell(image_auc), cell(pixel_auc))
}

/// Even-indexed members of a split; these calibrate the threshold and the IoU cutoff.
pub fn validation_subset(samples: &[Sample]) -> impl Iterator<Item = &Sample> {
    samples.iter().step_by(2)
}

/// Model-vocabulary tokens of the dataset descriptor.
fn descriptor_tokens(data: &Dataset, config: &Config) -> Result<Vec<usize>> {
    tokenize(&data.descriptor, &config.vocab)
}

/// Threshold from validation normals, or from the training normals when the
/// dataset has no normal test images.
pub fn calibrate_threshold(params: &ModelParams, data: &Dataset, config: &Config) -> Result<f64> {
    let tokens = descriptor_tokens(data, config)?;
    let pool: Vec<&Sample> = if data.test_normal.is_empty() {
        data.train_normal.iter().collect()
    } else {
        validation_subset(&data.test_normal).collect()
    };
    let scores: Vec<f64> = pool
        .iter()
        .map(|s| Ok(score_image(params, &s.image, &tokens, config.sigma, 0.0)?.score))
        .collect::<Result<_>>()?;
    quantile(&scores, THRESHOLD_QUANTILE)
}

pub fn evaluate(params: &ModelParams, data: &Dataset, config: &Config) -> Result<EvalReport> {
    let start = Instant::now();
    if data.test_normal.is_empty() || data.test_anomalous.is_empty() {
        return Err(CladError::usage("evaluation needs normal and anomalous test samples"));
    }
    let tokens = descriptor_tokens(data, config)?;
    let mut samples = Vec::new();
    let mut heatmaps = Vec::new();
    let mut masks = Vec::new();
    for s in data.test_samples() {
        let loc = localize(params, &s.image, &tokens, config.sigma, 0.0)?;
        let mask = match (&s.mask, s.label) {
            (Some(m), _) => m.clone(),
            (None, Label::Normal) => Tensor::zeros(loc.pixel_scores.shape()),
            (None, Label::Anomalous) => return Err(CladError::usage(format!("anomalous sample {} has no mask", s.id))),
        };
        samples.push(SampleScore {
            id: s.id.clone(),
            score: loc.result.score,
            squared_distance: loc.result.squared_distance,
            label: s.label,
            verdict: Verdict::Normal,
        });
        heatmaps.push(loc.pixel_scores);
        masks.push(mask);
    }
    let n_normal = data.test_normal.len();
    let val_normal: Vec<f64> = samples[..n_normal].iter().step_by(2).map(|s| s.score).collect();
    let threshold = quantile(&val_normal, THRESHOLD_QUANTILE)?;
    for s in &mut samples {
        s.verdict = classify(s.score, threshold);
    }
    let scores: Vec<f64> = samples.iter().map(|s| s.score).collect();
    let labels: Vec<bool> = samples.iter().map(|s| s.label.is_anomalous()).collect();
    let image_auc = roc_auc(&scores, &labels, true)?;
    let pixel_auc = pixel_auc(&heatmaps, &masks)?;

    let anomalous: Vec<(&Tensor<f32>, &Tensor<f32>)> = heatmaps[n_normal..].iter().zip(&masks[n_normal..]).collect();
    let mean_iou = |items: &[&(&Tensor<f32>, &Tensor<f32>)], cutoff: f64| {
        items.iter().map(|(h, m)| iou(&binarize(h, cutoff), m)).sum::<f64>() / items.len() as f64
    };
    let validation: Vec<_> = anomalous.iter().step_by(2).collect();
    let mut iou_cutoff = 0.05;
    let mut best = f64::NEG_INFINITY;
    for k in 1..=19 {
        let cutoff = k as f64 / 20.0;
        let v = mean_iou(&validation, cutoff);
        if v > best {
            best = v;
            iou_cutoff = cutoff;
        }
    }
    let all: Vec<_> = anomalous.iter().collect();
    let iou = mean_iou(&all, iou_cutoff);

    Ok(EvalReport {
        image_auc,
        pixel_auc,
        iou,
        iou_cutoff,
        threshold,
        samples,
        config_hash: config.hash(),
        seed: config.seed,
        runtime_seconds: start.elapsed().as_secs_f64(),
    })
}
