//! Anomaly scoring, threshold verdicts, and Grad-CAM localization.

use serde::{Deserialize, Serialize};

use crate::data::netpbm;
use crate::error::{CladError, Result};
use crate::losses::squared_distance;
use crate::model::{BoundModel, ModelParams, VisualForward};
use crate::numerics::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Normal,
    Anomalous,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreResult {
    pub score: f64,
    pub squared_distance: f64,
    pub verdict: Verdict,
    pub threshold: f64,
}

impl ScoreResult {
    pub fn from_distance(squared_distance: f64, sigma: f64, threshold: f64) -> Result<Self> {
        let score = score_from_distance(squared_distance, sigma)?;
        Ok(ScoreResult {
            score,
            squared_distance,
            verdict: classify(score, threshold),
            threshold,
        })
    }
}

/// Non-negative relevance map at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// `[H, W]`.
    pub values: Tensor<f32>,
    /// Resolution of the activation map before upsampling.
    pub source_resolution: (usize, usize),
}

/// `exp(-d / sigma)`, floored at the smallest positive double so the score
/// never reaches zero.
pub fn score_from_distance(squared_distance: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(CladError::usage(format!("sigma must be positive, got {sigma}")));
    }
    Ok((-squared_distance / sigma).exp().max(f64::MIN_POSITIVE))
}

/// `exp(-‖z_v − z_t‖² / sigma)`.
pub fn anomaly_score<S: Scalar>(z_v: &Tensor<S>, z_t: &Tensor<S>, sigma: f64) -> Result<f64> {
    if z_v.shape() != z_t.shape() {
        return Err(CladError::dim(
            "anomaly_score",
            "embedding",
            format!("{:?}", z_v.shape()),
            format!("{:?}", z_t.shape()),
        ));
    }
    score_from_distance(embedding_distance(z_v, z_t), sigma)
}

/// `‖z_v − z_t‖²` accumulated in double precision.
pub fn embedding_distance<S: Scalar>(z_v: &Tensor<S>, z_t: &Tensor<S>) -> f64 {
    z_v.data()
        .iter()
        .zip(z_t.data())
        .map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2))
        .sum()
}

/// Anomalous iff the score is strictly below the threshold.
pub fn classify(score: f64, threshold: f64) -> Verdict {
    if score < threshold {
        Verdict::Anomalous
    } else {
        Verdict::Normal
    }
}

/// `ReLU(Σ_k cam_weights_k · A_k)` with `cam_weights_k` the spatial mean of
/// the k-th gradient channel, upsampled by nearest neighbour to `out_size`.
pub fn cam_from_gradients<S: Scalar>(activations: &Tensor<S>, grads: &Tensor<S>, out_size: (usize, usize)) -> Result<Heatmap> {
    let &[k, h, w] = activations.shape() else {
        return Err(CladError::dim("grad_cam", "activation rank", 3, activations.shape().len()));
    };
    if grads.shape() != activations.shape() {
        return Err(CladError::dim(
            "grad_cam",
            "gradient shape",
            format!("{:?}", activations.shape()),
            format!("{:?}", grads.shape()),
        ));
    }
    let plane = h * w;
    let cam_weights: Vec<f64> = grads
        .data()
        .chunks(plane)
        .map(|ch| ch.iter().map(|g| g.as_f64()).sum::<f64>() / plane as f64)
        .collect();
    let a = activations.data();
    let raw: Vec<f64> = (0..plane)
        .map(|p| {
            let s: f64 = (0..k).map(|c| cam_weights[c] * a[c * plane + p].as_f64()).sum();
            s.max(0.0)
        })
        .collect();
    let (oh, ow) = out_size;
    let mut values = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = y * h / oh;
        for x in 0..ow {
            values.push(raw[sy * w + x * w / ow] as f32);
        }
    }
    Ok(Heatmap {
        values: Tensor::new(vec![oh, ow], values)?,
        source_resolution: (h, w),
    })
}

/// Grad-CAM over the last convolutional activations with the squared
/// visual-textual distance as target. Consumes the tape's backward pass.
pub fn grad_cam<S: Scalar>(model: &mut BoundModel<S>, forward: &VisualForward, z_t: Var) -> Result<Heatmap> {
    if model.tape.is_consumed() {
        return Err(CladError::usage("grad_cam: tape already consumed by a backward pass"));
    }
    if !model.tape.is_tracked(forward.activations) {
        return Err(CladError::usage("grad_cam: activations are not gradient-tracked"));
    }
    let target = squared_distance(&mut model.tape, forward.z_v, z_t)?;
    model.tape.backward(target)?;
    let grads = model
        .tape
        .grad(forward.activations)
        .expect("tracked activations have a gradient after backward");
    let size = model.arch().image_size;
    cam_from_gradients(model.tape.value(forward.activations), &grads, (size, size))
}

/// Min-max normalization to [0, 1]; a constant map becomes all zeros.
pub fn normalize_min_max(map: &Tensor<f32>) -> Tensor<f32> {
    let (lo, hi) = map
        .data()
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return map.map(|_| 0.0);
    }
    let span = hi - lo;
    map.map(|v| ((v - lo) / span).clamp(0.0, 1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Localization {
    pub result: ScoreResult,
    pub heatmap: Heatmap,
    /// Heatmap normalized to [0, 1].
    pub pixel_scores: Tensor<f32>,
}

/// Score without localization.
pub fn score_image<S: Scalar>(
    params: &ModelParams<S>,
    image: &Tensor<S>,
    tokens: &[usize],
    sigma: f64,
    threshold: f64,
) -> Result<ScoreResult> {
    let mut model = BoundModel::new(params, false);
    let f = model.encode_image(image, false)?;
    let z_t = model.encode_text(tokens)?;
    let d = embedding_distance(model.tape.value(f.z_v), model.tape.value(z_t));
    ScoreResult::from_distance(d, sigma, threshold)
}

/// Runs both encoders, scores the pair, and explains the distance with Grad-CAM.
pub fn localize<S: Scalar>(
    params: &ModelParams<S>,
    image: &Tensor<S>,
    tokens: &[usize],
    sigma: f64,
    threshold: f64,
) -> Result<Localization> {
    let mut model = BoundModel::new(params, false);
    // only the image is tracked, so the backward pass stops at the activations' inputs
    let f = model.encode_image(image, true)?;
    let z_t = model.encode_text(tokens)?;
    let heatmap = grad_cam(&mut model, &f, z_t)?;
    let d = embedding_distance(model.tape.value(f.z_v), model.tape.value(z_t));
    let result = ScoreResult::from_distance(d, sigma, threshold)?;
    let pixel_scores = normalize_min_max(&heatmap.values);
    Ok(Localization {
        result,
        heatmap,
        pixel_scores,
    })
}

/// 8-bit P5 encoding of a [0, 1] map, rounding half up.
pub fn heatmap_pgm(pixel_scores: &Tensor<f32>) -> Result<Vec<u8>> {
    netpbm::encode_gray(pixel_scores)
}
