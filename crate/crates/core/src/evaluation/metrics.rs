use crate::error::{CladError, Result};
use crate::numerics::Tensor;

/// Rank-based ROC AUC with tied evidence counted as half a correct pair.
///
/// `labels[i]` marks the positive class. With `positive_means_low_score`
/// the evidence for the positive class is `-score`.
pub fn roc_auc(scores: &[f64], labels: &[bool], positive_means_low_score: bool) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(CladError::dim("roc_auc", "labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(CladError::usage("roc_auc needs both classes"));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(CladError::usage(format!("roc_auc got a non-numeric score {s}")));
    }
    let evidence: Vec<f64> = if positive_means_low_score {
        scores.iter().map(|s| -s).collect()
    } else {
        scores.to_vec()
    };
    let mut order: Vec<usize> = (0..evidence.len()).collect();
    order.sort_by(|&a, &b| evidence[a].total_cmp(&evidence[b]));
    // rank sum of positives, ties sharing their mean rank (1-based)
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && evidence[order[j]] == evidence[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j + 1) as f64 / 2.0;
        let tied_positives = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += mid_rank * tied_positives as f64;
        i = j;
    }
    let p = positives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

/// ROC AUC over every pixel of every map, defect pixels positive.
pub fn pixel_auc(heatmaps: &[Tensor<f32>], masks: &[Tensor<f32>]) -> Result<f64> {
    if heatmaps.len() != masks.len() {
        return Err(CladError::dim("pixel_auc", "mask count", heatmaps.len(), masks.len()));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (h, m) in heatmaps.iter().zip(masks) {
        if h.shape() != m.shape() {
            return Err(CladError::dim(
                "pixel_auc",
                "mask shape",
                format!("{:?}", h.shape()),
                format!("{:?}", m.shape()),
            ));
        }
        scores.extend(h.data().iter().map(|&v| v as f64));
        labels.extend(m.data().iter().map(|&v| v > 0.5));
    }
    if !labels.iter().any(|&l| l) {
        return Err(CladError::usage("pixel_auc needs at least one defect pixel"));
    }
    roc_auc(&scores, &labels, false)
}

/// `|A ∩ B| / |A ∪ B|` over cells above 0.5; two empty masks score 1.
pub fn iou(pred: &Tensor<f32>, truth: &Tensor<f32>) -> f64 {
    assert_eq!(pred.shape(), truth.shape(), "iou on unequal mask shapes");
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in pred.data().iter().zip(truth.data()) {
        let (a, b) = (a > 0.5, b > 0.5);
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Cells of `map` at or above `cutoff` become 1.
pub fn binarize(map: &Tensor<f32>, cutoff: f64) -> Tensor<f32> {
    map.map(|v| if v as f64 >= cutoff { 1.0 } else { 0.0 })
}

/// Linearly interpolated `q`-quantile, `q` in [0, 1].
pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(CladError::usage("quantile of an empty set"));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64))
}

/// Mean and sample standard deviation (`n − 1`; zero for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
