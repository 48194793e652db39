use crate::error::{Error, Result};
use crate::tensor::Mat;

pub const DEFAULT_PROB_EPS: f64 = 1e-7;

/// Binary cross-entropy of one prediction, `ŷ` clamped into `[ε, 1 - ε]`.
pub fn cross_entropy(y: bool, y_hat: f64, eps: f64) -> f64 {
    let p = y_hat.clamp(eps, 1.0 - eps);
    if y {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Multi-class form: negative log of the clamped probability of `label`.
pub fn softmax_cross_entropy(probs: &[f64], label: usize, eps: f64) -> f64 {
    -probs[label].clamp(eps, 1.0 - eps).ln()
}

/// Attribute-weighted binary cross-entropy averaged over samples.
pub fn weighted_cross_entropy(targets: &Mat, probs: &Mat, weights: &[f64], eps: f64) -> Result<f64> {
    if targets.shape() != probs.shape() {
        return Err(Error::shape(format!(
            "targets {:?} vs probabilities {:?}",
            targets.shape(),
            probs.shape()
        )));
    }
    if weights.len() != targets.cols() {
        return Err(Error::shape(format!(
            "{} weights for {} attributes",
            weights.len(),
            targets.cols()
        )));
    }
    if weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
        return Err(Error::invalid("attribute weights must be positive"));
    }
    if targets.rows() == 0 {
        return Err(Error::invalid("no samples"));
    }
    Ok(weighted_cross_entropy_unchecked(targets, probs, weights, eps))
}

pub(crate) fn weighted_cross_entropy_unchecked(targets: &Mat, probs: &Mat, weights: &[f64], eps: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..targets.rows() {
        for (j, w) in weights.iter().enumerate() {
            let y = targets[(i, j)];
            let p = probs[(i, j)].clamp(eps, 1.0 - eps);
            total += w * (y * p.ln() + (1.0 - y) * (1.0 - p).ln());
        }
    }
    -total / targets.rows() as f64
}

/// Inverse positive-frequency weights, normalized to mean 1. Attributes
/// never observed positive count as seen once.
pub fn inverse_frequency_weights(targets: &Mat) -> Vec<f64> {
    let n = targets.rows().max(1) as f64;
    let inv: Vec<f64> = (0..targets.cols())
        .map(|j| {
            let positives: f64 = (0..targets.rows()).map(|i| targets[(i, j)]).sum();
            n / positives.max(1.0)
        })
        .collect();
    let mean = inv.iter().sum::<f64>() / inv.len().max(1) as f64;
    inv.into_iter().map(|w| w / mean).collect()
}
