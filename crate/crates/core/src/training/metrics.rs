use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

/// Class indices sorted by descending score; ties keep the lower index first.
pub fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Fraction of rows whose label is among the `k` highest scores.
pub fn top_k_accuracy(scores: &Mat, labels: &[usize], k: usize) -> Result<f64> {
    if scores.rows() != labels.len() || scores.rows() == 0 {
        return Err(Error::shape(format!(
            "{} score rows for {} labels",
            scores.rows(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= scores.cols()) {
        return Err(Error::invalid(format!("label {bad} with {} classes", scores.cols())));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, y)| ranked(scores.row(i)).iter().take(k).any(|c| c == y))
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Example-based scores averaged over samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiLabelScores {
    pub acc: f64,
    pub prec: f64,
    pub recall: f64,
    pub f1: f64,
}

/// `num / den`, with an empty denominator scoring 1 only when the
/// numerator is empty as well.
fn ratio(num: usize, den: usize, union: usize) -> f64 {
    if den == 0 {
        if union == 0 {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

/// `predicted` and `truth` are 0/1 matrices `[N, M]`. F1 is the harmonic
/// mean of the averaged precision and recall.
pub fn multi_label_scores(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> Result<MultiLabelScores> {
    if predicted.len() != truth.len() || predicted.is_empty() {
        return Err(Error::shape("prediction and truth sample counts differ"));
    }
    let (mut acc, mut prec, mut recall) = (0.0, 0.0, 0.0);
    for (p, y) in predicted.iter().zip(truth) {
        if p.len() != y.len() {
            return Err(Error::shape("prediction and truth attribute counts differ"));
        }
        let inter = p.iter().zip(y).filter(|(a, b)| **a && **b).count();
        let union = p.iter().zip(y).filter(|(a, b)| **a || **b).count();
        let np = p.iter().filter(|v| **v).count();
        let ny = y.iter().filter(|v| **v).count();
        acc += ratio(inter, union, union);
        prec += ratio(inter, np, union);
        recall += ratio(inter, ny, union);
    }
    let n = predicted.len() as f64;
    let (acc, prec, recall) = (acc / n, prec / n, recall / n);
    let f1 = if prec + recall > 0.0 {
        2.0 * prec * recall / (prec + recall)
    } else {
        0.0
    };
    Ok(MultiLabelScores {
        acc,
        prec,
        recall,
        f1,
    })
}

/// Positive attributes for logits: `σ(z) ≥ 0.5`, i.e. `z ≥ 0`.
pub fn threshold_logits(logits: &Mat) -> Vec<Vec<bool>> {
    (0..logits.rows())
        .map(|i| logits.row(i).iter().map(|&z| z >= 0.0).collect())
        .collect()
}

/// One JSON-lines record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub acc: f64,
    pub top1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top5: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prec: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recall: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
    pub variant: String,
}

/// Scores for single-label logits. `top5` only exists above five classes.
pub fn single_label_metrics(epoch: usize, loss: f64, logits: &Mat, labels: &[usize], variant: &str) -> Result<EpochMetrics> {
    let top1 = top_k_accuracy(logits, labels, 1)?;
    let top5 = if logits.cols() > 5 {
        Some(top_k_accuracy(logits, labels, 5)?)
    } else {
        None
    };
    Ok(EpochMetrics {
        epoch,
        loss,
        acc: top1,
        top1,
        top5,
        prec: None,
        recall: None,
        f1: None,
        variant: variant.into(),
    })
}

/// Scores for multi-label logits; `top1` is the fraction of samples whose
/// highest-scoring attribute is truly present.
pub fn multi_label_metrics(epoch: usize, loss: f64, logits: &Mat, truth: &[Vec<bool>], variant: &str) -> Result<EpochMetrics> {
    let s = multi_label_scores(&threshold_logits(logits), truth)?;
    let hits = truth
        .iter()
        .enumerate()
        .filter(|(i, y)| y[ranked(logits.row(*i))[0]])
        .count();
    Ok(EpochMetrics {
        epoch,
        loss,
        acc: s.acc,
        top1: hits as f64 / truth.len() as f64,
        top5: None,
        prec: Some(s.prec),
        recall: Some(s.recall),
        f1: Some(s.f1),
        variant: variant.into(),
    })
}
