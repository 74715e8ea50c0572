//! Categorical cross-entropy and the weighted multi-task sum.

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logs.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CrossEntropy {
    pub loss: f64,
    /// True when a probability at a true class had to be raised to [`LOG_FLOOR`].
    pub floored: bool,
}

pub fn one_hot(class: usize, classes: usize) -> Vec<f64> {
    let mut v = vec![0.0; classes];
    v[class] = 1.0;
    v
}

/// `-Σ y_i ln ŷ_i` for one sample.
pub fn cross_entropy(pred: &[f64], truth: &[f64]) -> Result<CrossEntropy> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "cross entropy over {} predictions and {} targets",
            pred.len(),
            truth.len()
        )));
    }
    let mut loss = 0.0;
    let mut floored = false;
    for (&p, &y) in pred.iter().zip(truth) {
        if y == 0.0 {
            continue;
        }
        if !p.is_finite() {
            return Err(Error::Numerical(format!("non-finite probability {p}")));
        }
        let q = if p < LOG_FLOOR {
            floored = true;
            LOG_FLOOR
        } else {
            p
        };
        loss -= y * q.ln();
    }
    Ok(CrossEntropy { loss, floored })
}

/// Gradient of [`cross_entropy`] with respect to the probabilities.
pub fn cross_entropy_grad(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter()
        .zip(truth)
        .map(|(&p, &y)| if y == 0.0 { 0.0 } else { -y / p.max(LOG_FLOOR) })
        .collect()
}

/// Gradient of softmax followed by cross-entropy with respect to the logits.
pub fn softmax_cross_entropy_grad(pred: &[f64], truth: &[f64]) -> Vec<f64> {
    pred.iter().zip(truth).map(|(p, y)| p - y).collect()
}

/// `Σ_k α_k · L_k`.
pub fn multitask_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} task losses but {} task weights",
            losses.len(),
            weights.len()
        )));
    }
    if losses.is_empty() {
        return Err(Error::Shape("multi-task loss over zero tasks".into()));
    }
    Ok(losses.iter().zip(weights).map(|(l, a)| l * a).sum())
}
