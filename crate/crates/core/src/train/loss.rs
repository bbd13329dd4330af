//! Training losses with their logit gradients.
//!
//! Classification uses softmax cross-entropy against a label-smoothed
//! target (the smoothed target is the (1-eps) one-hot / eps uniform
//! mixture, so `loss = (1-eps) CE(true) + eps mean_k CE(k)` holds as an
//! identity). Detection is independent per-class sigmoid binary
//! cross-entropy, since proposals are multi-label.

use std::collections::BTreeSet;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::scalar::Float;

/// Loss hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub label_smoothing: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            label_smoothing: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        Ok(())
    }
}

fn log_sum_exp<F: Float>(logits: &Array1<F>) -> F {
    let max = logits.iter().cloned().fold(F::neg_infinity(), F::max);
    let sum: F = logits.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Smoothed softmax cross-entropy for one example; also returns d loss / d logits.
pub fn classification_loss_grad<F: Float>(
    logits: &Array1<F>,
    label: u32,
    smoothing: f64,
) -> Result<(F, Array1<F>)> {
    let k = logits.len();
    if (label as usize) >= k {
        return Err(Error::Config(format!("label {label} outside [0, {k})")));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classification logits".into()));
    }
    let eps = F::from_f64(smoothing);
    let uniform = eps / F::from_usize(k);
    let lse = log_sum_exp(logits);
    let mut loss = F::zero();
    let mut grad = Array1::zeros(k);
    for (i, &x) in logits.iter().enumerate() {
        let target = if i as u32 == label {
            F::one() - eps + uniform
        } else {
            uniform
        };
        loss += target * (lse - x);
        grad[i] = (x - lse).exp() - target;
    }
    Ok((loss, grad))
}

/// Loss-only form.
pub fn classification_loss<F: Float>(logits: &Array1<F>, label: u32, smoothing: f64) -> Result<F> {
    classification_loss_grad(logits, label, smoothing).map(|(l, _)| l)
}

/// Sigmoid BCE summed over proposals and classes; returns the summed loss,
/// the term count and the per-logit gradients of the sum. The batch driver
/// divides by the pooled term count, so an empty proposal set contributes
/// zero at zero weight.
pub fn detection_loss_terms<F: Float>(
    logits: &Array2<F>,
    label_sets: &[BTreeSet<u32>],
) -> Result<(F, usize, Array2<F>)> {
    let (n, k) = logits.dim();
    if label_sets.len() != n {
        return Err(Error::Shape(format!(
            "{} proposals but {} label sets",
            n,
            label_sets.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("detection logits".into()));
    }
    let mut sum = F::zero();
    let mut grad = Array2::zeros((n, k));
    for j in 0..n {
        for c in 0..k {
            let x = logits[[j, c]];
            let y = if label_sets[j].contains(&(c as u32)) {
                F::one()
            } else {
                F::zero()
            };
            // Stable BCE-with-logits: max(x,0) - x*y + ln(1 + exp(-|x|)).
            let loss = x.max(F::zero()) - x * y + (F::one() + (-x.abs()).exp()).ln();
            sum += loss;
            let sig = F::one() / (F::one() + (-x).exp());
            grad[[j, c]] = sig - y;
        }
    }
    Ok((sum, n * k, grad))
}

/// Mean sigmoid BCE over proposals and classes (the reported loss form).
pub fn detection_loss<F: Float>(logits: &Array2<F>, label_sets: &[BTreeSet<u32>]) -> Result<F> {
    let (sum, terms, _) = detection_loss_terms(logits, label_sets)?;
    if terms == 0 {
        return Ok(F::zero());
    }
    Ok(sum / F::from_usize(terms))
}
