//! Untargeted attack objective built on a log-scaled cross-entropy.
//!
//! The scaled loss averages `ln(ce_i + 1)` over the minibatch, so one sample
//! that is already badly misclassified cannot dominate the gradient.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{ensure, Result};
use crate::tensor::Float;

/// Logits `(n, C)` paired with one integer label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionBatch<T: Float = f32> {
    logits: Array2<T>,
    labels: Vec<usize>,
}

impl<T: Float> PredictionBatch<T> {
    pub fn new(logits: Array2<T>, labels: Vec<usize>) -> Result<Self> {
        let (n, classes) = logits.dim();
        ensure!(n >= 1 && classes >= 1, "prediction batch must be non-empty");
        ensure!(labels.len() == n, "expected {n} labels, got {}", labels.len());
        ensure!(
            labels.iter().all(|&y| y < classes),
            "labels must lie in [0, {classes})"
        );
        ensure!(logits.iter().all(|v| v.is_finite()), "logits must be finite");
        Ok(Self { logits, labels })
    }

    pub fn logits(&self) -> &Array2<T> {
        &self.logits
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn with_labels(&self, labels: Vec<usize>) -> Result<Self> {
        Self::new(self.logits.clone(), labels)
    }
}

/// `-log softmax(logits)[label]` per row.
pub fn cross_entropy_per_sample<T: Float>(pred: &PredictionBatch<T>) -> Array1<T> {
    pred.logits
        .outer_iter()
        .zip(&pred.labels)
        .map(|(row, &y)| {
            let m = row.fold(T::neg_infinity(), |a, &v| a.max(v));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            (lse - row[y]).max(T::zero())
        })
        .collect()
}

/// `(1/n) * sum_i ln(ce_i + 1)`
pub fn scaled_cross_entropy<T: Float>(pred: &PredictionBatch<T>) -> T {
    let ce = cross_entropy_per_sample(pred);
    let n = T::from(ce.len()).expect("batch size fits");
    ce.iter().map(|v| v.ln_1p()).sum::<T>() / n
}

/// Untargeted loss against the model's clean predictions: minimizing it pushes
/// adversarial predictions away from `clean_labels`.
pub fn adversarial_loss<T: Float>(pred_adv: &PredictionBatch<T>, clean_labels: &[usize]) -> Result<T> {
    let relabeled = pred_adv.with_labels(clean_labels.to_vec())?;
    Ok(-scaled_cross_entropy(&relabeled))
}

/// Which surrogate the attack maximizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Mean of `ln(ce + 1)`.
    #[default]
    ScaledCe,
    /// Mean cross-entropy.
    PlainCe,
}

impl LossVariant {
    /// Graph version of the attack loss on `(n, C)` logits (to be minimized).
    pub fn attack_loss<'g, T: Float>(self, logits: Var<'g, T>, clean_labels: &[usize]) -> Var<'g, T> {
        let ce = logits.cross_entropy(clean_labels);
        let surrogate = match self {
            LossVariant::ScaledCe => ce.ln_1p().mean(),
            LossVariant::PlainCe => ce.mean(),
        };
        surrogate.mul_scalar(-T::one())
    }
}
