//! Minimal interfaces shared by the attack and the defense pipeline.

use candle_core::{DType, Tensor};

use crate::error::Result;

/// Anything that maps a `(B, C, H, W)` batch to class probabilities.
pub trait Classifier: Send + Sync {
    /// `(B, classes)` probabilities.
    fn predict_proba(&self, x: &Tensor) -> Result<Tensor>;

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        argmax_rows(&self.predict_proba(x)?)
    }

    /// Cross-entropy summed over the batch and its gradient with respect to `x`.
    fn loss_and_input_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

/// A differentiable scalar objective of the input, as seen by an attacker.
pub trait InputLoss {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)>;
}

impl<C: Classifier + ?Sized> InputLoss for C {
    fn loss_and_grad(&self, x: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
        self.loss_and_input_grad(x, labels)
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(probs: &Tensor) -> Result<Vec<usize>> {
    let rows = probs.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

/// Fraction of positions where `pred == truth`.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn argmax_first_on_ties() {
        let t = Tensor::new(&[[0.5f32, 0.5], [0.1, 0.9]], &Device::Cpu).unwrap();
        assert_eq!(argmax_rows(&t).unwrap(), vec![0, 1]);
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[1, 0, 1, 1], &[1, 1, 1, 0]), 0.5);
    }
}
