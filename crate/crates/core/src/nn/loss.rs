//! Fused softmax-cross-entropy head.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean cross-entropy of softmax(logits) against integer labels, plus the
/// gradient w.r.t. the logits: `(softmax - onehot) / batch`.
///
/// Fusing the softmax with the log keeps the computation stable for large
/// logits (max-subtraction trick).
pub fn softmax_xent(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    if labels.len() != b {
        return Err(Error::Data(format!("{} labels for batch of {b}", labels.len())));
    }
    let mut loss = 0.0;
    let mut dlogits = vec![0.0; b * k];
    for s in 0..b {
        let label = labels[s];
        if label >= k {
            return Err(Error::Data(format!("label {label} out of range for {k} classes")));
        }
        let row = &logits.data()[s * k..(s + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        loss += denom.ln() - (row[label] - max);
        for c in 0..k {
            let p = (row[c] - max).exp() / denom;
            dlogits[s * k + c] = (p - if c == label { 1.0 } else { 0.0 }) / b as f64;
        }
    }
    Ok((loss / b as f64, Tensor::new(vec![b, k], dlogits)))
}

/// Fraction of rows whose argmax logit equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (b, k) = (logits.shape()[0], logits.shape()[1]);
    let mut hits = 0usize;
    for s in 0..b {
        let row = &logits.data()[s * k..(s + 1) * k];
        let mut best = 0;
        for c in 1..k {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == labels[s] {
            hits += 1;
        }
    }
    hits as f64 / b as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_loss_is_ln_k() {
        for k in [2usize, 5, 10] {
            let logits = Tensor::zeros(vec![3, k]);
            let (loss, _) = softmax_xent(&logits, &[0, k - 1, k / 2]).unwrap();
            assert!((loss - (k as f64).ln()).abs() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn saturated_correct_class_loss_near_zero() {
        let logits = Tensor::new(vec![1, 2], vec![1e4, -1e4]);
        let (loss, _) = softmax_xent(&logits, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(loss.is_finite());
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::zeros(vec![1, 3]);
        assert!(softmax_xent(&logits, &[3]).is_err());
    }

    #[test]
    fn dlogits_matches_finite_differences() {
        // finite-difference oracle on a random 3-class batch
        let data = vec![0.3, -1.2, 0.8, 1.1, 0.0, -0.4];
        let labels = [2usize, 0];
        let logits = Tensor::new(vec![2, 3], data.clone());
        let (_, dlogits) = softmax_xent(&logits, &labels).unwrap();
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += eps;
            let mut minus = data.clone();
            minus[i] -= eps;
            let (lp, _) = softmax_xent(&Tensor::new(vec![2, 3], plus), &labels).unwrap();
            let (lm, _) = softmax_xent(&Tensor::new(vec![2, 3], minus), &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * eps);
            assert!((numeric - dlogits.data()[i]).abs() < 1e-6, "entry {i}");
        }
    }

    #[test]
    fn accuracy_counts_argmax_hits() {
        let logits = Tensor::new(vec![2, 2], vec![0.9, 0.1, 0.2, 0.8]);
        assert_eq!(top1_accuracy(&logits, &[0, 1]), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0]), 0.0);
    }
}
