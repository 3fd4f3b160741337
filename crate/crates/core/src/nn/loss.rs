//! Loss functions returning the scalar loss and its gradient with respect to
//! the network output.

use alloc::vec::Vec;

use super::tensor::Tensor;
use crate::math::{exp, ln, sigmoid};

/// Probability clamp used inside every logarithm.
pub const PROB_EPS: f64 = 1e-7;

/// Mean softmax cross-entropy over a batch of logits shaped `(n, classes, 1, 1)`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let n = logits.n;
    let k = logits.shape.len();
    assert_eq!(labels.len(), n);
    let mut grad = Tensor::zeros(n, logits.shape);
    let mut total = 0.0;
    for i in 0..n {
        let row = logits.sample(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&z| exp(z - max)).collect();
        let sum: f64 = exps.iter().sum();
        let label = labels[i];
        total += -(row[label] - max - ln(sum));
        let g = grad.sample_mut(i);
        for j in 0..k {
            g[j] = exps[j] / sum / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    (total / n as f64, grad)
}

/// `-ln(clamp(p))` for a realness probability computed from a logit, with
/// derivative with respect to the logit. Zero gradient where the clamp is
/// active.
pub fn neg_log_prob(logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if p < PROB_EPS {
        (-ln(PROB_EPS), 0.0)
    } else if p > 1.0 - PROB_EPS {
        (-ln(1.0 - PROB_EPS), 0.0)
    } else {
        (-ln(p), -(1.0 - p))
    }
}

/// `-ln(1 - clamp(p))` and its derivative with respect to the logit.
pub fn neg_log_one_minus_prob(logit: f64) -> (f64, f64) {
    let p = sigmoid(logit);
    if p < PROB_EPS {
        (-ln(1.0 - PROB_EPS), 0.0)
    } else if p > 1.0 - PROB_EPS {
        (-ln(PROB_EPS), 0.0)
    } else {
        (-ln(1.0 - p), p)
    }
}

/// Clamped `-ln p` on a probability directly.
pub fn neg_log_clamped(p: f64) -> f64 {
    -ln(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tensor::Shape3;
    use alloc::vec;

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = Tensor::from_vec(2, Shape3::new(4, 1, 1), vec![0.0; 8]);
        let (loss, grad) = softmax_cross_entropy(&logits, &[1, 3]);
        assert!((loss - libm::log(4.0)).abs() < 1e-12);
        assert!((grad.data[1] - (0.25 - 1.0) / 2.0).abs() < 1e-12);
        assert!((grad.data[0] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn bce_terms_at_half() {
        let (a, da) = neg_log_prob(0.0);
        let (b, db) = neg_log_one_minus_prob(0.0);
        assert!((a - core::f64::consts::LN_2).abs() < 1e-15);
        assert!((b - core::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(da, -0.5);
        assert_eq!(db, 0.5);
    }
}
