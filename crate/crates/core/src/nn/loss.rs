use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor4};

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax − onehot)/n`. `logits` is `[n, classes, 1, 1]`.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor4<T>, labels: &[usize]) -> Result<(f64, Tensor4<T>)> {
    let n = logits.n();
    let classes = logits.sample_len();
    if labels.len() != n {
        return Err(Error::contract(format!(
            "softmax_xent: {} labels for a batch of {n}",
            labels.len()
        )));
    }
    if n == 0 {
        return Err(Error::contract("softmax_xent: empty batch"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "softmax_xent: label {bad} out of range for {classes} classes"
        )));
    }

    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (i, &label) in labels.iter().enumerate() {
        let row: Vec<f64> = logits.sample(i).iter().map(|v| v.as_f64()).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        loss -= row[label] - max - log_sum;
        for (k, &v) in row.iter().enumerate() {
            let p = (v - max - log_sum).exp();
            let onehot = if k == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - onehot) / n as f64));
        }
    }
    Ok((loss / n as f64, Tensor4::from_vec(logits.shape(), grad)?))
}
