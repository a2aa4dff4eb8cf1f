use crate::tensor::Scalar;

fn max_f64<T: Scalar>(xs: &[T]) -> f64 {
    xs.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()))
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<f64> {
    let max = max_f64(logits);
    let exps: Vec<f64> = logits.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of `softmax(logits)` against `label`, and the logit
/// cotangent `softmax − onehot(label)`.
///
/// Panics if `label` is out of range.
pub fn softmax_cross_entropy<T: Scalar>(logits: &[T], label: usize) -> (f64, Vec<T>) {
    assert!(label < logits.len(), "label {label} out of range for {} logits", logits.len());
    let max = max_f64(logits);
    let total: f64 = logits.iter().map(|v| (v.to_f64() - max).exp()).sum();
    let log_z = max + total.ln();
    let loss = log_z - logits[label].to_f64();
    let grad = logits
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let p = (v.to_f64() - log_z).exp();
            T::from_f64(if i == label { p - 1.0 } else { p })
        })
        .collect();
    (loss, grad)
}
