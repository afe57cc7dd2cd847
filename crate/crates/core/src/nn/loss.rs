//! Loss functions and their gradients w.r.t. the network output.
//!
//! Conventions used across the crate:
//! - every loss is a mean over the batch (and over dimensions for MSE), so
//!   gradients already carry the `1/n` factors;
//! - probabilities inside logarithms are clamped, and gradients are evaluated
//!   at the clamped value (pass-through), which keeps training finite without
//!   zeroing the signal.

use super::Matrix;

/// Clamp for probabilities inside cross-entropy logarithms.
pub const CE_CLAMP: f64 = 1e-12;
/// Clamp for discriminator/binary-classifier outputs inside logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Mean squared error over all `n x d` entries: `(1/(n*d)) * sum (a-b)^2`.
pub fn mse(a: &Matrix, b: &Matrix) -> f64 {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "mse shape mismatch");
    let n = (a.rows() * a.cols()) as f64;
    a.data().iter().zip(b.data()).map(|(&x, &y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Gradient of [`mse`] w.r.t. `a`: `2 (a - b) / (n * d)`.
pub fn mse_grad(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()), "mse shape mismatch");
    let scale = 2.0 / (a.rows() * a.cols()) as f64;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| scale * (x - y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Mean cross-entropy of probability rows against integer class labels:
/// `-(1/n) * sum ln p[label]`, with `p` clamped to `[CE_CLAMP, 1]`.
pub fn cross_entropy(probs: &Matrix, labels: &[usize]) -> f64 {
    assert_eq!(probs.rows(), labels.len(), "cross_entropy batch mismatch");
    let n = probs.rows() as f64;
    labels
        .iter()
        .enumerate()
        .map(|(i, &c)| -probs.get(i, c).clamp(CE_CLAMP, 1.0).ln())
        .sum::<f64>()
        / n
}

/// Gradient of [`cross_entropy`] w.r.t. the probabilities: `-1/(n*p)` at the
/// label entry (evaluated at the clamped probability), zero elsewhere.
pub fn cross_entropy_grad(probs: &Matrix, labels: &[usize]) -> Matrix {
    assert_eq!(probs.rows(), labels.len(), "cross_entropy batch mismatch");
    let n = probs.rows() as f64;
    let mut grad = Matrix::zeros(probs.rows(), probs.cols());
    for (i, &c) in labels.iter().enumerate() {
        let p = probs.get(i, c).clamp(CE_CLAMP, 1.0);
        grad.set(i, c, -1.0 / (n * p));
    }
    grad
}

/// Mean binary cross-entropy of a single-column prediction against 0/1
/// targets, with predictions clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub fn binary_cross_entropy(pred: &Matrix, targets: &[f64]) -> f64 {
    assert_eq!(pred.cols(), 1, "binary_cross_entropy expects one column");
    assert_eq!(pred.rows(), targets.len(), "binary_cross_entropy batch mismatch");
    let n = targets.len() as f64;
    pred.data()
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Gradient of [`binary_cross_entropy`] w.r.t. the predictions, evaluated at
/// the clamped value: `(p - t) / (n * p * (1 - p))`.
pub fn binary_cross_entropy_grad(pred: &Matrix, targets: &[f64]) -> Matrix {
    assert_eq!(pred.cols(), 1, "binary_cross_entropy expects one column");
    assert_eq!(pred.rows(), targets.len(), "binary_cross_entropy batch mismatch");
    let n = targets.len() as f64;
    let data = pred
        .data()
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            (p - t) / (n * p * (1.0 - p))
        })
        .collect();
    Matrix::from_vec(pred.rows(), 1, data)
}

/// `(1/n) * sum ln(1 - p)` with the same clamping as
/// [`binary_cross_entropy`]; the realism term a generator *descends* when it
/// wants the discriminator to score its outputs as real.
pub fn mean_log_one_minus(pred: &Matrix) -> f64 {
    assert_eq!(pred.cols(), 1, "mean_log_one_minus expects one column");
    let n = pred.rows() as f64;
    pred.data()
        .iter()
        .map(|&p| (1.0 - p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)).ln())
        .sum::<f64>()
        / n
}

/// Gradient of [`mean_log_one_minus`] w.r.t. the predictions, evaluated at
/// the clamped value: `-1 / (n * (1 - p))`.
pub fn mean_log_one_minus_grad(pred: &Matrix) -> Matrix {
    assert_eq!(pred.cols(), 1, "mean_log_one_minus expects one column");
    let n = pred.rows() as f64;
    let data = pred
        .data()
        .iter()
        .map(|&p| -1.0 / (n * (1.0 - p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP))))
        .collect();
    Matrix::from_vec(pred.rows(), 1, data)
}
