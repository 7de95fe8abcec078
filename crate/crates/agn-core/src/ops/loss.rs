//! Mean binary cross-entropy over pixels.

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

pub const BCE_CLAMP: f64 = 1e-7;

/// mean over pixels of -[y ln(p) + (1-y) ln(1-p)], with p clamped to
/// [BCE_CLAMP, 1-BCE_CLAMP].
pub fn bce_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(AgnError::shape("bce_loss", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    let mut sum = 0.0;
    for (&p, &y) in pred.data().iter().zip(target.data()) {
        let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        sum -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    }
    Ok(sum / n)
}

/// Gradient of the mean BCE w.r.t. the prediction. Zero where the clamp was
/// active (the loss is locally flat there).
pub fn bce_loss_backward(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(AgnError::shape("bce_loss_backward", pred.shape(), target.shape()));
    }
    let n = pred.len() as f64;
    Ok(Tensor::from_fn(pred.shape(), |i| {
        let p = pred.data()[i];
        if p < BCE_CLAMP || p > 1.0 - BCE_CLAMP {
            return 0.0;
        }
        let y = target.data()[i];
        (p - y) / (p * (1.0 - p)) / n
    }))
}
