//! Inverted dropout: survivors are scaled by 1/(1-p) at train time so that
//! evaluation is the identity.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

/// The returned mask (train mode only) marks survivors.
pub fn dropout_forward(
    x: &Tensor,
    p: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, Option<Vec<u8>>)> {
    if !(0.0..1.0).contains(&p) {
        return Err(AgnError::InvalidArgument(format!(
            "dropout probability must be in [0,1), got {p}"
        )));
    }
    if !training || p == 0.0 {
        return Ok((x.clone(), None));
    }
    let scale = 1.0 / (1.0 - p);
    let mask: Vec<u8> = (0..x.len()).map(|_| u8::from(rng.gen::<f64>() >= p)).collect();
    let out = Tensor::from_fn(x.shape(), |i| {
        if mask[i] != 0 {
            x.data()[i] * scale
        } else {
            0.0
        }
    });
    Ok((out, Some(mask)))
}

pub fn dropout_backward(grad_out: &Tensor, p: f64, mask: Option<&[u8]>) -> Tensor {
    match mask {
        None => grad_out.clone(),
        Some(m) => {
            let scale = 1.0 / (1.0 - p);
            Tensor::from_fn(grad_out.shape(), |i| {
                if m[i] != 0 {
                    grad_out.data()[i] * scale
                } else {
                    0.0
                }
            })
        }
    }
}
