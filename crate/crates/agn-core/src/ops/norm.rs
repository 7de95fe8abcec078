//! Per-channel batch normalization over N*H*W.

use crate::error::{AgnError, Result};
use crate::params::LayerParams;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Saved forward state needed for the exact backward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub training: bool,
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>, // per channel
    pub dims: (usize, usize, usize, usize),
}

fn validate(x: &Tensor, p: &LayerParams) -> Result<(usize, usize, usize, usize)> {
    let d = x.dims4()?;
    let c = d.1;
    if p.weights.shape() != [c]
        || p.bias.as_ref().map(Tensor::shape) != Some(&[c][..])
        || p.running_mean.as_ref().map(Vec::len) != Some(c)
        || p.running_var.as_ref().map(Vec::len) != Some(c)
    {
        return Err(AgnError::ParamMismatch(format!(
            "batchnorm {:?}: params do not carry per-channel gamma/beta/running stats for C={c}",
            p.name
        )));
    }
    Ok(d)
}

/// Training mode normalizes with batch statistics and updates the running
/// ones; eval mode normalizes with the running statistics.
pub fn batchnorm2d_forward(
    x: &Tensor,
    p: &mut LayerParams,
    training: bool,
    eps: f64,
    momentum: f64,
) -> Result<(Tensor, BnCache)> {
    let (n, c, h, w) = validate(x, p)?;
    let m = n * h * w;
    if training && m == 1 {
        return Err(AgnError::InvalidArgument(
            "batchnorm2d: batch of a single value per channel has undefined variance".into(),
        ));
    }
    let xd = x.data();
    let gamma = p.weights.data().to_vec();
    let beta = p.bias.as_ref().unwrap().data().to_vec();
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![0.0; xd.len()];
    let mut inv_std = vec![0.0; c];

    for ci in 0..c {
        let (mean, var) = if training {
            let mut sum = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                sum += xd[base..base + h * w].iter().sum::<f64>();
            }
            let mean = sum / m as f64;
            let mut sq = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                sq += xd[base..base + h * w].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
            }
            (mean, sq / m as f64)
        } else {
            (p.running_mean.as_ref().unwrap()[ci], p.running_var.as_ref().unwrap()[ci])
        };
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ci] = istd;
        let od = out.data_mut();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                let xh = (xd[i] - mean) * istd;
                xhat[i] = xh;
                od[i] = gamma[ci] * xh + beta[ci];
            }
        }
        if training {
            let rm = &mut p.running_mean.as_mut().unwrap()[ci];
            *rm = momentum * *rm + (1.0 - momentum) * mean;
            let rv = &mut p.running_var.as_mut().unwrap()[ci];
            *rv = momentum * *rv + (1.0 - momentum) * var;
        }
    }
    Ok((
        out,
        BnCache {
            training,
            xhat,
            inv_std,
            dims: (n, c, h, w),
        },
    ))
}

/// Accumulates gamma/beta grads into `p`; returns grad w.r.t. input.
pub fn batchnorm2d_backward(cache: &BnCache, p: &mut LayerParams, grad_out: &Tensor) -> Tensor {
    let (n, c, h, w) = cache.dims;
    let m = (n * h * w) as f64;
    let god = grad_out.data();
    let gamma = p.weights.data().to_vec();
    let mut gx = Tensor::zeros(grad_out.shape());
    let gxd = gx.data_mut();

    for ci in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                sum_g += god[i];
                sum_gx += god[i] * cache.xhat[i];
            }
        }
        // gamma/beta grads are the same in both modes
        p.weights.grad_mut()[ci] += sum_gx;
        p.bias.as_mut().unwrap().grad_mut()[ci] += sum_g;

        let istd = cache.inv_std[ci];
        if cache.training {
            let mean_g = sum_g / m;
            let mean_gx = sum_gx / m;
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    gxd[i] = gamma[ci] * istd * (god[i] - mean_g - cache.xhat[i] * mean_gx);
                }
            }
        } else {
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for i in base..base + h * w {
                    gxd[i] = gamma[ci] * istd * god[i];
                }
            }
        }
    }
    gx
}
