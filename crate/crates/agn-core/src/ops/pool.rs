//! Max pooling (with argmax routing) and nearest-neighbour upsampling.

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

/// Non-overlapping max pool. Returns the pooled tensor and, per output
/// element, the flat input index the maximum was taken from. Ties go to the
/// first element in row-major window order.
pub fn maxpool2d_forward(x: &Tensor, window: usize) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(AgnError::InvalidArgument(format!(
            "maxpool2d: extents {h}x{w} not divisible by window {window}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = vec![0usize; n * c * ho * wo];
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for y in 0..ho {
            for xo in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for u in 0..window {
                    let row = ib + (y * window + u) * w + xo * window;
                    for v in 0..window {
                        let val = xd[row + v];
                        if val > best {
                            best = val;
                            best_i = row + v;
                        }
                    }
                }
                od[ob + y * wo + xo] = best;
                argmax[ob + y * wo + xo] = best_i;
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to its stored argmax position.
pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let gxd = gx.data_mut();
    for (go, &idx) in grad_out.data().iter().zip(argmax) {
        gxd[idx] += go;
    }
    gx
}

/// Copy every element to its factor x factor block.
pub fn upsample_nearest_forward(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if factor < 1 {
        return Err(AgnError::InvalidArgument("upsample factor must be >= 1".into()));
    }
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.data();
    let od = out.data_mut();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for y in 0..ho {
            let src = ib + (y / factor) * w;
            let dst = ob + y * wo;
            for xo in 0..wo {
                od[dst + xo] = xd[src + xo / factor];
            }
        }
    }
    Ok(out)
}

/// Sums gradients over each factor x factor block.
pub fn upsample_nearest_backward(input_shape: &[usize], grad_out: &Tensor, factor: usize) -> Tensor {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (ho, wo) = (h * factor, w * factor);
    let mut gx = Tensor::zeros(input_shape);
    let gd = grad_out.data();
    let gxd = gx.data_mut();
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * ho * wo;
        for y in 0..ho {
            let dst = ib + (y / factor) * w;
            let src = ob + y * wo;
            for xo in 0..wo {
                gxd[dst + xo / factor] += gd[src + xo];
            }
        }
    }
    gx
}
