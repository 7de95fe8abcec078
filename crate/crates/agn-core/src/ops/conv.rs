//! 2-D convolution and transpose convolution with exact analytic backward.
//!
//! The trunk only ever uses 3x3 stride-1 kernels, so that case gets a
//! row-vectorized kernel; everything else goes through the generic loops.

use crate::error::{AgnError, Result};
use crate::params::LayerParams;
use crate::tensor::Tensor;

/// floor((extent + 2*padding - k) / stride) + 1
pub fn conv_out_extent(extent: usize, k: usize, stride: usize, padding: usize) -> usize {
    (extent + 2 * padding - k) / stride + 1
}

fn validate_conv(x: &Tensor, p: &LayerParams, stride: usize, padding: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let ks = p.weights.shape();
    if ks.len() != 4 || ks[2] != ks[3] {
        return Err(AgnError::InvalidArgument(format!(
            "conv kernel must be [C_out, C_in, k, k], got {ks:?}"
        )));
    }
    let (c_out, c_in, k) = (ks[0], ks[1], ks[2]);
    if c_in != c {
        return Err(AgnError::shape(
            format!("conv2d {:?}: input channels vs kernel channels", p.name),
            x.shape(),
            ks,
        ));
    }
    if stride == 0 {
        return Err(AgnError::InvalidArgument("conv stride must be >= 1".into()));
    }
    if h + 2 * padding < k || w + 2 * padding < k {
        return Err(AgnError::InvalidArgument(format!(
            "conv2d {:?}: padded input {}x{} smaller than kernel {}",
            p.name,
            h + 2 * padding,
            w + 2 * padding,
            k
        )));
    }
    Ok((n, c, h, w, c_out, c_in, k))
}

/// Same-size 3-tap row stencil (pad 1): acc[x] += sum_kv k_kv * row[x - 1 + kv].
#[inline]
fn stencil_row3(acc: &mut [f64], row: &[f64], k0: f64, k1: f64, k2: f64) {
    let w = row.len();
    if w < 2 {
        // degenerate single-column rows: only the center tap lands in bounds
        acc[0] += k1 * row[0];
        return;
    }
    let dst = &mut acc[1..w - 1];
    for i in 0..w - 2 {
        dst[i] += k0 * row[i] + k1 * row[i + 1] + k2 * row[i + 2];
    }
    acc[0] += k1 * row[0] + k2 * row[1];
    acc[w - 1] += k0 * row[w - 2] + k1 * row[w - 1];
}

/// 3x3 stride-1 pad-1 convolution; one accumulator row per output row keeps
/// the hot loop in registers/cache instead of re-reading the output.
fn conv3x3_s1_p1(x: &[f64], out: &mut [f64], w9: &[f64], c_in: usize, c_out: usize, h: usize, w: usize) {
    let mut acc = vec![0.0f64; w];
    for co in 0..c_out {
        for y in 0..h {
            acc.iter_mut().for_each(|v| *v = 0.0);
            for ci in 0..c_in {
                let kb = (co * c_in + ci) * 9;
                let ib = ci * h * w;
                for ku in 0..3usize {
                    let sy = y as isize + ku as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let row = &x[ib + sy as usize * w..ib + sy as usize * w + w];
                    stencil_row3(&mut acc, row, w9[kb + ku * 3], w9[kb + ku * 3 + 1], w9[kb + ku * 3 + 2]);
                }
            }
            let orow = &mut out[(co * h + y) * w..(co * h + y) * w + w];
            for (o, a) in orow.iter_mut().zip(&acc) {
                *o += a;
            }
        }
    }
}

pub fn conv2d_forward(x: &Tensor, p: &LayerParams, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, _c, h, w, c_out, c_in, k) = validate_conv(x, p, stride, padding)?;
    let ho = conv_out_extent(h, k, stride, padding);
    let wo = conv_out_extent(w, k, stride, padding);
    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    // bias
    if let Some(b) = p.bias.as_ref() {
        let bd = b.data();
        let od = out.data_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let base = (ni * c_out + co) * ho * wo;
                od[base..base + ho * wo].iter_mut().for_each(|v| *v += bd[co]);
            }
        }
    }
    let wd = p.weights.data();
    let xd = x.data();
    let od = out.data_mut();
    for ni in 0..n {
        let xb = ni * c_in * h * w;
        let ob = ni * c_out * ho * wo;
        if k == 3 && stride == 1 && padding == 1 {
            conv3x3_s1_p1(&xd[xb..], &mut od[ob..], wd, c_in, c_out, h, w);
        } else {
            for co in 0..c_out {
                for ci in 0..c_in {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let mut acc = 0.0;
                            for ku in 0..k {
                                let sy = (y * stride + ku) as isize - padding as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kv in 0..k {
                                    let sx = (xo * stride + kv) as isize - padding as isize;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wd[((co * c_in + ci) * k + ku) * k + kv]
                                        * xd[xb + (ci * h + sy as usize) * w + sx as usize];
                                }
                            }
                            od[ob + (co * ho + y) * wo + xo] += acc;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Backward pass: accumulates kernel/bias grads into `p`, returns grad w.r.t. input.
pub fn conv2d_backward(x: &Tensor, p: &mut LayerParams, grad_out: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (n, _c, h, w, c_out, c_in, k) = validate_conv(x, p, stride, padding)?;
    let ho = conv_out_extent(h, k, stride, padding);
    let wo = conv_out_extent(w, k, stride, padding);
    if grad_out.shape() != [n, c_out, ho, wo] {
        return Err(AgnError::shape("conv2d_backward grad_out", grad_out.shape(), &[n, c_out, ho, wo]));
    }
    let mut gx = Tensor::zeros(x.shape());
    let xd = x.data();
    let god = grad_out.data();
    let wd = p.weights.data().to_vec();

    // bias grad
    if let Some(b) = p.bias.as_mut() {
        let gb = b.grad_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let base = (ni * c_out + co) * ho * wo;
                gb[co] += god[base..base + ho * wo].iter().sum::<f64>();
            }
        }
    }

    let gw = p.weights.grad_mut();
    let gxd = gx.data_mut();
    for ni in 0..n {
        let xb = ni * c_in * h * w;
        let ob = ni * c_out * ho * wo;
        if k == 3 && stride == 1 && padding == 1 {
            // grad wrt input: same-size correlation of grad_out with the
            // flipped kernel, accumulated one row at a time
            let mut acc = vec![0.0f64; w];
            for ci in 0..c_in {
                let ib = xb + ci * h * w;
                for y in 0..h {
                    acc.iter_mut().for_each(|v| *v = 0.0);
                    for co in 0..c_out {
                        let gob = ob + co * ho * wo;
                        let kb = (co * c_in + ci) * 9;
                        for ku in 0..3usize {
                            let sy = y as isize + ku as isize - 1;
                            if sy < 0 || sy >= ho as isize {
                                continue;
                            }
                            let grow = &god[gob + sy as usize * wo..gob + sy as usize * wo + wo];
                            // flipped kernel row: flip[ku][*] = w[2-ku][2-*]
                            let fb = kb + (2 - ku) * 3;
                            stencil_row3(&mut acc, grow, wd[fb + 2], wd[fb + 1], wd[fb]);
                        }
                    }
                    let xrow = &mut gxd[ib + y * w..ib + y * w + w];
                    for (o, a) in xrow.iter_mut().zip(&acc) {
                        *o += a;
                    }
                }
            }
            // grad wrt kernel: nine shifted row dot products per channel pair
            for co in 0..c_out {
                let gob = ob + co * ho * wo;
                for ci in 0..c_in {
                    let ib = xb + ci * h * w;
                    let kb = (co * c_in + ci) * 9;
                    let mut kacc = [0.0f64; 9];
                    for y in 0..ho {
                        let grow = &god[gob + y * wo..gob + y * wo + wo];
                        for ku in 0..3usize {
                            let sy = y as isize + ku as isize - 1;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let xrow = &xd[ib + sy as usize * w..ib + sy as usize * w + w];
                            kacc[ku * 3] += grow[1..].iter().zip(&xrow[..w - 1]).map(|(a, b)| a * b).sum::<f64>();
                            kacc[ku * 3 + 1] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            kacc[ku * 3 + 2] += grow[..w - 1].iter().zip(&xrow[1..]).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    for (g, a) in gw[kb..kb + 9].iter_mut().zip(&kacc) {
                        *g += a;
                    }
                }
            }
        } else {
            for co in 0..c_out {
                for ci in 0..c_in {
                    for y in 0..ho {
                        for xo in 0..wo {
                            let g = god[ob + (co * ho + y) * wo + xo];
                            for ku in 0..k {
                                let sy = (y * stride + ku) as isize - padding as isize;
                                if sy < 0 || sy >= h as isize {
                                    continue;
                                }
                                for kv in 0..k {
                                    let sx = (xo * stride + kv) as isize - padding as isize;
                                    if sx < 0 || sx >= w as isize {
                                        continue;
                                    }
                                    let xi = xb + (ci * h + sy as usize) * w + sx as usize;
                                    let wi = ((co * c_in + ci) * k + ku) * k + kv;
                                    gw[wi] += g * xd[xi];
                                    gxd[xi] += g * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(gx)
}

fn validate_transpose(x: &Tensor, p: &LayerParams, factor: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if factor < 1 {
        return Err(AgnError::InvalidArgument("transpose_conv2d factor must be >= 1".into()));
    }
    if factor != 1 && factor % 2 != 0 {
        return Err(AgnError::InvalidArgument(format!(
            "transpose_conv2d factor {factor} unsupported (must be 1 or even)"
        )));
    }
    let ks = p.weights.shape();
    let k = 2 * factor;
    if ks.len() != 4 || ks[0] != c || ks[2] != k || ks[3] != k {
        return Err(AgnError::shape(
            format!("transpose_conv2d {:?}: kernel must be [C_in, C_out, {k}, {k}]", p.name),
            x.shape(),
            ks,
        ));
    }
    let pad = if factor == 1 { 1 } else { factor / 2 };
    Ok((n, c, h, w, ks[1], k, pad))
}

/// Learnable upsampling: kernel 2*factor, stride factor; output extent is
/// exactly factor times the input extent.
pub fn transpose_conv2d_forward(x: &Tensor, p: &LayerParams, factor: usize) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, k, pad) = validate_transpose(x, p, factor)?;
    let (ho, wo) = (h * factor, w * factor);
    let mut out = Tensor::zeros(&[n, c_out, ho, wo]);
    let od = out.data_mut();
    if let Some(b) = p.bias.as_ref() {
        for ni in 0..n {
            for co in 0..c_out {
                let base = (ni * c_out + co) * ho * wo;
                od[base..base + ho * wo].iter_mut().for_each(|v| *v += b.data()[co]);
            }
        }
    }
    let wd = p.weights.data();
    let xd = x.data();
    for ni in 0..n {
        for ci in 0..c_in {
            for co in 0..c_out {
                let kb = (ci * c_out + co) * k * k;
                let ob = (ni * c_out + co) * ho * wo;
                for i in 0..h {
                    for j in 0..w {
                        let xv = xd[((ni * c_in + ci) * h + i) * w + j];
                        for u in 0..k {
                            let y = (i * factor + u) as isize - pad as isize;
                            if y < 0 || y >= ho as isize {
                                continue;
                            }
                            let orow = ob + y as usize * wo;
                            for v in 0..k {
                                let xx = (j * factor + v) as isize - pad as isize;
                                if xx >= 0 && (xx as usize) < wo {
                                    od[orow + xx as usize] += xv * wd[kb + u * k + v];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn transpose_conv2d_backward(x: &Tensor, p: &mut LayerParams, grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c_in, h, w, c_out, k, pad) = validate_transpose(x, p, factor)?;
    let (ho, wo) = (h * factor, w * factor);
    if grad_out.shape() != [n, c_out, ho, wo] {
        return Err(AgnError::shape("transpose_conv2d_backward grad_out", grad_out.shape(), &[n, c_out, ho, wo]));
    }
    let mut gx = Tensor::zeros(x.shape());
    let god = grad_out.data();
    let xd = x.data();
    let wd = p.weights.data().to_vec();
    if let Some(b) = p.bias.as_mut() {
        let gb = b.grad_mut();
        for ni in 0..n {
            for co in 0..c_out {
                let base = (ni * c_out + co) * ho * wo;
                gb[co] += god[base..base + ho * wo].iter().sum::<f64>();
            }
        }
    }
    let gw = p.weights.grad_mut();
    let gxd = gx.data_mut();
    for ni in 0..n {
        for ci in 0..c_in {
            for co in 0..c_out {
                let kb = (ci * c_out + co) * k * k;
                let ob = (ni * c_out + co) * ho * wo;
                for i in 0..h {
                    for j in 0..w {
                        let xi = ((ni * c_in + ci) * h + i) * w + j;
                        let xv = xd[xi];
                        let mut acc = 0.0;
                        for u in 0..k {
                            let y = (i * factor + u) as isize - pad as isize;
                            if y < 0 || y >= ho as isize {
                                continue;
                            }
                            let orow = ob + y as usize * wo;
                            for v in 0..k {
                                let xx = (j * factor + v) as isize - pad as isize;
                                if xx >= 0 && (xx as usize) < wo {
                                    let g = god[orow + xx as usize];
                                    acc += g * wd[kb + u * k + v];
                                    gw[kb + u * k + v] += g * xv;
                                }
                            }
                        }
                        gxd[xi] += acc;
                    }
                }
            }
        }
    }
    Ok(gx)
}
