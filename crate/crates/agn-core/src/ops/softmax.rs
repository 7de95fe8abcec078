//! Row softmax restricted to an adjacency mask.

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

/// alpha_ij = exp(e_ij) / sum_{k in N_i} exp(e_ik) on allowed entries, 0
/// elsewhere. Rows use max subtraction, and the denominator is an
/// order-independent sum so the result is invariant under vertex permutation.
pub fn masked_row_softmax(scores: &Tensor, mask: &[u8]) -> Result<Tensor> {
    let (v, v2) = scores.dims2()?;
    if v != v2 || mask.len() != v * v {
        return Err(AgnError::InvalidArgument(format!(
            "masked_row_softmax: scores {:?} vs mask of {} entries",
            scores.shape(),
            mask.len()
        )));
    }
    let sd = scores.data();
    let mut out = Tensor::zeros(&[v, v]);
    let od = out.data_mut();
    let mut terms = Vec::with_capacity(v);
    for i in 0..v {
        let row = i * v;
        let mut max = f64::NEG_INFINITY;
        for j in 0..v {
            if mask[row + j] != 0 {
                max = max.max(sd[row + j]);
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(AgnError::InvalidArgument(format!(
                "masked_row_softmax: row {i} has an empty neighborhood"
            )));
        }
        terms.clear();
        for j in 0..v {
            if mask[row + j] != 0 {
                let e = (sd[row + j] - max).exp();
                od[row + j] = e;
                terms.push(e);
            }
        }
        let denom = crate::tensor::stable_sum(&mut terms);
        for j in 0..v {
            if mask[row + j] != 0 {
                od[row + j] /= denom;
            }
        }
    }
    Ok(out)
}

/// Backward: de_ij = alpha_ij * (g_ij - sum_k g_ik alpha_ik) on allowed entries.
pub fn masked_row_softmax_backward(alpha: &Tensor, grad_out: &Tensor, mask: &[u8]) -> Tensor {
    let v = alpha.shape()[0];
    let ad = alpha.data();
    let gd = grad_out.data();
    let mut gs = Tensor::zeros(&[v, v]);
    let gsd = gs.data_mut();
    let mut terms = Vec::with_capacity(v);
    for i in 0..v {
        let row = i * v;
        terms.clear();
        for j in 0..v {
            if mask[row + j] != 0 {
                terms.push(gd[row + j] * ad[row + j]);
            }
        }
        let dot = crate::tensor::stable_sum(&mut terms);
        for j in 0..v {
            if mask[row + j] != 0 {
                gsd[row + j] = ad[row + j] * (gd[row + j] - dot);
            }
        }
    }
    gs
}
