//! First-order fast marching as a cheap stand-in for the exact geodesic
//! field: solves |grad T| = s on the pixel grid with slowness
//! s = |grad p| + eps, so travel time accumulates where the probability map
//! changes quickly, just like the |delta p| path cost.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

pub const FMM_EPS: f64 = 1e-3;

/// Slowness field |grad p| + eps, central differences inside, one-sided at
/// the borders.
pub fn slowness_field(prob: &Tensor, eps: f64) -> Result<Tensor> {
    let (h, w) = prob.dims2()?;
    let pd = prob.data();
    let mut s = Tensor::zeros(&[h, w]);
    let sd = s.data_mut();
    for r in 0..h {
        for c in 0..w {
            let gx = if w == 1 {
                0.0
            } else if c == 0 {
                pd[r * w + 1] - pd[r * w]
            } else if c == w - 1 {
                pd[r * w + c] - pd[r * w + c - 1]
            } else {
                0.5 * (pd[r * w + c + 1] - pd[r * w + c - 1])
            };
            let gy = if h == 1 {
                0.0
            } else if r == 0 {
                pd[w + c] - pd[c]
            } else if r == h - 1 {
                pd[r * w + c] - pd[(r - 1) * w + c]
            } else {
                0.5 * (pd[(r + 1) * w + c] - pd[(r - 1) * w + c])
            };
            sd[r * w + c] = (gx * gx + gy * gy).sqrt() + eps;
        }
    }
    Ok(s)
}

fn eikonal_update(a: f64, b: f64, s: f64) -> f64 {
    // quadratic (T-a)^2 + (T-b)^2 = s^2 when both neighbors contribute
    let (lo, hi) = if a < b { (a, b) } else { (b, a) };
    if hi - lo >= s || !hi.is_finite() {
        lo + s
    } else {
        let sum = a + b;
        0.5 * (sum + (2.0 * s * s - (a - b) * (a - b)).sqrt())
    }
}

/// First-order fast marching travel time from `source` over the slowness
/// field derived from `prob`.
pub fn fmm_travel_time(prob: &Tensor, source: (usize, usize), eps: f64) -> Result<Vec<f64>> {
    let (h, w) = prob.dims2()?;
    if source.0 >= h || source.1 >= w {
        return Err(AgnError::InvalidArgument(format!(
            "fmm source {source:?} outside {h}x{w} map"
        )));
    }
    if eps <= 0.0 {
        return Err(AgnError::InvalidArgument("fmm eps must be > 0".into()));
    }
    let slow = slowness_field(prob, eps)?;
    let sd = slow.data();
    let mut t = vec![f64::INFINITY; h * w];
    let mut accepted = vec![false; h * w];
    let src = source.0 * w + source.1;
    t[src] = 0.0;
    let mut heap: BinaryHeap<Reverse<(u64, u32)>> = BinaryHeap::new();
    heap.push(Reverse((0u64, src as u32)));
    while let Some(Reverse((_, idx))) = heap.pop() {
        let i = idx as usize;
        if accepted[i] {
            continue;
        }
        accepted[i] = true;
        let (r, c) = (i / w, i % w);
        for &(dr, dc) in &[(-1isize, 0isize), (1, 0), (0, -1), (0, 1)] {
            let nr = r as isize + dr;
            let nc = c as isize + dc;
            if nr < 0 || nr >= h as isize || nc < 0 || nc >= w as isize {
                continue;
            }
            let j = nr as usize * w + nc as usize;
            if accepted[j] {
                continue;
            }
            let (jr, jc) = (nr as usize, nc as usize);
            let th = {
                let left = if jc > 0 { t[j - 1] } else { f64::INFINITY };
                let right = if jc + 1 < w { t[j + 1] } else { f64::INFINITY };
                left.min(right)
            };
            let tv = {
                let up = if jr > 0 { t[j - w] } else { f64::INFINITY };
                let down = if jr + 1 < h { t[j + w] } else { f64::INFINITY };
                up.min(down)
            };
            let cand = eikonal_update(th, tv, sd[j]);
            if cand < t[j] {
                t[j] = cand;
                heap.push(Reverse((cand.to_bits(), j as u32)));
            }
        }
    }
    Ok(t)
}

/// Spearman rank correlation between two fields of equal length.
pub fn spearman_rank(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = ra.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for k in 0..ra.len() {
        let xa = ra[k] - ma;
        let xb = rb[k] - mb;
        num += xa * xb;
        da += xa * xa;
        db += xb * xb;
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da * db).sqrt()
}
