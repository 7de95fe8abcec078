//! Evaluation metrics and the CSV metrics log.

use std::io::Write;
use std::path::Path;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

/// Dice overlap between a probability map (thresholded at 0.5) and a binary
/// truth mask. Two empty masks overlap perfectly.
pub fn dice_coefficient(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(AgnError::shape("dice_coefficient", pred.shape(), truth.shape()));
    }
    let mut inter = 0.0f64;
    let mut p_sum = 0.0f64;
    let mut t_sum = 0.0f64;
    for (&p, &t) in pred.data().iter().zip(truth.data()) {
        let pb = if p >= 0.5 { 1.0 } else { 0.0 };
        let tb = if t >= 0.5 { 1.0 } else { 0.0 };
        inter += pb * tb;
        p_sum += pb;
        t_sum += tb;
    }
    if p_sum + t_sum == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (p_sum + t_sum))
}

/// Number of 4-connected components of nonzero pixels in an [h, w] mask.
pub fn connected_components(mask: &Tensor) -> usize {
    let (h, w) = match mask.shape() {
        [h, w] => (*h, *w),
        _ => return 0,
    };
    let data = mask.data();
    let mut seen = vec![false; h * w];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if data[start] == 0.0 || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if data[j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
    }
    count
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MetricRecord {
    pub iteration: usize,
    pub split: Split,
    pub loss: f64,
    pub dice: f64,
}

/// Renders records as CSV with a fixed header and 9 significant digits.
pub fn metrics_to_csv(records: &[MetricRecord]) -> String {
    let mut out = String::from("iteration,split,loss,dice\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{:.8e},{:.8e}\n",
            r.iteration,
            r.split.as_str(),
            r.loss,
            r.dice
        ));
    }
    out
}

pub fn write_metrics_csv(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| AgnError::io(path.display().to_string(), e))?;
    file.write_all(metrics_to_csv(records).as_bytes())
        .map_err(|e| AgnError::io(path.display().to_string(), e))?;
    Ok(())
}
