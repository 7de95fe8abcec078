//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Number of randomly sampled coordinates (all coordinates if fewer).
    pub samples: usize,
    pub tolerance: f64,
    /// Relative disagreement between the two one-sided derivatives above
    /// which a coordinate is treated as non-differentiable and skipped.
    /// Smooth-function curvature contributes only ~h*|f''|/|f'|, so the
    /// default sits well above that while staying below `tolerance`-sized
    /// kink artifacts.
    pub kink_threshold: f64,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            samples: 100,
            tolerance: 1e-4,
            kink_threshold: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| /
    /// max(|analytic|, |numeric|, 1e-8)
    pub max_rel_err: f64,
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates excluded because the two one-sided derivatives disagree
    /// (a kink: ReLU corner, maxpool argmax flip, ...).
    pub skipped: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err < self.tolerance
    }
}

/// Compares `analytic` against central finite differences of `f` at randomly
/// sampled coordinates of `point`.
pub fn check_gradient<F>(mut f: F, point: &[f64], analytic: &[f64], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if point.len() != analytic.len() {
        return Err(AgnError::InvalidArgument(format!(
            "check_gradient: point has {} coordinates, analytic gradient {}",
            point.len(),
            analytic.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut coords: Vec<usize> = (0..point.len()).collect();
    coords.shuffle(&mut rng);
    coords.truncate(cfg.samples.min(point.len()));

    let mut x = point.to_vec();
    let f0 = f(&x);
    if !f0.is_finite() {
        return Err(AgnError::NonFinite("check_gradient: f(x) at the base point".into()));
    }
    let h = cfg.step;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coord: 0,
        checked: 0,
        skipped: 0,
        tolerance: cfg.tolerance,
    };
    for &i in &coords {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(AgnError::NonFinite(format!("check_gradient: f(x +/- h) at coordinate {i}")));
        }
        // one-sided derivatives disagreeing means the op is not
        // differentiable here; exclude the coordinate
        let dp = (fp - f0) / h;
        let dm = (f0 - fm) / h;
        let side_scale = dp.abs().max(dm.abs()).max(1e-8);
        if (dp - dm).abs() / side_scale > cfg.kink_threshold {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Tensor flavour of [`check_gradient`]: the closure maps a tensor to a scalar.
pub fn check_tensor_gradient<F>(mut f: F, input: &Tensor, analytic: &[f64], cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> f64,
{
    let shape = input.shape().to_vec();
    check_gradient(
        move |x| {
            let t = Tensor::new(shape.clone(), x.to_vec()).expect("shape fixed");
            f(&t)
        },
        input.data(),
        analytic,
        cfg,
    )
}
