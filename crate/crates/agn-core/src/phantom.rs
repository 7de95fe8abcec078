//! Synthetic chest-slice volumes: a soft-tissue background, a dark lung
//! field, one bright-walled tracheal ring whose lumen is the airway label,
//! and optionally small bronchus dots that appear only on part of the z
//! range. Geometry drifts smoothly across slices and everything is a pure
//! function of the seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

pub const HU_TISSUE: f64 = 40.0;
pub const HU_LUNG: f64 = -800.0;
pub const HU_WALL: f64 = 0.0;
pub const HU_LUMEN: f64 = -1000.0;
/// Bronchus dots are faint: barely darker than the surrounding lung field.
pub const HU_LUMEN_DOT: f64 = -880.0;
/// Amplitude of the uniform HU grain added on top of the palette.
pub const NOISE_HU: f64 = 300.0;
pub const WALL_THICKNESS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Difficulty {
    TubeOnly,
    WithBronchi,
}

impl Difficulty {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tube_only" => Ok(Difficulty::TubeOnly),
            "with_bronchi" => Ok(Difficulty::WithBronchi),
            other => Err(AgnError::InvalidArgument(format!(
                "unknown difficulty {other:?} (expected tube_only or with_bronchi)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PhantomVolume {
    /// [n, h, w] Hounsfield-like values.
    pub hu: Tensor,
    /// [n, h, w] binary airway labels.
    pub mask: Tensor,
    pub seed: u64,
}

impl PhantomVolume {
    pub fn dims(&self) -> (usize, usize, usize) {
        let s = self.hu.shape();
        (s[0], s[1], s[2])
    }

    pub fn hu_slice(&self, z: usize) -> Tensor {
        let (_, h, w) = self.dims();
        Tensor::new(vec![h, w], self.hu.data()[z * h * w..(z + 1) * h * w].to_vec()).expect("slice extraction")
    }

    pub fn mask_slice(&self, z: usize) -> Tensor {
        let (_, h, w) = self.dims();
        Tensor::new(vec![h, w], self.mask.data()[z * h * w..(z + 1) * h * w].to_vec()).expect("slice extraction")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hu.shape() != self.mask.shape() || self.hu.shape().len() != 3 {
            return Err(AgnError::shape("phantom volume", self.hu.shape(), self.mask.shape()));
        }
        if !self.hu.all_finite() || self.hu.data().iter().any(|&v| !(-1024.0..=400.0).contains(&v)) {
            return Err(AgnError::InvalidArgument("phantom HU values outside [-1024, 400]".into()));
        }
        if self.mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(AgnError::InvalidArgument("phantom mask must be binary".into()));
        }
        Ok(())
    }
}

struct Bronchus {
    /// polar offset from the trachea center
    angle: f64,
    distance: f64,
    radius: f64,
    /// active slice range [z0, z1)
    z0: usize,
    z1: usize,
}

pub fn generate_phantom(n_slices: usize, h: usize, w: usize, seed: u64, difficulty: Difficulty) -> Result<PhantomVolume> {
    if n_slices == 0 {
        return Err(AgnError::InvalidArgument("n_slices must be >= 1".into()));
    }
    // ring (radius up to 9) + drift + bronchus offsets must fit the lung
    if h < 32 || w < 32 {
        return Err(AgnError::InvalidArgument(format!(
            "slice {h}x{w} too small to fit the tracheal ring (need at least 32x32)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r_outer: f64 = rng.gen_range(6.0..=9.0);
    let r_inner = r_outer - WALL_THICKNESS;
    // smooth sinusoidal drift of the trachea center
    let drift_amp_y = rng.gen_range(1.0..3.0);
    let drift_amp_x = rng.gen_range(1.0..3.0);
    let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
    let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
    let cycles = rng.gen_range(0.5..1.5);

    let bronchi: Vec<Bronchus> = if difficulty == Difficulty::WithBronchi {
        let count = rng.gen_range(1..=4usize);
        (0..count)
            .map(|_| {
                // active on a sub-interval so part of the volume is dot-free
                let len = (n_slices * rng.gen_range(30..=60) / 100).max(1);
                let z0 = rng.gen_range(0..=(n_slices - len.min(n_slices)));
                Bronchus {
                    angle: rng.gen_range(0.0..std::f64::consts::TAU),
                    distance: r_outer + rng.gen_range(3.0..8.0),
                    radius: rng.gen_range(1.0..=3.0),
                    z0,
                    z1: (z0 + len).min(n_slices),
                }
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut hu = Tensor::filled(&[n_slices, h, w], HU_TISSUE);
    let mut mask = Tensor::zeros(&[n_slices, h, w]);
    let (lcy, lcx) = (h as f64 / 2.0, w as f64 / 2.0);
    let (lay, lax) = (h as f64 * 0.42, w as f64 * 0.45);
    for z in 0..n_slices {
        let t = z as f64 / n_slices as f64 * std::f64::consts::TAU * cycles;
        let cy = lcy + drift_amp_y * (t + phase_y).sin();
        let cx = lcx + drift_amp_x * (t + phase_x).sin();
        let hd = hu.data_mut();
        let md = mask.data_mut();
        let base = z * h * w;
        for r in 0..h {
            for c in 0..w {
                let i = base + r * w + c;
                let (y, x) = (r as f64 + 0.5, c as f64 + 0.5);
                // lung field
                let ly = (y - lcy) / lay;
                let lx = (x - lcx) / lax;
                if ly * ly + lx * lx <= 1.0 {
                    hd[i] = HU_LUNG;
                }
                // tracheal ring
                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                if d <= r_inner {
                    hd[i] = HU_LUMEN;
                    md[i] = 1.0;
                } else if d <= r_outer {
                    hd[i] = HU_WALL;
                }
                // bronchus dots: faint lumen values, no wall ring
                for b in &bronchi {
                    if z < b.z0 || z >= b.z1 {
                        continue;
                    }
                    let by = cy + b.distance * b.angle.sin();
                    let bx = cx + b.distance * b.angle.cos();
                    let bd = ((y - by).powi(2) + (x - bx).powi(2)).sqrt();
                    if bd <= b.radius {
                        hd[i] = HU_LUMEN_DOT;
                        md[i] = 1.0;
                    }
                }
            }
        }
    }
    // grainy HU texture so segmentation is not a pure palette lookup; drawn
    // from its own stream so the geometry above is independent of it
    let mut nrng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    for v in hu.data_mut().iter_mut() {
        // rounded so HU stays integral (and exact through the f32 file format)
        *v = (*v + nrng.gen_range(-NOISE_HU..NOISE_HU)).round().clamp(-1024.0, 400.0);
    }
    let vol = PhantomVolume { hu, mask, seed };
    vol.validate()?;
    Ok(vol)
}

#[derive(Clone, Copy, Debug)]
pub struct PreprocessConfig {
    pub window: f64,
    pub level: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            window: 1000.0,
            level: -600.0,
        }
    }
}

/// Clamps to [level - window/2, level + window/2] and rescales to [0, 1].
pub fn window_hu(hu_slice: &Tensor, cfg: &PreprocessConfig) -> Result<Tensor> {
    if cfg.window <= 0.0 {
        return Err(AgnError::InvalidConfig(format!("window must be > 0, got {}", cfg.window)));
    }
    let lo = cfg.level - cfg.window / 2.0;
    let inv = 1.0 / cfg.window;
    Ok(Tensor::from_fn(hu_slice.shape(), |i| {
        ((hu_slice.data()[i] - lo) * inv).clamp(0.0, 1.0)
    }))
}

/// Drops slices with an all-zero mask, preserving order.
pub fn filter_empty_slices(vol: &PhantomVolume) -> Result<PhantomVolume> {
    let (n, h, w) = vol.dims();
    let keep: Vec<usize> = (0..n)
        .filter(|&z| vol.mask.data()[z * h * w..(z + 1) * h * w].iter().any(|&v| v != 0.0))
        .collect();
    if keep.is_empty() {
        return Err(AgnError::InvalidArgument(
            "filter_empty_slices: every slice has an empty mask".into(),
        ));
    }
    let mut hu = Vec::with_capacity(keep.len() * h * w);
    let mut mask = Vec::with_capacity(keep.len() * h * w);
    for &z in &keep {
        hu.extend_from_slice(&vol.hu.data()[z * h * w..(z + 1) * h * w]);
        mask.extend_from_slice(&vol.mask.data()[z * h * w..(z + 1) * h * w]);
    }
    Ok(PhantomVolume {
        hu: Tensor::new(vec![keep.len(), h, w], hu)?,
        mask: Tensor::new(vec![keep.len(), h, w], mask)?,
        seed: vol.seed,
    })
}

/// Sequential split: the first 75% of slices train, the rest test.
pub fn split_indices(n_slices: usize) -> (Vec<usize>, Vec<usize>) {
    let cut = n_slices * 3 / 4;
    ((0..cut).collect(), (cut..n_slices).collect())
}
