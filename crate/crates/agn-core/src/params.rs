//! Named trainable parameter groups and the ordered collection holding them.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

/// One layer's trainable state: a weight tensor, an optional second tensor
/// (bias, or the attention vector for GAT heads), running statistics for
/// batch norm, and Adam moment buffers.
#[derive(Clone, Debug)]
pub struct LayerParams {
    pub name: String,
    pub weights: Tensor,
    pub bias: Option<Tensor>,
    pub running_mean: Option<Vec<f64>>,
    pub running_var: Option<Vec<f64>>,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub bias_m: Vec<f64>,
    pub bias_v: Vec<f64>,
    pub step_count: u64,
}

impl LayerParams {
    pub fn new(name: impl Into<String>, weights: Tensor, bias: Option<Tensor>) -> Self {
        let wn = weights.len();
        let bn = bias.as_ref().map_or(0, Tensor::len);
        LayerParams {
            name: name.into(),
            weights,
            bias,
            running_mean: None,
            running_var: None,
            adam_m: vec![0.0; wn],
            adam_v: vec![0.0; wn],
            bias_m: vec![0.0; bn],
            bias_v: vec![0.0; bn],
            step_count: 0,
        }
    }

    /// Conv kernel [C_out, C_in, k, k], Kaiming fan-in init, zero bias.
    pub fn conv(name: impl Into<String>, c_out: usize, c_in: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weights = Tensor::from_fn(&[c_out, c_in, k, k], |_| normal(rng) * std);
        let bias = Tensor::zeros(&[c_out]);
        LayerParams::new(name, weights, Some(bias))
    }

    /// Transpose-conv kernel [C_in, C_out, k, k], Kaiming fan-in init, zero bias.
    pub fn transpose_conv(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = (c_in * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weights = Tensor::from_fn(&[c_in, c_out, k, k], |_| normal(rng) * std);
        let bias = Tensor::zeros(&[c_out]);
        LayerParams::new(name, weights, Some(bias))
    }

    /// Batch norm: gamma=1 (weights), beta=0 (bias), running mean 0 / var 1.
    pub fn batchnorm(name: impl Into<String>, channels: usize) -> Self {
        let mut p = LayerParams::new(
            name,
            Tensor::filled(&[channels], 1.0),
            Some(Tensor::zeros(&[channels])),
        );
        p.running_mean = Some(vec![0.0; channels]);
        p.running_var = Some(vec![1.0; channels]);
        p
    }

    /// GAT head: weights W [n, n'], attention vector a [2n'] stored in the
    /// bias slot, both uniform(-0.1, 0.1).
    pub fn gat_head(name: impl Into<String>, n: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let w = Tensor::from_fn(&[n, n_out], |_| rng.gen_range(-0.1..0.1));
        let a = Tensor::from_fn(&[2 * n_out], |_| rng.gen_range(-0.1..0.1));
        LayerParams::new(name, w, Some(a))
    }

    pub fn zero_grads(&mut self) {
        self.weights.zero_grad();
        if let Some(b) = self.bias.as_mut() {
            b.zero_grad();
        }
    }

    /// Number of trainable scalars (weights + bias).
    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Tensor::len)
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple to reproduce.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Insertion-ordered set of layer parameter groups, addressed by name.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<LayerParams>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, params: LayerParams) -> Result<()> {
        if self.index.contains_key(&params.name) {
            return Err(AgnError::InvalidArgument(format!(
                "duplicate parameter group name {:?}",
                params.name
            )));
        }
        self.index.insert(params.name.clone(), self.entries.len());
        self.entries.push(params);
        Ok(())
    }

    pub fn get(&self, name: &str) -> &LayerParams {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter group {name:?}"));
        &self.entries[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut LayerParams {
        let i = *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter group {name:?}"));
        &mut self.entries[i]
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &LayerParams> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.entries.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.zero_grads();
        }
    }

    /// Deterministic name -> trainable-scalar-count listing in insertion order.
    pub fn count_params(&self) -> Vec<(String, usize)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.param_count()))
            .collect()
    }
}
