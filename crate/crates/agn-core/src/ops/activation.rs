//! Elementwise activations with analytic derivatives.

use crate::error::{AgnError, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Sigmoid,
}

/// Slopes and shape parameters shared across the model.
#[derive(Clone, Copy, Debug)]
pub struct ActivationConfig {
    pub leaky_slope: f64,
    pub elu_alpha: f64,
}

impl Default for ActivationConfig {
    fn default() -> Self {
        ActivationConfig {
            leaky_slope: 0.2,
            elu_alpha: 1.0,
        }
    }
}

impl ActivationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(AgnError::InvalidConfig(format!(
                "leaky_slope must be in (0,1), got {}",
                self.leaky_slope
            )));
        }
        if self.elu_alpha <= 0.0 {
            return Err(AgnError::InvalidConfig(format!(
                "elu_alpha must be > 0, got {}",
                self.elu_alpha
            )));
        }
        Ok(())
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn apply(x: f64, kind: Activation, cfg: &ActivationConfig) -> f64 {
    match kind {
        Activation::Relu => x.max(0.0),
        Activation::LeakyRelu => {
            if x > 0.0 {
                x
            } else {
                cfg.leaky_slope * x
            }
        }
        Activation::Elu => {
            if x > 0.0 {
                x
            } else {
                cfg.elu_alpha * (x.exp() - 1.0)
            }
        }
        Activation::Sigmoid => sigmoid(x),
    }
}

/// Derivative given the pre-activation input and the output value.
/// ReLU's subgradient at 0 is taken as 0.
#[inline]
pub fn derivative(x: f64, y: f64, kind: Activation, cfg: &ActivationConfig) -> f64 {
    match kind {
        Activation::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::LeakyRelu => {
            if x > 0.0 {
                1.0
            } else {
                cfg.leaky_slope
            }
        }
        Activation::Elu => {
            if x > 0.0 {
                1.0
            } else {
                y + cfg.elu_alpha
            }
        }
        Activation::Sigmoid => y * (1.0 - y),
    }
}

pub fn activation_forward(x: &Tensor, kind: Activation, cfg: &ActivationConfig) -> Tensor {
    Tensor::from_fn(x.shape(), |i| apply(x.data()[i], kind, cfg))
}

pub fn activation_backward(
    x: &Tensor,
    y: &Tensor,
    grad_out: &Tensor,
    kind: Activation,
    cfg: &ActivationConfig,
) -> Tensor {
    Tensor::from_fn(x.shape(), |i| {
        grad_out.data()[i] * derivative(x.data()[i], y.data()[i], kind, cfg)
    })
}
