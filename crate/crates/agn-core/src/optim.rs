//! Bias-corrected Adam over a parameter group.

use crate::params::LayerParams;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

fn update(values: &mut [f64], grads: &[f64], m: &mut [f64], v: &mut [f64], lr: f64, beta1: f64, beta2: f64, eps: f64, step: u64) {
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for i in 0..values.len() {
        let g = grads[i];
        m[i] = beta1 * m[i] + (1.0 - beta1) * g;
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// One Adam step for weights and bias. Gradients are left intact for the
/// caller to zero.
pub fn adam_step(params: &mut LayerParams, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    params.step_count += 1;
    let step = params.step_count;
    if params.weights.grad().is_some() {
        let grads = params.weights.grad().unwrap().to_vec();
        update(params.weights.data_mut(), &grads, &mut params.adam_m, &mut params.adam_v, lr, beta1, beta2, eps, step);
    }
    if let Some(bias) = params.bias.as_mut() {
        if bias.grad().is_some() {
            let grads = bias.grad().unwrap().to_vec();
            update(bias.data_mut(), &grads, &mut params.bias_m, &mut params.bias_v, lr, beta1, beta2, eps, step);
        }
    }
}
