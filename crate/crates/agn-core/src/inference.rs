//! Fusion decoder: scatters refined vertex features back onto the reduced
//! grid, then climbs through four conv + upsample stages, at each scale
//! concatenating a dropout-regularized CNN side output, and finishes with a
//! 1x1 convolution + sigmoid probability map.

use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::graph::{scatter_features, scatter_features_backward, VertexSet};
use crate::ops::activation::{activation_backward, activation_forward, sigmoid, Activation, ActivationConfig};
use crate::ops::conv::{conv2d_backward, conv2d_forward};
use crate::ops::dropout::{dropout_backward, dropout_forward};
use crate::ops::norm::{batchnorm2d_backward, batchnorm2d_forward, BnCache, BN_EPS, BN_MOMENTUM};
use crate::ops::pool::{upsample_nearest_backward, upsample_nearest_forward};
use crate::params::{LayerParams, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct InferenceConfig {
    /// Decoder width per stage; must match the CNN side channel count so
    /// each concatenation doubles it.
    pub stage_channels: usize,
    /// Width of the refined vertex rows entering the decoder.
    pub in_features: usize,
    pub dropout_p: f64,
    /// Sampling sparsity of the graph whose rows are being decoded. The
    /// first stage upsamples by 2^(delta-3) (1 at delta=3, 2 at delta=4) so
    /// the three remaining doubling stages land exactly on the side scales.
    pub delta: u32,
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels == 0 || self.in_features == 0 {
            return Err(AgnError::InvalidConfig("inference channel counts must be positive".into()));
        }
        if self.delta < 3 {
            return Err(AgnError::InvalidConfig(format!(
                "inference decoder needs delta >= 3 to meet the four side scales, got {}",
                self.delta
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(AgnError::InvalidConfig(format!("dropout_p must be in [0,1), got {}", self.dropout_p)));
        }
        Ok(())
    }

    pub fn stage_factors(&self) -> [usize; 4] {
        [1usize << (self.delta - 3), 2, 2, 2]
    }
}

/// Registers the decoder parameter groups: four conv+bn stages and the final
/// 1x1 projection.
pub fn init_inference_params(params: &mut ParamSet, cfg: &InferenceConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let sc = cfg.stage_channels;
    let mut c_in = cfg.in_features;
    for stage in 1..=4 {
        params.insert(LayerParams::conv(format!("inf.s{stage}.conv"), sc, c_in, 3, rng))?;
        params.insert(LayerParams::batchnorm(format!("inf.s{stage}.bn"), sc))?;
        c_in = 2 * sc;
    }
    params.insert(LayerParams::conv("inf.final", 1, 2 * sc, 1, rng))?;
    Ok(())
}

#[derive(Clone, Debug)]
struct StageCache {
    x: Tensor,
    bn: BnCache,
    bn_out: Tensor,
    relu_out: Tensor,
    up_out_shape: Vec<usize>,
    dropout_mask: Option<Vec<u8>>,
    side_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct InferenceCache {
    scattered_shape: Vec<usize>,
    stages: Vec<StageCache>,
    concat4: Tensor,
    prob: Tensor,
}

impl InferenceCache {
    /// Shape of the tensor entering the final 1x1 convolution.
    pub fn pre_final_shape(&self) -> &[usize] {
        self.concat4.shape()
    }
}

/// Decodes refined vertex rows into a full-resolution probability map.
/// `sides` are the CNN side outputs ordered coarse-to-fine is NOT assumed:
/// they arrive in CNN stage order (full, 1/2, 1/4, 1/8) and are consumed in
/// reverse.
pub fn inference_forward(
    refined: &Tensor,
    vertices: &VertexSet,
    sides: &[Tensor],
    params: &mut ParamSet,
    cfg: &InferenceConfig,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, InferenceCache)> {
    cfg.validate()?;
    if sides.len() != 4 {
        return Err(AgnError::InvalidArgument(format!(
            "inference_forward expects 4 side tensors, got {}",
            sides.len()
        )));
    }
    let act = ActivationConfig::default();
    let mut cur = scatter_features(refined, vertices)?;
    let scattered_shape = cur.shape().to_vec();
    let factors = cfg.stage_factors();
    let mut stages = Vec::with_capacity(4);
    for stage in 1..=4usize {
        let conv_out = conv2d_forward(&cur, params.get(&format!("inf.s{stage}.conv")), 1, 1)?;
        let (bn_out, bn) = batchnorm2d_forward(&conv_out, params.get_mut(&format!("inf.s{stage}.bn")), training, BN_EPS, BN_MOMENTUM)?;
        let relu_out = activation_forward(&bn_out, Activation::Relu, &act);
        let up = upsample_nearest_forward(&relu_out, factors[stage - 1])?;
        let side = &sides[4 - stage]; // decoder stage 1 fuses the coarsest side
        let (_, sc, uh, uw) = up.dims4()?;
        let (_, side_c, sh, sw) = side.dims4()?;
        if (sh, sw) != (uh, uw) || side_c != sc {
            return Err(AgnError::shape(
                format!("inference stage {stage}: decoder/side scale mismatch"),
                up.shape(),
                side.shape(),
            ));
        }
        let (dropped, mask) = dropout_forward(side, cfg.dropout_p, training, rng)?;
        // concat: decoder channels first, regularized side channels second
        let mut cat = Tensor::zeros(&[1, 2 * sc, uh, uw]);
        {
            let cd = cat.data_mut();
            cd[..sc * uh * uw].copy_from_slice(up.data());
            cd[sc * uh * uw..].copy_from_slice(dropped.data());
        }
        stages.push(StageCache {
            x: cur,
            bn,
            bn_out,
            relu_out,
            up_out_shape: up.shape().to_vec(),
            dropout_mask: mask,
            side_shape: side.shape().to_vec(),
        });
        cur = cat;
    }
    let logits = conv2d_forward(&cur, params.get("inf.final"), 1, 0)?;
    let (_, _, h, w) = logits.dims4()?;
    let prob = Tensor::from_fn(&[h, w], |i| sigmoid(logits.data()[i]));
    Ok((
        prob.clone(),
        InferenceCache {
            scattered_shape,
            stages,
            concat4: cur,
            prob,
        },
    ))
}

/// Backward of [`inference_forward`]. Returns the gradient with respect to
/// the refined vertex rows and, per CNN stage order, the gradients with
/// respect to the raw side outputs.
pub fn inference_backward(
    dprob: &Tensor,
    vertices: &VertexSet,
    cache: &InferenceCache,
    params: &mut ParamSet,
    cfg: &InferenceConfig,
) -> Result<(Tensor, Vec<Tensor>)> {
    let act = ActivationConfig::default();
    let factors = cfg.stage_factors();
    let pd = cache.prob.data();
    let (h, w) = cache.prob.dims2()?;
    if dprob.shape() != [h, w] {
        return Err(AgnError::shape("inference_backward dprob", dprob.shape(), &[h, w]));
    }
    let dlogits = Tensor::from_fn(&[1, 1, h, w], |i| dprob.data()[i] * pd[i] * (1.0 - pd[i]));
    let mut d = conv2d_backward(&cache.concat4, params.get_mut("inf.final"), &dlogits, 1, 0)?;
    let mut dsides: Vec<Option<Tensor>> = vec![None; 4];
    for stage in (1..=4usize).rev() {
        let sc = &cache.stages[stage - 1];
        let chans = cache.stages[stage - 1].up_out_shape[1];
        let (_, _, ch, cw) = d.dims4()?;
        // split the concatenation
        let plane = chans * ch * cw;
        let d_up = Tensor::new(sc.up_out_shape.clone(), d.data()[..plane].to_vec())?;
        let d_drop = Tensor::new(sc.side_shape.clone(), d.data()[plane..].to_vec())?;
        dsides[4 - stage] = Some(dropout_backward(&d_drop, cfg.dropout_p, sc.dropout_mask.as_deref()));
        let d_relu = upsample_nearest_backward(sc.relu_out.shape(), &d_up, factors[stage - 1]);
        let d_bn = activation_backward(&sc.bn_out, &sc.relu_out, &d_relu, Activation::Relu, &act);
        let d_conv = batchnorm2d_backward(&sc.bn, params.get_mut(&format!("inf.s{stage}.bn")), &d_bn);
        d = conv2d_backward(&sc.x, params.get_mut(&format!("inf.s{stage}.conv")), &d_conv, 1, 1)?;
    }
    if d.shape() != cache.scattered_shape.as_slice() {
        return Err(AgnError::shape("inference_backward scatter grad", d.shape(), &cache.scattered_shape));
    }
    let grad_refined = scatter_features_backward(&d, vertices);
    Ok((
        grad_refined,
        dsides.into_iter().map(|t| t.expect("all four side grads set")).collect(),
    ))
}
