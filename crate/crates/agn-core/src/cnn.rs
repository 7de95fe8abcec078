//! Contracting CNN stream: a VGG-style trunk with four stages
//! (conv-batchnorm-ReLU blocks at widths base*{1,2,4,8}, max-pooled between
//! stages), per-stage side convolutions to a common narrow width, learnable
//! upsampling of the side outputs back to full resolution, and a final
//! 1x1 convolution + sigmoid producing the probability map. The concatenated
//! side tensor doubles as the feature input of the graph stream.

use rand_chacha::ChaCha8Rng;

use crate::error::{AgnError, Result};
use crate::ops::activation::{activation_backward, activation_forward, sigmoid, Activation, ActivationConfig};
use crate::ops::conv::{conv2d_backward, conv2d_forward, transpose_conv2d_backward, transpose_conv2d_forward};
use crate::ops::norm::{batchnorm2d_backward, batchnorm2d_forward, BnCache, BN_EPS, BN_MOMENTUM};
use crate::ops::pool::{maxpool2d_backward, maxpool2d_forward};
use crate::params::{LayerParams, ParamSet};
use crate::tensor::Tensor;

pub const STAGE_CONVS: [usize; 4] = [2, 2, 3, 3];

#[derive(Clone, Copy, Debug)]
pub struct CnnConfig {
    /// Width of the first stage; stages run base*{1,2,4,8}.
    pub base_channels: usize,
    pub input_size: (usize, usize),
}

impl CnnConfig {
    pub fn side_channels(&self) -> usize {
        self.base_channels / 4
    }

    /// Channel count of the concatenated multi-scale feature tensor.
    pub fn feature_channels(&self) -> usize {
        4 * self.side_channels()
    }

    pub fn stage_width(&self, stage: usize) -> usize {
        self.base_channels << (stage - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.base_channels % 4 != 0 {
            return Err(AgnError::InvalidConfig(format!(
                "base_channels must be a positive multiple of 4, got {}",
                self.base_channels
            )));
        }
        let (h, w) = self.input_size;
        if h % 8 != 0 || w % 8 != 0 {
            return Err(AgnError::InvalidConfig(format!(
                "input size {h}x{w} must be divisible by 8 (three pooling stages)"
            )));
        }
        Ok(())
    }
}

/// (plain convs, transpose convs, max pools) in the built network.
pub fn conv_census(_cfg: &CnnConfig) -> (usize, usize, usize) {
    let trunk: usize = STAGE_CONVS.iter().sum();
    (trunk + 4 + 1, 4, 3)
}

fn conv_name(stage: usize, i: usize) -> String {
    format!("cnn.s{stage}.conv{i}")
}

fn bn_name(stage: usize, i: usize) -> String {
    format!("cnn.s{stage}.bn{i}")
}

/// Registers every CNN parameter group in a fixed order.
pub fn init_cnn_params(params: &mut ParamSet, cfg: &CnnConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    let s = cfg.side_channels();
    for stage in 1..=4 {
        let width = cfg.stage_width(stage);
        let mut c_in = if stage == 1 { 1 } else { cfg.stage_width(stage - 1) };
        for i in 1..=STAGE_CONVS[stage - 1] {
            params.insert(LayerParams::conv(conv_name(stage, i), width, c_in, 3, rng))?;
            params.insert(LayerParams::batchnorm(bn_name(stage, i), width))?;
            c_in = width;
        }
        params.insert(LayerParams::conv(format!("cnn.side{stage}"), s, width, 3, rng))?;
    }
    for stage in 1..=4 {
        let factor = 1usize << (stage - 1);
        params.insert(LayerParams::transpose_conv(format!("cnn.up{stage}"), s, s, 2 * factor, rng))?;
    }
    params.insert(LayerParams::conv("cnn.final", 1, 4 * s, 1, rng))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct CnnOutput {
    /// [h, w] probability map in (0, 1).
    pub prob: Tensor,
    /// [1, 4*side_channels, h, w] concatenated multi-scale side features.
    pub features: Tensor,
}

#[derive(Clone, Debug)]
struct BlockCache {
    x: Tensor,
    bn: BnCache,
    bn_out: Tensor,
    relu_out: Tensor,
}

#[derive(Clone, Debug)]
pub struct CnnCache {
    blocks: Vec<Vec<BlockCache>>,
    pool_args: Vec<(Vec<usize>, Vec<usize>)>, // (input shape, argmax)
    /// Raw side-conv outputs at native scales {1, 1/2, 1/4, 1/8}, exposed to
    /// the fusion decoder.
    pub side_raw: Vec<Tensor>,
    features: Tensor,
    prob: Tensor,
}

impl CnnCache {
    pub fn side_outputs(&self) -> &[Tensor] {
        &self.side_raw
    }
}

pub fn cnn_forward(
    slice: &Tensor,
    params: &mut ParamSet,
    cfg: &CnnConfig,
    training: bool,
) -> Result<(CnnOutput, CnnCache)> {
    cfg.validate()?;
    let (n, c, h, w) = slice.dims4()?;
    if n != 1 || c != 1 || (h, w) != cfg.input_size {
        return Err(AgnError::shape("cnn_forward input", slice.shape(), &[1, 1, cfg.input_size.0, cfg.input_size.1]));
    }
    let act = ActivationConfig::default();
    let mut blocks = Vec::with_capacity(4);
    let mut pool_args = Vec::with_capacity(3);
    let mut side_raw = Vec::with_capacity(4);
    let mut cur = slice.clone();
    for stage in 1..=4 {
        let mut stage_blocks = Vec::with_capacity(STAGE_CONVS[stage - 1]);
        for i in 1..=STAGE_CONVS[stage - 1] {
            let conv_out = conv2d_forward(&cur, params.get(&conv_name(stage, i)), 1, 1)?;
            let (bn_out, bn) = batchnorm2d_forward(&conv_out, params.get_mut(&bn_name(stage, i)), training, BN_EPS, BN_MOMENTUM)?;
            let relu_out = activation_forward(&bn_out, Activation::Relu, &act);
            stage_blocks.push(BlockCache {
                x: cur,
                bn,
                bn_out,
                relu_out: relu_out.clone(),
            });
            cur = relu_out;
        }
        let side = conv2d_forward(&cur, params.get(&format!("cnn.side{stage}")), 1, 1)?;
        side_raw.push(side);
        blocks.push(stage_blocks);
        if stage < 4 {
            let in_shape = cur.shape().to_vec();
            let (pooled, argmax) = maxpool2d_forward(&cur, 2)?;
            pool_args.push((in_shape, argmax));
            cur = pooled;
        }
    }
    // learnable upsampling back to full resolution, concatenated by scale
    let s = cfg.side_channels();
    let mut features = Tensor::zeros(&[1, 4 * s, h, w]);
    for stage in 1..=4 {
        let factor = 1usize << (stage - 1);
        let up = transpose_conv2d_forward(&side_raw[stage - 1], params.get(&format!("cnn.up{stage}")), factor)?;
        let fd = features.data_mut();
        let ud = up.data();
        fd[(stage - 1) * s * h * w..stage * s * h * w].copy_from_slice(&ud[..s * h * w]);
    }
    let logits = conv2d_forward(&features, params.get("cnn.final"), 1, 0)?;
    let prob = Tensor::from_fn(&[h, w], |i| sigmoid(logits.data()[i]));
    let output = CnnOutput {
        prob: prob.clone(),
        features: features.clone(),
    };
    Ok((
        output,
        CnnCache {
            blocks,
            pool_args,
            side_raw,
            features,
            prob,
        },
    ))
}

/// Upstream gradients entering the CNN. All absent tensors contribute zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct CnnGrads<'a> {
    /// d loss / d prob, shape [h, w].
    pub prob: Option<&'a Tensor>,
    /// d loss / d features, shape [1, 4S, h, w].
    pub features: Option<&'a Tensor>,
    /// d loss / d raw side outputs at native scales (decoder skip path).
    pub sides: Option<&'a [Tensor]>,
}

/// Accumulates parameter gradients and returns the gradient with respect to
/// the input slice.
pub fn cnn_backward(grads: &CnnGrads, cache: &CnnCache, params: &mut ParamSet, cfg: &CnnConfig) -> Result<Tensor> {
    let (h, w) = cfg.input_size;
    let s = cfg.side_channels();
    let act = ActivationConfig::default();
    let mut dfeatures = Tensor::zeros(&[1, 4 * s, h, w]);
    if let Some(dprob) = grads.prob {
        if dprob.shape() != [h, w] {
            return Err(AgnError::shape("cnn_backward prob grad", dprob.shape(), &[h, w]));
        }
        // sigmoid then the final 1x1 conv
        let pd = cache.prob.data();
        let dlogits = Tensor::from_fn(&[1, 1, h, w], |i| dprob.data()[i] * pd[i] * (1.0 - pd[i]));
        let d = conv2d_backward(&cache.features, params.get_mut("cnn.final"), &dlogits, 1, 0)?;
        dfeatures.accumulate_data(&d)?;
    }
    if let Some(df) = grads.features {
        dfeatures.accumulate_data(df)?;
    }
    // split by scale and run the upsamplers backward
    let mut dside: Vec<Tensor> = Vec::with_capacity(4);
    for stage in 1..=4 {
        let factor = 1usize << (stage - 1);
        let chunk = Tensor::new(
            vec![1, s, h, w],
            dfeatures.data()[(stage - 1) * s * h * w..stage * s * h * w].to_vec(),
        )?;
        let mut d = transpose_conv2d_backward(
            &cache.side_raw[stage - 1],
            params.get_mut(&format!("cnn.up{stage}")),
            &chunk,
            factor,
        )?;
        if let Some(sides) = grads.sides {
            d.accumulate_data(&sides[stage - 1])?;
        }
        dside.push(d);
    }
    // walk the trunk backwards; the side taps feed each stage's output
    let mut d_next: Option<Tensor> = None; // grad w.r.t. the pooled output entering stage+1
    let mut d_input = Tensor::zeros(&[1, 1, h, w]);
    for stage in (1..=4).rev() {
        let stage_blocks = &cache.blocks[stage - 1];
        let last = stage_blocks.last().expect("stage has conv blocks");
        let mut d = conv2d_backward(
            &last.relu_out,
            params.get_mut(&format!("cnn.side{stage}")),
            &dside[stage - 1],
            1,
            1,
        )?;
        if let Some(dn) = d_next.take() {
            let (in_shape, argmax) = &cache.pool_args[stage - 1];
            let dp = maxpool2d_backward(in_shape, argmax, &dn);
            d.accumulate_data(&dp)?;
        }
        for (i, block) in stage_blocks.iter().enumerate().rev() {
            let drelu = activation_backward(&block.bn_out, &block.relu_out, &d, Activation::Relu, &act);
            let dbn = batchnorm2d_backward(&block.bn, params.get_mut(&bn_name(stage, i + 1)), &drelu);
            d = conv2d_backward(&block.x, params.get_mut(&conv_name(stage, i + 1)), &dbn, 1, 1)?;
        }
        if stage == 1 {
            d_input = d;
        } else {
            d_next = Some(d);
        }
    }
    Ok(d_input)
}

impl Tensor {
    /// Elementwise in-place add of another tensor's data (shapes must match).
    pub fn accumulate_data(&mut self, other: &Tensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(AgnError::shape("accumulate_data", self.shape(), other.shape()));
        }
        for (a, b) in self.data_mut().iter_mut().zip(other.data()) {
            *a += b;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradient, GradCheckConfig};
    use crate::ops::loss::{bce_loss, bce_loss_backward};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: &CnnConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_cnn_params(&mut params, cfg, &mut rng).unwrap();
        params
    }

    #[test]
    fn desk_config_shapes() {
        let cfg = CnnConfig {
            base_channels: 16,
            input_size: (64, 64),
        };
        let mut params = build(&cfg, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let slice = Tensor::from_fn(&[1, 1, 64, 64], |_| rng.gen::<f64>());
        let (out, _) = cnn_forward(&slice, &mut params, &cfg, false).unwrap();
        assert_eq!(out.prob.shape(), &[64, 64]);
        assert_eq!(out.features.shape(), &[1, 16, 64, 64]);
        assert!(out.prob.data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn census_is_fifteen_convs_three_pools() {
        let cfg = CnnConfig {
            base_channels: 16,
            input_size: (64, 64),
        };
        assert_eq!(conv_census(&cfg), (15, 4, 3));
        // census of actually registered groups agrees
        let params = build(&cfg, 1);
        let convs = params
            .iter()
            .filter(|p| p.name.contains("conv") || p.name.contains("side") || p.name == "cnn.final")
            .count();
        let ups = params.iter().filter(|p| p.name.contains("up")).count();
        assert_eq!((convs, ups), (15, 4));
    }

    #[test]
    fn count_params_matches_closed_form() {
        let cfg = CnnConfig {
            base_channels: 16,
            input_size: (64, 64),
        };
        let params = build(&cfg, 1);
        let table = params.count_params();
        let total: usize = table.iter().map(|(_, n)| n).sum();
        // closed form: trunk convs + bn pairs + side + up + final
        let mut expect = 0usize;
        let s = 4usize;
        for stage in 1..=4usize {
            let width = 16usize << (stage - 1);
            let mut c_in = if stage == 1 { 1 } else { 16 << (stage - 2) };
            for _ in 0..STAGE_CONVS[stage - 1] {
                expect += 9 * c_in * width + width; // conv
                expect += 2 * width; // bn gamma/beta
                c_in = width;
            }
            expect += 9 * width * s + s; // side conv
            let k = 2 * (1usize << (stage - 1));
            expect += s * s * k * k + s; // upsampler
        }
        expect += 4 * s + 1; // final 1x1
        assert_eq!(total, expect);
        // determinism of the listing
        assert_eq!(build(&cfg, 1).count_params(), table);
    }

    #[test]
    fn eval_mode_bitwise_deterministic() {
        let cfg = CnnConfig {
            base_channels: 8,
            input_size: (16, 16),
        };
        let mut params = build(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let slice = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen::<f64>());
        let (a, _) = cnn_forward(&slice, &mut params, &cfg, false).unwrap();
        let (b, _) = cnn_forward(&slice, &mut params, &cfg, false).unwrap();
        assert_eq!(a.prob.data(), b.prob.data());
        assert_eq!(a.features.data(), b.features.data());
    }

    #[test]
    fn bad_input_size_rejected() {
        let cfg = CnnConfig {
            base_channels: 8,
            input_size: (20, 16),
        };
        assert!(cfg.validate().is_err());
        let cfg = CnnConfig {
            base_channels: 6,
            input_size: (16, 16),
        };
        assert!(cfg.validate().is_err());
    }

    fn loss_of(params: &ParamSet, cfg: &CnnConfig, slice: &Tensor, mask: &Tensor) -> f64 {
        let mut ps = params.clone();
        let (out, _) = cnn_forward(slice, &mut ps, cfg, true).unwrap();
        bce_loss(&out.prob, mask).unwrap()
    }

    #[test]
    fn gradients_match_finite_differences_every_group() {
        let cfg = CnnConfig {
            base_channels: 4,
            input_size: (16, 16),
        };
        let mut params = build(&cfg, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let slice = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen::<f64>());
        let mask = Tensor::from_fn(&[16, 16], |_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 });

        let (out, cache) = cnn_forward(&slice, &mut params, &cfg, true).unwrap();
        let dprob = bce_loss_backward(&out.prob, &mask).unwrap();
        params.zero_grads();
        let grads = CnnGrads {
            prob: Some(&dprob),
            ..CnnGrads::default()
        };
        let dslice = cnn_backward(&grads, &cache, &mut params, &cfg).unwrap();

        let gc = GradCheckConfig {
            samples: 12,
            ..GradCheckConfig::default()
        };
        let names: Vec<String> = params.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let w0 = params.get(name).weights.data().to_vec();
            let wg = params.get(name).weights.grad().unwrap().to_vec();
            let report = check_gradient(
                |v| {
                    let mut ps = params.clone();
                    ps.get_mut(name).weights.data_mut().copy_from_slice(v);
                    loss_of(&ps, &cfg, &slice, &mask)
                },
                &w0,
                &wg,
                &gc,
            )
            .unwrap();
            assert!(report.passed(), "weights {name}: {report:?}");
            if let Some(b) = params.get(name).bias.as_ref() {
                let b0 = b.data().to_vec();
                let bg = b.grad().unwrap().to_vec();
                if name.contains(".conv") {
                    // trunk conv bias is followed by batch norm, which cancels
                    // it exactly; both gradients are zero up to rounding and
                    // the relative comparison is degenerate
                    assert!(bg.iter().all(|&g| g.abs() < 1e-10), "bn-cancelled bias {name}: {bg:?}");
                    continue;
                }
                let report = check_gradient(
                    |v| {
                        let mut ps = params.clone();
                        ps.get_mut(name).bias.as_mut().unwrap().data_mut().copy_from_slice(v);
                        loss_of(&ps, &cfg, &slice, &mask)
                    },
                    &b0,
                    &bg,
                    &gc,
                )
                .unwrap();
                assert!(report.passed(), "bias {name}: {report:?}");
            }
        }
        // input gradient too
        let report = check_gradient(
            |v| {
                let t = Tensor::new(vec![1, 1, 16, 16], v.to_vec()).unwrap();
                loss_of(&params, &cfg, &t, &mask)
            },
            slice.data(),
            dslice.data(),
            &GradCheckConfig {
                samples: 40,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "input: {report:?}");
    }

    #[test]
    fn feature_and_side_grads_flow() {
        // gradient entering via features/sides only (the joint-training path)
        let cfg = CnnConfig {
            base_channels: 4,
            input_size: (16, 16),
        };
        let mut params = build(&cfg, 21);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let slice = Tensor::from_fn(&[1, 1, 16, 16], |_| rng.gen::<f64>());
        let (out, cache) = cnn_forward(&slice, &mut params, &cfg, true).unwrap();
        let dfeat = Tensor::from_fn(out.features.shape(), |i| ((i % 7) as f64 - 3.0) * 0.1);
        let dsides: Vec<Tensor> = cache
            .side_outputs()
            .iter()
            .map(|t| Tensor::from_fn(t.shape(), |i| ((i % 5) as f64 - 2.0) * 0.1))
            .collect();
        params.zero_grads();
        let grads = CnnGrads {
            prob: None,
            features: Some(&dfeat),
            sides: Some(&dsides),
        };
        cnn_backward(&grads, &cache, &mut params, &cfg).unwrap();
        // the final conv is not on this path: its gradient stays zero
        let gfinal = params.get("cnn.final").weights.grad();
        assert!(gfinal.is_none() || gfinal.unwrap().iter().all(|&g| g == 0.0));
        // a trunk conv does receive gradient
        let g1 = params.get("cnn.s1.conv1").weights.grad().unwrap();
        assert!(g1.iter().any(|&g| g != 0.0));

        // finite differences on one early group for the combined objective
        let loss = |ps: &ParamSet| {
            let mut ps = ps.clone();
            let (out, cache) = cnn_forward(&slice, &mut ps, &cfg, true).unwrap();
            let mut l = 0.0;
            for (i, v) in out.features.data().iter().enumerate() {
                l += v * dfeat.data()[i];
            }
            for (t, dt) in cache.side_outputs().iter().zip(&dsides) {
                for (v, d) in t.data().iter().zip(dt.data()) {
                    l += v * d;
                }
            }
            l
        };
        let name = "cnn.s1.conv1";
        let w0 = params.get(name).weights.data().to_vec();
        let wg = params.get(name).weights.grad().unwrap().to_vec();
        let report = check_gradient(
            |v| {
                let mut ps = params.clone();
                ps.get_mut(name).weights.data_mut().copy_from_slice(v);
                loss(&ps)
            },
            &w0,
            &wg,
            &GradCheckConfig {
                samples: 20,
                ..GradCheckConfig::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
