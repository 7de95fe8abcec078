//! Training loops: CNN pretraining, joint refinement with cached slice
//! graphs, and evaluation helpers shared by the CLI.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cnn::{cnn_backward, cnn_forward, CnnGrads};
use crate::config::TrainConfig;
use crate::error::{AgnError, Result};
use crate::graph::Connectivity;
use crate::metrics::{dice_coefficient, MetricRecord, Split};
use crate::model::{
    build_slice_graph, init_model_params, joint_backward, joint_forward, ModelConfig, SliceGraph, FROZEN_IN_JOINT,
};
use crate::ops::loss::{bce_loss, bce_loss_backward};
use crate::optim::{adam_step, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use crate::params::ParamSet;
use crate::phantom::{split_indices, window_hu, PhantomVolume, PreprocessConfig};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Cnn,
    Joint,
}

/// Windowed network inputs ([1, 1, h, w]) and binary targets ([h, w]) for
/// every slice of a volume.
pub struct SliceSet {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn prepare_slices(vol: &PhantomVolume) -> Result<SliceSet> {
    let (n, h, w) = vol.dims();
    let pre = PreprocessConfig::default();
    let mut inputs = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    for z in 0..n {
        let windowed = window_hu(&vol.hu_slice(z), &pre)?;
        inputs.push(Tensor::new(vec![1, 1, h, w], windowed.data().to_vec())?);
        targets.push(vol.mask_slice(z));
    }
    let (train, test) = split_indices(n);
    if train.is_empty() || test.is_empty() {
        return Err(AgnError::InvalidArgument(format!(
            "volume with {n} slices cannot be split 75/25 into non-empty train and test sets"
        )));
    }
    Ok(SliceSet {
        inputs,
        targets,
        train,
        test,
    })
}

fn check_finite(loss: f64, iteration: usize) -> Result<f64> {
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(AgnError::TrainingAborted {
            iteration,
            reason: format!("loss became {loss}"),
        })
    }
}

/// splitmix64-style mixer for deriving per-slice / per-generation seeds.
fn mix_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base ^ a.wrapping_mul(0x9E3779B97F4A7C15) ^ b.wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn step_all(params: &mut ParamSet, lr: f64, skip: Option<&str>) {
    for p in params.iter_mut() {
        if Some(p.name.as_str()) == skip {
            continue;
        }
        adam_step(p, lr, ADAM_BETA1, ADAM_BETA2, ADAM_EPS);
    }
    params.zero_grads();
}

/// Average loss/dice of the CNN stream over the given slice indices.
pub fn evaluate_cnn(params: &mut ParamSet, cfg: &ModelConfig, slices: &SliceSet, indices: &[usize]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut dice = 0.0;
    for &z in indices {
        let (out, _) = cnn_forward(&slices.inputs[z], params, &cfg.cnn, false)?;
        loss += bce_loss(&out.prob, &slices.targets[z])?;
        dice += dice_coefficient(&out.prob, &slices.targets[z])?;
    }
    let n = indices.len() as f64;
    Ok((loss / n, dice / n))
}

/// Average loss/dice of the joint model; each slice gets a freshly built
/// graph with a deterministic vertex seed.
pub fn evaluate_joint(
    params: &mut ParamSet,
    cfg: &ModelConfig,
    slices: &SliceSet,
    indices: &[usize],
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xE7A1, 0));
    let mut loss = 0.0;
    let mut dice = 0.0;
    for &z in indices {
        let (out, _) = joint_forward(
            &slices.inputs[z],
            params,
            cfg,
            None,
            mix_seed(seed, 0xE7A1, z as u64),
            false,
            &mut rng,
        )?;
        loss += bce_loss(&out.prob, &slices.targets[z])?;
        dice += dice_coefficient(&out.prob, &slices.targets[z])?;
    }
    let n = indices.len() as f64;
    Ok((loss / n, dice / n))
}

/// Pretrains the CNN stream. Emits one train record per iteration and one
/// averaged test record per epoch (and after the final iteration).
pub fn train_cnn(vol: &PhantomVolume, cfg: &TrainConfig) -> Result<(ParamSet, ModelConfig, Vec<MetricRecord>)> {
    let (_, h, w) = vol.dims();
    let model = cfg.model_config((h, w))?;
    let slices = prepare_slices(vol)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_model_params(&model, &mut rng)?;
    let mut records = Vec::new();
    let epoch = slices.train.len();
    // baseline test eval so epoch means can bracket the first epoch
    let (tl0, td0) = evaluate_cnn(&mut params, &model, &slices, &slices.test)?;
    records.push(MetricRecord {
        iteration: 0,
        split: Split::Test,
        loss: tl0,
        dice: td0,
    });
    for iter in 0..cfg.cnn_iters {
        let z = slices.train[iter % epoch];
        let (out, cache) = cnn_forward(&slices.inputs[z], &mut params, &model.cnn, true)?;
        let loss = check_finite(bce_loss(&out.prob, &slices.targets[z])?, iter)?;
        let dice = dice_coefficient(&out.prob, &slices.targets[z])?;
        records.push(MetricRecord {
            iteration: iter,
            split: Split::Train,
            loss,
            dice,
        });
        let dprob = bce_loss_backward(&out.prob, &slices.targets[z])?;
        let grads = CnnGrads {
            prob: Some(&dprob),
            ..CnnGrads::default()
        };
        cnn_backward(&grads, &cache, &mut params, &model.cnn)?;
        step_all(&mut params, cfg.cnn_lr, None);
        if (iter + 1) % epoch == 0 || iter + 1 == cfg.cnn_iters {
            let (tl, td) = evaluate_cnn(&mut params, &model, &slices, &slices.test)?;
            records.push(MetricRecord {
                iteration: iter,
                split: Split::Test,
                loss: check_finite(tl, iter)?,
                dice: td,
            });
        }
    }
    Ok((params, model, records))
}

/// Joint training on top of pretrained parameters. Slice graphs are cached
/// and all rebuilt (from the current CNN probabilities, in eval mode) at
/// every `graph_update_period` boundary. The CNN's own probability head is
/// frozen: the decoder replaces it, so it receives no gradient and is
/// excluded from optimizer steps.
pub fn train_joint(
    vol: &PhantomVolume,
    cfg: &TrainConfig,
    params: &mut ParamSet,
) -> Result<(ModelConfig, Vec<MetricRecord>)> {
    let (_, h, w) = vol.dims();
    let model = cfg.model_config((h, w))?;
    let slices = prepare_slices(vol)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0xD0, 0));
    let mut graphs: Vec<Option<SliceGraph>> = vec![None; slices.train.len()];
    let mut records = Vec::new();
    let epoch = slices.train.len();
    let (tl0, td0) = evaluate_joint(params, &model, &slices, &slices.test, cfg.seed)?;
    records.push(MetricRecord {
        iteration: 0,
        split: Split::Test,
        loss: tl0,
        dice: td0,
    });
    for iter in 0..cfg.joint_iters {
        if iter % cfg.graph_update_period == 0 {
            let generation = (iter / cfg.graph_update_period) as u64;
            for (k, &z) in slices.train.iter().enumerate() {
                let (out, _) = cnn_forward(&slices.inputs[z], params, &model.cnn, false)?;
                graphs[k] = Some(build_slice_graph(
                    &out.prob,
                    &model.graph,
                    mix_seed(cfg.seed, generation, z as u64),
                )?);
            }
        }
        let k = iter % epoch;
        let z = slices.train[k];
        let (out, cache) = joint_forward(
            &slices.inputs[z],
            params,
            &model,
            graphs[k].as_ref(),
            0,
            true,
            &mut dropout_rng,
        )?;
        let loss = check_finite(bce_loss(&out.prob, &slices.targets[z])?, iter)?;
        let dice = dice_coefficient(&out.prob, &slices.targets[z])?;
        records.push(MetricRecord {
            iteration: iter,
            split: Split::Train,
            loss,
            dice,
        });
        let dprob = bce_loss_backward(&out.prob, &slices.targets[z])?;
        joint_backward(&dprob, &cache, params, &model)?;
        step_all(params, cfg.joint_lr, Some(FROZEN_IN_JOINT));
        if (iter + 1) % epoch == 0 || iter + 1 == cfg.joint_iters {
            let (tl, td) = evaluate_joint(params, &model, &slices, &slices.test, cfg.seed)?;
            records.push(MetricRecord {
                iteration: iter,
                split: Split::Test,
                loss: check_finite(tl, iter)?,
                dice: td,
            });
        }
    }
    Ok((model, records))
}

// ---- checkpoint metadata ----------------------------------------------------

/// Scalars stored alongside parameters so a checkpoint is self-describing.
pub fn checkpoint_meta(cfg: &TrainConfig, input_size: (usize, usize), kind: ModelKind) -> Vec<(String, f64)> {
    vec![
        ("kind".into(), if kind == ModelKind::Joint { 1.0 } else { 0.0 }),
        ("base_channels".into(), cfg.base_channels as f64),
        ("delta".into(), cfg.delta as f64),
        ("dropout".into(), cfg.dropout),
        ("leaky_slope".into(), cfg.leaky_slope),
        ("auto_threshold".into(), if cfg.auto_threshold { 1.0 } else { 0.0 }),
        ("d_threshold".into(), cfg.d_threshold),
        ("connectivity".into(), if cfg.connectivity == Connectivity::Eight { 8.0 } else { 4.0 }),
        ("seed".into(), cfg.seed as f64),
        ("input_h".into(), input_size.0 as f64),
        ("input_w".into(), input_size.1 as f64),
    ]
}

/// Rebuilds the training/model configuration a checkpoint was written with.
pub fn config_from_meta(meta: &std::collections::BTreeMap<String, f64>) -> Result<(TrainConfig, ModelConfig, ModelKind)> {
    let get = |key: &str| {
        meta.get(key)
            .copied()
            .ok_or_else(|| AgnError::ParamMismatch(format!("checkpoint is missing meta entry {key:?}")))
    };
    let mut cfg = TrainConfig::default();
    cfg.base_channels = get("base_channels")? as usize;
    cfg.delta = get("delta")? as u32;
    cfg.dropout = get("dropout")?;
    cfg.leaky_slope = get("leaky_slope")?;
    cfg.auto_threshold = get("auto_threshold")? != 0.0;
    cfg.d_threshold = get("d_threshold")?;
    cfg.connectivity = if get("connectivity")? == 8.0 {
        Connectivity::Eight
    } else {
        Connectivity::Four
    };
    cfg.seed = get("seed")? as u64;
    let input = (get("input_h")? as usize, get("input_w")? as usize);
    let kind = if get("kind")? == 1.0 { ModelKind::Joint } else { ModelKind::Cnn };
    let model = cfg.model_config(input)?;
    Ok((cfg, model, kind))
}
