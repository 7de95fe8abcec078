//! Multi-head graph attention over vertex feature rows.
//!
//! Per head: z = XW, attention logits e_ij = LeakyReLU((z_i || z_j) . a)
//! over neighborhoods, masked row softmax, h_i = sum_j alpha_ij z_j. Heads
//! are either ELU'd and concatenated, or averaged and squashed with a
//! sigmoid. Neighbor reductions go through [`stable_sum`] so the output is
//! bitwise invariant under vertex permutations.

use crate::error::{AgnError, Result};
use crate::graph::{build_adjacency, gather_features, gather_features_backward, sample_vertices, Adjacency, Graph, GraphConfig};
use crate::ops::activation::{apply, derivative, Activation, ActivationConfig};
use crate::ops::softmax::{masked_row_softmax, masked_row_softmax_backward};
use crate::params::{LayerParams, ParamSet};
use crate::tensor::{stable_sum, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatMode {
    /// ELU per head, concatenated: output width heads * out_features.
    Concat,
    /// Sigmoid of the head average (no ELU): output width out_features.
    AverageSigmoid,
}

#[derive(Clone, Copy, Debug)]
pub struct GatConfig {
    pub heads: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub mode: GatMode,
}

impl GatConfig {
    pub fn output_width(&self) -> usize {
        match self.mode {
            GatMode::Concat => self.heads * self.out_features,
            GatMode::AverageSigmoid => self.out_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.in_features == 0 || self.out_features == 0 {
            return Err(AgnError::InvalidConfig(
                "gat heads, in_features and out_features must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn head_name(prefix: &str, k: usize) -> String {
    format!("{prefix}.h{k}")
}

/// Registers one `{prefix}.h{k}` group per head (W in weights, a in bias).
pub fn init_gat_params(params: &mut ParamSet, prefix: &str, cfg: &GatConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Result<()> {
    cfg.validate()?;
    for k in 0..cfg.heads {
        params.insert(LayerParams::gat_head(head_name(prefix, k), cfg.in_features, cfg.out_features, rng))?;
    }
    Ok(())
}

/// Intermediates kept for the backward pass.
#[derive(Clone, Debug)]
pub struct GatCache {
    pub x: Tensor,
    /// per head: z [V,n'], alpha [V,V], raw logits s_i + t_j [V,V],
    /// aggregated pre-activation h [V,n']
    pub z: Vec<Tensor>,
    pub alpha: Vec<Tensor>,
    pub logits: Vec<Tensor>,
    pub h_pre: Vec<Tensor>,
    /// AverageSigmoid only: the sigmoid output [V,n']
    pub avg_out: Option<Tensor>,
}

pub fn gat_forward(
    x: &Tensor,
    adj: &Adjacency,
    params: &ParamSet,
    prefix: &str,
    cfg: &GatConfig,
    act: &ActivationConfig,
) -> Result<(Tensor, GatCache)> {
    cfg.validate()?;
    adj.validate()?;
    let (v, n) = x.dims2()?;
    if n != cfg.in_features {
        return Err(AgnError::shape("gat_forward input width", x.shape(), &[v, cfg.in_features]));
    }
    if adj.v != v {
        return Err(AgnError::InvalidArgument(format!(
            "gat_forward: {v} feature rows vs {} adjacency vertices",
            adj.v
        )));
    }
    let np = cfg.out_features;
    let xd = x.data();
    let mut cache = GatCache {
        x: x.clone(),
        z: Vec::with_capacity(cfg.heads),
        alpha: Vec::with_capacity(cfg.heads),
        logits: Vec::with_capacity(cfg.heads),
        h_pre: Vec::with_capacity(cfg.heads),
        avg_out: None,
    };
    let mut out = Tensor::zeros(&[v, cfg.output_width()]);
    let mut avg_acc = match cfg.mode {
        GatMode::AverageSigmoid => Some(vec![0.0; v * np]),
        GatMode::Concat => None,
    };
    let mut terms: Vec<f64> = Vec::with_capacity(v);
    for k in 0..cfg.heads {
        let p = params.get(&head_name(prefix, k));
        let w = p.weights.data();
        let a = p.bias.as_ref().expect("gat head has attention vector").data();

        let mut z = Tensor::zeros(&[v, np]);
        {
            let zd = z.data_mut();
            for i in 0..v {
                for m in 0..n {
                    let xv = xd[i * n + m];
                    if xv == 0.0 {
                        continue;
                    }
                    for f in 0..np {
                        zd[i * np + f] += xv * w[m * np + f];
                    }
                }
            }
        }
        let zd = z.data();
        // per-row halves of the pair score: (z_i || z_j) . a = s_i + t_j
        let mut s = vec![0.0; v];
        let mut t = vec![0.0; v];
        for i in 0..v {
            let mut si = 0.0;
            let mut ti = 0.0;
            for f in 0..np {
                si += zd[i * np + f] * a[f];
                ti += zd[i * np + f] * a[np + f];
            }
            s[i] = si;
            t[i] = ti;
        }
        let mut logits = Tensor::zeros(&[v, v]);
        let mut scores = Tensor::zeros(&[v, v]);
        {
            let ld = logits.data_mut();
            let sd = scores.data_mut();
            for i in 0..v {
                for j in 0..v {
                    if adj.data[i * v + j] != 0 {
                        let pre = s[i] + t[j];
                        ld[i * v + j] = pre;
                        sd[i * v + j] = apply(pre, Activation::LeakyRelu, act);
                    }
                }
            }
        }
        let alpha = masked_row_softmax(&scores, &adj.data)?;
        let ad = alpha.data();
        let mut h = Tensor::zeros(&[v, np]);
        {
            let hd = h.data_mut();
            for i in 0..v {
                for f in 0..np {
                    terms.clear();
                    for j in 0..v {
                        if adj.data[i * v + j] != 0 {
                            terms.push(ad[i * v + j] * zd[j * np + f]);
                        }
                    }
                    hd[i * np + f] = stable_sum(&mut terms);
                }
            }
        }
        match cfg.mode {
            GatMode::Concat => {
                let od = out.data_mut();
                let hd = h.data();
                let width = cfg.heads * np;
                for i in 0..v {
                    for f in 0..np {
                        od[i * width + k * np + f] = apply(hd[i * np + f], Activation::Elu, act);
                    }
                }
            }
            GatMode::AverageSigmoid => {
                let acc = avg_acc.as_mut().unwrap();
                for (ac, hv) in acc.iter_mut().zip(h.data()) {
                    *ac += hv;
                }
            }
        }
        cache.z.push(z);
        cache.alpha.push(alpha);
        cache.logits.push(logits);
        cache.h_pre.push(h);
    }
    if let Some(acc) = avg_acc {
        let kf = cfg.heads as f64;
        let od = out.data_mut();
        for (o, ac) in od.iter_mut().zip(&acc) {
            *o = apply(ac / kf, Activation::Sigmoid, act);
        }
        cache.avg_out = Some(out.clone());
    }
    Ok((out, cache))
}

/// Exact backward through aggregation, softmax, pair scores and the linear
/// map. Accumulates into each head's weight/bias gradients and returns the
/// gradient with respect to the input rows.
pub fn gat_backward(
    grad_out: &Tensor,
    cache: &GatCache,
    adj: &Adjacency,
    params: &mut ParamSet,
    prefix: &str,
    cfg: &GatConfig,
    act: &ActivationConfig,
) -> Result<Tensor> {
    let (v, n) = cache.x.dims2()?;
    let np = cfg.out_features;
    if grad_out.shape() != [v, cfg.output_width()] {
        return Err(AgnError::shape("gat_backward grad_out", grad_out.shape(), &[v, cfg.output_width()]));
    }
    let xd = cache.x.data();
    let god = grad_out.data();
    let mut grad_x = Tensor::zeros(&[v, n]);
    for k in 0..cfg.heads {
        let z = &cache.z[k];
        let zd = z.data();
        let alpha = &cache.alpha[k];
        let ad = alpha.data();
        let logits = cache.logits[k].data();
        let h = cache.h_pre[k].data();

        // gradient into the aggregated pre-activation h
        let mut dh = vec![0.0; v * np];
        match cfg.mode {
            GatMode::Concat => {
                let width = cfg.heads * np;
                for i in 0..v {
                    for f in 0..np {
                        let pre = h[i * np + f];
                        let y = apply(pre, Activation::Elu, act);
                        dh[i * np + f] = god[i * width + k * np + f] * derivative(pre, y, Activation::Elu, act);
                    }
                }
            }
            GatMode::AverageSigmoid => {
                let y = cache.avg_out.as_ref().expect("avg cache").data();
                let kf = cfg.heads as f64;
                for i in 0..v * np {
                    dh[i] = god[i] * y[i] * (1.0 - y[i]) / kf;
                }
            }
        }
        // h_i = sum_j alpha_ij z_j
        let mut dalpha = Tensor::zeros(&[v, v]);
        let mut dz = vec![0.0; v * np];
        {
            let dad = dalpha.data_mut();
            for i in 0..v {
                for j in 0..v {
                    if adj.data[i * v + j] == 0 {
                        continue;
                    }
                    let mut dot = 0.0;
                    for f in 0..np {
                        dot += dh[i * np + f] * zd[j * np + f];
                        dz[j * np + f] += ad[i * v + j] * dh[i * np + f];
                    }
                    dad[i * v + j] = dot;
                }
            }
        }
        let de = masked_row_softmax_backward(alpha, &dalpha, &adj.data);
        let ded = de.data();
        // e_ij = LeakyReLU(s_i + t_j)
        let mut ds = vec![0.0; v];
        let mut dt = vec![0.0; v];
        for i in 0..v {
            for j in 0..v {
                if adj.data[i * v + j] == 0 {
                    continue;
                }
                let pre = logits[i * v + j];
                let y = apply(pre, Activation::LeakyRelu, act);
                let dpre = ded[i * v + j] * derivative(pre, y, Activation::LeakyRelu, act);
                ds[i] += dpre;
                dt[j] += dpre;
            }
        }
        let p = params.get_mut(&head_name(prefix, k));
        let a = p.bias.as_ref().expect("gat head has attention vector").data().to_vec();
        // s_i = z_i . a_l, t_i = z_i . a_r
        let mut da = vec![0.0; 2 * np];
        for i in 0..v {
            for f in 0..np {
                dz[i * np + f] += ds[i] * a[f] + dt[i] * a[np + f];
                da[f] += ds[i] * zd[i * np + f];
                da[np + f] += dt[i] * zd[i * np + f];
            }
        }
        // z = XW
        let w = p.weights.data().to_vec();
        let mut dw = vec![0.0; n * np];
        {
            let gxd = grad_x.data_mut();
            for i in 0..v {
                for m in 0..n {
                    let xv = xd[i * n + m];
                    let mut acc = 0.0;
                    for f in 0..np {
                        let d = dz[i * np + f];
                        dw[m * np + f] += xv * d;
                        acc += d * w[m * np + f];
                    }
                    gxd[i * n + m] += acc;
                }
            }
        }
        p.weights.accumulate_grad(&dw);
        p.bias.as_mut().unwrap().accumulate_grad(&da);
    }
    Ok(grad_x)
}

/// Everything the joint backward needs to push gradients from refined rows
/// back to the CNN feature map.
#[derive(Clone, Debug)]
pub struct GnnCache {
    pub gat: GatCache,
    pub feature_shape: Vec<usize>,
}

/// Sample vertices from the probability map, build the geodesic adjacency,
/// gather feature rows, and refine them with one concat-mode GAT layer.
pub fn gnn_module_forward(
    cnn_features: &Tensor,
    prob: &Tensor,
    gcfg: &GraphConfig,
    params: &ParamSet,
    prefix: &str,
    cfg: &GatConfig,
    act: &ActivationConfig,
) -> Result<(Graph, Tensor, GnnCache)> {
    let (_, c, fh, fw) = cnn_features.dims4()?;
    let (h, w) = prob.dims2()?;
    if fh != h || fw != w {
        return Err(AgnError::shape("gnn_module_forward alignment", cnn_features.shape(), prob.shape()));
    }
    if c != cfg.in_features {
        return Err(AgnError::InvalidArgument(format!(
            "gnn_module_forward: {c} feature channels vs gat in_features {}",
            cfg.in_features
        )));
    }
    let vertices = sample_vertices(prob, gcfg)?;
    let (adjacency, _) = build_adjacency(prob, &vertices, gcfg)?;
    let rows = gather_features(cnn_features, &vertices)?;
    let (refined, gat) = gat_forward(&rows, &adjacency, params, prefix, cfg, act)?;
    let graph = Graph {
        vertices,
        adjacency,
        features: rows,
    };
    Ok((
        graph,
        refined,
        GnnCache {
            gat,
            feature_shape: cnn_features.shape().to_vec(),
        },
    ))
}

/// Backward of [`gnn_module_forward`]: gradient lands only at sampled pixels.
pub fn gnn_module_backward(
    grad_refined: &Tensor,
    graph: &Graph,
    cache: &GnnCache,
    params: &mut ParamSet,
    prefix: &str,
    cfg: &GatConfig,
    act: &ActivationConfig,
) -> Result<Tensor> {
    let grad_rows = gat_backward(grad_refined, &cache.gat, &graph.adjacency, params, prefix, cfg, act)?;
    Ok(gather_features_backward(&grad_rows, &cache.feature_shape, &graph.vertices))
}
