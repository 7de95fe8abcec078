//! The full model: CNN stream, graph attention over a geodesic graph built
//! from the CNN probability map, and the fusion decoder. Joint forward /
//! backward passes with optional reuse of a cached per-slice graph.

use rand_chacha::ChaCha8Rng;

use crate::cnn::{cnn_backward, cnn_forward, init_cnn_params, CnnCache, CnnConfig, CnnGrads};
use crate::error::{AgnError, Result};
use crate::gat::{gat_backward, gat_forward, init_gat_params, GatCache, GatConfig, GatMode};
use crate::graph::{build_adjacency, gather_features, gather_features_backward, sample_vertices, Adjacency, Graph, GraphConfig, VertexSet};
use crate::inference::{inference_backward, inference_forward, init_inference_params, InferenceCache, InferenceConfig};
use crate::params::ParamSet;
use crate::ops::activation::ActivationConfig;
use crate::tensor::Tensor;

pub const GAT_PREFIX: &str = "gat";

/// Parameter group that receives no gradient during joint training (the
/// decoder replaces it as the probability head).
pub const FROZEN_IN_JOINT: &str = "cnn.final";

#[derive(Clone, Copy, Debug)]
pub struct ModelConfig {
    pub cnn: CnnConfig,
    pub gat: GatConfig,
    pub graph: GraphConfig,
    pub inference: InferenceConfig,
    pub activation: ActivationConfig,
}

impl ModelConfig {
    /// Desk-scale default: 64x64 slices, base width 16, delta 3.
    pub fn desk(input_size: (usize, usize)) -> Self {
        let cnn = CnnConfig {
            base_channels: 16,
            input_size,
        };
        let gat = GatConfig {
            heads: 4,
            in_features: cnn.feature_channels(),
            out_features: cnn.side_channels(),
            mode: GatMode::Concat,
        };
        let graph = GraphConfig {
            delta: 3,
            ..GraphConfig::default()
        };
        let inference = InferenceConfig {
            stage_channels: cnn.side_channels(),
            in_features: gat.heads * gat.out_features,
            dropout_p: 0.1,
            delta: graph.delta,
        };
        ModelConfig {
            cnn,
            gat,
            graph,
            inference,
            activation: ActivationConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.validate()?;
        self.gat.validate()?;
        self.graph.validate(self.cnn.input_size.0, self.cnn.input_size.1)?;
        self.inference.validate()?;
        if self.gat.in_features != self.cnn.feature_channels() {
            return Err(AgnError::InvalidConfig(format!(
                "gat in_features {} must equal the CNN feature width {}",
                self.gat.in_features,
                self.cnn.feature_channels()
            )));
        }
        if self.gat.mode != GatMode::Concat {
            return Err(AgnError::InvalidConfig("the joint model refines rows in concat mode".into()));
        }
        if self.inference.in_features != self.gat.output_width() {
            return Err(AgnError::InvalidConfig(format!(
                "inference in_features {} must equal the GAT output width {}",
                self.inference.in_features,
                self.gat.output_width()
            )));
        }
        if self.inference.stage_channels != self.cnn.side_channels() {
            return Err(AgnError::InvalidConfig(format!(
                "inference stage_channels {} must equal the CNN side width {} for the skip concatenations",
                self.inference.stage_channels,
                self.cnn.side_channels()
            )));
        }
        if self.inference.delta != self.graph.delta {
            return Err(AgnError::InvalidConfig(format!(
                "inference delta {} must equal graph delta {}",
                self.inference.delta, self.graph.delta
            )));
        }
        Ok(())
    }
}

/// All trainable state of the joint model, registered in a fixed order.
pub fn init_model_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamSet> {
    cfg.validate()?;
    let mut params = ParamSet::new();
    init_cnn_params(&mut params, &cfg.cnn, rng)?;
    init_gat_params(&mut params, GAT_PREFIX, &cfg.gat, rng)?;
    init_inference_params(&mut params, &cfg.inference, rng)?;
    Ok(params)
}

/// Vertices and adjacency of one slice, reusable across iterations until the
/// next graph refresh.
#[derive(Clone, Debug)]
pub struct SliceGraph {
    pub vertices: VertexSet,
    pub adjacency: Adjacency,
    pub threshold: f64,
}

/// Builds a slice graph from a probability map under the model's graph
/// settings, with an explicit vertex tie-break seed.
pub fn build_slice_graph(prob: &Tensor, cfg: &GraphConfig, vertex_seed: u64) -> Result<SliceGraph> {
    let gcfg = GraphConfig {
        rng_seed: vertex_seed,
        ..*cfg
    };
    let vertices = sample_vertices(prob, &gcfg)?;
    let (adjacency, threshold) = build_adjacency(prob, &vertices, &gcfg)?;
    Ok(SliceGraph {
        vertices,
        adjacency,
        threshold,
    })
}

#[derive(Clone, Debug)]
pub struct JointCache {
    pub cnn: CnnCache,
    pub gat: GatCache,
    pub inference: InferenceCache,
    pub graph: Graph,
}

#[derive(Clone, Debug)]
pub struct JointOutput {
    /// Decoder probability map.
    pub prob: Tensor,
    /// CNN-stream probability map (kept for comparison output).
    pub cnn_prob: Tensor,
}

/// Runs all three modules. When `graph` is given its vertices/adjacency are
/// reused (training-cache path); otherwise a fresh graph is built from the
/// CNN probability map with `vertex_seed`.
pub fn joint_forward(
    slice: &Tensor,
    params: &mut ParamSet,
    cfg: &ModelConfig,
    graph: Option<&SliceGraph>,
    vertex_seed: u64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(JointOutput, JointCache)> {
    let (cnn_out, cnn_cache) = cnn_forward(slice, params, &cfg.cnn, training)?;
    let owned;
    let slice_graph = match graph {
        Some(g) => g,
        None => {
            owned = build_slice_graph(&cnn_out.prob, &cfg.graph, vertex_seed)?;
            &owned
        }
    };
    let rows = gather_features(&cnn_out.features, &slice_graph.vertices)?;
    let (refined, gat_cache) = gat_forward(&rows, &slice_graph.adjacency, params, GAT_PREFIX, &cfg.gat, &cfg.activation)?;
    let (prob, inf_cache) = inference_forward(
        &refined,
        &slice_graph.vertices,
        cnn_cache.side_outputs(),
        params,
        &cfg.inference,
        training,
        rng,
    )?;
    Ok((
        JointOutput {
            prob,
            cnn_prob: cnn_out.prob,
        },
        JointCache {
            cnn: cnn_cache,
            gat: gat_cache,
            inference: inf_cache,
            graph: Graph {
                vertices: slice_graph.vertices.clone(),
                adjacency: slice_graph.adjacency.clone(),
                features: rows,
            },
        },
    ))
}

/// Backward through decoder, GAT and CNN. The CNN final conv is off the
/// gradient path (the decoder is the joint probability head), so it stays
/// frozen. Returns the gradient with respect to the input slice.
pub fn joint_backward(
    dprob: &Tensor,
    cache: &JointCache,
    params: &mut ParamSet,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    let (grad_refined, grad_sides) = inference_backward(dprob, &cache.graph.vertices, &cache.inference, params, &cfg.inference)?;
    let grad_rows = gat_backward(&grad_refined, &cache.gat, &cache.graph.adjacency, params, GAT_PREFIX, &cfg.gat, &cfg.activation)?;
    let feature_shape = [
        1,
        cfg.cnn.feature_channels(),
        cfg.cnn.input_size.0,
        cfg.cnn.input_size.1,
    ];
    let grad_features = gather_features_backward(&grad_rows, &feature_shape, &cache.graph.vertices);
    let grads = CnnGrads {
        prob: None,
        features: Some(&grad_features),
        sides: Some(&grad_sides),
    };
    cnn_backward(&grads, &cache.cnn, params, &cfg.cnn)
}
