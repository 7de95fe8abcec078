//! Training configuration: desk-scale defaults plus a flat `key = value`
//! file format.

use crate::error::{AgnError, Result};
use crate::graph::Connectivity;
use crate::model::ModelConfig;

#[derive(Clone, Copy, Debug)]
pub struct TrainConfig {
    pub cnn_lr: f64,
    pub joint_lr: f64,
    pub cnn_iters: usize,
    pub joint_iters: usize,
    /// Joint training rebuilds every cached slice graph when the iteration
    /// count crosses a multiple of this period.
    pub graph_update_period: usize,
    pub dropout: f64,
    pub leaky_slope: f64,
    pub delta: u32,
    /// Fixed geodesic edge threshold; ignored when `auto_threshold` is set.
    pub d_threshold: f64,
    pub auto_threshold: bool,
    pub connectivity: Connectivity,
    pub seed: u64,
    pub base_channels: usize,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            cnn_lr: 0.01,
            joint_lr: 0.01,
            cnn_iters: 2000,
            joint_iters: 2000,
            graph_update_period: 250,
            dropout: 0.1,
            leaky_slope: 0.2,
            delta: 3,
            d_threshold: 10.0,
            auto_threshold: true,
            connectivity: Connectivity::Four,
            seed: 42,
            base_channels: 16,
            batch_size: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size != 1 {
            return Err(AgnError::InvalidConfig(format!(
                "batch_size must be 1 (per-slice training), got {}",
                self.batch_size
            )));
        }
        for (name, v) in [("cnn_lr", self.cnn_lr), ("joint_lr", self.joint_lr)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AgnError::InvalidConfig(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(AgnError::InvalidConfig(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.graph_update_period == 0 {
            return Err(AgnError::InvalidConfig("graph_update_period must be >= 1".into()));
        }
        if self.delta < 3 {
            return Err(AgnError::InvalidConfig(format!(
                "delta must be >= 3 for the fusion decoder, got {}",
                self.delta
            )));
        }
        Ok(())
    }

    /// Builds the model description this training run uses.
    pub fn model_config(&self, input_size: (usize, usize)) -> Result<ModelConfig> {
        self.validate()?;
        let mut cfg = ModelConfig::desk(input_size);
        cfg.cnn.base_channels = self.base_channels;
        cfg.gat.in_features = cfg.cnn.feature_channels();
        cfg.gat.out_features = cfg.cnn.side_channels();
        cfg.inference.stage_channels = cfg.cnn.side_channels();
        cfg.inference.in_features = cfg.gat.heads * cfg.gat.out_features;
        cfg.inference.dropout_p = self.dropout;
        cfg.graph.delta = self.delta;
        cfg.graph.d_threshold = self.d_threshold;
        cfg.graph.auto_threshold = self.auto_threshold;
        cfg.graph.connectivity = self.connectivity;
        cfg.inference.delta = self.delta;
        cfg.activation.leaky_slope = self.leaky_slope;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses a flat `key = value` file. `#` starts a comment; unknown keys
    /// are rejected. `d_threshold` accepts `auto` or a number.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                AgnError::InvalidConfig(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                AgnError::InvalidConfig(format!("line {}: {key} expects {what}, got {value:?}", lineno + 1))
            };
            let as_f64 = || value.parse::<f64>().map_err(|_| bad("a number"));
            let as_usize = || value.parse::<usize>().map_err(|_| bad("an integer"));
            match key {
                "cnn_lr" => cfg.cnn_lr = as_f64()?,
                "joint_lr" => cfg.joint_lr = as_f64()?,
                "cnn_iters" => cfg.cnn_iters = as_usize()?,
                "joint_iters" => cfg.joint_iters = as_usize()?,
                "graph_update_period" => cfg.graph_update_period = as_usize()?,
                "dropout" => cfg.dropout = as_f64()?,
                "leaky_slope" => cfg.leaky_slope = as_f64()?,
                "delta" => cfg.delta = value.parse::<u32>().map_err(|_| bad("an integer"))?,
                "d_threshold" => {
                    if value == "auto" {
                        cfg.auto_threshold = true;
                    } else {
                        cfg.auto_threshold = false;
                        cfg.d_threshold = as_f64()?;
                    }
                }
                "connectivity" => {
                    cfg.connectivity = match value {
                        "four" | "4" => Connectivity::Four,
                        "eight" | "8" => Connectivity::Eight,
                        _ => return Err(bad("four or eight")),
                    }
                }
                "seed" => cfg.seed = value.parse::<u64>().map_err(|_| bad("an integer"))?,
                "base_channels" => cfg.base_channels = as_usize()?,
                "batch_size" => cfg.batch_size = as_usize()?,
                _ => {
                    return Err(AgnError::InvalidConfig(format!(
                        "line {}: unknown key {key:?}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}
