//! Airway graph network core: a from-scratch CNN + graph-attention
//! segmentation model with hand-written backprop, geodesic graph
//! construction over probability maps, synthetic phantom data, and a
//! deterministic training pipeline.

pub mod cnn;
pub mod config;
pub mod error;
pub mod fmm;
pub mod formats;
pub mod gat;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{AgnError, Result};
pub use params::{LayerParams, ParamSet};
pub use tensor::Tensor;
