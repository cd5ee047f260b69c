//! A small CNN stack for binary image classification, implemented directly
//! over f64 buffers: tensors, layers with hand-derived backward passes,
//! model assembly with checkpointing, and a training loop with early
//! stopping. No BLAS, no autograd; gradients are verified against finite
//! differences in the layer and model tests.

pub mod layers;
pub mod model;
pub mod tensor;
pub mod train;

pub use layers::{BackwardResult, Layer, LayerCache, LayerGrads};
pub use model::{load_checkpoint, save_checkpoint, ForwardPass, Gradients, LayerSpec, Model};
pub use tensor::Tensor;
pub use train::{
    bce_loss, score_samples, train, write_history_csv, EarlyStopping, EpochStats, EsDecision,
    Optimizer, OptimizerKind, Sample, TrainConfig, TrainReport,
};

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("tensor shape {shape:?} implies {expected} elements, got {got}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape mismatch in {context}: {lhs:?} vs {rhs:?}")]
    Shape {
        context: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("backward pass for {0} requires the cache from its forward pass")]
    MissingCache(&'static str),
    #[error("layer {index} ({kind}): {message}")]
    Layer {
        index: usize,
        kind: &'static str,
        message: String,
    },
    #[error("labels must be exactly 0.0 or 1.0, got {0}")]
    BadLabel(f64),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}: loss became non-finite")]
    Diverged {
        epoch: usize,
        stats: Vec<EpochStats>,
    },
    #[error("checkpoint {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}
