//! Reverse-mode automatic differentiation and training.
//!
//! The tape records tensor-level primitives during a forward pass; a
//! single backward sweep then yields exact gradients for every recorded
//! parameter, including the path through ROI decoding, the kernel grid,
//! and the truncated-Gaussian crop, so the whole pipeline trains end to
//! end. Truncation windows are treated as fixed during backpropagation
//! (no gradient flows through the hard cutoff).
//!
//! Training utilities on top of the tape: joint training of the ROI
//! prediction and classification networks with an L1 activation sparsity
//! loss, incremental freeze-and-train 4-bit quantization, and the
//! fine-tune step that swaps the differentiable crop for dynamic average
//! pooling.

pub mod gradcheck;
mod pipeline;
mod tape;
mod tensor;
mod train;

pub use pipeline::{
    build_classifier_graph, build_sample_graph, GraphConfig, ParamMeta, ParamRole, ParamSet,
    PreparedSample, SampleGraph,
};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
pub use train::{
    dap_finetune, evaluate_pair, qat_finetune, train, MetricsLog, MetricsRow, Optimizer,
    TrainConfig, TrainOutput,
};

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum GradError {
    /// Backward target is missing or not a scalar.
    DisconnectedLoss,
    /// Bad training configuration.
    ConfigInvalid(String),
    /// Quantization schedule does not cover every weighted layer.
    ScheduleIncomplete(String),
}

impl fmt::Display for GradError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DisconnectedLoss => write!(f, "loss node is missing or not scalar"),
            Self::ConfigInvalid(msg) => write!(f, "invalid train config: {msg}"),
            Self::ScheduleIncomplete(msg) => write!(f, "quantization schedule incomplete: {msg}"),
        }
    }
}

impl std::error::Error for GradError {}
