//! Event-based CNN stack: layer specs, dense and sparse event-driven
//! forward passes with effective-MAC accounting, 4-bit power-of-two
//! weight quantization, and the binary weight format.
//!
//! A convolutional block runs Conv -> BatchNorm -> MaxPool -> ReLU, i.e.
//! normalization and pooling act on pre-activation values, and the ReLU
//! output is emitted as sparse events to the next layer. Recurrent layers
//! use a plain ReLU RNN so hidden activations stay sparse too.

mod forward;
mod model;
mod quant;
mod spec;

pub use forward::{
    conv2d_dense_raw, forward_dense, forward_sparse, l1_activation_loss, maxpool_dense_raw,
    ConvGeom, Dense, BN_EPS,
    LayerTally, MacCounter, RecurrentState, SparseActivations,
};
pub use model::{load_weights, save_weights, LayerParams, Model, TRPW_MAGIC};
pub use quant::{
    pack_nibbles, quantize_layer, quantize_with_scale, unpack_nibbles, QuantTensor,
};
pub use spec::{
    parse_network_file, AttentionSpec, LayerKind, LayerShape, LayerSpec, NetFile, NetRole,
    NetworkSpec,
};

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum NetError {
    /// Missing or wrong magic in a weight file.
    BadMagic,
    /// Weight file layer count does not match the network spec.
    LayerCountMismatch { expected: usize, found: usize },
    /// Geometry inconsistency (spec chaining, input, or weight dims).
    ShapeMismatch(String),
    /// A quantized value outside the 4-bit signed range.
    ValueOutOfRange(i32),
    /// Weight file ends before all declared records.
    TruncatedFile,
    /// Network spec file syntax or semantic error.
    Parse { line: usize, msg: String },
}

impl fmt::Display for NetError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad weight file magic"),
            Self::LayerCountMismatch { expected, found } => {
                write!(f, "layer count mismatch: spec has {expected}, file has {found}")
            }
            Self::ShapeMismatch(msg) => write!(f, "shape mismatch: {msg}"),
            Self::ValueOutOfRange(v) => write!(f, "value {v} outside 4-bit signed range"),
            Self::TruncatedFile => write!(f, "weight file truncated"),
            Self::Parse { line, msg } => write!(f, "spec parse error at line {line}: {msg}"),
        }
    }
}

impl std::error::Error for NetError {}
