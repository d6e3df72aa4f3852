//! Event-based vision pipeline with trainable hard attention.
//!
//! The crate implements the full stack needed to classify event-camera
//! streams through a predicted region of interest:
//!
//! * [`event`] — event data model, binary stream format, timebinning,
//!   and a synthetic noisy-digit dataset generator;
//! * [`attention`] — ROI parameter decoding, truncated-Gaussian-kernel
//!   ROI generation for training, and dynamic average pooling for
//!   inference;
//! * [`net`] — event-based CNN layer stack with dense and sparse
//!   event-driven forward passes, effective-MAC accounting, and 4-bit
//!   power-of-two weight quantization;
//! * [`grad`] — a reverse-mode tape sufficient to train the whole
//!   pipeline end to end, plus sparsity-/quantization-aware training and
//!   the average-pooling fine-tune step;
//! * [`pipesim`] — a deterministic multi-core dataflow cost simulator
//!   for latency/energy accounting of the deployed pipeline;
//! * [`pipeline`] — inference orchestration tying the pieces together.

pub mod attention;
pub mod event;
pub mod grad;
pub mod net;
pub mod pipeline;
pub mod pipesim;
