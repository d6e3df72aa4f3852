//! Inference orchestration: downsampled ROI prediction, ROI generation,
//! and classification over the timebins of one sample.
//!
//! Two execution flavors exist. The dense runner is the numeric
//! reference; the sparse runner drives the event-driven engine and
//! additionally reports per-layer effective-MAC/event tallies per
//! timebin, which the dataflow cost simulator consumes. With `lag`
//! enabled the classifier consumes the ROI generated from the previous
//! timebin (the pipelined schedule); the first timebin then sees an
//! all-zero ROI.

use std::fmt;

use crate::attention::{
    crop_dap, crop_tgk_counted, dap_region, decode_roi, kernel_centers, kernel_weights,
    AttentionError, DecodeConfig, KernelGridConfig, RawRoiOutput, RoiFrame, RoiParams,
};
use crate::event::{BinnedSample, TimebinFrame};
use crate::net::{
    forward_dense, forward_sparse, AttentionSpec, Dense, LayerTally, MacCounter, Model, NetError,
    NetRole, RecurrentState, SparseActivations,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoiMode {
    /// Truncated Gaussian kernels (differentiable; training-time path).
    Tgk,
    /// Dynamic average pooling (hardware inference path).
    Dap,
}

impl fmt::Display for RoiMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Tgk => write!(f, "tgk"),
            Self::Dap => write!(f, "dap"),
        }
    }
}

/// Resolved attention geometry for a concrete canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PipelineConfig {
    pub grid: KernelGridConfig,
    pub decode: DecodeConfig,
}

impl PipelineConfig {
    /// Resolves a file-level attention spec against the canvas size;
    /// the distance scale defaults to one eighth of the canvas width.
    pub fn resolve(attn: &AttentionSpec, canvas_w: usize, canvas_h: usize) -> Self {
        Self {
            grid: KernelGridConfig {
                n: attn.n,
                sigma: attn.sigma,
                theta: attn.theta,
            },
            decode: DecodeConfig::new(
                canvas_w,
                canvas_h,
                attn.s.unwrap_or(canvas_w as f64 / 8.0),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PipelineError {
    Net(NetError),
    Attention(AttentionError),
    Config(String),
}

impl fmt::Display for PipelineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Net(e) => write!(f, "{e}"),
            Self::Attention(e) => write!(f, "{e}"),
            Self::Config(msg) => write!(f, "pipeline config: {msg}"),
        }
    }
}

impl std::error::Error for PipelineError {}

impl From<NetError> for PipelineError {
    fn from(e: NetError) -> Self {
        Self::Net(e)
    }
}

impl From<AttentionError> for PipelineError {
    fn from(e: AttentionError) -> Self {
        Self::Attention(e)
    }
}

/// Generates the ROI crop for one frame under the selected mode and
/// reports the generation stage's cost tally. Events in: nonzero frame
/// cells (every event reaches the generation core). MACs: one per
/// counted kernel-support accumulate for the Gaussian path; one per
/// in-region event plus the `2 n^2` normalization divides for average
/// pooling.
pub fn roi_generation(
    frame: &TimebinFrame,
    roi: &RoiParams,
    cfg: &PipelineConfig,
    mode: RoiMode,
) -> Result<(RoiFrame, LayerTally), PipelineError> {
    let events_in = frame.nonzero_count() as u64;
    let (crop, macs) = match mode {
        RoiMode::Tgk => {
            let grid = kernel_centers(roi, &cfg.grid);
            let weights = kernel_weights(&grid, &cfg.grid, frame.width(), frame.height());
            crop_tgk_counted(frame, &weights)
        }
        RoiMode::Dap => {
            let region = dap_region(roi, &cfg.grid);
            let crop = crop_dap(frame, &region, cfg.grid.n)?;
            let mut in_region = 0u64;
            for p in 0..2 {
                for y in 0..frame.height() {
                    for x in 0..frame.width() {
                        if frame.get(p, y, x) != 0.0 {
                            let i = ((x as f64 - region.x_min) / region.k_dap).floor();
                            let j = ((y as f64 - region.y_min) / region.k_dap).floor();
                            if i >= 0.0
                                && i < cfg.grid.n as f64
                                && j >= 0.0
                                && j < cfg.grid.n as f64
                            {
                                in_region += 1;
                            }
                        }
                    }
                }
            }
            let macs = in_region + 2 * (cfg.grid.n as u64).pow(2);
            (crop, macs)
        }
    };
    let tally = LayerTally {
        macs,
        events_in,
        events_out: crop.nonzero_count() as u64,
    };
    Ok((crop, tally))
}

/// Per-timebin record of a sparse pipeline run.
#[derive(Debug, Clone)]
pub struct BinRecord {
    pub roi: RoiParams,
    pub logits: Vec<f64>,
    pub roi_tallies: Vec<LayerTally>,
    pub gen_tally: LayerTally,
    pub cls_tallies: Vec<LayerTally>,
}

/// Result of running the two-network pipeline over a full sample.
#[derive(Debug, Clone)]
pub struct PairRun {
    pub bins: Vec<BinRecord>,
    pub logits_sum: Vec<f64>,
    pub prediction: u32,
}

fn argmax(v: &[f64]) -> u32 {
    let mut best = 0usize;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best as u32
}

fn validate_pair(
    roi_model: &Model,
    cls_model: &Model,
    sample: &BinnedSample,
    cfg: &PipelineConfig,
) -> Result<(), PipelineError> {
    if roi_model.spec.role != NetRole::RoiPrediction
        || cls_model.spec.role != NetRole::Classification
    {
        return Err(PipelineError::Config(
            "expected an roi-prediction and a classification network".into(),
        ));
    }
    let frame = &sample.frames[0];
    let rs = roi_model.spec.input_shape();
    if (rs.h, rs.w) != (frame.height(), frame.width()) {
        return Err(PipelineError::Config(format!(
            "roi net expects {}x{}, sample frames are {}x{}",
            rs.w,
            rs.h,
            frame.width(),
            frame.height()
        )));
    }
    let cs = cls_model.spec.input_shape();
    if (cs.h, cs.w) != (cfg.grid.n, cfg.grid.n) {
        return Err(PipelineError::Config(format!(
            "classifier expects {}x{}, attention grid is {}",
            cs.w, cs.h, cfg.grid.n
        )));
    }
    Ok(())
}

fn decode_bin_output(p: &[f64], cfg: &PipelineConfig) -> RoiParams {
    decode_roi(
        &RawRoiOutput {
            g_x_hat: p[0],
            g_y_hat: p[1],
            delta_hat: p[2],
        },
        &cfg.decode,
    )
}

/// Sparse event-driven run of the ROI-prediction/classification pair.
/// With `lag` the classifier consumes the previous timebin's ROI.
pub fn run_pair_sparse(
    roi_model: &Model,
    cls_model: &Model,
    sample: &BinnedSample,
    cfg: &PipelineConfig,
    mode: RoiMode,
    lag: bool,
) -> Result<PairRun, PipelineError> {
    validate_pair(roi_model, cls_model, sample, cfg)?;
    let mut roi_state = RecurrentState::zeros(roi_model);
    let mut cls_state = RecurrentState::zeros(cls_model);
    let mut bins = Vec::with_capacity(sample.timebins());
    let mut logits_sum = vec![0.0; cls_model.output_len()];
    let mut pending_crop: Option<RoiFrame> = None; // previous bin's ROI when lagged

    for frame in &sample.frames {
        let mut roi_counter = MacCounter::for_model(roi_model);
        let input = SparseActivations::from_dense(&Dense::from_timebin_frame(frame));
        let (raw, next_roi_state) = forward_sparse(roi_model, &input, &roi_state, &mut roi_counter)?;
        roi_state = next_roi_state;
        let roi = decode_bin_output(&raw, cfg);
        let (crop, gen_tally) = roi_generation(frame, &roi, cfg, mode)?;

        let cls_input = if lag {
            pending_crop
                .replace(crop)
                .unwrap_or_else(|| RoiFrame::zeros(cfg.grid.n))
        } else {
            crop
        };
        let mut cls_counter = MacCounter::for_model(cls_model);
        let sparse_in = SparseActivations::from_dense(&Dense::from_roi_frame(&cls_input));
        let (logits, next_cls_state) =
            forward_sparse(cls_model, &sparse_in, &cls_state, &mut cls_counter)?;
        cls_state = next_cls_state;
        for (s, l) in logits_sum.iter_mut().zip(&logits) {
            *s += l;
        }
        bins.push(BinRecord {
            roi,
            logits,
            roi_tallies: roi_counter.layers,
            gen_tally,
            cls_tallies: cls_counter.layers,
        });
    }
    Ok(PairRun {
        prediction: argmax(&logits_sum),
        logits_sum,
        bins,
    })
}

/// Dense reference run of the pair (no tallies, never lagged).
pub fn run_pair_dense(
    roi_model: &Model,
    cls_model: &Model,
    sample: &BinnedSample,
    cfg: &PipelineConfig,
    mode: RoiMode,
) -> Result<PairRun, PipelineError> {
    validate_pair(roi_model, cls_model, sample, cfg)?;
    let mut roi_state = RecurrentState::zeros(roi_model);
    let mut cls_state = RecurrentState::zeros(cls_model);
    let mut bins = Vec::with_capacity(sample.timebins());
    let mut logits_sum = vec![0.0; cls_model.output_len()];

    for frame in &sample.frames {
        let (raw, next_roi_state) =
            forward_dense(roi_model, &Dense::from_timebin_frame(frame), &roi_state)?;
        roi_state = next_roi_state;
        let roi = decode_bin_output(&raw, cfg);
        let (crop, gen_tally) = roi_generation(frame, &roi, cfg, mode)?;
        let (logits, next_cls_state) =
            forward_dense(cls_model, &Dense::from_roi_frame(&crop), &cls_state)?;
        cls_state = next_cls_state;
        for (s, l) in logits_sum.iter_mut().zip(&logits) {
            *s += l;
        }
        bins.push(BinRecord {
            roi,
            logits,
            roi_tallies: Vec::new(),
            gen_tally,
            cls_tallies: Vec::new(),
        });
    }
    Ok(PairRun {
        prediction: argmax(&logits_sum),
        logits_sum,
        bins,
    })
}

/// Per-timebin record of a single-network (baseline) run.
#[derive(Debug, Clone)]
pub struct SingleBinRecord {
    pub logits: Vec<f64>,
    pub tallies: Vec<LayerTally>,
}

#[derive(Debug, Clone)]
pub struct SingleRun {
    pub bins: Vec<SingleBinRecord>,
    pub logits_sum: Vec<f64>,
    pub prediction: u32,
}

/// Sparse run of a single classification network on raw frames.
pub fn run_single_sparse(
    model: &Model,
    sample: &BinnedSample,
) -> Result<SingleRun, PipelineError> {
    let mut state = RecurrentState::zeros(model);
    let mut bins = Vec::with_capacity(sample.timebins());
    let mut logits_sum = vec![0.0; model.output_len()];
    for frame in &sample.frames {
        let mut counter = MacCounter::for_model(model);
        let input = SparseActivations::from_dense(&Dense::from_timebin_frame(frame));
        let (logits, next) = forward_sparse(model, &input, &state, &mut counter)?;
        state = next;
        for (s, l) in logits_sum.iter_mut().zip(&logits) {
            *s += l;
        }
        bins.push(SingleBinRecord {
            logits,
            tallies: counter.layers,
        });
    }
    Ok(SingleRun {
        prediction: argmax(&logits_sum),
        logits_sum,
        bins,
    })
}

/// Dense run of a single classification network on raw frames.
pub fn run_single_dense(model: &Model, sample: &BinnedSample) -> Result<SingleRun, PipelineError> {
    let mut state = RecurrentState::zeros(model);
    let mut bins = Vec::with_capacity(sample.timebins());
    let mut logits_sum = vec![0.0; model.output_len()];
    for frame in &sample.frames {
        let (logits, next) = forward_dense(model, &Dense::from_timebin_frame(frame), &state)?;
        state = next;
        for (s, l) in logits_sum.iter_mut().zip(&logits) {
            *s += l;
        }
        bins.push(SingleBinRecord {
            logits,
            tallies: Vec::new(),
        });
    }
    Ok(SingleRun {
        prediction: argmax(&logits_sum),
        logits_sum,
        bins,
    })
}
