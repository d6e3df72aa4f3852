//! Building the two-network attention pipeline on the tape, plus the
//! flat parameter store shared by all training procedures.

use std::sync::Arc;

use crate::event::BinnedSample;
use crate::net::{
    maxpool_dense_raw, ConvGeom, Dense, LayerKind, LayerParams, Model, NetworkSpec, BN_EPS,
};
use crate::pipeline::PipelineConfig;

use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use super::GradError;

/// What a parameter tensor is within its layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    /// Batchnorm running statistics: carried in the set, never optimized.
    RunningMean,
    RunningVar,
}

impl ParamRole {
    fn trainable(&self) -> bool {
        !matches!(self, Self::RunningMean | Self::RunningVar)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamMeta {
    pub net: usize,
    pub layer: usize,
    pub role: ParamRole,
}

/// Flat store of every trainable tensor (plus batchnorm running stats)
/// of one or more networks. This is the single source of truth while
/// training; models are materialized from it on demand.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub values: Vec<Tensor>,
    pub meta: Vec<ParamMeta>,
    pub frozen: Vec<bool>,
}

impl ParamSet {
    pub fn from_models(models: &[&Model]) -> Self {
        let mut values = Vec::new();
        let mut meta = Vec::new();
        let mut push = |net, layer, role, t: Tensor| {
            values.push(t);
            meta.push(ParamMeta { net, layer, role });
        };
        for (ni, model) in models.iter().enumerate() {
            for (li, params) in model.layers.iter().enumerate() {
                let dims = model.weight_dims(li);
                match params {
                    LayerParams::Conv { w, bias, .. }
                    | LayerParams::ReluRnn { w, bias, .. }
                    | LayerParams::Fc { w, bias, .. } => {
                        push(ni, li, ParamRole::Weight, Tensor::new(dims.unwrap(), w.clone()));
                        push(ni, li, ParamRole::Bias, Tensor::vector(bias.clone()));
                    }
                    LayerParams::BatchNorm {
                        gamma,
                        beta,
                        mean,
                        var,
                    } => {
                        push(ni, li, ParamRole::Gamma, Tensor::vector(gamma.clone()));
                        push(ni, li, ParamRole::Beta, Tensor::vector(beta.clone()));
                        push(ni, li, ParamRole::RunningMean, Tensor::vector(mean.clone()));
                        push(ni, li, ParamRole::RunningVar, Tensor::vector(var.clone()));
                    }
                    LayerParams::MaxPool => {}
                }
            }
        }
        let frozen = meta.iter().map(|m| !m.role.trainable()).collect();
        Self {
            values,
            meta,
            frozen,
        }
    }

    pub fn find(&self, net: usize, layer: usize, role: ParamRole) -> Option<usize> {
        self.meta
            .iter()
            .position(|m| m.net == net && m.layer == layer && m.role == role)
    }

    /// Writes values back into the models (weights, biases, batchnorm
    /// affine params and running stats).
    pub fn apply_to_models(&self, models: &mut [&mut Model]) {
        for (idx, meta) in self.meta.iter().enumerate() {
            let value = &self.values[idx].data;
            match (&mut models[meta.net].layers[meta.layer], meta.role) {
                (
                    LayerParams::Conv { w, .. }
                    | LayerParams::ReluRnn { w, .. }
                    | LayerParams::Fc { w, .. },
                    ParamRole::Weight,
                ) => w.copy_from_slice(value),
                (
                    LayerParams::Conv { bias, .. }
                    | LayerParams::ReluRnn { bias, .. }
                    | LayerParams::Fc { bias, .. },
                    ParamRole::Bias,
                ) => bias.copy_from_slice(value),
                (LayerParams::BatchNorm { gamma, .. }, ParamRole::Gamma) => {
                    gamma.copy_from_slice(value)
                }
                (LayerParams::BatchNorm { beta, .. }, ParamRole::Beta) => {
                    beta.copy_from_slice(value)
                }
                (LayerParams::BatchNorm { mean, .. }, ParamRole::RunningMean) => {
                    mean.copy_from_slice(value)
                }
                (LayerParams::BatchNorm { var, .. }, ParamRole::RunningVar) => {
                    var.copy_from_slice(value)
                }
                _ => unreachable!("param meta out of sync with model"),
            }
        }
    }

    /// Freezes all params of one layer (used when a layer is quantized).
    pub fn freeze_layer(&mut self, net: usize, layer: usize) {
        for (idx, meta) in self.meta.iter().enumerate() {
            if meta.net == net && meta.layer == layer {
                self.frozen[idx] = true;
            }
        }
    }

    pub fn is_trainable(&self, idx: usize) -> bool {
        !self.frozen[idx] && self.meta[idx].role.trainable()
    }
}

/// A sample preprocessed for tape building: full-resolution frames for
/// the ROI crop (shared, not copied per timebin) and frames with the ROI
/// net's leading parameter-free pooling already applied.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub label: u32,
    pub full: Vec<Arc<Tensor>>,
    pub down: Vec<Tensor>,
}

/// Number of pooling layers before the first non-pool layer.
pub(crate) fn leading_pool_count(spec: &NetworkSpec) -> usize {
    spec.layers
        .iter()
        .take_while(|l| l.kind == LayerKind::MaxPool)
        .count()
}

impl PreparedSample {
    pub fn prepare(sample: &BinnedSample, roi_spec: &NetworkSpec) -> Result<Self, GradError> {
        let label = sample
            .label
            .ok_or_else(|| GradError::ConfigInvalid("sample without label".into()))?;
        let lead = leading_pool_count(roi_spec);
        let mut full = Vec::with_capacity(sample.frames.len());
        let mut down = Vec::with_capacity(sample.frames.len());
        for frame in &sample.frames {
            let dense = Dense::from_timebin_frame(frame);
            full.push(Arc::new(Tensor::new(
                vec![2, frame.height(), frame.width()],
                dense.data.clone(),
            )));
            let (c, mut h, mut w, mut data) = (dense.c, dense.h, dense.w, dense.data);
            for lspec in &roi_spec.layers[..lead] {
                let (nd, nh, nw) = maxpool_dense_raw(&data, c, h, w, lspec.k, lspec.stride);
                data = nd;
                h = nh;
                w = nw;
            }
            down.push(Tensor::new(vec![c, h, w], data));
        }
        Ok(Self { label, full, down })
    }
}

/// Pipeline graph configuration: specs plus attention geometry and the
/// effective L1 coefficient.
pub struct GraphConfig<'a> {
    pub roi_spec: &'a NetworkSpec,
    pub cls_spec: &'a NetworkSpec,
    pub pipeline: &'a PipelineConfig,
    pub lambda: f64,
}

/// Handles into one sample's recorded graph.
pub struct SampleGraph {
    pub loss: NodeId,
    pub ce_mean: NodeId,
    /// Leaf node of every `ParamSet` entry, parallel to its `values`.
    pub param_ids: Vec<NodeId>,
    pub bin_logits: Vec<NodeId>,
    /// ReLU output nodes tagged `(net, layer)` for sparsity accounting.
    pub relu_acts: Vec<(usize, usize, NodeId)>,
    /// Pre-batchnorm activation nodes tagged `(net, layer)` for running
    /// statistics updates.
    pub bn_inputs: Vec<(usize, usize, NodeId)>,
    /// Decoded ROI parameters per timebin `(g_x, g_y, delta)`.
    pub roi_values: Vec<(f64, f64, f64)>,
}

struct NetOnTape<'a> {
    net_idx: usize,
    spec: &'a NetworkSpec,
    /// Param node id per (layer, role), resolved through the ParamSet.
    ids: Vec<NodeId>,
    set: &'a ParamSet,
}

impl<'a> NetOnTape<'a> {
    fn param(&self, layer: usize, role: ParamRole) -> NodeId {
        let idx = self
            .set
            .find(self.net_idx, layer, role)
            .expect("param present");
        self.ids[idx]
    }

    /// Records the net's forward pass from `start_layer` on. Returns the
    /// output node; pushes relu/bn bookkeeping into the graph lists.
    #[allow(clippy::too_many_arguments)]
    fn forward(
        &self,
        tape: &mut Tape,
        input: NodeId,
        start_layer: usize,
        h_prev: &mut Vec<NodeId>,
        relu_acts: &mut Vec<(usize, usize, NodeId)>,
        bn_inputs: &mut Vec<(usize, usize, NodeId)>,
    ) -> NodeId {
        let shapes = self.spec.shapes().expect("validated spec");
        let mut cur = input;
        let mut pending_relu = false;
        let mut block_last = 0usize;
        let mut rnn_seen = 0usize;
        for (li, lspec) in self.spec.layers.iter().enumerate().skip(start_layer) {
            if pending_relu && !matches!(lspec.kind, LayerKind::BatchNorm | LayerKind::MaxPool) {
                cur = tape.relu(cur);
                relu_acts.push((self.net_idx, block_last, cur));
                pending_relu = false;
            }
            let in_shape = self.spec.layer_input_shape(li, &shapes);
            match lspec.kind {
                LayerKind::Conv => {
                    let geom = ConvGeom {
                        in_ch: lspec.in_ch,
                        in_h: in_shape.h,
                        in_w: in_shape.w,
                        out_ch: lspec.out_ch,
                        k: lspec.k,
                        pad: lspec.pad,
                        stride: lspec.stride,
                    };
                    let w = self.param(li, ParamRole::Weight);
                    let b = self.param(li, ParamRole::Bias);
                    cur = tape.conv2d(cur, w, b, geom);
                    pending_relu = true;
                    block_last = li;
                }
                LayerKind::BatchNorm => {
                    bn_inputs.push((self.net_idx, li, cur));
                    let gamma = self.param(li, ParamRole::Gamma);
                    let beta = self.param(li, ParamRole::Beta);
                    let mean_idx = self
                        .set
                        .find(self.net_idx, li, ParamRole::RunningMean)
                        .unwrap();
                    let var_idx = self
                        .set
                        .find(self.net_idx, li, ParamRole::RunningVar)
                        .unwrap();
                    cur = tape.batchnorm(
                        cur,
                        gamma,
                        beta,
                        self.set.values[mean_idx].data.clone(),
                        self.set.values[var_idx].data.clone(),
                        BN_EPS,
                    );
                    block_last = li;
                }
                LayerKind::MaxPool => {
                    cur = tape.maxpool(cur, lspec.k, lspec.stride);
                    if pending_relu {
                        block_last = li;
                    }
                }
                LayerKind::ReluRnn => {
                    let w = self.param(li, ParamRole::Weight);
                    let b = self.param(li, ParamRole::Bias);
                    let joint = tape.concat(cur, h_prev[rnn_seen]);
                    let z = tape.linear(w, joint, b, lspec.units);
                    cur = tape.relu(z);
                    relu_acts.push((self.net_idx, li, cur));
                    h_prev[rnn_seen] = cur;
                    rnn_seen += 1;
                }
                LayerKind::FullyConnected => {
                    let w = self.param(li, ParamRole::Weight);
                    let b = self.param(li, ParamRole::Bias);
                    let z = tape.linear(w, cur, b, lspec.units);
                    cur = tape.relu(z);
                    relu_acts.push((self.net_idx, li, cur));
                }
                LayerKind::Output => {
                    let w = self.param(li, ParamRole::Weight);
                    let b = self.param(li, ParamRole::Bias);
                    cur = tape.linear(w, cur, b, lspec.units);
                }
            }
        }
        if pending_relu {
            cur = tape.relu(cur);
            relu_acts.push((self.net_idx, block_last, cur));
        }
        cur
    }
}

/// Records the full pipeline over all timebins of one sample: ROI
/// prediction (with recurrent carry), decode, kernel grid, truncated
/// Gaussian crop of the constant frame, classification, and the loss
/// `mean_t CE_t + lambda * sum(ReLU activations)`.
pub fn build_sample_graph(
    tape: &mut Tape,
    cfg: &GraphConfig,
    set: &ParamSet,
    sample: &PreparedSample,
) -> SampleGraph {
    let param_ids: Vec<NodeId> = set
        .values
        .iter()
        .map(|v| tape.leaf(v.clone()))
        .collect();
    let roi_net = NetOnTape {
        net_idx: 0,
        spec: cfg.roi_spec,
        ids: param_ids.clone(),
        set,
    };
    let cls_net = NetOnTape {
        net_idx: 1,
        spec: cfg.cls_spec,
        ids: param_ids.clone(),
        set,
    };
    let lead = leading_pool_count(cfg.roi_spec);
    let grid = &cfg.pipeline.grid;
    let (a, b) = (cfg.pipeline.decode.width, cfg.pipeline.decode.height);
    let s = cfg.pipeline.decode.distance_scale;
    let (frame_h, frame_w) = (sample.full[0].shape[1], sample.full[0].shape[2]);

    let mut relu_acts = Vec::new();
    let mut bn_inputs = Vec::new();
    let mut roi_values = Vec::new();
    let mut bin_logits = Vec::new();
    let mut ce_terms = Vec::new();

    let mut roi_h: Vec<NodeId> = cfg
        .roi_spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ReluRnn)
        .map(|l| tape.leaf(Tensor::zeros(vec![l.units])))
        .collect();
    let mut cls_h: Vec<NodeId> = cfg
        .cls_spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ReluRnn)
        .map(|l| tape.leaf(Tensor::zeros(vec![l.units])))
        .collect();

    let timebins = sample.full.len();
    for t in 0..timebins {
        let down = tape.leaf(sample.down[t].clone());
        let raw = roi_net.forward(tape, down, lead, &mut roi_h, &mut relu_acts, &mut bn_inputs);

        // Eq-style decode: g = dim/2 * (tanh(raw) + 1), delta = S * (sigmoid + 1).
        let gx_hat = tape.index(raw, 0);
        let gy_hat = tape.index(raw, 1);
        let d_hat = tape.index(raw, 2);
        let gx_t = tape.tanh(gx_hat);
        let gx = tape.affine(gx_t, a / 2.0, a / 2.0);
        let gy_t = tape.tanh(gy_hat);
        let gy = tape.affine(gy_t, b / 2.0, b / 2.0);
        let d_s = tape.sigmoid(d_hat);
        let delta = tape.affine(d_s, s, s);
        roi_values.push((
            tape.value(gx).item(),
            tape.value(gy).item(),
            tape.value(delta).item(),
        ));

        let mu_x = tape.kernel_centers(gx, delta, grid.n);
        let mu_y = tape.kernel_centers(gy, delta, grid.n);
        let (fx, sx) = tape.gauss_rows(mu_x, grid.sigma, grid.theta, frame_w);
        let (fy, sy) = tape.gauss_rows(mu_y, grid.sigma, grid.theta, frame_h);
        let crop = tape.tgk_crop(fx, fy, sample.full[t].clone(), sx, sy);

        let logits = cls_net.forward(tape, crop, 0, &mut cls_h, &mut relu_acts, &mut bn_inputs);
        bin_logits.push(logits);
        let ce = tape.cross_entropy(logits, sample.label as usize);
        ce_terms.push((ce, 1.0 / timebins as f64));
    }

    let ce_mean = tape.lin_comb(ce_terms.clone());
    let mut loss_terms = ce_terms;
    if cfg.lambda != 0.0 {
        for &(_, _, act) in &relu_acts {
            let s_act = tape.sum_all(act);
            loss_terms.push((s_act, cfg.lambda));
        }
    }
    let loss = tape.lin_comb(loss_terms);

    SampleGraph {
        loss,
        ce_mean,
        param_ids,
        bin_logits,
        relu_acts,
        bn_inputs,
        roi_values,
    }
}

/// Records a classifier-only graph on a fixed (already cropped) input
/// sequence: used by the average-pooling fine-tune, where the ROI side
/// is frozen and executed outside the tape.
pub fn build_classifier_graph(
    tape: &mut Tape,
    cls_spec: &NetworkSpec,
    set: &ParamSet,
    crops: &[Tensor],
    label: u32,
    lambda: f64,
) -> SampleGraph {
    let param_ids: Vec<NodeId> = set
        .values
        .iter()
        .map(|v| tape.leaf(v.clone()))
        .collect();
    let cls_net = NetOnTape {
        net_idx: 0,
        spec: cls_spec,
        ids: param_ids.clone(),
        set,
    };
    let mut relu_acts = Vec::new();
    let mut bn_inputs = Vec::new();
    let mut bin_logits = Vec::new();
    let mut ce_terms = Vec::new();
    let mut cls_h: Vec<NodeId> = cls_spec
        .layers
        .iter()
        .filter(|l| l.kind == LayerKind::ReluRnn)
        .map(|l| tape.leaf(Tensor::zeros(vec![l.units])))
        .collect();

    let timebins = crops.len();
    for crop in crops {
        let input = tape.leaf(crop.clone());
        let logits = cls_net.forward(tape, input, 0, &mut cls_h, &mut relu_acts, &mut bn_inputs);
        bin_logits.push(logits);
        let ce = tape.cross_entropy(logits, label as usize);
        ce_terms.push((ce, 1.0 / timebins as f64));
    }
    let ce_mean = tape.lin_comb(ce_terms.clone());
    let mut loss_terms = ce_terms;
    if lambda != 0.0 {
        for &(_, _, act) in &relu_acts {
            let s_act = tape.sum_all(act);
            loss_terms.push((s_act, lambda));
        }
    }
    let loss = tape.lin_comb(loss_terms);
    SampleGraph {
        loss,
        ce_mean,
        param_ids,
        bin_logits,
        relu_acts,
        bn_inputs,
        roi_values: Vec::new(),
    }
}
