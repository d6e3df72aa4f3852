//! Training procedures: joint end-to-end training of the ROI-prediction
//! and classification networks, incremental freeze-and-train 4-bit
//! quantization, and classifier fine-tuning with average-pooling ROI
//! generation.
//!
//! Everything is deterministic in `(seed, config, data)`: sample order
//! comes from one seeded generator, batch gradients are accumulated in
//! sample order, and batchnorm running statistics update from batch
//! moments with momentum 0.1 after each step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::attention::{crop_dap, dap_region, decode_roi, RawRoiOutput};
use crate::event::BinnedSample;
use crate::net::{forward_dense, Dense, Model, RecurrentState};
use crate::pipeline::{run_pair_dense, PipelineConfig, RoiMode};

use super::pipeline::{
    build_classifier_graph, build_sample_graph, GraphConfig, ParamRole, ParamSet, PreparedSample,
};
use super::tape::Tape;
use super::tensor::Tensor;
use super::GradError;

const BN_MOMENTUM: f64 = 0.1;
/// Fraction of the run over which the L1 coefficient ramps up linearly.
const LAMBDA_WARMUP_FRAC: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Self::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam { .. } => "adam",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: Optimizer,
    /// L1 activation sparsity coefficient (linearly warmed up over the
    /// first tenth of the epochs).
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// `(net, layer)` order in which layers are frozen during
    /// quantization-aware fine-tuning; empty means front-to-back over
    /// all weighted layers.
    pub qat_schedule: Vec<(usize, usize)>,
    /// Training epochs after each quantize-and-freeze step.
    pub qat_epochs_per_stage: usize,
    /// Staged training switches: hold one side fixed while the other
    /// trains (batchnorm running statistics still update).
    pub freeze_roi: bool,
    pub freeze_cls: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            optimizer: Optimizer::adam(),
            lambda: 1e-4,
            epochs: 100,
            batch_size: 8,
            seed: 42,
            qat_schedule: Vec::new(),
            qat_epochs_per_stage: 2,
            freeze_roi: false,
            freeze_cls: false,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), GradError> {
        // lr = 0 is allowed: it degenerates to a pure evaluation pass.
        if !(self.lr >= 0.0) {
            return Err(GradError::ConfigInvalid("lr must be >= 0".into()));
        }
        if self.lambda < 0.0 {
            return Err(GradError::ConfigInvalid("lambda must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(GradError::ConfigInvalid("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
    /// Mean nonzero fraction per ReLU layer, in column order.
    pub sparsity: Vec<f64>,
}

/// Per-epoch metrics with the config echoed in a header comment.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsLog {
    pub header: String,
    pub columns: Vec<String>,
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# {}\n", self.header));
        out.push_str("epoch,loss,train_acc,test_acc");
        for c in &self.columns {
            out.push_str(&format!(",{c}"));
        }
        out.push('\n');
        for row in &self.rows {
            let test = row
                .test_acc
                .map(|a| format!("{a}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}",
                row.epoch, row.loss, row.train_acc, test
            ));
            for s in &row.sparsity {
                out.push_str(&format!(",{s}"));
            }
            out.push('\n');
        }
        out
    }
}

pub struct TrainOutput {
    pub roi: Model,
    pub cls: Model,
    pub log: MetricsLog,
    /// Mean decoded ROI center per training sample, averaged over
    /// timebins of the final epoch's forward passes.
    pub roi_centers: Vec<(f64, f64)>,
}

struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    fn new(set: &ParamSet) -> Self {
        Self {
            m: set.values.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            v: set.values.iter().map(|p| Tensor::zeros(p.shape.clone())).collect(),
            t: 0,
        }
    }
}

fn optimizer_step(
    set: &mut ParamSet,
    grads: &[Tensor],
    adam: &mut AdamState,
    cfg: &TrainConfig,
) {
    match cfg.optimizer {
        Optimizer::Sgd => {
            for i in 0..set.values.len() {
                if !set.is_trainable(i) {
                    continue;
                }
                for (p, g) in set.values[i].data.iter_mut().zip(&grads[i].data) {
                    *p -= cfg.lr * g;
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            adam.t += 1;
            let bc1 = 1.0 - beta1.powi(adam.t as i32);
            let bc2 = 1.0 - beta2.powi(adam.t as i32);
            for i in 0..set.values.len() {
                if !set.is_trainable(i) {
                    continue;
                }
                for j in 0..set.values[i].data.len() {
                    let g = grads[i].data[j];
                    let m = &mut adam.m[i].data[j];
                    let v = &mut adam.v[i].data[j];
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    set.values[i].data[j] -= cfg.lr * mh / (vh.sqrt() + eps);
                }
            }
        }
    }
}

fn lambda_at(cfg: &TrainConfig, epoch: usize, total_epochs: usize) -> f64 {
    let warmup = ((total_epochs as f64 * LAMBDA_WARMUP_FRAC).ceil() as usize).max(1);
    cfg.lambda * ((epoch + 1) as f64 / warmup as f64).min(1.0)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Per-(net, layer) accumulator for batchnorm running statistics.
struct BnAccum {
    sums: Vec<f64>,
    sq_sums: Vec<f64>,
    count: f64,
}

/// Trains the ROI-prediction and classification networks jointly through
/// the differentiable Gaussian crop. Returns trained models (with updated
/// batchnorm running statistics), the metrics log, and per-sample mean
/// ROI centers from the final epoch.
pub fn train(
    roi: &Model,
    cls: &Model,
    dataset: &[BinnedSample],
    test_set: Option<&[BinnedSample]>,
    pipeline_cfg: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput, GradError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(GradError::ConfigInvalid("empty dataset".into()));
    }
    let mut roi_model = roi.clone();
    let mut cls_model = cls.clone();
    let mut set = ParamSet::from_models(&[&roi_model, &cls_model]);
    // Quantized (frozen) layers stay frozen across further training.
    for (ni, model) in [&roi_model, &cls_model].iter().enumerate() {
        for (li, layer) in model.layers.iter().enumerate() {
            if layer.quant().is_some() {
                set.freeze_layer(ni, li);
            }
        }
    }
    for (ni, freeze) in [(0, cfg.freeze_roi), (1, cfg.freeze_cls)] {
        if freeze {
            for li in 0..[&roi_model, &cls_model][ni].layers.len() {
                set.freeze_layer(ni, li);
            }
        }
    }

    let prepared: Vec<PreparedSample> = dataset
        .iter()
        .map(|s| PreparedSample::prepare(s, &roi_model.spec))
        .collect::<Result<_, _>>()?;

    let mut adam = AdamState::new(&set);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut log = MetricsLog {
        header: format!(
            "seed={} lr={} lambda={} epochs={} batch_size={} optimizer={}",
            cfg.seed,
            cfg.lr,
            cfg.lambda,
            cfg.epochs,
            cfg.batch_size,
            cfg.optimizer.name()
        ),
        columns: Vec::new(),
        rows: Vec::new(),
    };
    let mut roi_centers = vec![(0.0, 0.0); dataset.len()];

    for epoch in 0..cfg.epochs {
        let lambda_eff = lambda_at(cfg, epoch, cfg.epochs);
        let gcfg = GraphConfig {
            roi_spec: &roi_model.spec,
            cls_spec: &cls_model.spec,
            pipeline: pipeline_cfg,
            lambda: lambda_eff,
        };
        let mut order: Vec<usize> = (0..prepared.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut act_nonzero: Vec<(usize, usize, f64, f64)> = Vec::new(); // net, layer, nnz, total

        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad_accum: Vec<Tensor> = set
                .values
                .iter()
                .map(|p| Tensor::zeros(p.shape.clone()))
                .collect();
            let mut bn_accums: Vec<((usize, usize), BnAccum)> = Vec::new();

            for &si in batch {
                let mut tape = Tape::new();
                let graph = build_sample_graph(&mut tape, &gcfg, &set, &prepared[si]);
                loss_sum += tape.value(graph.loss).item();

                // Prediction: argmax of logits summed over timebins.
                let mut summed = vec![0.0; tape.value(graph.bin_logits[0]).len()];
                for &l in &graph.bin_logits {
                    for (s, v) in summed.iter_mut().zip(&tape.value(l).data) {
                        *s += v;
                    }
                }
                if argmax(&summed) as u32 == prepared[si].label {
                    correct += 1;
                }
                let t_bins = graph.roi_values.len() as f64;
                let cx = graph.roi_values.iter().map(|r| r.0).sum::<f64>() / t_bins;
                let cy = graph.roi_values.iter().map(|r| r.1).sum::<f64>() / t_bins;
                roi_centers[si] = (cx, cy);

                for &(net, layer, node) in &graph.relu_acts {
                    let v = tape.value(node);
                    let nnz = v.data.iter().filter(|&&x| x != 0.0).count() as f64;
                    match act_nonzero
                        .iter_mut()
                        .find(|(n, l, _, _)| *n == net && *l == layer)
                    {
                        Some(slot) => {
                            slot.2 += nnz;
                            slot.3 += v.len() as f64;
                        }
                        None => act_nonzero.push((net, layer, nnz, v.len() as f64)),
                    }
                }
                for &(net, layer, node) in &graph.bn_inputs {
                    let v = tape.value(node);
                    let ch = v.shape[0];
                    let spatial = v.len() / ch;
                    let acc = match bn_accums.iter_mut().find(|((n, l), _)| *n == net && *l == layer)
                    {
                        Some((_, acc)) => acc,
                        None => {
                            bn_accums.push((
                                (net, layer),
                                BnAccum {
                                    sums: vec![0.0; ch],
                                    sq_sums: vec![0.0; ch],
                                    count: 0.0,
                                },
                            ));
                            &mut bn_accums.last_mut().unwrap().1
                        }
                    };
                    for c in 0..ch {
                        for i in 0..spatial {
                            let x = v.data[c * spatial + i];
                            acc.sums[c] += x;
                            acc.sq_sums[c] += x * x;
                        }
                    }
                    acc.count += spatial as f64;
                }

                let grads = tape.backward(graph.loss)?;
                for (pi, &pid) in graph.param_ids.iter().enumerate() {
                    if let Some(g) = grads.get(pid) {
                        for (a, b) in grad_accum[pi].data.iter_mut().zip(&g.data) {
                            *a += scale * b;
                        }
                    }
                }
            }

            optimizer_step(&mut set, &grad_accum, &mut adam, cfg);

            // Momentum update of batchnorm running statistics from the
            // batch moments.
            for ((net, layer), acc) in &bn_accums {
                let mean_idx = set.find(*net, *layer, ParamRole::RunningMean).unwrap();
                let var_idx = set.find(*net, *layer, ParamRole::RunningVar).unwrap();
                for c in 0..set.values[mean_idx].len() {
                    let m = acc.sums[c] / acc.count;
                    let var = (acc.sq_sums[c] / acc.count - m * m).max(0.0);
                    let rm = &mut set.values[mean_idx].data[c];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * m;
                    let rv = &mut set.values[var_idx].data[c];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * var;
                }
            }
        }

        if log.columns.is_empty() {
            log.columns = act_nonzero
                .iter()
                .map(|(net, layer, _, _)| {
                    format!("sparsity_{}_l{layer}", if *net == 0 { "roi" } else { "cls" })
                })
                .collect();
        }
        let test_acc = match test_set {
            Some(ts) => {
                set.apply_to_models(&mut [&mut roi_model, &mut cls_model]);
                Some(evaluate_pair(
                    &roi_model,
                    &cls_model,
                    ts,
                    pipeline_cfg,
                    RoiMode::Tgk,
                ))
            }
            None => None,
        };
        log.rows.push(MetricsRow {
            epoch,
            loss: loss_sum / prepared.len() as f64,
            train_acc: correct as f64 / prepared.len() as f64,
            test_acc,
            sparsity: act_nonzero.iter().map(|(_, _, n, t)| n / t).collect(),
        });
    }

    set.apply_to_models(&mut [&mut roi_model, &mut cls_model]);
    Ok(TrainOutput {
        roi: roi_model,
        cls: cls_model,
        log,
        roi_centers,
    })
}

/// Accuracy of the dense reference pipeline over a labeled set.
pub fn evaluate_pair(
    roi: &Model,
    cls: &Model,
    dataset: &[BinnedSample],
    cfg: &PipelineConfig,
    mode: RoiMode,
) -> f64 {
    let mut correct = 0usize;
    for sample in dataset {
        let run = run_pair_dense(roi, cls, sample, cfg, mode).expect("evaluable sample");
        if Some(run.prediction) == sample.label {
            correct += 1;
        }
    }
    correct as f64 / dataset.len() as f64
}

/// Incremental quantization-aware fine-tuning: each scheduled layer is
/// quantized to 4 bits and frozen, then the remaining full-precision
/// layers train for `qat_epochs_per_stage` epochs. Gradients keep
/// flowing through frozen layers as constants.
pub fn qat_finetune(
    roi: &Model,
    cls: &Model,
    dataset: &[BinnedSample],
    pipeline_cfg: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutput, GradError> {
    cfg.validate()?;
    let mut roi_model = roi.clone();
    let mut cls_model = cls.clone();

    let weighted = |m: &Model, net: usize| -> Vec<(usize, usize)> {
        m.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.weights().is_some())
            .map(|(li, _)| (net, li))
            .collect()
    };
    let mut all: Vec<(usize, usize)> = weighted(&roi_model, 0);
    all.extend(weighted(&cls_model, 1));

    let schedule = if cfg.qat_schedule.is_empty() {
        all.clone()
    } else {
        cfg.qat_schedule.clone()
    };
    for target in &all {
        if !schedule.contains(target) {
            return Err(GradError::ScheduleIncomplete(format!(
                "layer {target:?} never quantized"
            )));
        }
    }
    for step in &schedule {
        if !all.contains(step) {
            return Err(GradError::ScheduleIncomplete(format!(
                "scheduled layer {step:?} has no weights"
            )));
        }
    }

    let mut log = MetricsLog {
        header: format!(
            "qat seed={} lr={} stages={} epochs_per_stage={}",
            cfg.seed,
            cfg.lr,
            schedule.len(),
            cfg.qat_epochs_per_stage
        ),
        columns: Vec::new(),
        rows: Vec::new(),
    };
    let mut centers = Vec::new();
    for (stage, &(net, layer)) in schedule.iter().enumerate() {
        match net {
            0 => roi_model.quantize_layer_in_place(layer),
            _ => cls_model.quantize_layer_in_place(layer),
        }
        let stage_cfg = TrainConfig {
            epochs: cfg.qat_epochs_per_stage,
            seed: cfg.seed.wrapping_add(stage as u64 + 1),
            ..cfg.clone()
        };
        let out = train(
            &roi_model,
            &cls_model,
            dataset,
            None,
            pipeline_cfg,
            &stage_cfg,
        )?;
        roi_model = out.roi;
        cls_model = out.cls;
        centers = out.roi_centers;
        for mut row in out.log.rows {
            row.epoch += stage * cfg.qat_epochs_per_stage;
            log.columns = out.log.columns.clone();
            log.rows.push(row);
        }
    }
    debug_assert!(roi_model.is_fully_quantized() && cls_model.is_fully_quantized());
    Ok(TrainOutput {
        roi: roi_model,
        cls: cls_model,
        log,
        roi_centers: centers,
    })
}

/// Fine-tunes the classifier with the ROI side frozen and ROI generation
/// switched to dynamic average pooling. Only classifier parameters
/// receive gradients; the crop depends on them through nothing, so the
/// ROI network is executed outside the tape.
pub fn dap_finetune(
    roi: &Model,
    cls: &Model,
    dataset: &[BinnedSample],
    pipeline_cfg: &PipelineConfig,
    cfg: &TrainConfig,
) -> Result<(Model, MetricsLog), GradError> {
    cfg.validate()?;
    let mut cls_model = cls.clone();
    let mut set = ParamSet::from_models(&[&cls_model]);
    for (li, layer) in cls_model.layers.iter().enumerate() {
        if layer.quant().is_some() {
            set.freeze_layer(0, li);
        }
    }
    let mut adam = AdamState::new(&set);
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    // Precompute the average-pooled crops once: the ROI side is frozen.
    let mut crops: Vec<(Vec<Tensor>, u32)> = Vec::with_capacity(dataset.len());
    for sample in dataset {
        let label = sample
            .label
            .ok_or_else(|| GradError::ConfigInvalid("sample without label".into()))?;
        let mut state = RecurrentState::zeros(roi);
        let mut per_bin = Vec::with_capacity(sample.timebins());
        for frame in &sample.frames {
            let (raw, next) = forward_dense(roi, &Dense::from_timebin_frame(frame), &state)
                .map_err(|e| GradError::ConfigInvalid(e.to_string()))?;
            state = next;
            let roi_params = decode_roi(
                &RawRoiOutput {
                    g_x_hat: raw[0],
                    g_y_hat: raw[1],
                    delta_hat: raw[2],
                },
                &pipeline_cfg.decode,
            );
            let region = dap_region(&roi_params, &pipeline_cfg.grid);
            let crop = crop_dap(frame, &region, pipeline_cfg.grid.n)
                .map_err(|e| GradError::ConfigInvalid(e.to_string()))?;
            let n = pipeline_cfg.grid.n;
            per_bin.push(Tensor::new(vec![2, n, n], crop.data().to_vec()));
        }
        crops.push((per_bin, label));
    }

    let mut log = MetricsLog {
        header: format!(
            "dap-finetune seed={} lr={} lambda={} epochs={} batch_size={}",
            cfg.seed, cfg.lr, cfg.lambda, cfg.epochs, cfg.batch_size
        ),
        columns: Vec::new(),
        rows: Vec::new(),
    };

    for epoch in 0..cfg.epochs {
        let lambda_eff = lambda_at(cfg, epoch, cfg.epochs.max(1));
        let mut order: Vec<usize> = (0..crops.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut act_nonzero: Vec<(usize, usize, f64, f64)> = Vec::new();

        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut grad_accum: Vec<Tensor> = set
                .values
                .iter()
                .map(|p| Tensor::zeros(p.shape.clone()))
                .collect();
            for &si in batch {
                let (per_bin, label) = &crops[si];
                let mut tape = Tape::new();
                let graph = build_classifier_graph(
                    &mut tape,
                    &cls_model.spec,
                    &set,
                    per_bin,
                    *label,
                    lambda_eff,
                );
                loss_sum += tape.value(graph.loss).item();
                let mut summed = vec![0.0; tape.value(graph.bin_logits[0]).len()];
                for &l in &graph.bin_logits {
                    for (s, v) in summed.iter_mut().zip(&tape.value(l).data) {
                        *s += v;
                    }
                }
                if argmax(&summed) as u32 == *label {
                    correct += 1;
                }
                for &(net, layer, node) in &graph.relu_acts {
                    let v = tape.value(node);
                    let nnz = v.data.iter().filter(|&&x| x != 0.0).count() as f64;
                    match act_nonzero
                        .iter_mut()
                        .find(|(n, l, _, _)| *n == net && *l == layer)
                    {
                        Some(slot) => {
                            slot.2 += nnz;
                            slot.3 += v.len() as f64;
                        }
                        None => act_nonzero.push((net, layer, nnz, v.len() as f64)),
                    }
                }
                let grads = tape.backward(graph.loss)?;
                for (pi, &pid) in graph.param_ids.iter().enumerate() {
                    if let Some(g) = grads.get(pid) {
                        for (a, b) in grad_accum[pi].data.iter_mut().zip(&g.data) {
                            *a += scale * b;
                        }
                    }
                }
            }
            optimizer_step(&mut set, &grad_accum, &mut adam, cfg);
        }

        if log.columns.is_empty() {
            log.columns = act_nonzero
                .iter()
                .map(|(_, layer, _, _)| format!("sparsity_cls_l{layer}"))
                .collect();
        }
        log.rows.push(MetricsRow {
            epoch,
            loss: loss_sum / crops.len() as f64,
            train_acc: correct as f64 / crops.len() as f64,
            test_acc: None,
            sparsity: act_nonzero.iter().map(|(_, _, n, t)| n / t).collect(),
        });
    }

    set.apply_to_models(&mut [&mut cls_model]);
    Ok((cls_model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{generate_synthetic_sample, SynthConfig};
    use crate::net::{parse_network_file, save_weights};
    use rand::SeedableRng;

    const SMALL_PAIR: &str = "
attention n=6 sigma=2.0 theta=6 s=5
net roi 64x64
layer maxpool k=8
layer conv in=2 out=6 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer relu_rnn units=16
layer output units=3
net classifier 6x6
layer conv in=2 out=8 k=3 pad=1
layer batchnorm
layer maxpool k=2
layer output units=10
";

    fn small_setup(
        n_samples: usize,
        timebins: usize,
    ) -> (Model, Model, PipelineConfig, Vec<BinnedSample>) {
        let file = parse_network_file(SMALL_PAIR).unwrap();
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(7);
        let roi = Model::init_random(file.roi().unwrap(), &mut rng).unwrap();
        let cls = Model::init_random(file.classifier().unwrap(), &mut rng).unwrap();
        let cfg = PipelineConfig::resolve(&file.attention, 64, 64);
        let synth = SynthConfig {
            canvas_width: 64,
            canvas_height: 64,
            scale_min: 0.8,
            scale_max: 1.0,
            noise_fragments: 2,
            timebins,
        };
        let samples: Vec<BinnedSample> = (0..n_samples)
            .map(|i| generate_synthetic_sample(i as u64, &synth).unwrap().0)
            .collect();
        (roi, cls, cfg, samples)
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (roi, cls, pcfg, samples) = small_setup(4, 2);
        let cfg = TrainConfig {
            lr: 0.0,
            lambda: 0.0,
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        let out = train(&roi, &cls, &samples, None, &pcfg, &cfg).unwrap();
        // Weights and biases unchanged; only batchnorm running stats move.
        for (before, after) in roi.layers.iter().zip(&out.roi.layers) {
            if let (Some(a), Some(b)) = (before.weights(), after.weights()) {
                assert_eq!(a, b);
            }
        }
        for (before, after) in cls.layers.iter().zip(&out.cls.layers) {
            if let (Some(a), Some(b)) = (before.weights(), after.weights()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let (roi, cls, pcfg, samples) = small_setup(6, 2);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 3,
            lr: 5e-3,
            ..TrainConfig::default()
        };
        let a = train(&roi, &cls, &samples, Some(&samples), &pcfg, &cfg).unwrap();
        let b = train(&roi, &cls, &samples, Some(&samples), &pcfg, &cfg).unwrap();
        assert_eq!(a.log.to_csv(), b.log.to_csv());
        assert_eq!(
            save_weights(&[&a.roi, &a.cls]),
            save_weights(&[&b.roi, &b.cls])
        );
        let c = train(
            &roi,
            &cls,
            &samples,
            Some(&samples),
            &pcfg,
            &TrainConfig {
                seed: 43,
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_ne!(a.log.to_csv(), c.log.to_csv());
    }

    #[test]
    fn stronger_l1_reduces_activation_density() {
        let (roi, cls, pcfg, samples) = small_setup(12, 3);
        let run = |lambda: f64| {
            let cfg = TrainConfig {
                epochs: 20,
                batch_size: 4,
                lr: 2e-3,
                lambda,
                ..TrainConfig::default()
            };
            let out = train(&roi, &cls, &samples, None, &pcfg, &cfg).unwrap();
            let last = out.log.rows.last().unwrap();
            last.sparsity.iter().sum::<f64>() / last.sparsity.len() as f64
        };
        let dense_frac_low = run(1e-4);
        let dense_frac_high = run(1e-3);
        assert!(
            dense_frac_high < dense_frac_low,
            "nonzero fraction did not decrease: {dense_frac_high} vs {dense_frac_low}"
        );
    }

    #[test]
    fn qat_freezes_layers_and_fully_quantizes() {
        let (roi, cls, pcfg, samples) = small_setup(4, 2);
        let cfg = TrainConfig {
            epochs: 1,
            qat_epochs_per_stage: 1,
            batch_size: 2,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let out = qat_finetune(&roi, &cls, &samples, &pcfg, &cfg).unwrap();
        assert!(out.roi.is_fully_quantized());
        assert!(out.cls.is_fully_quantized());
        // The first-scheduled layer's nibbles must match quantizing the
        // original weights directly: it was frozen before any training.
        let mut first = roi.clone();
        first.quantize_layer_in_place(1); // first weighted layer (after pool)
        assert_eq!(
            out.roi.layers[1].quant().unwrap().packed,
            first.layers[1].quant().unwrap().packed
        );
    }

    #[test]
    fn qat_rejects_incomplete_schedule() {
        let (roi, cls, pcfg, samples) = small_setup(2, 2);
        let cfg = TrainConfig {
            qat_schedule: vec![(0, 1)],
            qat_epochs_per_stage: 1,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            qat_finetune(&roi, &cls, &samples, &pcfg, &cfg),
            Err(GradError::ScheduleIncomplete(_))
        ));
    }

    #[test]
    fn dap_finetune_zero_epochs_keeps_classifier() {
        let (roi, cls, pcfg, samples) = small_setup(4, 2);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (tuned, log) = dap_finetune(&roi, &cls, &samples, &pcfg, &cfg).unwrap();
        assert_eq!(tuned, cls);
        assert!(log.rows.is_empty());
    }

    #[test]
    fn train_rejects_unlabeled_samples() {
        let (roi, cls, pcfg, mut samples) = small_setup(2, 2);
        samples[0].label = None;
        assert!(matches!(
            train(&roi, &cls, &samples, None, &pcfg, &TrainConfig::default()),
            Err(GradError::ConfigInvalid(_))
        ));
    }
}
