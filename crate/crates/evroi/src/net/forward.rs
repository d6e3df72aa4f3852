//! Dense reference and sparse event-driven forward passes.
//!
//! The sparse path consumes each nonzero activation exactly once and
//! scatters its contributions into the next layer's accumulators, which
//! is how an event-driven core executes a convolution. Bias, batchnorm,
//! pooling and ReLU are neuron-local post-processing on the accumulated
//! membrane values and do not count as synaptic operations. Both paths
//! compute the same numbers up to floating-point summation order.
//!
//! Effective MACs are tallied per layer: a convolution costs
//! `sum over nonzero inputs of kernel_footprint * out_channels`, a fully
//! connected or recurrent layer `nonzero inputs * units`.

use crate::attention::RoiFrame;
use crate::event::TimebinFrame;

use super::model::{LayerParams, Model};
use super::spec::LayerKind;
use super::NetError;

/// Batchnorm variance epsilon used across the crate.
pub const BN_EPS: f64 = 1e-5;

/// Dense activation tensor, channels x height x width, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            c: data.len(),
            h: 1,
            w: 1,
            data,
        }
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn from_timebin_frame(frame: &TimebinFrame) -> Self {
        Self {
            c: 2,
            h: frame.height(),
            w: frame.width(),
            data: frame.data().iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_roi_frame(frame: &RoiFrame) -> Self {
        Self {
            c: 2,
            h: frame.n(),
            w: frame.n(),
            data: frame.data().to_vec(),
        }
    }

    pub fn nonzero_count(&self) -> u64 {
        self.data.iter().filter(|&&v| v != 0.0).count() as u64
    }
}

/// Sparse activation list: `(channel, y, x, value)` with nonzero values
/// and no duplicate coordinates, plus the dense shape.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseActivations {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub items: Vec<(usize, usize, usize, f64)>,
}

impl SparseActivations {
    /// Row-major scan of the nonzero cells.
    pub fn from_dense(dense: &Dense) -> Self {
        let mut items = Vec::new();
        for c in 0..dense.c {
            for y in 0..dense.h {
                for x in 0..dense.w {
                    let v = dense.get(c, y, x);
                    if v != 0.0 {
                        items.push((c, y, x, v));
                    }
                }
            }
        }
        Self {
            c: dense.c,
            h: dense.h,
            w: dense.w,
            items,
        }
    }

    pub fn to_dense(&self) -> Dense {
        let mut d = Dense::zeros(self.c, self.h, self.w);
        for &(c, y, x, v) in &self.items {
            d.set(c, y, x, v);
        }
        d
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Recurrent carry between timebins: one hidden vector per recurrent
/// layer plus the previous network output.
#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentState {
    pub h: Vec<Vec<f64>>,
    pub p: Vec<f64>,
}

impl RecurrentState {
    pub fn zeros(model: &Model) -> Self {
        let h = model
            .spec
            .layers
            .iter()
            .filter(|l| l.kind == LayerKind::ReluRnn)
            .map(|l| vec![0.0; l.units])
            .collect();
        Self { h, p: Vec::new() }
    }
}

/// Per-layer cost tallies accrued by the sparse forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerTally {
    pub macs: u64,
    pub events_in: u64,
    pub events_out: u64,
}

/// Effective multiply-accumulate counter, one tally per layer. Tallies
/// only ever increase while forward passes run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MacCounter {
    pub layers: Vec<LayerTally>,
}

impl MacCounter {
    pub fn for_model(model: &Model) -> Self {
        Self {
            layers: vec![LayerTally::default(); model.layers.len()],
        }
    }

    pub fn total_macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn total_events(&self) -> u64 {
        self.layers.iter().map(|l| l.events_in + l.events_out).sum()
    }
}

/// L1 activation loss: `lambda` times the summed absolute activation
/// values (for ReLU outputs this is just the sum).
pub fn l1_activation_loss(activations: &[&[f64]], lambda: f64) -> f64 {
    lambda
        * activations
            .iter()
            .flat_map(|a| a.iter())
            .map(|v| v.abs())
            .sum::<f64>()
}

// ============================================================================
// Shared layer math
// ============================================================================

/// Convolution geometry shared by the dense engine and the autodiff tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }
}

/// Cross-correlation over flat row-major buffers: input `[c][h][w]`,
/// weights `[oc][ic][k][k]`, bias per out-channel.
pub fn conv2d_dense_raw(x: &[f64], w: &[f64], bias: &[f64], g: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.out_ch * oh * ow];
    for oc in 0..g.out_ch {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias[oc];
                for ic in 0..g.in_ch {
                    for ky in 0..g.k {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.in_h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            acc += w[((oc * g.in_ch + ic) * g.k + ky) * g.k + kx]
                                * x[(ic * g.in_h + iy as usize) * g.in_w + ix as usize];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

pub(crate) fn conv2d_dense(
    x: &Dense,
    w: &[f64],
    bias: &[f64],
    out_ch: usize,
    k: usize,
    pad: usize,
    stride: usize,
) -> Dense {
    let geom = ConvGeom {
        in_ch: x.c,
        in_h: x.h,
        in_w: x.w,
        out_ch,
        k,
        pad,
        stride,
    };
    let data = conv2d_dense_raw(&x.data, w, bias, &geom);
    Dense {
        c: out_ch,
        h: geom.out_h(),
        w: geom.out_w(),
        data,
    }
}

pub(crate) fn batchnorm_dense(
    x: &mut Dense,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
) {
    for c in 0..x.c {
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let (g, b, m) = (gamma[c], beta[c], mean[c]);
        for i in 0..x.h * x.w {
            let idx = c * x.h * x.w + i;
            x.data[idx] = g * (x.data[idx] - m) * inv + b;
        }
    }
}

/// Max pooling over a flat row-major `[c][h][w]` buffer; returns the
/// pooled buffer and output height/width.
pub fn maxpool_dense_raw(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
) -> (Vec<f64>, usize, usize) {
    let d = Dense {
        c,
        h,
        w,
        data: x.to_vec(),
    };
    let out = maxpool_dense(&d, k, stride);
    (out.data, out.h, out.w)
}

pub(crate) fn maxpool_dense(x: &Dense, k: usize, stride: usize) -> Dense {
    let oh = (x.h - k) / stride + 1;
    let ow = (x.w - k) / stride + 1;
    let mut out = Dense::zeros(x.c, oh, ow);
    for c in 0..x.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(x.get(c, oy * stride + ky, ox * stride + kx));
                    }
                }
                out.set(c, oy, ox, m);
            }
        }
    }
    out
}

fn relu_in_place(x: &mut Dense) {
    for v in &mut x.data {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn matvec(w: &[f64], x: &[f64], bias: &[f64], units: usize) -> Vec<f64> {
    let in_len = x.len();
    (0..units)
        .map(|u| {
            let row = &w[u * in_len..(u + 1) * in_len];
            bias[u] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
        })
        .collect()
}

/// ReLU RNN step on the concatenated `[x; h_prev]` input.
fn rnn_step(w: &[f64], bias: &[f64], x: &[f64], h_prev: &[f64], units: usize) -> Vec<f64> {
    let in_len = x.len() + h_prev.len();
    (0..units)
        .map(|u| {
            let row = &w[u * in_len..(u + 1) * in_len];
            let mut acc = bias[u];
            for (a, b) in row[..x.len()].iter().zip(x) {
                acc += a * b;
            }
            for (a, b) in row[x.len()..].iter().zip(h_prev) {
                acc += a * b;
            }
            acc.max(0.0)
        })
        .collect()
}

// ============================================================================
// Dense forward
// ============================================================================

/// Reference dense forward pass for one timebin. Returns the output
/// vector and the updated recurrent state.
pub fn forward_dense(
    model: &Model,
    input: &Dense,
    state: &RecurrentState,
) -> Result<(Vec<f64>, RecurrentState), NetError> {
    let expect = model.spec.input_shape();
    if (input.c, input.h, input.w) != (expect.c, expect.h, expect.w) {
        return Err(NetError::ShapeMismatch(format!(
            "input {}x{}x{} != spec {}x{}x{}",
            input.c, input.h, input.w, expect.c, expect.h, expect.w
        )));
    }
    let mut new_state = state.clone();
    let mut cur = input.clone();
    let mut pending_relu = false;
    let mut rnn_idx = 0usize;

    for (lspec, params) in model.spec.layers.iter().zip(&model.layers) {
        // A conv block (conv -> batchnorm/maxpool...) ends with ReLU when
        // the next layer is neither batchnorm nor maxpool.
        if pending_relu && !matches!(lspec.kind, LayerKind::BatchNorm | LayerKind::MaxPool) {
            relu_in_place(&mut cur);
            pending_relu = false;
        }
        match params {
            LayerParams::Conv { w, bias, .. } => {
                cur = conv2d_dense(&cur, w, bias, lspec.out_ch, lspec.k, lspec.pad, lspec.stride);
                pending_relu = true;
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => batchnorm_dense(&mut cur, gamma, beta, mean, var),
            LayerParams::MaxPool => {
                cur = maxpool_dense(&cur, lspec.k, lspec.stride);
            }
            LayerParams::ReluRnn { w, bias, .. } => {
                let h_prev = &state.h[rnn_idx];
                let h_new = rnn_step(w, bias, &cur.data, h_prev, lspec.units);
                new_state.h[rnn_idx] = h_new.clone();
                cur = Dense::vector(h_new);
                rnn_idx += 1;
            }
            LayerParams::Fc { w, bias, .. } => {
                let mut y = matvec(w, &cur.data, bias, lspec.units);
                if lspec.kind == LayerKind::FullyConnected {
                    for v in &mut y {
                        *v = v.max(0.0);
                    }
                }
                cur = Dense::vector(y);
            }
        }
    }
    if pending_relu {
        relu_in_place(&mut cur);
    }
    new_state.p = cur.data.clone();
    Ok((cur.data, new_state))
}

// ============================================================================
// Sparse event-driven forward
// ============================================================================

/// Event-driven forward pass for one timebin. Numerically equal to
/// [`forward_dense`] on the densified input (up to summation order);
/// accrues per-layer effective MACs and event counts into `counter`.
pub fn forward_sparse(
    model: &Model,
    input: &SparseActivations,
    state: &RecurrentState,
    counter: &mut MacCounter,
) -> Result<(Vec<f64>, RecurrentState), NetError> {
    let expect = model.spec.input_shape();
    if (input.c, input.h, input.w) != (expect.c, expect.h, expect.w) {
        return Err(NetError::ShapeMismatch(format!(
            "input {}x{}x{} != spec {}x{}x{}",
            input.c, input.h, input.w, expect.c, expect.h, expect.w
        )));
    }
    if counter.layers.len() != model.layers.len() {
        return Err(NetError::ShapeMismatch(
            "counter layer count != model".into(),
        ));
    }

    let mut new_state = state.clone();
    let mut sparse = input.clone();
    let mut acc: Option<Dense> = None; // dense accumulator inside a conv block
    let mut pending_relu = false;
    let mut block_last = 0usize;
    let mut rnn_idx = 0usize;

    for (idx, (lspec, params)) in model.spec.layers.iter().zip(&model.layers).enumerate() {
        if pending_relu && !matches!(lspec.kind, LayerKind::BatchNorm | LayerKind::MaxPool) {
            let mut d = acc.take().expect("conv block has accumulator");
            relu_in_place(&mut d);
            sparse = SparseActivations::from_dense(&d);
            counter.layers[block_last].events_out += sparse.len() as u64;
            pending_relu = false;
        }
        match params {
            LayerParams::Conv { w, bias, .. } => {
                let shapes = model.shapes();
                let out_shape = shapes[idx];
                let mut out = Dense::zeros(out_shape.c, out_shape.h, out_shape.w);
                counter.layers[idx].events_in += sparse.len() as u64;
                let (k, pad, stride) = (lspec.k, lspec.pad, lspec.stride);
                for &(c, y, x, v) in &sparse.items {
                    for ky in 0..k {
                        let ny = y as isize + pad as isize - ky as isize;
                        if ny < 0 || ny % stride as isize != 0 {
                            continue;
                        }
                        let oy = (ny / stride as isize) as usize;
                        if oy >= out.h {
                            continue;
                        }
                        for kx in 0..k {
                            let nx = x as isize + pad as isize - kx as isize;
                            if nx < 0 || nx % stride as isize != 0 {
                                continue;
                            }
                            let ox = (nx / stride as isize) as usize;
                            if ox >= out.w {
                                continue;
                            }
                            for oc in 0..lspec.out_ch {
                                let widx = ((oc * sparse.c + c) * k + ky) * k + kx;
                                let didx = (oc * out.h + oy) * out.w + ox;
                                out.data[didx] += w[widx] * v;
                            }
                            counter.layers[idx].macs += lspec.out_ch as u64;
                        }
                    }
                }
                for oc in 0..out.c {
                    for i in 0..out.h * out.w {
                        out.data[oc * out.h * out.w + i] += bias[oc];
                    }
                }
                acc = Some(out);
                pending_relu = true;
                block_last = idx;
            }
            LayerParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => {
                let d = acc.as_mut().expect("batchnorm follows conv in a block");
                batchnorm_dense(d, gamma, beta, mean, var);
                block_last = idx;
            }
            LayerParams::MaxPool => {
                if pending_relu {
                    // Pool inside a conv block: pre-activation values.
                    let d = acc.take().expect("pool follows conv in a block");
                    acc = Some(maxpool_dense(&d, lspec.k, lspec.stride));
                    block_last = idx;
                } else {
                    // Standalone pool (e.g. input downsampling): consumes
                    // and re-emits events.
                    counter.layers[idx].events_in += sparse.len() as u64;
                    let pooled = maxpool_dense(&sparse.to_dense(), lspec.k, lspec.stride);
                    sparse = SparseActivations::from_dense(&pooled);
                    counter.layers[idx].events_out += sparse.len() as u64;
                }
            }
            LayerParams::ReluRnn { w, bias, .. } => {
                let x = flatten_sparse(&sparse);
                let h_prev = &state.h[rnn_idx];
                let nnz_h = h_prev.iter().filter(|&&v| v != 0.0).count() as u64;
                counter.layers[idx].events_in += sparse.len() as u64 + nnz_h;
                counter.layers[idx].macs += (sparse.len() as u64 + nnz_h) * lspec.units as u64;
                let h_new = rnn_step(w, bias, &x, h_prev, lspec.units);
                new_state.h[rnn_idx] = h_new.clone();
                rnn_idx += 1;
                sparse = SparseActivations::from_dense(&Dense::vector(h_new));
                counter.layers[idx].events_out += sparse.len() as u64;
            }
            LayerParams::Fc { w, bias, .. } => {
                counter.layers[idx].events_in += sparse.len() as u64;
                counter.layers[idx].macs += sparse.len() as u64 * lspec.units as u64;
                let in_len = sparse.c * sparse.h * sparse.w;
                let mut y = bias.to_vec();
                for &(c, yy, xx, v) in &sparse.items {
                    let col = (c * sparse.h + yy) * sparse.w + xx;
                    for (u, out) in y.iter_mut().enumerate() {
                        *out += w[u * in_len + col] * v;
                    }
                }
                if lspec.kind == LayerKind::FullyConnected {
                    for v in &mut y {
                        *v = v.max(0.0);
                    }
                }
                sparse = SparseActivations::from_dense(&Dense::vector(y));
                counter.layers[idx].events_out += sparse.len() as u64;
            }
        }
    }
    if pending_relu {
        let mut d = acc.take().expect("trailing conv block");
        relu_in_place(&mut d);
        sparse = SparseActivations::from_dense(&d);
        counter.layers[block_last].events_out += sparse.len() as u64;
    }
    let out = sparse.to_dense().data;
    new_state.p = out.clone();
    Ok((out, new_state))
}

fn flatten_sparse(s: &SparseActivations) -> Vec<f64> {
    s.to_dense().data
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::spec::{LayerSpec, NetRole, NetworkSpec};
    use crate::net::Model;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn rel_err(a: f64, b: f64) -> f64 {
        let denom = a.abs().max(b.abs()).max(1e-300);
        (a - b).abs() / denom
    }

    fn random_dense(rng: &mut ChaCha20Rng, c: usize, h: usize, w: usize, density: f64) -> Dense {
        let mut d = Dense::zeros(c, h, w);
        for v in &mut d.data {
            if rng.random_range(0.0..1.0) < density {
                *v = rng.random_range(-2.0..2.0);
            }
        }
        d
    }

    fn randomize_bn(model: &mut Model, rng: &mut ChaCha20Rng) {
        for layer in &mut model.layers {
            if let LayerParams::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } = layer
            {
                for v in gamma.iter_mut() {
                    *v = rng.random_range(-1.5..1.5);
                }
                for v in beta.iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
                for v in mean.iter_mut() {
                    *v = rng.random_range(-0.5..0.5);
                }
                for v in var.iter_mut() {
                    *v = rng.random_range(0.2..2.0);
                }
            }
        }
    }

    fn randomize_bias(model: &mut Model, rng: &mut ChaCha20Rng) {
        for layer in &mut model.layers {
            match layer {
                LayerParams::Conv { bias, .. }
                | LayerParams::ReluRnn { bias, .. }
                | LayerParams::Fc { bias, .. } => {
                    for v in bias.iter_mut() {
                        *v = rng.random_range(-0.3..0.3);
                    }
                }
                _ => {}
            }
        }
    }

    fn toy_net() -> NetworkSpec {
        let mut spec = NetworkSpec::new(NetRole::Classification, 8, 8);
        spec.layers = vec![
            LayerSpec::conv(2, 6, 3, 1),
            LayerSpec::batchnorm(),
            LayerSpec::maxpool(2, 2),
            LayerSpec::conv(6, 8, 3, 1),
            LayerSpec::maxpool(2, 1),
            LayerSpec::relu_rnn(10),
            LayerSpec::fully_connected(7),
            LayerSpec::output(4),
        ];
        spec
    }

    #[test]
    fn zero_input_zero_biases_gives_zero_everything() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        let model = Model::init_random(&spec, &mut rng).unwrap();
        let state = RecurrentState::zeros(&model);
        let input = Dense::zeros(2, 8, 8);
        let (out, new_state) = forward_dense(&model, &input, &state).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        assert!(new_state.h[0].iter().all(|&v| v == 0.0));

        let mut counter = MacCounter::for_model(&model);
        let (sout, _) = forward_sparse(
            &model,
            &SparseActivations::from_dense(&input),
            &state,
            &mut counter,
        )
        .unwrap();
        assert_eq!(sout, out);
        assert_eq!(counter.total_macs(), 0);
    }

    #[test]
    fn single_weight_conv_passthrough_scaled_by_batchnorm() {
        // 1x1 input, one-channel identity conv, batchnorm with gamma/var:
        // output = gamma * (x - mean) / sqrt(var + eps) + beta.
        let mut spec = NetworkSpec::new(NetRole::Classification, 1, 1);
        spec.input_channels = 1;
        spec.layers = vec![
            LayerSpec::conv(1, 1, 1, 0),
            LayerSpec::batchnorm(),
            LayerSpec::output(1),
        ];
        let layers = vec![
            LayerParams::Conv {
                w: vec![1.0],
                bias: vec![0.0],
                quant: None,
            },
            LayerParams::BatchNorm {
                gamma: vec![0.8],
                beta: vec![0.0],
                mean: vec![0.0],
                var: vec![3.0],
            },
            LayerParams::Fc {
                w: vec![1.0],
                bias: vec![0.0],
                quant: None,
            },
        ];
        let model = Model::from_parts(&spec, layers).unwrap();
        let state = RecurrentState::zeros(&model);
        let mut input = Dense::zeros(1, 1, 1);
        input.set(0, 0, 0, 2.0);
        let (out, _) = forward_dense(&model, &input, &state).unwrap();
        let expect = 0.8 * 2.0 / (3.0f64 + 1e-5).sqrt();
        assert!(rel_err(out[0], expect) < 1e-12);
    }

    #[test]
    fn batchnorm_applies_before_pooling() {
        // With a negative gamma, normalize-then-pool differs from
        // pool-then-normalize; this pins the block order
        // conv -> batchnorm -> maxpool -> relu.
        let mut spec = NetworkSpec::new(NetRole::Classification, 2, 2);
        spec.input_channels = 1;
        spec.layers = vec![
            LayerSpec::conv(1, 1, 1, 0),
            LayerSpec::batchnorm(),
            LayerSpec::maxpool(2, 2),
            LayerSpec::output(1),
        ];
        let layers = vec![
            LayerParams::Conv {
                w: vec![1.0],
                bias: vec![0.0],
                quant: None,
            },
            LayerParams::BatchNorm {
                gamma: vec![-1.0],
                beta: vec![0.0],
                mean: vec![0.0],
                var: vec![1.0 - 1e-5],
            },
            LayerParams::MaxPool,
            LayerParams::Fc {
                w: vec![1.0],
                bias: vec![0.0],
                quant: None,
            },
        ];
        let model = Model::from_parts(&spec, layers).unwrap();
        let state = RecurrentState::zeros(&model);
        let mut input = Dense::zeros(1, 2, 2);
        input.set(0, 0, 0, 1.0);
        input.set(0, 0, 1, 2.0);
        input.set(0, 1, 0, 3.0);
        input.set(0, 1, 1, -4.0);
        let (out, _) = forward_dense(&model, &input, &state).unwrap();
        // bn first: {-1,-2,-3,4} -> max 4 -> relu 4. Pool first would give
        // max 3 -> bn -3 -> relu 0.
        assert!(rel_err(out[0], 4.0) < 1e-12);
    }

    /// Straightforward per-layer reimplementation used as an oracle:
    /// dense conv via explicit padding copy, pools and norms written
    /// independently.
    fn naive_forward(model: &Model, input: &Dense, state: &RecurrentState) -> Vec<f64> {
        let mut cur = input.clone();
        let mut pending_relu = false;
        let mut rnn_idx = 0;
        let relu = |d: &mut Dense| {
            for v in &mut d.data {
                *v = v.max(0.0);
            }
        };
        for (lspec, params) in model.spec.layers.iter().zip(&model.layers) {
            if pending_relu && !matches!(lspec.kind, LayerKind::BatchNorm | LayerKind::MaxPool) {
                relu(&mut cur);
                pending_relu = false;
            }
            match params {
                LayerParams::Conv { w, bias, .. } => {
                    // Pad explicitly, then correlate.
                    let (ph, pw) = (cur.h + 2 * lspec.pad, cur.w + 2 * lspec.pad);
                    let mut padded = Dense::zeros(cur.c, ph, pw);
                    for c in 0..cur.c {
                        for y in 0..cur.h {
                            for x in 0..cur.w {
                                padded.set(c, y + lspec.pad, x + lspec.pad, cur.get(c, y, x));
                            }
                        }
                    }
                    let oh = (ph - lspec.k) / lspec.stride + 1;
                    let ow = (pw - lspec.k) / lspec.stride + 1;
                    let mut out = Dense::zeros(lspec.out_ch, oh, ow);
                    for oc in 0..lspec.out_ch {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut acc = bias[oc];
                                for ic in 0..cur.c {
                                    for ky in 0..lspec.k {
                                        for kx in 0..lspec.k {
                                            acc += w[((oc * cur.c + ic) * lspec.k + ky) * lspec.k
                                                + kx]
                                                * padded.get(
                                                    ic,
                                                    oy * lspec.stride + ky,
                                                    ox * lspec.stride + kx,
                                                );
                                        }
                                    }
                                }
                                out.set(oc, oy, ox, acc);
                            }
                        }
                    }
                    cur = out;
                    pending_relu = true;
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    for c in 0..cur.c {
                        for i in 0..cur.h * cur.w {
                            let idx = c * cur.h * cur.w + i;
                            cur.data[idx] = gamma[c] * (cur.data[idx] - mean[c])
                                / (var[c] + BN_EPS).sqrt()
                                + beta[c];
                        }
                    }
                }
                LayerParams::MaxPool => {
                    let oh = (cur.h - lspec.k) / lspec.stride + 1;
                    let ow = (cur.w - lspec.k) / lspec.stride + 1;
                    let mut out = Dense::zeros(cur.c, oh, ow);
                    for c in 0..cur.c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut m = f64::NEG_INFINITY;
                                for ky in 0..lspec.k {
                                    for kx in 0..lspec.k {
                                        m = m.max(cur.get(
                                            c,
                                            oy * lspec.stride + ky,
                                            ox * lspec.stride + kx,
                                        ));
                                    }
                                }
                                out.set(c, oy, ox, m);
                            }
                        }
                    }
                    cur = out;
                }
                LayerParams::ReluRnn { w, bias, .. } => {
                    let in_len = cur.data.len() + state.h[rnn_idx].len();
                    let mut h = Vec::new();
                    for u in 0..lspec.units {
                        let mut acc = bias[u];
                        for (i, &v) in cur.data.iter().enumerate() {
                            acc += w[u * in_len + i] * v;
                        }
                        for (i, &v) in state.h[rnn_idx].iter().enumerate() {
                            acc += w[u * in_len + cur.data.len() + i] * v;
                        }
                        h.push(acc.max(0.0));
                    }
                    rnn_idx += 1;
                    cur = Dense::vector(h);
                }
                LayerParams::Fc { w, bias, .. } => {
                    let in_len = cur.data.len();
                    let mut y = Vec::new();
                    for u in 0..lspec.units {
                        let mut acc = bias[u];
                        for (i, &v) in cur.data.iter().enumerate() {
                            acc += w[u * in_len + i] * v;
                        }
                        if lspec.kind == LayerKind::FullyConnected {
                            acc = acc.max(0.0);
                        }
                        y.push(acc);
                    }
                    cur = Dense::vector(y);
                }
            }
        }
        if pending_relu {
            relu(&mut cur);
        }
        cur.data
    }

    #[test]
    fn dense_forward_matches_naive_reimplementation() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(42);
        for _ in 0..10 {
            let mut model = Model::init_random(&spec, &mut rng).unwrap();
            randomize_bn(&mut model, &mut rng);
            randomize_bias(&mut model, &mut rng);
            let mut state = RecurrentState::zeros(&model);
            state.h[0] = (0..10).map(|_| rng.random_range(0.0..1.0)).collect();
            let input = random_dense(&mut rng, 2, 8, 8, 0.5);
            let (out, _) = forward_dense(&model, &input, &state).unwrap();
            let oracle = naive_forward(&model, &input, &state);
            assert_eq!(out.len(), oracle.len());
            for (a, b) in out.iter().zip(&oracle) {
                assert!(rel_err(*a, *b) < 1e-10, "{a} vs {b}");
            }
        }
    }

    /// Instrumented dense-loop oracle: counts one MAC per conv multiply
    /// with a nonzero input, and per nonzero vector entry times units for
    /// rnn/fc layers.
    fn dense_mac_oracle(model: &Model, input: &Dense, state: &RecurrentState) -> Vec<u64> {
        let mut macs = vec![0u64; model.layers.len()];
        let mut cur = input.clone();
        let mut pending_relu = false;
        let mut rnn_idx = 0;
        for (idx, (lspec, params)) in model.spec.layers.iter().zip(&model.layers).enumerate() {
            if pending_relu && !matches!(lspec.kind, LayerKind::BatchNorm | LayerKind::MaxPool) {
                for v in &mut cur.data {
                    *v = v.max(0.0);
                }
                pending_relu = false;
            }
            match params {
                LayerParams::Conv { w, bias, .. } => {
                    let oh = (cur.h + 2 * lspec.pad - lspec.k) / lspec.stride + 1;
                    let ow = (cur.w + 2 * lspec.pad - lspec.k) / lspec.stride + 1;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ic in 0..cur.c {
                                for ky in 0..lspec.k {
                                    for kx in 0..lspec.k {
                                        let iy = (oy * lspec.stride + ky) as isize
                                            - lspec.pad as isize;
                                        let ix = (ox * lspec.stride + kx) as isize
                                            - lspec.pad as isize;
                                        if iy >= 0
                                            && iy < cur.h as isize
                                            && ix >= 0
                                            && ix < cur.w as isize
                                            && cur.get(ic, iy as usize, ix as usize) != 0.0
                                        {
                                            macs[idx] += lspec.out_ch as u64;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    cur = conv2d_dense(
                        &cur, w, bias, lspec.out_ch, lspec.k, lspec.pad, lspec.stride,
                    );
                    pending_relu = true;
                }
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => batchnorm_dense(&mut cur, gamma, beta, mean, var),
                LayerParams::MaxPool => cur = maxpool_dense(&cur, lspec.k, lspec.stride),
                LayerParams::ReluRnn { w, bias, .. } => {
                    let nnz = cur.data.iter().filter(|&&v| v != 0.0).count() as u64
                        + state.h[rnn_idx].iter().filter(|&&v| v != 0.0).count() as u64;
                    macs[idx] = nnz * lspec.units as u64;
                    let h = rnn_step(w, bias, &cur.data, &state.h[rnn_idx], lspec.units);
                    rnn_idx += 1;
                    cur = Dense::vector(h);
                }
                LayerParams::Fc { w, bias, .. } => {
                    let nnz = cur.data.iter().filter(|&&v| v != 0.0).count() as u64;
                    macs[idx] = nnz * lspec.units as u64;
                    let mut y = matvec(w, &cur.data, bias, lspec.units);
                    if lspec.kind == LayerKind::FullyConnected {
                        for v in &mut y {
                            *v = v.max(0.0);
                        }
                    }
                    cur = Dense::vector(y);
                }
            }
        }
        macs
    }

    #[test]
    fn sparse_equals_dense_and_macs_match_instrumented_oracle() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(43);
        for trial in 0..20 {
            let mut model = Model::init_random(&spec, &mut rng).unwrap();
            randomize_bn(&mut model, &mut rng);
            randomize_bias(&mut model, &mut rng);
            let mut state = RecurrentState::zeros(&model);
            state.h[0] = (0..10).map(|_| rng.random_range(0.0..0.5)).collect();
            let input = random_dense(&mut rng, 2, 8, 8, 0.3);

            let (dense_out, dense_state) = forward_dense(&model, &input, &state).unwrap();
            let mut counter = MacCounter::for_model(&model);
            let (sparse_out, sparse_state) = forward_sparse(
                &model,
                &SparseActivations::from_dense(&input),
                &state,
                &mut counter,
            )
            .unwrap();

            for (a, b) in dense_out.iter().zip(&sparse_out) {
                assert!(rel_err(*a, *b) < 1e-10, "trial {trial}: {a} vs {b}");
            }
            for (a, b) in dense_state.h[0].iter().zip(&sparse_state.h[0]) {
                assert!(rel_err(*a, *b) < 1e-10);
            }

            let oracle = dense_mac_oracle(&model, &input, &state);
            let got: Vec<u64> = counter.layers.iter().map(|l| l.macs).collect();
            assert_eq!(got, oracle, "trial {trial}");
        }
    }

    #[test]
    fn interior_pixel_three_by_three_conv_macs() {
        // One nonzero interior pixel through a 3x3 conv with 32 output
        // channels: 9 * 32 = 288 effective MACs.
        let mut spec = NetworkSpec::new(NetRole::Classification, 8, 8);
        spec.layers = vec![LayerSpec::conv(2, 32, 3, 1), LayerSpec::output(4)];
        let mut rng = ChaCha20Rng::seed_from_u64(44);
        let model = Model::init_random(&spec, &mut rng).unwrap();
        let mut input = Dense::zeros(2, 8, 8);
        input.set(1, 4, 4, 2.0);
        let mut counter = MacCounter::for_model(&model);
        let state = RecurrentState::zeros(&model);
        forward_sparse(
            &model,
            &SparseActivations::from_dense(&input),
            &state,
            &mut counter,
        )
        .unwrap();
        assert_eq!(counter.layers[0].macs, 288);

        // A corner pixel touches only 4 kernel positions.
        let mut corner = Dense::zeros(2, 8, 8);
        corner.set(0, 0, 0, 1.0);
        let mut counter2 = MacCounter::for_model(&model);
        forward_sparse(
            &model,
            &SparseActivations::from_dense(&corner),
            &state,
            &mut counter2,
        )
        .unwrap();
        assert_eq!(counter2.layers[0].macs, 4 * 32);
    }

    #[test]
    fn counter_accumulates_across_forwards() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(45);
        let model = Model::init_random(&spec, &mut rng).unwrap();
        let state = RecurrentState::zeros(&model);
        let input = random_dense(&mut rng, 2, 8, 8, 0.4);
        let sparse = SparseActivations::from_dense(&input);
        let mut counter = MacCounter::for_model(&model);
        forward_sparse(&model, &sparse, &state, &mut counter).unwrap();
        let after_one = counter.clone();
        forward_sparse(&model, &sparse, &state, &mut counter).unwrap();
        for (a, b) in counter.layers.iter().zip(&after_one.layers) {
            assert_eq!(a.macs, 2 * b.macs);
            assert!(a.events_in >= b.events_in);
        }
    }

    #[test]
    fn sparsify_densify_roundtrip() {
        let mut rng = ChaCha20Rng::seed_from_u64(46);
        let d = random_dense(&mut rng, 3, 5, 7, 0.35);
        let s = SparseActivations::from_dense(&d);
        assert_eq!(s.to_dense(), d);
        // No duplicate coordinates.
        let mut seen = std::collections::BTreeSet::new();
        for &(c, y, x, _) in &s.items {
            assert!(seen.insert((c, y, x)));
        }
    }

    #[test]
    fn l1_loss_examples() {
        assert_eq!(l1_activation_loss(&[&[0.0, 0.0]], 0.5), 0.0);
        assert!((l1_activation_loss(&[&[2.5]], 0.01) - 0.025).abs() < 1e-15);
        let mut rng = ChaCha20Rng::seed_from_u64(47);
        let acts: Vec<f64> = (0..100).map(|_| rng.random_range(-1.0..1.0)).collect();
        let expect: f64 = acts.iter().map(|v| v.abs()).sum::<f64>() * 0.1;
        assert!(rel_err(l1_activation_loss(&[&acts], 0.1), expect) < 1e-12);
    }

    #[test]
    fn rnn_state_stays_non_negative() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(48);
        let model = Model::init_random(&spec, &mut rng).unwrap();
        let mut state = RecurrentState::zeros(&model);
        for _ in 0..5 {
            let input = random_dense(&mut rng, 2, 8, 8, 0.5);
            let (_, next) = forward_dense(&model, &input, &state).unwrap();
            assert!(next.h[0].iter().all(|&v| v >= 0.0));
            state = next;
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let spec = toy_net();
        let mut rng = ChaCha20Rng::seed_from_u64(49);
        let model = Model::init_random(&spec, &mut rng).unwrap();
        let state = RecurrentState::zeros(&model);
        let input = Dense::zeros(2, 7, 8);
        assert!(matches!(
            forward_dense(&model, &input, &state),
            Err(NetError::ShapeMismatch(_))
        ));
    }
}
