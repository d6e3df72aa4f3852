//! The recording tape: append-only list of primitive ops over tensors.
//!
//! Node ids are indices into the tape, so reverse iteration is a valid
//! topological order and backward visits each node exactly once. Leaf
//! nodes are constants or parameters; every other node saves its input
//! ids plus whatever the adjoint needs (pooling argmaxes, truncation
//! supports, batchnorm statistics).

use std::sync::Arc;

use super::tensor::Tensor;
use super::GradError;
use crate::net::{conv2d_dense_raw, ConvGeom};

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `mul * x + add`, elementwise with scalar constants; only the
    /// slope matters to the adjoint.
    Affine {
        x: NodeId,
        mul: f64,
    },
    Tanh {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    /// Scalar pick `x[i]`.
    Index {
        x: NodeId,
        i: usize,
    },
    Concat {
        a: NodeId,
        b: NodeId,
    },
    /// `W x + b` over the flattened input.
    Linear {
        w: NodeId,
        x: NodeId,
        b: NodeId,
        units: usize,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
    },
    /// Inference-form batchnorm with constant statistics.
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
        ch: usize,
        spatial: usize,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<usize>,
    },
    /// `mu[i] = g + (i - (n-1)/2) * delta`.
    KernelCenters {
        g: NodeId,
        delta: NodeId,
        n: usize,
    },
    /// Dense truncated Gaussian rows from kernel means; the truncation
    /// window is fixed during backward.
    GaussRows {
        mu: NodeId,
        sigma: f64,
        len: usize,
        supports: Vec<(usize, usize)>,
    },
    /// `out[p][j][i] = sum_mn fy[j][m] * frame[p][m][n] * fx[i][n]`
    /// with the frame held constant.
    TgkCrop {
        fx: NodeId,
        fy: NodeId,
        frame: Arc<Tensor>,
        supports_x: Vec<(usize, usize)>,
        supports_y: Vec<(usize, usize)>,
        n: usize,
    },
    /// `logsumexp(z) - z[label]`.
    CrossEntropy {
        logits: NodeId,
        label: usize,
    },
    SumAll {
        x: NodeId,
    },
    /// Scalar linear combination `sum_i c_i * x_i`.
    LinComb {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients for every node of one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. node `id`; `None` when the node does
    /// not influence the loss.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// A leaf node: parameter or constant input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn affine(&mut self, x: NodeId, mul: f64, add: f64) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| mul * v + add).collect(),
        );
        self.push(Op::Affine { x, mul }, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| v.tanh()).collect(),
        );
        self.push(Op::Tanh { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape.clone(),
            self.value(x)
                .data
                .iter()
                .map(|v| 1.0 / (1.0 + (-v).exp()))
                .collect(),
        );
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::new(
            self.value(x).shape.clone(),
            self.value(x).data.iter().map(|v| v.max(0.0)).collect(),
        );
        self.push(Op::Relu { x }, value)
    }

    pub fn index(&mut self, x: NodeId, i: usize) -> NodeId {
        let value = Tensor::scalar(self.value(x).data[i]);
        self.push(Op::Index { x, i }, value)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let value = Tensor::vector(data);
        self.push(Op::Concat { a, b }, value)
    }

    /// `W x + b`; `w` has shape `[units, x.len()]`, `x` is flattened.
    pub fn linear(&mut self, w: NodeId, x: NodeId, b: NodeId, units: usize) -> NodeId {
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let in_len = xv.len();
        debug_assert_eq!(wv.len(), units * in_len);
        debug_assert_eq!(bv.len(), units);
        let data = (0..units)
            .map(|u| {
                bv[u]
                    + wv[u * in_len..(u + 1) * in_len]
                        .iter()
                        .zip(xv)
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
            })
            .collect();
        self.push(Op::Linear { w, x, b, units }, Tensor::vector(data))
    }

    /// Cross-correlation with padding and stride; bias per out-channel.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> NodeId {
        let out = conv2d_dense_raw(
            &self.value(x).data,
            &self.value(w).data,
            &self.value(b).data,
            &geom,
        );
        let shape = vec![geom.out_ch, geom.out_h(), geom.out_w()];
        self.push(Op::Conv2d { x, w, b, geom }, Tensor::new(shape, out))
    }

    /// Batchnorm in inference form with constant running statistics;
    /// gamma/beta differentiable.
    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    ) -> NodeId {
        let shape = self.value(x).shape.clone();
        let ch = shape[0];
        let spatial = self.value(x).len() / ch;
        let mut data = self.value(x).data.clone();
        for c in 0..ch {
            let inv = 1.0 / (var[c] + eps).sqrt();
            let g = self.value(gamma).data[c];
            let bt = self.value(beta).data[c];
            for i in 0..spatial {
                let idx = c * spatial + i;
                data[idx] = g * (data[idx] - mean[c]) * inv + bt;
            }
        }
        self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                ch,
                spatial,
            },
            Tensor::new(shape, data),
        )
    }

    /// Max pooling with first-index tie-break in row-major order; the
    /// argmax positions carry the gradient.
    pub fn maxpool(&mut self, x: NodeId, k: usize, stride: usize) -> NodeId {
        let shape = self.value(x).shape.clone();
        let (c, h, w) = (shape[0], shape[1], shape[2]);
        let oh = (h - k) / stride + 1;
        let ow = (w - k) / stride + 1;
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..k {
                        for kx in 0..k {
                            let idx = (ci * h + oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > best {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    data.push(best);
                    argmax.push(best_idx);
                }
            }
        }
        self.push(
            Op::MaxPool { x, argmax },
            Tensor::new(vec![c, oh, ow], data),
        )
    }

    /// Kernel mean positions from a scalar center and spacing.
    pub fn kernel_centers(&mut self, g: NodeId, delta: NodeId, n: usize) -> NodeId {
        let gv = self.value(g).item();
        let dv = self.value(delta).item();
        let data = (0..n)
            .map(|i| gv + crate::attention::center_offset(i, n) * dv)
            .collect();
        self.push(Op::KernelCenters { g, delta, n }, Tensor::vector(data))
    }

    /// Dense `[n, len]` truncated Gaussian rows; returns the node and the
    /// per-row `(start, support_len)` windows. The window bounds follow
    /// the forward values of `mu` and are constants during backward.
    pub fn gauss_rows(
        &mut self,
        mu: NodeId,
        sigma: f64,
        theta: f64,
        len: usize,
    ) -> (NodeId, Vec<(usize, usize)>) {
        let mus = self.value(mu).data.clone();
        let n = mus.len();
        let mut data = vec![0.0; n * len];
        let mut supports = Vec::with_capacity(n);
        for (i, &m) in mus.iter().enumerate() {
            let row = crate::attention::gauss_row(m, sigma, theta, len);
            supports.push((row.start, row.support_len()));
            for (off, &w) in row.weights.iter().enumerate() {
                data[i * len + row.start + off] = w;
            }
        }
        let id = self.push(
            Op::GaussRows {
                mu,
                sigma,
                len,
                supports: supports.clone(),
            },
            Tensor::new(vec![n, len], data),
        );
        (id, supports)
    }

    /// Truncated-Gaussian crop of a constant event frame (`[2, h, w]`).
    pub fn tgk_crop(
        &mut self,
        fx: NodeId,
        fy: NodeId,
        frame: Arc<Tensor>,
        supports_x: Vec<(usize, usize)>,
        supports_y: Vec<(usize, usize)>,
    ) -> NodeId {
        let n = supports_x.len();
        let (h, w) = (frame.shape[1], frame.shape[2]);
        let fxv = &self.value(fx).data;
        let fyv = &self.value(fy).data;
        let mut data = vec![0.0; 2 * n * n];
        for p in 0..2 {
            for (j, &(sy, ly)) in supports_y.iter().enumerate() {
                for (i, &(sx, lx)) in supports_x.iter().enumerate() {
                    let mut acc = 0.0;
                    for m in sy..sy + ly {
                        let wy = fyv[j * h + m];
                        for nn in sx..sx + lx {
                            let val = frame.data[(p * h + m) * w + nn];
                            if val != 0.0 {
                                acc += (wy * val) * fxv[i * w + nn];
                            }
                        }
                    }
                    data[(p * n + j) * n + i] = acc;
                }
            }
        }
        self.push(
            Op::TgkCrop {
                fx,
                fy,
                frame,
                supports_x,
                supports_y,
                n,
            },
            Tensor::new(vec![2, n, n], data),
        )
    }

    /// Numerically stable `logsumexp(z) - z[label]`.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> NodeId {
        let z = &self.value(logits).data;
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        self.push(
            Op::CrossEntropy { logits, label },
            Tensor::scalar(lse - z[label]),
        )
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Op::SumAll { x }, Tensor::scalar(s))
    }

    /// Scalar combination `sum_i c_i * x_i` of scalar nodes.
    pub fn lin_comb(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let s = terms
            .iter()
            .map(|&(id, c)| c * self.value(id).item())
            .sum();
        self.push(Op::LinComb { terms }, Tensor::scalar(s))
    }

    /// Backward sweep from a scalar loss node. Returns gradients for all
    /// nodes reachable backward from the loss.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, GradError> {
        if loss >= self.nodes.len() || !self.nodes[loss].value.is_scalar() {
            return Err(GradError::DisconnectedLoss);
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let Some(gout) = grads[id].take() else {
                continue;
            };
            self.propagate(id, &gout, &mut grads);
            grads[id] = Some(gout);
        }
        Ok(Gradients { grads })
    }

    fn accum(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], f: impl FnOnce(&mut [f64])) {
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
        f(&mut slot.data);
    }

    fn propagate(&self, id: NodeId, gout: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Affine { x, mul } => {
                let shape = &self.nodes[*x].value.shape;
                Self::accum(grads, *x, shape, |gx| {
                    for (g, go) in gx.iter_mut().zip(&gout.data) {
                        *g += mul * go;
                    }
                });
            }
            Op::Tanh { x } => {
                let y = &self.nodes[id].value.data;
                let shape = &self.nodes[*x].value.shape;
                Self::accum(grads, *x, shape, |gx| {
                    for i in 0..y.len() {
                        gx[i] += (1.0 - y[i] * y[i]) * gout.data[i];
                    }
                });
            }
            Op::Sigmoid { x } => {
                let y = &self.nodes[id].value.data;
                let shape = &self.nodes[*x].value.shape;
                Self::accum(grads, *x, shape, |gx| {
                    for i in 0..y.len() {
                        gx[i] += y[i] * (1.0 - y[i]) * gout.data[i];
                    }
                });
            }
            Op::Relu { x } => {
                let xv = &self.nodes[*x].value.data;
                let shape = &self.nodes[*x].value.shape;
                Self::accum(grads, *x, shape, |gx| {
                    for i in 0..xv.len() {
                        if xv[i] > 0.0 {
                            gx[i] += gout.data[i];
                        }
                    }
                });
            }
            Op::Index { x, i } => {
                let shape = &self.nodes[*x].value.shape;
                let go = gout.item();
                let i = *i;
                Self::accum(grads, *x, shape, |gx| {
                    gx[i] += go;
                });
            }
            Op::Concat { a, b } => {
                let alen = self.nodes[*a].value.len();
                let ashape = &self.nodes[*a].value.shape;
                Self::accum(grads, *a, ashape, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gout.data[i];
                    }
                });
                let bshape = &self.nodes[*b].value.shape;
                Self::accum(grads, *b, bshape, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += gout.data[alen + i];
                    }
                });
            }
            Op::Linear { w, x, b, units } => {
                let xv = &self.nodes[*x].value.data;
                let wv = &self.nodes[*w].value.data;
                let in_len = xv.len();
                Self::accum(grads, *w, &self.nodes[*w].value.shape, |gw| {
                    for u in 0..*units {
                        let go = gout.data[u];
                        if go != 0.0 {
                            for i in 0..in_len {
                                gw[u * in_len + i] += go * xv[i];
                            }
                        }
                    }
                });
                Self::accum(grads, *x, &self.nodes[*x].value.shape, |gx| {
                    for u in 0..*units {
                        let go = gout.data[u];
                        if go != 0.0 {
                            for i in 0..in_len {
                                gx[i] += go * wv[u * in_len + i];
                            }
                        }
                    }
                });
                Self::accum(grads, *b, &self.nodes[*b].value.shape, |gb| {
                    for u in 0..*units {
                        gb[u] += gout.data[u];
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let xv = &self.nodes[*x].value.data;
                let wv = &self.nodes[*w].value.data;
                let (oh, ow) = (geom.out_h(), geom.out_w());
                let (c_in, h, wdt) = (geom.in_ch, geom.in_h, geom.in_w);
                let k = geom.k;
                // One fused pass accumulating all three adjoints.
                let mut gw = vec![0.0; wv.len()];
                let mut gx = vec![0.0; xv.len()];
                let mut gb = vec![0.0; geom.out_ch];
                for oc in 0..geom.out_ch {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let go = gout.data[(oc * oh + oy) * ow + ox];
                            if go == 0.0 {
                                continue;
                            }
                            gb[oc] += go;
                            for ic in 0..c_in {
                                for ky in 0..k {
                                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix =
                                            (ox * geom.stride + kx) as isize - geom.pad as isize;
                                        if ix < 0 || ix >= wdt as isize {
                                            continue;
                                        }
                                        let xidx = (ic * h + iy as usize) * wdt + ix as usize;
                                        let widx = ((oc * c_in + ic) * k + ky) * k + kx;
                                        gw[widx] += go * xv[xidx];
                                        gx[xidx] += go * wv[widx];
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *w, &self.nodes[*w].value.shape, |g| {
                    for (a, b) in g.iter_mut().zip(&gw) {
                        *a += b;
                    }
                });
                Self::accum(grads, *x, &self.nodes[*x].value.shape, |g| {
                    for (a, b) in g.iter_mut().zip(&gx) {
                        *a += b;
                    }
                });
                Self::accum(grads, *b, &self.nodes[*b].value.shape, |g| {
                    for (a, b) in g.iter_mut().zip(&gb) {
                        *a += b;
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
                ch,
                spatial,
            } => {
                let xv = &self.nodes[*x].value.data;
                let gv = &self.nodes[*gamma].value.data;
                Self::accum(grads, *x, &self.nodes[*x].value.shape, |gx| {
                    for c in 0..*ch {
                        let inv = 1.0 / (var[c] + eps).sqrt();
                        for i in 0..*spatial {
                            let idx = c * spatial + i;
                            gx[idx] += gout.data[idx] * gv[c] * inv;
                        }
                    }
                });
                Self::accum(grads, *gamma, &self.nodes[*gamma].value.shape, |gg| {
                    for c in 0..*ch {
                        let inv = 1.0 / (var[c] + eps).sqrt();
                        for i in 0..*spatial {
                            let idx = c * spatial + i;
                            gg[c] += gout.data[idx] * (xv[idx] - mean[c]) * inv;
                        }
                    }
                });
                Self::accum(grads, *beta, &self.nodes[*beta].value.shape, |gb| {
                    for c in 0..*ch {
                        for i in 0..*spatial {
                            gb[c] += gout.data[c * spatial + i];
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                Self::accum(grads, *x, &self.nodes[*x].value.shape, |gx| {
                    for (o, &src) in argmax.iter().enumerate() {
                        gx[src] += gout.data[o];
                    }
                });
            }
            Op::KernelCenters { g, delta, n } => {
                let mut dg = 0.0;
                let mut dd = 0.0;
                for i in 0..*n {
                    dg += gout.data[i];
                    dd += crate::attention::center_offset(i, *n) * gout.data[i];
                }
                Self::accum(grads, *g, &[1], |s| s[0] += dg);
                Self::accum(grads, *delta, &[1], |s| s[0] += dd);
            }
            Op::GaussRows {
                mu,
                sigma,
                len,
                supports,
            } => {
                let y = &self.nodes[id].value.data;
                let mus = &self.nodes[*mu].value.data;
                Self::accum(grads, *mu, &self.nodes[*mu].value.shape, |gm| {
                    for (i, &(start, slen)) in supports.iter().enumerate() {
                        for n in start..start + slen {
                            let idx = i * len + n;
                            gm[i] += gout.data[idx] * y[idx] * (n as f64 - mus[i]) / sigma;
                        }
                    }
                });
            }
            Op::TgkCrop {
                fx,
                fy,
                frame,
                supports_x,
                supports_y,
                n,
            } => {
                let (h, w) = (frame.shape[1], frame.shape[2]);
                let fxv = &self.nodes[*fx].value.data;
                let fyv = &self.nodes[*fy].value.data;
                let mut gfx = vec![0.0; fxv.len()];
                let mut gfy = vec![0.0; fyv.len()];
                for p in 0..2 {
                    for (j, &(sy, ly)) in supports_y.iter().enumerate() {
                        for (i, &(sx, lx)) in supports_x.iter().enumerate() {
                            let go = gout.data[(p * n + j) * n + i];
                            if go == 0.0 {
                                continue;
                            }
                            for m in sy..sy + ly {
                                let wy = fyv[j * h + m];
                                for nn in sx..sx + lx {
                                    let val = frame.data[(p * h + m) * w + nn];
                                    if val != 0.0 {
                                        gfx[i * w + nn] += go * wy * val;
                                        gfy[j * h + m] += go * fxv[i * w + nn] * val;
                                    }
                                }
                            }
                        }
                    }
                }
                Self::accum(grads, *fx, &self.nodes[*fx].value.shape, |g| {
                    for (a, b) in g.iter_mut().zip(&gfx) {
                        *a += b;
                    }
                });
                Self::accum(grads, *fy, &self.nodes[*fy].value.shape, |g| {
                    for (a, b) in g.iter_mut().zip(&gfy) {
                        *a += b;
                    }
                });
            }
            Op::CrossEntropy { logits, label } => {
                let z = &self.nodes[*logits].value.data;
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = z.iter().map(|v| (v - m).exp()).sum();
                let go = gout.item();
                let label = *label;
                Self::accum(grads, *logits, &self.nodes[*logits].value.shape, |gz| {
                    for i in 0..gz.len() {
                        let soft = (z[i] - m).exp() / denom;
                        gz[i] += go * (soft - if i == label { 1.0 } else { 0.0 });
                    }
                });
            }
            Op::SumAll { x } => {
                let go = gout.item();
                Self::accum(grads, *x, &self.nodes[*x].value.shape, |gx| {
                    for g in gx.iter_mut() {
                        *g += go;
                    }
                });
            }
            Op::LinComb { terms } => {
                let go = gout.item();
                for &(tid, c) in terms {
                    Self::accum(grads, tid, &[1], |s| s[0] += c * go);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::gradcheck::check_gradients;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    const H: f64 = 1e-4;
    const TOL_REL: f64 = 1e-4;
    const TOL_ABS: f64 = 1e-7;

    fn rng(seed: u64) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(seed)
    }

    fn rand_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, (0..len).map(|_| rng.random_range(lo..hi)).collect())
    }

    #[test]
    fn identity_loss_gradient_is_one() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![3.0, -1.0]));
        let b = tape.leaf(Tensor::scalar(5.0));
        let loss = tape.index(a, 1);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data, vec![0.0, 1.0]);
        assert!(grads.get(b).is_none());
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(a),
            Err(GradError::DisconnectedLoss)
        ));
        assert!(matches!(
            Tape::new().backward(0),
            Err(GradError::DisconnectedLoss)
        ));
    }

    #[test]
    fn fd_affine_tanh_sigmoid() {
        let mut r = rng(1);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, vec![7], -2.0, 2.0);
            check_gradients(
                &|tape: &mut Tape, ids: &[NodeId]| {
                    let a = tape.affine(ids[0], 2.5, -0.7);
                    let t = tape.tanh(a);
                    let s = tape.sigmoid(t);
                    tape.sum_all(s)
                },
                &[x],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_relu_away_from_kink() {
        let mut r = rng(2);
        for _ in 0..5 {
            let mut x = rand_tensor(&mut r, vec![9], -2.0, 2.0);
            for v in &mut x.data {
                if v.abs() < 0.05 {
                    *v += 0.1; // keep clear of the kink for fd validity
                }
            }
            check_gradients(
                &|tape: &mut Tape, ids: &[NodeId]| {
                    let y = tape.relu(ids[0]);
                    let sq = tape.tanh(y);
                    tape.sum_all(sq)
                },
                &[x],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_concat_linear() {
        let mut r = rng(3);
        for _ in 0..5 {
            let a = rand_tensor(&mut r, vec![4], -1.0, 1.0);
            let b = rand_tensor(&mut r, vec![3], -1.0, 1.0);
            let w = rand_tensor(&mut r, vec![5, 7], -1.0, 1.0);
            let bias = rand_tensor(&mut r, vec![5], -0.5, 0.5);
            check_gradients(
                &|tape: &mut Tape, ids: &[NodeId]| {
                    let xa = tape.concat(ids[0], ids[1]);
                    let y = tape.linear(ids[2], xa, ids[3], 5);
                    let t = tape.tanh(y);
                    tape.sum_all(t)
                },
                &[a, b, w, bias],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_conv2d_with_padding_and_stride() {
        let mut r = rng(4);
        for &(pad, stride) in &[(0usize, 1usize), (1, 1), (1, 2)] {
            let geom = ConvGeom {
                in_ch: 2,
                in_h: 5,
                in_w: 5,
                out_ch: 3,
                k: 3,
                pad,
                stride,
            };
            let x = rand_tensor(&mut r, vec![2, 5, 5], -1.0, 1.0);
            let w = rand_tensor(&mut r, vec![3, 2, 3, 3], -1.0, 1.0);
            let b = rand_tensor(&mut r, vec![3], -0.5, 0.5);
            check_gradients(
                &move |tape: &mut Tape, ids: &[NodeId]| {
                    let y = tape.conv2d(ids[0], ids[1], ids[2], geom);
                    let t = tape.tanh(y);
                    tape.sum_all(t)
                },
                &[x, w, b],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_batchnorm() {
        let mut r = rng(5);
        for _ in 0..5 {
            let x = rand_tensor(&mut r, vec![3, 4, 4], -2.0, 2.0);
            let gamma = rand_tensor(&mut r, vec![3], 0.5, 1.5);
            let beta = rand_tensor(&mut r, vec![3], -0.5, 0.5);
            let mean: Vec<f64> = (0..3).map(|_| r.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.random_range(0.5..2.0)).collect();
            check_gradients(
                &move |tape: &mut Tape, ids: &[NodeId]| {
                    let y =
                        tape.batchnorm(ids[0], ids[1], ids[2], mean.clone(), var.clone(), 1e-5);
                    let t = tape.tanh(y);
                    tape.sum_all(t)
                },
                &[x, gamma, beta],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_maxpool_away_from_ties() {
        let mut r = rng(6);
        for _ in 0..5 {
            // Values spaced by at least 0.01 so no tie flips under +-h.
            let mut vals: Vec<f64> = (0..2 * 6 * 6).map(|i| i as f64 * 0.01).collect();
            use rand::seq::SliceRandom;
            vals.shuffle(&mut r);
            let x = Tensor::new(vec![2, 6, 6], vals);
            check_gradients(
                &|tape: &mut Tape, ids: &[NodeId]| {
                    let y = tape.maxpool(ids[0], 2, 2);
                    let t = tape.tanh(y);
                    tape.sum_all(t)
                },
                &[x],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn maxpool_ties_break_to_first_index_row_major() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(
            vec![1, 2, 2],
            vec![5.0, 5.0, 5.0, 5.0], // all tied
        ));
        let y = tape.maxpool(x, 2, 2);
        let loss = tape.sum_all(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn fd_kernel_centers_and_gauss_rows() {
        // Window boundaries sit well away from integers so the truncation
        // support cannot move under the +-h probes.
        let g0 = 10.33;
        let d0 = 1.73;
        check_gradients(
            &|tape: &mut Tape, ids: &[NodeId]| {
                let mu = tape.kernel_centers(ids[0], ids[1], 4);
                let (rows, _) = tape.gauss_rows(mu, 2.0, 5.0, 24);
                let t = tape.tanh(rows);
                tape.sum_all(t)
            },
            &[Tensor::scalar(g0), Tensor::scalar(d0)],
            H,
            TOL_REL,
            TOL_ABS,
        )
        .unwrap();
    }

    #[test]
    fn fd_tgk_crop_in_kernel_weights() {
        let mut r = rng(7);
        let (n, hh, ww) = (3usize, 10usize, 12usize);
        let mut frame = Tensor::zeros(vec![2, hh, ww]);
        for v in &mut frame.data {
            if r.random_range(0.0..1.0) < 0.4 {
                *v = r.random_range(0.5..3.0);
            }
        }
        let frame = Arc::new(frame);
        let supports_x = vec![(1usize, 4usize), (4, 4), (7, 4)];
        let supports_y = vec![(0usize, 5usize), (3, 5), (5, 5)];
        let fx = rand_tensor(&mut r, vec![n, ww], 0.0, 1.0);
        let fy = rand_tensor(&mut r, vec![n, hh], 0.0, 1.0);
        let (sx, sy) = (supports_x.clone(), supports_y.clone());
        check_gradients(
            &move |tape: &mut Tape, ids: &[NodeId]| {
                let v = tape.tgk_crop(ids[0], ids[1], frame.clone(), sx.clone(), sy.clone());
                let t = tape.tanh(v);
                tape.sum_all(t)
            },
            &[fx, fy],
            H,
            TOL_REL,
            TOL_ABS,
        )
        .unwrap();
    }

    #[test]
    fn crop_gradient_vanishes_when_events_sit_on_kernel_peaks() {
        // theta = 2 truncates each kernel to its own center pixel, where
        // the Gaussian derivative w.r.t. the mean is zero.
        let mut tape = Tape::new();
        let g = tape.leaf(Tensor::scalar(10.0));
        let delta = tape.leaf(Tensor::scalar(4.0));
        let mu = tape.kernel_centers(g, delta, 2); // centers at 8 and 12
        let (rows, supports) = tape.gauss_rows(mu, 2.0, 2.0, 24);
        let mut frame = Tensor::zeros(vec![2, 24, 24]);
        for &y in &[8usize, 12] {
            for &x in &[8usize, 12] {
                frame.data[y * 24 + x] = 1.0;
            }
        }
        let v = tape.tgk_crop(rows, rows, Arc::new(frame), supports.clone(), supports);
        let loss = tape.sum_all(v);
        let grads = tape.backward(loss).unwrap();
        let dg = grads.get(g).unwrap().item();
        assert!(dg.abs() < 1e-12, "dg = {dg}");
    }

    #[test]
    fn fd_cross_entropy() {
        let mut r = rng(8);
        for label in 0..4 {
            let z = rand_tensor(&mut r, vec![4], -2.0, 2.0);
            check_gradients(
                &move |tape: &mut Tape, ids: &[NodeId]| tape.cross_entropy(ids[0], label),
                &[z],
                H,
                TOL_REL,
                TOL_ABS,
            )
            .unwrap();
        }
    }

    #[test]
    fn fd_lin_comb_and_sum() {
        let mut r = rng(9);
        let a = rand_tensor(&mut r, vec![6], -1.0, 1.0);
        let b = rand_tensor(&mut r, vec![1], -1.0, 1.0);
        check_gradients(
            &|tape: &mut Tape, ids: &[NodeId]| {
                let s = tape.sum_all(ids[0]);
                tape.lin_comb(vec![(s, 0.25), (ids[1], -2.0)])
            },
            &[a, b],
            H,
            TOL_REL,
            TOL_ABS,
        )
        .unwrap();
    }

    #[test]
    fn fd_recurrent_chain_through_time() {
        // Two RNN steps sharing one weight matrix: checks gradient
        // accumulation across time.
        let mut r = rng(10);
        let w = rand_tensor(&mut r, vec![3, 5], -0.8, 0.8);
        let b = rand_tensor(&mut r, vec![3], -0.2, 0.2);
        let x0 = rand_tensor(&mut r, vec![2], 0.1, 1.0);
        let x1 = rand_tensor(&mut r, vec![2], 0.1, 1.0);
        check_gradients(
            &|tape: &mut Tape, ids: &[NodeId]| {
                let h0 = tape.leaf(Tensor::vector(vec![0.0, 0.0, 0.0]));
                let c0 = tape.concat(ids[2], h0);
                let z0 = tape.linear(ids[0], c0, ids[1], 3);
                let h1 = tape.relu(z0);
                let c1 = tape.concat(ids[3], h1);
                let z1 = tape.linear(ids[0], c1, ids[1], 3);
                let h2 = tape.relu(z1);
                let t = tape.tanh(h2);
                tape.sum_all(t)
            },
            &[w, b, x0, x1],
            H,
            TOL_REL,
            TOL_ABS,
        )
        .unwrap();
    }
}
