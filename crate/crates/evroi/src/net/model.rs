//! Runtime model storage and the binary weight file format.
//!
//! Weight file layout (little-endian):
//!   magic `TRPW`; u16 layer count; then per layer:
//!   u8 kind, u8 rank, u32 dims[rank], i8 scale_exponent,
//!   u32 packed_byte_len, packed 4-bit nibbles,
//!   u32 aux_len (f32 count), f32 auxiliary params.
//!
//! Auxiliary params hold per-layer full-precision values: conv/fc/rnn
//! biases, and batchnorm `gamma, beta, mean, var` concatenated. Several
//! networks (e.g. an ROI predictor and its classifier) may be stored in
//! one file back to back; the caller splits them by spec layer counts.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::quant::{quantize_layer, QuantTensor};
use super::spec::{LayerKind, LayerShape, LayerSpec, NetworkSpec};
use super::NetError;

pub const TRPW_MAGIC: &[u8; 4] = b"TRPW";

/// Parameters of one layer. Weight vectors are row-major:
/// conv `[out_ch][in_ch][k][k]`, recurrent `[units][input + units]`
/// (input-to-hidden and hidden-to-hidden concatenated), fully connected
/// `[units][input]`. `quant` mirrors `w` once a layer has been quantized
/// (`w` then holds the dequantized values).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv {
        w: Vec<f64>,
        bias: Vec<f64>,
        quant: Option<QuantTensor>,
    },
    MaxPool,
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    ReluRnn {
        w: Vec<f64>,
        bias: Vec<f64>,
        quant: Option<QuantTensor>,
    },
    Fc {
        w: Vec<f64>,
        bias: Vec<f64>,
        quant: Option<QuantTensor>,
    },
}

impl LayerParams {
    pub fn quant(&self) -> Option<&QuantTensor> {
        match self {
            Self::Conv { quant, .. } | Self::ReluRnn { quant, .. } | Self::Fc { quant, .. } => {
                quant.as_ref()
            }
            _ => None,
        }
    }

    /// Trainable weight matrix/tensor, when the layer has one.
    pub fn weights(&self) -> Option<&[f64]> {
        match self {
            Self::Conv { w, .. } | Self::ReluRnn { w, .. } | Self::Fc { w, .. } => Some(w),
            _ => None,
        }
    }
}

/// A layer stack bound to concrete parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: NetworkSpec,
    pub layers: Vec<LayerParams>,
    shapes: Vec<LayerShape>,
}

impl Model {
    /// Chained per-layer output shapes (validated at construction).
    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn output_len(&self) -> usize {
        self.shapes.last().map(|s| s.len()).unwrap_or(0)
    }

    /// Weight dims of layer `idx` in file order, or `None` for layers
    /// without weights.
    pub fn weight_dims(&self, idx: usize) -> Option<Vec<usize>> {
        let spec = &self.spec.layers[idx];
        let input = self.spec.layer_input_shape(idx, &self.shapes);
        match spec.kind {
            LayerKind::Conv => Some(vec![spec.out_ch, spec.in_ch, spec.k, spec.k]),
            LayerKind::ReluRnn => Some(vec![spec.units, input.len() + spec.units]),
            LayerKind::FullyConnected | LayerKind::Output => {
                Some(vec![spec.units, input.len()])
            }
            _ => None,
        }
    }

    /// Fresh model with scaled-normal weights. Output layers start near
    /// zero so decoded ROI parameters begin at the image center.
    pub fn init_random<R: Rng>(spec: &NetworkSpec, rng: &mut R) -> Result<Self, NetError> {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, layer) in spec.layers.iter().enumerate() {
            let input = spec.layer_input_shape(idx, &shapes);
            let params = match layer.kind {
                LayerKind::Conv => {
                    let fan_in = layer.in_ch * layer.k * layer.k;
                    let std = (2.0 / fan_in as f64).sqrt();
                    LayerParams::Conv {
                        w: sample_normal(rng, layer.out_ch * fan_in, std),
                        bias: vec![0.0; layer.out_ch],
                        quant: None,
                    }
                }
                LayerKind::MaxPool => LayerParams::MaxPool,
                LayerKind::BatchNorm => LayerParams::BatchNorm {
                    gamma: vec![1.0; input.c],
                    beta: vec![0.0; input.c],
                    mean: vec![0.0; input.c],
                    var: vec![1.0; input.c],
                },
                LayerKind::ReluRnn => {
                    let fan_in = input.len() + layer.units;
                    let std = (2.0 / fan_in as f64).sqrt();
                    LayerParams::ReluRnn {
                        w: sample_normal(rng, layer.units * fan_in, std),
                        bias: vec![0.0; layer.units],
                        quant: None,
                    }
                }
                LayerKind::FullyConnected => {
                    let std = (2.0 / input.len() as f64).sqrt();
                    LayerParams::Fc {
                        w: sample_normal(rng, layer.units * input.len(), std),
                        bias: vec![0.0; layer.units],
                        quant: None,
                    }
                }
                LayerKind::Output => LayerParams::Fc {
                    w: sample_normal(rng, layer.units * input.len(), 0.01),
                    bias: vec![0.0; layer.units],
                    quant: None,
                },
            };
            layers.push(params);
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
            shapes,
        })
    }

    /// Binds explicit layer params to a spec, validating dimensions.
    pub fn from_parts(spec: &NetworkSpec, layers: Vec<LayerParams>) -> Result<Self, NetError> {
        let shapes = spec.shapes()?;
        if layers.len() != spec.layers.len() {
            return Err(NetError::LayerCountMismatch {
                expected: spec.layers.len(),
                found: layers.len(),
            });
        }
        let model = Self {
            spec: spec.clone(),
            layers,
            shapes,
        };
        for idx in 0..model.layers.len() {
            model.validate_layer(idx)?;
        }
        Ok(model)
    }

    fn validate_layer(&self, idx: usize) -> Result<(), NetError> {
        let spec = &self.spec.layers[idx];
        let params = &self.layers[idx];
        let input = self.spec.layer_input_shape(idx, &self.shapes);
        let fail = |msg: String| NetError::ShapeMismatch(format!("layer {idx}: {msg}"));
        match (spec.kind, params) {
            (LayerKind::Conv, LayerParams::Conv { w, bias, .. }) => {
                let expect = spec.out_ch * spec.in_ch * spec.k * spec.k;
                if w.len() != expect || bias.len() != spec.out_ch {
                    return Err(fail(format!("conv weights {} != {expect}", w.len())));
                }
            }
            (LayerKind::MaxPool, LayerParams::MaxPool) => {}
            (LayerKind::BatchNorm, LayerParams::BatchNorm { gamma, beta, mean, var }) => {
                if [gamma, beta, mean, var].iter().any(|v| v.len() != input.c) {
                    return Err(fail(format!("batchnorm params != {} channels", input.c)));
                }
            }
            (LayerKind::ReluRnn, LayerParams::ReluRnn { w, bias, .. }) => {
                let expect = spec.units * (input.len() + spec.units);
                if w.len() != expect || bias.len() != spec.units {
                    return Err(fail(format!("rnn weights {} != {expect}", w.len())));
                }
            }
            (LayerKind::FullyConnected | LayerKind::Output, LayerParams::Fc { w, bias, .. }) => {
                let expect = spec.units * input.len();
                if w.len() != expect || bias.len() != spec.units {
                    return Err(fail(format!("fc weights {} != {expect}", w.len())));
                }
            }
            (kind, _) => return Err(fail(format!("params do not match kind {}", kind.name()))),
        }
        Ok(())
    }

    /// Replaces a weighted layer's values with a quantized version,
    /// keeping the dequantized weights in `w`.
    pub fn quantize_layer_in_place(&mut self, idx: usize) {
        let dims = self.weight_dims(idx);
        match (&mut self.layers[idx], dims) {
            (
                LayerParams::Conv { w, quant, .. }
                | LayerParams::ReluRnn { w, quant, .. }
                | LayerParams::Fc { w, quant, .. },
                Some(dims),
            ) => {
                let q = quantize_layer(w, &dims);
                *w = q.dequantize();
                *quant = Some(q);
            }
            _ => {}
        }
    }

    /// Quantizes every weighted layer (post-training quantization).
    pub fn quantize_all(&mut self) {
        for idx in 0..self.layers.len() {
            self.quantize_layer_in_place(idx);
        }
    }

    pub fn is_fully_quantized(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights().is_none() || l.quant().is_some())
    }
}

fn sample_normal<R: Rng>(rng: &mut R, len: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("valid normal");
    (0..len).map(|_| dist.sample(rng)).collect()
}

// ============================================================================
// Weight file IO
// ============================================================================

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NetError> {
        if self.pos + n > self.bytes.len() {
            return Err(NetError::TruncatedFile);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, NetError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, NetError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8, NetError> {
        Ok(self.take(1)?[0])
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, NetError> {
        let raw = self.take(4 * n)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }
}

fn push_aux(out: &mut Vec<u8>, vals: &[&[f64]]) {
    let total: usize = vals.iter().map(|v| v.len()).sum();
    out.extend_from_slice(&(total as u32).to_le_bytes());
    for v in vals {
        for &x in *v {
            out.extend_from_slice(&(x as f32).to_le_bytes());
        }
    }
}

/// Serializes one or more models into a single weight file. Layers whose
/// weights are not yet quantized are quantized on the fly (the in-memory
/// models are left untouched).
pub fn save_weights(models: &[&Model]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRPW_MAGIC);
    let count: usize = models.iter().map(|m| m.layers.len()).sum();
    out.extend_from_slice(&(count as u16).to_le_bytes());

    for model in models {
        for (idx, (spec, params)) in model.spec.layers.iter().zip(&model.layers).enumerate() {
            out.push(spec.kind.code());
            let (quant, dims): (Option<QuantTensor>, Vec<usize>) = match params {
                LayerParams::Conv { w, quant, .. }
                | LayerParams::ReluRnn { w, quant, .. }
                | LayerParams::Fc { w, quant, .. } => {
                    let dims = model.weight_dims(idx).expect("weighted layer has dims");
                    let q = quant
                        .clone()
                        .unwrap_or_else(|| quantize_layer(w, &dims));
                    (Some(q), dims)
                }
                LayerParams::MaxPool => (None, Vec::new()),
                LayerParams::BatchNorm { gamma, .. } => (None, vec![gamma.len()]),
            };
            out.push(dims.len() as u8);
            for d in &dims {
                out.extend_from_slice(&(*d as u32).to_le_bytes());
            }
            match &quant {
                Some(q) => {
                    out.push(q.scale_exp as u8);
                    out.extend_from_slice(&(q.packed.len() as u32).to_le_bytes());
                    out.extend_from_slice(&q.packed);
                }
                None => {
                    out.push(0);
                    out.extend_from_slice(&0u32.to_le_bytes());
                }
            }
            match params {
                LayerParams::Conv { bias, .. }
                | LayerParams::ReluRnn { bias, .. }
                | LayerParams::Fc { bias, .. } => push_aux(&mut out, &[bias]),
                LayerParams::MaxPool => push_aux(&mut out, &[]),
                LayerParams::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => push_aux(&mut out, &[gamma, beta, mean, var]),
            }
        }
    }
    out
}

/// Loads models for the given specs from a weight file. The file's layer
/// records are matched against the specs in order; kinds and dims must
/// agree exactly.
pub fn load_weights(specs: &[&NetworkSpec], bytes: &[u8]) -> Result<Vec<Model>, NetError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != TRPW_MAGIC {
        return Err(NetError::BadMagic);
    }
    let count = r.u16()? as usize;
    let expected: usize = specs.iter().map(|s| s.layers.len()).sum();
    if count != expected || count == 0 {
        return Err(NetError::LayerCountMismatch {
            expected,
            found: count,
        });
    }

    let mut models = Vec::with_capacity(specs.len());
    for spec in specs {
        let shapes = spec.shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (idx, lspec) in spec.layers.iter().enumerate() {
            let kind = LayerKind::from_code(r.u8()?).ok_or(NetError::BadMagic)?;
            if kind != lspec.kind {
                return Err(NetError::ShapeMismatch(format!(
                    "layer {idx}: file kind {} != spec kind {}",
                    kind.name(),
                    lspec.kind.name()
                )));
            }
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let scale_exp = r.u8()? as i8;
            let packed_len = r.u32()? as usize;
            let packed = r.take(packed_len)?.to_vec();
            let aux_len = r.u32()? as usize;
            let aux = r.f32s(aux_len)?;

            let params = build_layer(lspec, spec, idx, &shapes, dims, scale_exp, packed, aux)?;
            layers.push(params);
        }
        models.push(Model::from_parts(spec, layers)?);
    }
    if r.pos != bytes.len() {
        return Err(NetError::TruncatedFile);
    }
    Ok(models)
}

#[allow(clippy::too_many_arguments)]
fn build_layer(
    lspec: &LayerSpec,
    spec: &NetworkSpec,
    idx: usize,
    shapes: &[LayerShape],
    dims: Vec<usize>,
    scale_exp: i8,
    packed: Vec<u8>,
    aux: Vec<f64>,
) -> Result<LayerParams, NetError> {
    let input = spec.layer_input_shape(idx, shapes);
    let fail = |msg: String| NetError::ShapeMismatch(format!("layer {idx}: {msg}"));
    let weighted = |expect_dims: Vec<usize>| -> Result<(Vec<f64>, QuantTensor), NetError> {
        if dims != expect_dims {
            return Err(fail(format!("dims {dims:?} != {expect_dims:?}")));
        }
        let len: usize = dims.iter().product();
        if packed.len() != len.div_ceil(2) {
            return Err(NetError::TruncatedFile);
        }
        let q = QuantTensor {
            packed,
            len,
            scale_exp,
            shape: dims.clone(),
        };
        Ok((q.dequantize(), q))
    };
    match lspec.kind {
        LayerKind::Conv => {
            let (w, q) = weighted(vec![lspec.out_ch, lspec.in_ch, lspec.k, lspec.k])?;
            if aux.len() != lspec.out_ch {
                return Err(fail("conv bias length".into()));
            }
            Ok(LayerParams::Conv {
                w,
                bias: aux,
                quant: Some(q),
            })
        }
        LayerKind::MaxPool => {
            if !dims.is_empty() || !aux.is_empty() {
                return Err(fail("maxpool carries no params".into()));
            }
            Ok(LayerParams::MaxPool)
        }
        LayerKind::BatchNorm => {
            if dims != vec![input.c] || aux.len() != 4 * input.c {
                return Err(fail("batchnorm aux length".into()));
            }
            let c = input.c;
            Ok(LayerParams::BatchNorm {
                gamma: aux[0..c].to_vec(),
                beta: aux[c..2 * c].to_vec(),
                mean: aux[2 * c..3 * c].to_vec(),
                var: aux[3 * c..4 * c].to_vec(),
            })
        }
        LayerKind::ReluRnn => {
            let (w, q) = weighted(vec![lspec.units, input.len() + lspec.units])?;
            if aux.len() != lspec.units {
                return Err(fail("rnn bias length".into()));
            }
            Ok(LayerParams::ReluRnn {
                w,
                bias: aux,
                quant: Some(q),
            })
        }
        LayerKind::FullyConnected | LayerKind::Output => {
            let (w, q) = weighted(vec![lspec.units, input.len()])?;
            if aux.len() != lspec.units {
                return Err(fail("fc bias length".into()));
            }
            Ok(LayerParams::Fc {
                w,
                bias: aux,
                quant: Some(q),
            })
        }
    }
}
