//! Network architecture descriptions and the line-based spec file format.
//!
//! A spec file holds one or two network stanzas plus an optional shared
//! attention line:
//!
//! ```text
//! attention n=12 sigma=2.0 theta=6 s=16
//! net roi 128x128
//! layer maxpool k=8
//! layer conv in=2 out=32 k=3 pad=1
//! layer batchnorm
//! layer maxpool k=2
//! ...
//! layer relu_rnn units=256
//! layer output units=3
//! net classifier 12x12
//! ...
//! ```
//!
//! `#` starts a comment. Unspecified conv/pool strides default to 1 and
//! the kernel size respectively.

use super::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    BatchNorm,
    ReluRnn,
    FullyConnected,
    Output,
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Conv => "conv",
            Self::MaxPool => "maxpool",
            Self::BatchNorm => "batchnorm",
            Self::ReluRnn => "relu_rnn",
            Self::FullyConnected => "fully_connected",
            Self::Output => "output",
        }
    }

    pub(crate) fn code(&self) -> u8 {
        match self {
            Self::Conv => 0,
            Self::MaxPool => 1,
            Self::BatchNorm => 2,
            Self::ReluRnn => 3,
            Self::FullyConnected => 4,
            Self::Output => 5,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => Self::Conv,
            1 => Self::MaxPool,
            2 => Self::BatchNorm,
            3 => Self::ReluRnn,
            4 => Self::FullyConnected,
            5 => Self::Output,
            _ => return None,
        })
    }
}

/// One layer row, mirroring the architecture table columns. Fields that
/// do not apply to a kind stay zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub k: usize,
    pub pad: usize,
    pub stride: usize,
    pub units: usize,
}

impl LayerSpec {
    pub fn conv(in_ch: usize, out_ch: usize, k: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            in_ch,
            out_ch,
            k,
            pad,
            stride: 1,
            units: 0,
        }
    }

    pub fn maxpool(k: usize, stride: usize) -> Self {
        Self {
            kind: LayerKind::MaxPool,
            in_ch: 0,
            out_ch: 0,
            k,
            pad: 0,
            stride,
            units: 0,
        }
    }

    pub fn batchnorm() -> Self {
        Self {
            kind: LayerKind::BatchNorm,
            in_ch: 0,
            out_ch: 0,
            k: 0,
            pad: 0,
            stride: 0,
            units: 0,
        }
    }

    fn unit_layer(kind: LayerKind, units: usize) -> Self {
        Self {
            kind,
            in_ch: 0,
            out_ch: 0,
            k: 0,
            pad: 0,
            stride: 0,
            units,
        }
    }

    pub fn relu_rnn(units: usize) -> Self {
        Self::unit_layer(LayerKind::ReluRnn, units)
    }

    pub fn fully_connected(units: usize) -> Self {
        Self::unit_layer(LayerKind::FullyConnected, units)
    }

    pub fn output(units: usize) -> Self {
        Self::unit_layer(LayerKind::Output, units)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetRole {
    RoiPrediction,
    Classification,
}

/// Activation geometry between layers: channels x height x width.
/// Flattened (vector) activations use `c = len, h = w = 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl LayerShape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn is_flat(&self) -> bool {
        self.h == 1 && self.w == 1
    }
}

/// An ordered layer stack with its input geometry and role.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub role: NetRole,
    pub input_width: usize,
    pub input_height: usize,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(role: NetRole, input_width: usize, input_height: usize) -> Self {
        Self {
            role,
            input_width,
            input_height,
            input_channels: 2,
            layers: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> LayerShape {
        LayerShape {
            c: self.input_channels,
            h: self.input_height,
            w: self.input_width,
        }
    }

    /// Per-layer output shapes, validating that the stack chains
    /// consistently: conv channel counts, kernel fits, flattened layers
    /// only after the spatial part, role-specific output arity.
    pub fn shapes(&self) -> Result<Vec<LayerShape>, NetError> {
        let mut cur = self.input_shape();
        let mut out = Vec::with_capacity(self.layers.len());
        for (idx, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| NetError::ShapeMismatch(format!("layer {idx}: {msg}"));
            match layer.kind {
                LayerKind::Conv => {
                    if cur.is_flat() && cur.c != layer.in_ch {
                        return Err(fail("conv after flattened activation".into()));
                    }
                    if layer.in_ch != cur.c {
                        return Err(fail(format!(
                            "conv expects {} input channels, stack has {}",
                            layer.in_ch, cur.c
                        )));
                    }
                    if layer.k == 0 || layer.stride == 0 {
                        return Err(fail("conv kernel/stride must be positive".into()));
                    }
                    let span_h = cur.h + 2 * layer.pad;
                    let span_w = cur.w + 2 * layer.pad;
                    if span_h < layer.k || span_w < layer.k {
                        return Err(fail("conv kernel larger than padded input".into()));
                    }
                    cur = LayerShape {
                        c: layer.out_ch,
                        h: (span_h - layer.k) / layer.stride + 1,
                        w: (span_w - layer.k) / layer.stride + 1,
                    };
                }
                LayerKind::MaxPool => {
                    if cur.h < layer.k || cur.w < layer.k {
                        return Err(fail("pool kernel larger than input".into()));
                    }
                    if layer.k == 0 || layer.stride == 0 {
                        return Err(fail("pool kernel/stride must be positive".into()));
                    }
                    cur = LayerShape {
                        c: cur.c,
                        h: (cur.h - layer.k) / layer.stride + 1,
                        w: (cur.w - layer.k) / layer.stride + 1,
                    };
                }
                LayerKind::BatchNorm => {}
                LayerKind::ReluRnn | LayerKind::FullyConnected | LayerKind::Output => {
                    if layer.units == 0 {
                        return Err(fail("units must be positive".into()));
                    }
                    cur = LayerShape {
                        c: layer.units,
                        h: 1,
                        w: 1,
                    };
                }
            }
            out.push(cur);
        }
        match self.layers.last() {
            Some(l) if l.kind == LayerKind::Output => {}
            _ => {
                return Err(NetError::ShapeMismatch(
                    "network must end with an output layer".into(),
                ))
            }
        }
        if self.role == NetRole::RoiPrediction && out.last().map(|s| s.len()) != Some(3) {
            return Err(NetError::ShapeMismatch(
                "roi prediction network must end in 3 units".into(),
            ));
        }
        Ok(out)
    }

    /// Flattened input length of layer `idx` given the chained shapes.
    pub fn layer_input_shape(&self, idx: usize, shapes: &[LayerShape]) -> LayerShape {
        if idx == 0 {
            self.input_shape()
        } else {
            shapes[idx - 1]
        }
    }
}

/// Shared attention parameters carried by a spec file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionSpec {
    pub n: usize,
    pub sigma: f64,
    pub theta: f64,
    /// Distance scaling factor; `None` means the default `width / 8`.
    pub s: Option<f64>,
}

impl Default for AttentionSpec {
    fn default() -> Self {
        Self {
            n: 12,
            sigma: 2.0,
            theta: 6.0,
            s: None,
        }
    }
}

/// A parsed spec file: nets in file order plus attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetFile {
    pub attention: AttentionSpec,
    pub nets: Vec<NetworkSpec>,
}

impl NetFile {
    pub fn roi(&self) -> Option<&NetworkSpec> {
        self.nets.iter().find(|n| n.role == NetRole::RoiPrediction)
    }

    pub fn classifier(&self) -> Option<&NetworkSpec> {
        self.nets.iter().find(|n| n.role == NetRole::Classification)
    }
}

fn parse_kv(tok: &str, line: usize) -> Result<(&str, &str), NetError> {
    tok.split_once('=').ok_or(NetError::Parse {
        line,
        msg: format!("expected key=value, got `{tok}`"),
    })
}

fn parse_num<T: std::str::FromStr>(v: &str, line: usize) -> Result<T, NetError> {
    v.parse().map_err(|_| NetError::Parse {
        line,
        msg: format!("bad number `{v}`"),
    })
}

/// Parses the line-based network spec format. Shapes are validated for
/// every net in the file.
pub fn parse_network_file(text: &str) -> Result<NetFile, NetError> {
    let mut attention = AttentionSpec::default();
    let mut nets: Vec<NetworkSpec> = Vec::new();

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut toks = content.split_whitespace();
        match toks.next().unwrap() {
            "attention" => {
                for tok in toks {
                    let (k, v) = parse_kv(tok, line)?;
                    match k {
                        "n" => attention.n = parse_num(v, line)?,
                        "sigma" => attention.sigma = parse_num(v, line)?,
                        "theta" => attention.theta = parse_num(v, line)?,
                        "s" => attention.s = Some(parse_num(v, line)?),
                        _ => {
                            return Err(NetError::Parse {
                                line,
                                msg: format!("unknown attention key `{k}`"),
                            })
                        }
                    }
                }
                if attention.n == 0 || attention.n % 2 != 0 {
                    return Err(NetError::Parse {
                        line,
                        msg: "attention n must be even and positive".into(),
                    });
                }
                if attention.sigma <= 0.0 || attention.theta <= 0.0 {
                    return Err(NetError::Parse {
                        line,
                        msg: "attention sigma/theta must be positive".into(),
                    });
                }
            }
            "net" => {
                let role = match toks.next() {
                    Some("roi") => NetRole::RoiPrediction,
                    Some("classifier") => NetRole::Classification,
                    other => {
                        return Err(NetError::Parse {
                            line,
                            msg: format!("expected roi|classifier, got {other:?}"),
                        })
                    }
                };
                let dims = toks.next().ok_or(NetError::Parse {
                    line,
                    msg: "expected WxH".into(),
                })?;
                let (w, h) = dims.split_once('x').ok_or(NetError::Parse {
                    line,
                    msg: format!("expected WxH, got `{dims}`"),
                })?;
                nets.push(NetworkSpec::new(
                    role,
                    parse_num(w, line)?,
                    parse_num(h, line)?,
                ));
            }
            "layer" => {
                let net = nets.last_mut().ok_or(NetError::Parse {
                    line,
                    msg: "layer before any net header".into(),
                })?;
                let kind = match toks.next() {
                    Some("conv") => LayerKind::Conv,
                    Some("maxpool") => LayerKind::MaxPool,
                    Some("batchnorm") => LayerKind::BatchNorm,
                    Some("relu_rnn") => LayerKind::ReluRnn,
                    Some("fully_connected") => LayerKind::FullyConnected,
                    Some("output") => LayerKind::Output,
                    other => {
                        return Err(NetError::Parse {
                            line,
                            msg: format!("unknown layer kind {other:?}"),
                        })
                    }
                };
                let mut spec = LayerSpec {
                    kind,
                    in_ch: 0,
                    out_ch: 0,
                    k: 0,
                    pad: 0,
                    stride: 0,
                    units: 0,
                };
                let mut stride_given = false;
                for tok in toks {
                    let (k, v) = parse_kv(tok, line)?;
                    match k {
                        "in" => spec.in_ch = parse_num(v, line)?,
                        "out" => spec.out_ch = parse_num(v, line)?,
                        "k" => spec.k = parse_num(v, line)?,
                        "pad" => spec.pad = parse_num(v, line)?,
                        "stride" => {
                            spec.stride = parse_num(v, line)?;
                            stride_given = true;
                        }
                        "units" => spec.units = parse_num(v, line)?,
                        _ => {
                            return Err(NetError::Parse {
                                line,
                                msg: format!("unknown layer key `{k}`"),
                            })
                        }
                    }
                }
                if !stride_given {
                    // Convs default to stride 1, pools to their kernel size.
                    spec.stride = match kind {
                        LayerKind::Conv => 1,
                        LayerKind::MaxPool => spec.k,
                        _ => 0,
                    };
                }
                net.layers.push(spec);
            }
            other => {
                return Err(NetError::Parse {
                    line,
                    msg: format!("unknown directive `{other}`"),
                })
            }
        }
    }

    for net in &nets {
        net.shapes()?;
    }
    Ok(NetFile { attention, nets })
}
