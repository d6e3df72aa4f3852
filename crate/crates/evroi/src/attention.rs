//! Attention geometry: ROI parameter decoding, truncated-Gaussian-kernel
//! (tGK) ROI generation, and dynamic average pooling (DAP).
//!
//! The ROI prediction network emits three unconstrained scalars. Decoding
//! maps them to a receptive-field center `(g_x, g_y)` and an inter-kernel
//! distance `delta`:
//!
//! ```text
//! g_x   = A/2 * (tanh(g_x_hat) + 1)
//! g_y   = B/2 * (tanh(g_y_hat) + 1)
//! delta = S   * (sigmoid(delta_hat) + 1)
//! ```
//!
//! An `N x N` grid of Gaussian kernels is centered on `(g_x, g_y)` with
//! spacing `delta`. Each kernel weight row is truncated to a window of
//! `theta` pixels around its mean, which drops the per-cell crop cost from
//! `O(A*B)` to `O(theta^2)`. For inference the overlapping kernels are
//! replaced by non-overlapping dynamic average pooling over the same
//! receptive field, which assigns every pixel to exactly one output cell
//! in closed form.

use std::fmt;

use crate::event::TimebinFrame;

/// Raw scalar outputs of the ROI prediction network, before decoding.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawRoiOutput {
    pub g_x_hat: f64,
    pub g_y_hat: f64,
    pub delta_hat: f64,
}

/// Geometry for decoding raw ROI outputs: image width `A`, height `B`,
/// and the distance scaling factor `S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeConfig {
    pub width: f64,
    pub height: f64,
    pub distance_scale: f64,
}

impl DecodeConfig {
    pub fn new(width: usize, height: usize, distance_scale: f64) -> Self {
        Self {
            width: width as f64,
            height: height as f64,
            distance_scale,
        }
    }

    /// Default distance scale: one eighth of the image width.
    pub fn with_default_scale(width: usize, height: usize) -> Self {
        Self::new(width, height, width as f64 / 8.0)
    }
}

/// Decoded ROI parameters in pixel coordinates.
///
/// Decoding forces `0 <= g_x <= A`, `0 <= g_y <= B`, `S <= delta <= 2S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiParams {
    pub g_x: f64,
    pub g_y: f64,
    pub delta: f64,
}

/// Kernel grid shape: `n` kernels per axis (even), Gaussian variance
/// `sigma`, and truncation width `theta` in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelGridConfig {
    pub n: usize,
    pub sigma: f64,
    pub theta: f64,
}

impl Default for KernelGridConfig {
    fn default() -> Self {
        Self {
            n: 12,
            sigma: 2.0,
            theta: 6.0,
        }
    }
}

/// Kernel center coordinates, `n` per axis, spaced `delta` apart and
/// symmetric about `(g_x, g_y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGrid {
    pub mu_x: Vec<f64>,
    pub mu_y: Vec<f64>,
}

/// One truncated Gaussian weight row: weights for consecutive pixels
/// starting at `start`. Empty when the window falls outside the image.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussRow {
    pub start: usize,
    pub weights: Vec<f64>,
}

impl GaussRow {
    pub fn support_len(&self) -> usize {
        self.weights.len()
    }

    /// Weight at absolute pixel index `i` (zero outside the window).
    pub fn at(&self, i: usize) -> f64 {
        if i >= self.start && i < self.start + self.weights.len() {
            self.weights[i - self.start]
        } else {
            0.0
        }
    }
}

/// Truncated Gaussian weight rows for both axes; row `i` of `rows_x`
/// covers pixel columns, row `j` of `rows_y` pixel rows.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeights {
    pub rows_x: Vec<GaussRow>,
    pub rows_y: Vec<GaussRow>,
    pub width: usize,
    pub height: usize,
}

/// Fixed-resolution ROI crop, shape `2 x n x n` (polarity, row, column).
#[derive(Debug, Clone, PartialEq)]
pub struct RoiFrame {
    n: usize,
    data: Vec<f64>,
}

impl RoiFrame {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![0.0; 2 * n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, p: usize, row: usize, col: usize) -> f64 {
        self.data[(p * self.n + row) * self.n + col]
    }

    #[inline]
    pub fn set(&mut self, p: usize, row: usize, col: usize, v: f64) {
        self.data[(p * self.n + row) * self.n + col] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// Receptive-field bounds and the derived average-pooling cell edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DapRegion {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub k_dap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionError {
    /// Average pooling cell edge is not positive.
    DegenerateRegion { k_dap: f64 },
}

impl fmt::Display for AttentionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::DegenerateRegion { k_dap } => {
                write!(f, "degenerate pooling region: k_dap = {k_dap}")
            }
        }
    }
}

impl std::error::Error for AttentionError {}

// ============================================================================
// Decoding and kernel geometry
// ============================================================================

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Decodes raw network outputs into ROI parameters. Total function: the
/// tanh/sigmoid squashing keeps the results inside their valid ranges for
/// any finite input.
pub fn decode_roi(raw: &RawRoiOutput, cfg: &DecodeConfig) -> RoiParams {
    RoiParams {
        g_x: cfg.width / 2.0 * (raw.g_x_hat.tanh() + 1.0),
        g_y: cfg.height / 2.0 * (raw.g_y_hat.tanh() + 1.0),
        delta: cfg.distance_scale * (sigmoid(raw.delta_hat) + 1.0),
    }
}

/// Offset of kernel `i` from the receptive-field center, in units of
/// `delta`: `i - (n - 1) / 2`.
#[inline]
pub fn center_offset(i: usize, n: usize) -> f64 {
    i as f64 - (n as f64 - 1.0) / 2.0
}

/// Kernel center positions `mu[i] = g + (i - (n-1)/2) * delta` on both
/// axes. The grid is symmetric about `(g_x, g_y)` and consecutive centers
/// differ by exactly `delta`.
pub fn kernel_centers(roi: &RoiParams, cfg: &KernelGridConfig) -> KernelGrid {
    let mu = |g: f64| -> Vec<f64> {
        (0..cfg.n)
            .map(|i| g + center_offset(i, cfg.n) * roi.delta)
            .collect()
    };
    KernelGrid {
        mu_x: mu(roi.g_x),
        mu_y: mu(roi.g_y),
    }
}

/// One truncated Gaussian row: weights `exp(-(i - mu)^2 / (2 sigma))` for
/// integer pixels `i` in `[ceil(mu - theta/2), floor(mu + theta/2)]`
/// clipped to `[0, len - 1]`, zero elsewhere. The window holds at most
/// `theta + 1` pixels.
pub fn gauss_row(mu: f64, sigma: f64, theta: f64, len: usize) -> GaussRow {
    let lo = ((mu - theta / 2.0).ceil() as i64).max(0);
    let hi = ((mu + theta / 2.0).floor() as i64).min(len as i64 - 1);
    if lo > hi {
        return GaussRow {
            start: 0,
            weights: Vec::new(),
        };
    }
    let weights = (lo..=hi)
        .map(|i| (-(i as f64 - mu).powi(2) / (2.0 * sigma)).exp())
        .collect();
    GaussRow {
        start: lo as usize,
        weights,
    }
}

/// Truncated Gaussian weight rows for every kernel on both axes.
pub fn kernel_weights(
    grid: &KernelGrid,
    cfg: &KernelGridConfig,
    width: usize,
    height: usize,
) -> KernelWeights {
    KernelWeights {
        rows_x: grid
            .mu_x
            .iter()
            .map(|&mu| gauss_row(mu, cfg.sigma, cfg.theta, width))
            .collect(),
        rows_y: grid
            .mu_y
            .iter()
            .map(|&mu| gauss_row(mu, cfg.sigma, cfg.theta, height))
            .collect(),
        width,
        height,
    }
}

// ============================================================================
// ROI generation
// ============================================================================

/// Truncated-Gaussian ROI crop:
/// `v[p][j][i] = sum_m sum_n Fy[j][m] * I[p][m][n] * Fx[i][n]`
/// iterating only each kernel pair's truncation support.
pub fn crop_tgk(frame: &TimebinFrame, weights: &KernelWeights) -> RoiFrame {
    crop_tgk_counted(frame, weights).0
}

/// [`crop_tgk`] with an effective multiply-accumulate counter: one unit
/// per visited support pair with a nonzero input pixel. For an all-nonzero
/// frame this is exactly `2 * sum_ij |supp_x(i)| * |supp_y(j)|`, bounded
/// by `2 * n^2 * (theta + 1)^2` over both polarities.
///
/// Accumulation order per output cell is row-major over the support
/// (`m` outer, `n` inner), accumulating `(Fy[m] * I) * Fx[n]`.
pub fn crop_tgk_counted(frame: &TimebinFrame, weights: &KernelWeights) -> (RoiFrame, u64) {
    let n_grid = weights.rows_x.len();
    debug_assert_eq!(weights.rows_y.len(), n_grid);
    debug_assert_eq!(frame.width(), weights.width);
    debug_assert_eq!(frame.height(), weights.height);
    let mut out = RoiFrame::zeros(n_grid);
    let mut macs = 0u64;
    for p in 0..2 {
        for (j, fy) in weights.rows_y.iter().enumerate() {
            for (i, fx) in weights.rows_x.iter().enumerate() {
                let mut acc = 0.0f64;
                for (mi, &wy) in fy.weights.iter().enumerate() {
                    let m = fy.start + mi;
                    for (ni, &wx) in fx.weights.iter().enumerate() {
                        let n = fx.start + ni;
                        let val = frame.get(p, m, n);
                        if val != 0.0 {
                            acc += (wy * val as f64) * wx;
                            macs += 1;
                        }
                    }
                }
                out.set(p, j, i, acc);
            }
        }
    }
    (out, macs)
}

/// Receptive-field bounds of the kernel grid:
/// `x_max = g_x + ((n-1)/2) * delta + theta/2` and symmetrically for
/// `x_min`, so the region width is exactly `(n-1) * delta + theta`; the
/// pooling cell edge is `k_dap = width / n`. The y axis is analogous and
/// the region is square.
pub fn dap_region(roi: &RoiParams, cfg: &KernelGridConfig) -> DapRegion {
    let half = (cfg.n as f64 - 1.0) / 2.0 * roi.delta + cfg.theta / 2.0;
    let x_min = roi.g_x - half;
    let x_max = roi.g_x + half;
    DapRegion {
        x_min,
        x_max,
        y_min: roi.g_y - half,
        y_max: roi.g_y + half,
        k_dap: (x_max - x_min) / cfg.n as f64,
    }
}

/// Dynamic average pooling: pixel `(x, y)` belongs to cell
/// `(floor((x - x_min) / k_dap), floor((y - y_min) / k_dap))` when that
/// index lands in `[0, n)`; pixels outside the region are ignored. Each
/// cell averages its in-bounds integer pixels, so a frame constant over
/// the region pools to that constant even at image borders.
pub fn crop_dap(
    frame: &TimebinFrame,
    region: &DapRegion,
    n: usize,
) -> Result<RoiFrame, AttentionError> {
    if !(region.k_dap > 0.0) {
        return Err(AttentionError::DegenerateRegion {
            k_dap: region.k_dap,
        });
    }
    let cells = n * n;
    let mut sums = vec![0.0f64; 2 * cells];
    let mut counts = vec![0u32; cells];

    let x_lo = (region.x_min.ceil() as i64).max(0);
    let x_hi = (region.x_max.floor() as i64).min(frame.width() as i64 - 1);
    let y_lo = (region.y_min.ceil() as i64).max(0);
    let y_hi = (region.y_max.floor() as i64).min(frame.height() as i64 - 1);

    for y in y_lo..=y_hi {
        let j = ((y as f64 - region.y_min) / region.k_dap).floor();
        if j < 0.0 || j >= n as f64 {
            continue;
        }
        for x in x_lo..=x_hi {
            let i = ((x as f64 - region.x_min) / region.k_dap).floor();
            if i < 0.0 || i >= n as f64 {
                continue;
            }
            let cell = j as usize * n + i as usize;
            counts[cell] += 1;
            for p in 0..2 {
                sums[p * cells + cell] += frame.get(p, y as usize, x as usize) as f64;
            }
        }
    }

    let mut out = RoiFrame::zeros(n);
    for p in 0..2 {
        for cell in 0..cells {
            if counts[cell] > 0 {
                let v = sums[p * cells + cell] / counts[cell] as f64;
                out.set(p, cell / n, cell % n, v);
            }
        }
    }
    Ok(out)
}
