//! Synthetic noisy-digit dataset generator.
//!
//! Each sample places one procedurally drawn digit glyph (seven-segment
//! style polylines rasterized to events, both polarities, jittered across
//! timebins) at a random location and scale on a large canvas, then adds
//! small crops of other digit glyphs as structured noise. Ground truth is
//! the digit label plus its bounding box.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{timebin, BinnedSample, Event, EventError, EventStreamHeader};

/// Base glyph box edge in pixels (digit strokes are drawn inside it).
pub const GLYPH_SIZE: u16 = 34;
const NOISE_CROP: u16 = 8;
const BIN_DURATION_US: u32 = 1000;

/// Inclusive integer pixel bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BBox {
    pub x_min: u16,
    pub y_min: u16,
    pub x_max: u16,
    pub y_max: u16,
}

impl BBox {
    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min as f64 + self.x_max as f64) / 2.0,
            (self.y_min as f64 + self.y_max as f64) / 2.0,
        )
    }

    pub fn contains(&self, x: u16, y: u16) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }
}

/// Generator configuration. Defaults match the shipped dataset recipe:
/// 128x128 canvas, digit scale drawn from [1, 2], 8 noise fragments,
/// 32 timebins.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub canvas_width: u16,
    pub canvas_height: u16,
    pub scale_min: f64,
    pub scale_max: f64,
    pub noise_fragments: usize,
    pub timebins: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            canvas_width: 128,
            canvas_height: 128,
            scale_min: 1.0,
            scale_max: 2.0,
            noise_fragments: 8,
            timebins: 32,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<(), EventError> {
        if self.timebins == 0 {
            return Err(EventError::ConfigInvalid("timebins must be >= 1".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(EventError::ConfigInvalid(
                "need 0 < scale_min <= scale_max".into(),
            ));
        }
        let max_extent = (GLYPH_SIZE as f64 * self.scale_max).ceil() as u16 + 2;
        if self.canvas_width < max_extent || self.canvas_height < max_extent {
            return Err(EventError::ConfigInvalid(format!(
                "canvas must be at least {max_extent} px for scale_max {}",
                self.scale_max
            )));
        }
        Ok(())
    }
}

// Seven-segment endpoints inside the 34x34 glyph box.
//   A top, B top-right, C bottom-right, D bottom, E bottom-left,
//   F top-left, G middle.
const SEGMENTS: [((f64, f64), (f64, f64)); 7] = [
    ((5.0, 4.0), (29.0, 4.0)),   // A
    ((29.0, 4.0), (29.0, 17.0)), // B
    ((29.0, 17.0), (29.0, 30.0)),// C
    ((5.0, 30.0), (29.0, 30.0)), // D
    ((5.0, 17.0), (5.0, 30.0)),  // E
    ((5.0, 4.0), (5.0, 17.0)),   // F
    ((5.0, 17.0), (29.0, 17.0)), // G
];

const DIGIT_SEGMENTS: [&[usize]; 10] = [
    &[0, 1, 2, 3, 4, 5],    // 0
    &[1, 2],                // 1
    &[0, 1, 6, 4, 3],       // 2
    &[0, 1, 6, 2, 3],       // 3
    &[5, 6, 1, 2],          // 4
    &[0, 5, 6, 2, 3],       // 5
    &[0, 5, 6, 4, 3, 2],    // 6
    &[0, 1, 2],             // 7
    &[0, 1, 2, 3, 4, 5, 6], // 8
    &[0, 1, 2, 3, 5, 6],    // 9
];

/// Rasterizes a digit glyph at unit scale: sorted, deduplicated stroke
/// pixels inside the 34x34 box with 2 px stroke thickness.
fn glyph_points(digit: u32) -> Vec<(u16, u16)> {
    scaled_glyph_points(digit, 1.0)
}

/// Rasterizes a digit glyph scaled by `scale` about the box origin.
fn scaled_glyph_points(digit: u32, scale: f64) -> Vec<(u16, u16)> {
    let mut set = BTreeSet::new();
    let thickness = scale.ceil() as i32;
    for &seg in DIGIT_SEGMENTS[digit as usize] {
        let ((x0, y0), (x1, y1)) = SEGMENTS[seg];
        let (x0, y0, x1, y1) = (x0 * scale, y0 * scale, x1 * scale, y1 * scale);
        let len = ((x1 - x0).powi(2) + (y1 - y0).powi(2)).sqrt();
        let steps = (len * 2.0).ceil() as usize + 1;
        let horizontal = (y1 - y0).abs() < (x1 - x0).abs();
        for s in 0..=steps {
            let f = s as f64 / steps as f64;
            let x = (x0 + (x1 - x0) * f).round() as i32;
            let y = (y0 + (y1 - y0) * f).round() as i32;
            for d in 0..thickness {
                // Thicken perpendicular to the stroke direction.
                let (px, py) = if horizontal { (x, y + d) } else { (x + d, y) };
                set.insert((px as u16, py as u16));
            }
        }
    }
    set.into_iter().collect()
}

struct Placed {
    points: Vec<(u16, u16)>, // absolute canvas coordinates
    bbox: BBox,
}

fn place_glyph(
    points: &[(u16, u16)],
    rng: &mut ChaCha20Rng,
    canvas_w: u16,
    canvas_h: u16,
) -> Placed {
    let x_min = points.iter().map(|p| p.0).min().unwrap();
    let x_max = points.iter().map(|p| p.0).max().unwrap();
    let y_min = points.iter().map(|p| p.1).min().unwrap();
    let y_max = points.iter().map(|p| p.1).max().unwrap();
    let (ext_x, ext_y) = (x_max - x_min, y_max - y_min);
    let tl_x = rng.random_range(0..=canvas_w - 1 - ext_x);
    let tl_y = rng.random_range(0..=canvas_h - 1 - ext_y);
    let abs: Vec<(u16, u16)> = points
        .iter()
        .map(|&(x, y)| (tl_x + (x - x_min), tl_y + (y - y_min)))
        .collect();
    Placed {
        points: abs,
        bbox: BBox {
            x_min: tl_x,
            y_min: tl_y,
            x_max: tl_x + ext_x,
            y_max: tl_y + ext_y,
        },
    }
}

/// Generates the raw event stream for one synthetic sample.
///
/// Deterministic in `(seed, config)`. Events are returned time-sorted with
/// a `(t, y, x, p)` tie-break. The digit's stroke events are jittered by
/// up to one pixel but clamped into the returned bounding box, so with
/// zero noise fragments every nonzero pixel lies inside it.
pub fn generate_synthetic_events(
    seed: u64,
    config: &SynthConfig,
) -> Result<(EventStreamHeader, Vec<Event>, u32, BBox), EventError> {
    config.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (cw, ch) = (config.canvas_width, config.canvas_height);

    let label = rng.random_range(0..10u32);
    let scale = rng.random_range(config.scale_min..=config.scale_max);
    let digit = place_glyph(&scaled_glyph_points(label, scale), &mut rng, cw, ch);

    let mut events = Vec::new();
    for bin in 0..config.timebins {
        let t0 = bin as u32 * BIN_DURATION_US;
        for &(x, y) in &digit.points {
            // 0, 1 or 2 events per stroke pixel per timebin.
            let n = match rng.random_range(0..4u8) {
                0 => 0,
                1 | 2 => 1,
                _ => 2,
            };
            for _ in 0..n {
                let dx = rng.random_range(-1i32..=1);
                let dy = rng.random_range(-1i32..=1);
                let ex = (x as i32 + dx)
                    .clamp(digit.bbox.x_min as i32, digit.bbox.x_max as i32)
                    as u16;
                let ey = (y as i32 + dy)
                    .clamp(digit.bbox.y_min as i32, digit.bbox.y_max as i32)
                    as u16;
                events.push(Event {
                    t: t0 + rng.random_range(0..BIN_DURATION_US),
                    x: ex,
                    y: ey,
                    p: rng.random_range(0..2u8),
                });
            }
        }
    }

    // Structured noise: crops of other digits scattered over the canvas.
    for _ in 0..config.noise_fragments {
        let other = (label + rng.random_range(1..10u32)) % 10;
        let glyph = glyph_points(other);
        let crop_x = rng.random_range(0..=GLYPH_SIZE - NOISE_CROP);
        let crop_y = rng.random_range(0..=GLYPH_SIZE - NOISE_CROP);
        let frag: Vec<(u16, u16)> = glyph
            .iter()
            .filter(|&&(x, y)| {
                x >= crop_x && x < crop_x + NOISE_CROP && y >= crop_y && y < crop_y + NOISE_CROP
            })
            .map(|&(x, y)| (x - crop_x, y - crop_y))
            .collect();
        let tl_x = rng.random_range(0..=cw - NOISE_CROP);
        let tl_y = rng.random_range(0..=ch - NOISE_CROP);
        for bin in 0..config.timebins {
            let t0 = bin as u32 * BIN_DURATION_US;
            for &(x, y) in &frag {
                if rng.random_range(0..2u8) == 1 {
                    events.push(Event {
                        t: t0 + rng.random_range(0..BIN_DURATION_US),
                        x: tl_x + x,
                        y: tl_y + y,
                        p: rng.random_range(0..2u8),
                    });
                }
            }
        }
    }

    events.sort_by_key(|e| (e.t, e.y, e.x, e.p));
    let header = EventStreamHeader::new(cw, ch, events.len() as u64);
    Ok((header, events, label, digit.bbox))
}

/// Generates one binned synthetic sample with its label and ground-truth
/// digit bounding box. Pure function of `(seed, config)`.
pub fn generate_synthetic_sample(
    seed: u64,
    config: &SynthConfig,
) -> Result<(BinnedSample, u32, BBox), EventError> {
    let (header, events, label, bbox) = generate_synthetic_events(seed, config)?;
    let mut sample = timebin(&events, &header, config.timebins)?;
    sample.label = Some(label);
    Ok((sample, label, bbox))
}
