//! Event data model: raw sensor events, the binary stream format,
//! timebinning into dense count frames, and the synthetic noisy-digit
//! dataset generator.
//!
//! An event camera reports asynchronous per-pixel brightness changes as
//! `(t, x, y, p)` tuples. Downstream processing accumulates them into
//! per-timebin count frames with one channel per polarity.

mod bin;
mod stream;
mod synth;

pub use bin::{maxpool_downsample, timebin};
pub use stream::{read_event_stream, write_event_stream, EVT1_MAGIC, RECORD_BYTES};
pub use synth::{generate_synthetic_events, generate_synthetic_sample, BBox, SynthConfig};

use std::fmt;

/// A single sensor event.
///
/// `t` is a microsecond timestamp, non-decreasing within a stream.
/// Polarity is 0 (off) or 1 (on).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub p: u8,
}

/// Stream geometry and event count, as stored in the file header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventStreamHeader {
    pub width: u16,
    pub height: u16,
    pub count: u64,
}

impl EventStreamHeader {
    pub fn new(width: u16, height: u16, count: u64) -> Self {
        Self {
            width,
            height,
            count,
        }
    }

    /// True when `(x, y, p)` lies inside this geometry with a valid polarity.
    pub fn contains(&self, ev: &Event) -> bool {
        ev.x < self.width && ev.y < self.height && ev.p <= 1
    }
}

/// Dense per-timebin event counts, shape `2 x height x width`
/// (polarity-major, row-major within a polarity).
#[derive(Debug, Clone, PartialEq)]
pub struct TimebinFrame {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl TimebinFrame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 2 * width * height, "frame data length mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, p: usize, y: usize, x: usize) -> f32 {
        self.data[(p * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn add(&mut self, p: usize, y: usize, x: usize, v: f32) {
        self.data[(p * self.height + y) * self.width + x] += v;
    }

    #[inline]
    pub fn set(&mut self, p: usize, y: usize, x: usize, v: f32) {
        self.data[(p * self.height + y) * self.width + x] = v;
    }

    /// Raw buffer, polarity-major.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Total event count summed over both polarities.
    pub fn total(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    /// Number of nonzero cells across both polarities.
    pub fn nonzero_count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }
}

/// An ordered run of timebin frames with an optional class label.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedSample {
    pub frames: Vec<TimebinFrame>,
    pub label: Option<u32>,
}

impl BinnedSample {
    pub fn timebins(&self) -> usize {
        self.frames.len()
    }
}

/// Errors from event stream IO, binning, and dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub enum EventError {
    /// Missing or malformed magic/header.
    BadMagic,
    /// File length does not match the header's record count.
    TruncatedFile,
    /// Event coordinates outside the header geometry (or polarity > 1).
    OutOfBoundsEvent { index: usize, x: u16, y: u16, p: u8 },
    /// An operation that needs at least one event received none.
    EmptyStream,
    /// Invalid generator or binning configuration.
    ConfigInvalid(String),
}

impl fmt::Display for EventError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadMagic => write!(f, "bad magic or malformed header"),
            Self::TruncatedFile => write!(f, "file length does not match header count"),
            Self::OutOfBoundsEvent { index, x, y, p } => {
                write!(f, "event {index} out of bounds: x={x} y={y} p={p}")
            }
            Self::EmptyStream => write!(f, "event stream is empty"),
            Self::ConfigInvalid(msg) => write!(f, "invalid config: {msg}"),
        }
    }
}

impl std::error::Error for EventError {}
