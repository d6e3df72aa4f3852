//! Timebinning and frame downsampling.

use super::{BinnedSample, Event, EventError, EventStreamHeader, TimebinFrame};

/// Accumulates events into `timebins` equal-duration intervals spanning
/// `[t_min, t_max]` of the stream (last interval closed on the right).
///
/// Each frame cell counts the events of one polarity at one pixel inside
/// one interval, so the sum over all frames equals the event count.
pub fn timebin(
    events: &[Event],
    header: &EventStreamHeader,
    timebins: usize,
) -> Result<BinnedSample, EventError> {
    if timebins == 0 {
        return Err(EventError::ConfigInvalid("timebins must be >= 1".into()));
    }
    if events.is_empty() {
        return Err(EventError::EmptyStream);
    }
    for (i, ev) in events.iter().enumerate() {
        if !header.contains(ev) {
            return Err(EventError::OutOfBoundsEvent {
                index: i,
                x: ev.x,
                y: ev.y,
                p: ev.p,
            });
        }
    }
    let t_min = events.iter().map(|e| e.t).min().unwrap();
    let t_max = events.iter().map(|e| e.t).max().unwrap();
    let span = (t_max - t_min) as u64;

    let mut frames =
        vec![TimebinFrame::zeros(header.width as usize, header.height as usize); timebins];
    for ev in events {
        let idx = if span == 0 {
            0
        } else {
            // Event t lands in interval i iff i <= (t - t_min) * T / span < i + 1;
            // t == t_max maps to T and is clamped into the last (closed) interval.
            (((ev.t - t_min) as u64 * timebins as u64) / span).min(timebins as u64 - 1) as usize
        };
        frames[idx].add(ev.p as usize, ev.y as usize, ev.x as usize, 1.0);
    }
    Ok(BinnedSample {
        frames,
        label: None,
    })
}

/// Max-pools a frame by `k` per polarity. Widths not divisible by `k` are
/// zero-padded on the right/bottom, so the output is `ceil(dim / k)` cells.
pub fn maxpool_downsample(frame: &TimebinFrame, k: usize) -> TimebinFrame {
    assert!(k >= 1, "pool kernel must be >= 1");
    let (w, h) = (frame.width(), frame.height());
    let ow = w.div_ceil(k);
    let oh = h.div_ceil(k);
    let mut out = TimebinFrame::zeros(ow, oh);
    for p in 0..2 {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = 0.0f32; // zero padding: max over block and implicit zeros
                for y in oy * k..((oy + 1) * k).min(h) {
                    for x in ox * k..((ox + 1) * k).min(w) {
                        m = m.max(frame.get(p, y, x));
                    }
                }
                out.set(p, oy, ox, m);
            }
        }
    }
    out
}
