//! Binary event stream format.
//!
//! Layout (all little-endian):
//!   bytes 0..4   magic `EVT1`
//!   u16          width
//!   u16          height
//!   u64          count
//!   then `count` records of `{u32 t_us, u16 x, u16 y, u8 p, u8 pad = 0}`.

use super::{Event, EventError, EventStreamHeader};

pub const EVT1_MAGIC: &[u8; 4] = b"EVT1";
pub const RECORD_BYTES: usize = 10;
const HEADER_BYTES: usize = 4 + 2 + 2 + 8;

/// Parses a full event stream. The returned event order is file order.
pub fn read_event_stream(bytes: &[u8]) -> Result<(EventStreamHeader, Vec<Event>), EventError> {
    if bytes.len() < HEADER_BYTES || &bytes[0..4] != EVT1_MAGIC {
        return Err(EventError::BadMagic);
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    if width == 0 || height == 0 {
        return Err(EventError::BadMagic);
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header = EventStreamHeader::new(width, height, count);

    let expected = HEADER_BYTES as u64 + count * RECORD_BYTES as u64;
    if bytes.len() as u64 != expected {
        return Err(EventError::TruncatedFile);
    }

    let mut events = Vec::with_capacity(count as usize);
    for i in 0..count as usize {
        let off = HEADER_BYTES + i * RECORD_BYTES;
        let rec = &bytes[off..off + RECORD_BYTES];
        let ev = Event {
            t: u32::from_le_bytes(rec[0..4].try_into().unwrap()),
            x: u16::from_le_bytes([rec[4], rec[5]]),
            y: u16::from_le_bytes([rec[6], rec[7]]),
            p: rec[8],
        };
        if !header.contains(&ev) {
            return Err(EventError::OutOfBoundsEvent {
                index: i,
                x: ev.x,
                y: ev.y,
                p: ev.p,
            });
        }
        events.push(ev);
    }
    Ok((header, events))
}

/// Serializes a stream. The header count is taken from `events.len()`,
/// not from `header.count`.
pub fn write_event_stream(
    header: &EventStreamHeader,
    events: &[Event],
) -> Result<Vec<u8>, EventError> {
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
    let mut out = Vec::with_capacity(HEADER_BYTES + events.len() * RECORD_BYTES);
    out.extend_from_slice(EVT1_MAGIC);
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for ev in events {
        out.extend_from_slice(&ev.t.to_le_bytes());
        out.extend_from_slice(&ev.x.to_le_bytes());
        out.extend_from_slice(&ev.y.to_le_bytes());
        out.push(ev.p);
        out.push(0);
    }
    Ok(out)
}
