use super::{Event, EventError, EventStream, Polarity};

pub const EVT8_MAGIC: &[u8; 4] = b"EVT8";
pub const EVT8_VERSION: u32 = 1;

const HEADER_LEN: usize = 12;
const RECORD_LEN: usize = 8;
const COORD_MASK: u32 = 0x3fff;
const POLARITY_BIT: u32 = 1 << 28;
const RESERVED_MASK: u32 = 0xe000_0000;

/// Decodes an EVT8 byte buffer.
///
/// Layout: `"EVT8"`, u32 version, u16 width, u16 height, then 8-byte
/// records of (u32 timestamp, u32 packed word). The packed word holds x in
/// bits 0..14, y in bits 14..28 and the polarity in bit 28.
pub fn parse_evt8(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.len() < 4 || &bytes[..4] != EVT8_MAGIC {
        return Err(EventError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(EventError::TruncatedRecord(bytes.len()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EVT8_VERSION {
        return Err(EventError::VersionUnsupported(version));
    }
    let width = u16::from_le_bytes([bytes[8], bytes[9]]);
    let height = u16::from_le_bytes([bytes[10], bytes[11]]);

    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(RECORD_LEN) {
        let offset = HEADER_LEN + payload.len() / RECORD_LEN * RECORD_LEN;
        return Err(EventError::TruncatedRecord(offset));
    }

    let mut events = Vec::with_capacity(payload.len() / RECORD_LEN);
    let mut prev = 0u32;
    for (index, rec) in payload.chunks_exact(RECORD_LEN).enumerate() {
        let t = u32::from_le_bytes(rec[0..4].try_into().unwrap());
        let word = u32::from_le_bytes(rec[4..8].try_into().unwrap());
        if word & RESERVED_MASK != 0 {
            return Err(EventError::ReservedBits(HEADER_LEN + index * RECORD_LEN));
        }
        let x = word & COORD_MASK;
        let y = (word >> 14) & COORD_MASK;
        if x >= width as u32 || y >= height as u32 {
            return Err(EventError::OutOfBounds { x, y });
        }
        if index > 0 && t < prev {
            return Err(EventError::NonMonotoneTimestamp { index, prev, t });
        }
        prev = t;
        let p = if word & POLARITY_BIT != 0 {
            Polarity::Pos
        } else {
            Polarity::Neg
        };
        events.push(Event::new(t, x as u16, y as u16, p));
    }
    Ok(EventStream {
        width,
        height,
        events,
    })
}

pub fn write_evt8(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + stream.len() * RECORD_LEN);
    out.extend_from_slice(EVT8_MAGIC);
    out.extend_from_slice(&EVT8_VERSION.to_le_bytes());
    out.extend_from_slice(&stream.width.to_le_bytes());
    out.extend_from_slice(&stream.height.to_le_bytes());
    for e in &stream.events {
        let mut word = (e.x as u32 & COORD_MASK) | ((e.y as u32 & COORD_MASK) << 14);
        if e.p == Polarity::Pos {
            word |= POLARITY_BIT;
        }
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&word.to_le_bytes());
    }
    out
}
