//! Event streams from dynamic vision sensors and the event-frame
//! pseudo-images built from them.
//!
//! Streams are read from the little-endian EVT8 container or from a
//! `t_us,x,y,p` CSV file. Frames hold the polarity of the most recent event
//! per pixel inside a time window, so every value is one of `-1`, `0`, `+1`.

mod csv_fmt;
mod evt8;
mod frame;
mod synth;

pub use csv_fmt::{parse_event_csv, write_event_csv};
pub use evt8::{parse_evt8, write_evt8, EVT8_MAGIC, EVT8_VERSION};
pub use frame::{build_event_frame, read_pgm, window_iter, write_pgm, EventFrame};
pub use synth::{gen_synthetic_bar, Direction, SynthConfig};

use thiserror::Error;

/// Width of the GEN1 automotive sensor.
pub const GEN1_WIDTH: u16 = 304;
/// Height of the GEN1 automotive sensor.
pub const GEN1_HEIGHT: u16 = 240;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EventError {
    #[error("bad magic: expected EVT8 header")]
    BadMagic,
    #[error("unsupported EVT8 version {0}")]
    VersionUnsupported(u32),
    #[error("truncated record at byte offset {0}")]
    TruncatedRecord(usize),
    #[error("event at ({x}, {y}) outside sensor bounds")]
    OutOfBounds { x: u32, y: u32 },
    #[error("timestamp {t} precedes previous timestamp {prev} (event index {index})")]
    NonMonotoneTimestamp { index: usize, prev: u32, t: u32 },
    #[error("reserved bits set in record at byte offset {0}")]
    ReservedBits(usize),
    #[error("malformed row at line {0}")]
    MalformedRow(usize),
    #[error("bad direction {0}, expected 0..=7")]
    BadDirection(u8),
    #[error("malformed PGM: {0}")]
    BadPgm(String),
}

/// Event polarity. Negative covers both the `-1` and the `0` conventions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Polarity {
    Neg,
    Pos,
}

impl Polarity {
    pub fn as_i8(self) -> i8 {
        match self {
            Polarity::Neg => -1,
            Polarity::Pos => 1,
        }
    }
}

/// A single sensor event: timestamp in microseconds, pixel column/row, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Event {
    pub t: u32,
    pub x: u16,
    pub y: u16,
    pub p: Polarity,
}

impl Event {
    pub fn new(t: u32, x: u16, y: u16, p: Polarity) -> Self {
        Self { t, x, y, p }
    }
}

/// Time-ordered events from one sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    width: u16,
    height: u16,
    events: Vec<Event>,
}

impl EventStream {
    pub fn empty(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            events: Vec::new(),
        }
    }

    /// Builds a stream, checking bounds and timestamp order.
    pub fn new(width: u16, height: u16, events: Vec<Event>) -> Result<Self, EventError> {
        let mut prev = 0u32;
        for (index, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(EventError::OutOfBounds {
                    x: e.x as u32,
                    y: e.y as u32,
                });
            }
            if index > 0 && e.t < prev {
                return Err(EventError::NonMonotoneTimestamp {
                    index,
                    prev,
                    t: e.t,
                });
            }
            prev = e.t;
        }
        Ok(Self {
            width,
            height,
            events,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Timestamp of the last event, if any.
    pub fn t_max(&self) -> Option<u32> {
        self.events.last().map(|e| e.t)
    }

    pub fn into_events(self) -> Vec<Event> {
        self.events
    }
}

/// Parses either container, sniffing the EVT8 magic and falling back to CSV.
pub fn parse_events_auto(bytes: &[u8]) -> Result<EventStream, EventError> {
    if bytes.starts_with(EVT8_MAGIC) {
        parse_evt8(bytes)
    } else {
        let text = std::str::from_utf8(bytes).map_err(|_| EventError::BadMagic)?;
        let head = text.trim_start();
        if !(head.starts_with("t_us") || head.starts_with('#')) {
            return Err(EventError::BadMagic);
        }
        parse_event_csv(text)
    }
}
