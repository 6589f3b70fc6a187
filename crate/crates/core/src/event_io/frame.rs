use super::{EventError, EventStream};

/// A single-channel pseudo-image: each pixel holds the polarity of the last
/// event that hit it inside `[t_begin, t_end)`, or 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventFrame {
    width: u16,
    height: u16,
    values: Vec<i8>,
    t_begin: u64,
    t_end: u64,
}

impl EventFrame {
    pub fn zeros(width: u16, height: u16) -> Self {
        Self {
            width,
            height,
            values: vec![0; width as usize * height as usize],
            t_begin: 0,
            t_end: 0,
        }
    }

    /// Wraps raw values; every value must be -1, 0 or +1.
    pub fn from_values(width: u16, height: u16, values: Vec<i8>) -> Option<Self> {
        if values.len() != width as usize * height as usize
            || values.iter().any(|v| !(-1..=1).contains(v))
        {
            return None;
        }
        Some(Self {
            width,
            height,
            values,
            t_begin: 0,
            t_end: 0,
        })
    }

    pub fn width(&self) -> u16 {
        self.width
    }

    pub fn height(&self) -> u16 {
        self.height
    }

    /// Row-major pixel values.
    pub fn values(&self) -> &[i8] {
        &self.values
    }

    pub fn get(&self, x: u16, y: u16) -> i8 {
        self.values[y as usize * self.width as usize + x as usize]
    }

    /// First timestamp covered (inclusive).
    pub fn t_begin(&self) -> u64 {
        self.t_begin
    }

    /// End of the covered interval (exclusive).
    pub fn t_end(&self) -> u64 {
        self.t_end
    }

    pub fn nonzero_count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }
}

fn frame_over(stream: &EventStream, t_begin: u64, t_end: u64) -> EventFrame {
    let mut frame = EventFrame::zeros(stream.width(), stream.height());
    frame.t_begin = t_begin;
    frame.t_end = t_end;
    let events = stream.events();
    let lo = events.partition_point(|e| (e.t as u64) < t_begin);
    let hi = events.partition_point(|e| (e.t as u64) < t_end);
    let w = stream.width() as usize;
    for e in &events[lo..hi] {
        frame.values[e.y as usize * w + e.x as usize] = e.p.as_i8();
    }
    frame
}

/// Builds the frame for events with `window_start < t <= window_start + tau`.
///
/// The lower bound is strict: an event stamped exactly at `window_start`
/// belongs to the previous window. Later events overwrite earlier ones at
/// the same pixel; equal timestamps resolve in stream order.
pub fn build_event_frame(stream: &EventStream, window_start: u32, tau: u32) -> EventFrame {
    assert!(tau > 0, "window length must be positive");
    let begin = window_start as u64 + 1;
    frame_over(stream, begin, begin + tau as u64)
}

/// Consecutive frames over `[0, tau)`, `[tau, 2 tau)`, ... up to the last event.
///
/// Yields `ceil((t_max + 1) / tau)` frames, none for an empty stream.
pub fn window_iter(stream: &EventStream, tau: u32) -> WindowIter<'_> {
    assert!(tau > 0, "window length must be positive");
    let count = stream
        .t_max()
        .map(|t| (t as u64 + 1).div_ceil(tau as u64))
        .unwrap_or(0);
    WindowIter {
        stream,
        tau: tau as u64,
        next: 0,
        count,
    }
}

pub struct WindowIter<'a> {
    stream: &'a EventStream,
    tau: u64,
    next: u64,
    count: u64,
}

impl Iterator for WindowIter<'_> {
    type Item = EventFrame;

    fn next(&mut self) -> Option<EventFrame> {
        if self.next >= self.count {
            return None;
        }
        let begin = self.next * self.tau;
        self.next += 1;
        Some(frame_over(self.stream, begin, begin + self.tau))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.count - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for WindowIter<'_> {}

fn to_gray(v: i8) -> u8 {
    match v {
        -1 => 0,
        0 => 128,
        _ => 255,
    }
}

fn from_gray(g: u8) -> i8 {
    match g {
        0..=63 => -1,
        64..=191 => 0,
        _ => 1,
    }
}

/// Binary PGM (P5, maxval 255) with -1 -> 0, 0 -> 128, +1 -> 255.
pub fn write_pgm(frame: &EventFrame) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", frame.width, frame.height).into_bytes();
    out.extend(frame.values.iter().map(|&v| to_gray(v)));
    out
}

/// Reads a P5 image back into a frame, snapping gray levels to the nearest
/// of 0 / 128 / 255.
pub fn read_pgm(bytes: &[u8]) -> Result<EventFrame, EventError> {
    let bad = |m: &str| EventError::BadPgm(m.to_string());
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        // skip whitespace and comments
        while pos < bytes.len() {
            if bytes[pos].is_ascii_whitespace() {
                pos += 1;
            } else if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5"));
    }
    let width: u16 = fields[1].parse().map_err(|_| bad("width"))?;
    let height: u16 = fields[2].parse().map_err(|_| bad("height"))?;
    if fields[3] != "255" {
        return Err(bad("maxval must be 255"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let n = width as usize * height as usize;
    if bytes.len() < pos + n {
        return Err(bad("truncated raster"));
    }
    let values = bytes[pos..pos + n].iter().map(|&g| from_gray(g)).collect();
    Ok(EventFrame {
        width,
        height,
        values,
        t_begin: 0,
        t_end: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event_io::{Event, Polarity};

    fn stream(events: Vec<Event>) -> EventStream {
        EventStream::new(8, 4, events).unwrap()
    }

    #[test]
    fn single_event_inside_window() {
        let s = stream(vec![Event::new(5000, 2, 1, Polarity::Pos)]);
        let f = build_event_frame(&s, 0, 10_000);
        assert_eq!(f.get(2, 1), 1);
        assert_eq!(f.nonzero_count(), 1);
    }

    #[test]
    fn event_at_window_start_is_excluded() {
        let s = stream(vec![Event::new(5000, 2, 1, Polarity::Pos)]);
        let f = build_event_frame(&s, 5000, 10_000);
        assert_eq!(f.nonzero_count(), 0);
        // upper bound is inclusive
        let f = build_event_frame(&s, 0, 5000);
        assert_eq!(f.get(2, 1), 1);
    }

    #[test]
    fn latest_event_wins() {
        let s = stream(vec![
            Event::new(1000, 3, 2, Polarity::Pos),
            Event::new(2000, 3, 2, Polarity::Neg),
        ]);
        assert_eq!(build_event_frame(&s, 0, 10_000).get(3, 2), -1);
    }

    #[test]
    fn window_counts() {
        let s = stream(vec![
            Event::new(1000, 0, 0, Polarity::Pos),
            Event::new(15_000, 0, 0, Polarity::Pos),
        ]);
        let frames: Vec<_> = window_iter(&s, 10_000).collect();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[1].t_begin(), 10_000);
        assert_eq!(window_iter(&stream(vec![]), 10_000).count(), 0);
    }

    #[test]
    fn pgm_mapping() {
        let f = EventFrame::from_values(2, 1, vec![-1, 1]).unwrap();
        let bytes = write_pgm(&f);
        assert_eq!(&bytes[bytes.len() - 2..], &[0x00, 0xff]);
        let z = EventFrame::zeros(4, 4);
        let bytes = write_pgm(&z);
        assert_eq!(bytes.len() - 16, b"P5\n4 4\n255\n".len());
        assert!(bytes[bytes.len() - 16..].iter().all(|&b| b == 0x80));
    }

    #[test]
    fn pgm_rejects_garbage() {
        assert!(read_pgm(b"P6\n1 1\n255\n\0").is_err());
        assert!(read_pgm(b"P5\n2 2\n255\n\0").is_err());
    }
}
