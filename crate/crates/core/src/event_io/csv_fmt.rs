use std::fmt::Write as _;

use super::{Event, EventError, EventStream, Polarity, GEN1_HEIGHT, GEN1_WIDTH};

const HEADER: &str = "t_us,x,y,p";

/// Parses a `t_us,x,y,p` CSV event list.
///
/// An optional leading comment `# width=W height=H` sets the sensor
/// geometry; without it the GEN1 geometry (304x240) is assumed. Polarity
/// `0` and `-1` both decode as negative.
pub fn parse_event_csv(text: &str) -> Result<EventStream, EventError> {
    let mut width = GEN1_WIDTH;
    let mut height = GEN1_HEIGHT;
    let mut saw_header = false;
    let mut events = Vec::new();

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if !saw_header {
            if let Some(comment) = line.strip_prefix('#') {
                parse_geometry(comment, &mut width, &mut height)
                    .ok_or(EventError::MalformedRow(line_no))?;
                continue;
            }
            if line.replace(' ', "") != HEADER {
                return Err(EventError::MalformedRow(line_no));
            }
            saw_header = true;
            continue;
        }
        events.push(parse_row(line).ok_or(EventError::MalformedRow(line_no))?);
    }
    if !saw_header {
        return Err(EventError::MalformedRow(1));
    }
    EventStream::new(width, height, events)
}

fn parse_geometry(comment: &str, width: &mut u16, height: &mut u16) -> Option<()> {
    for tok in comment.split_whitespace() {
        let (key, value) = tok.split_once('=')?;
        match key {
            "width" => *width = value.parse().ok()?,
            "height" => *height = value.parse().ok()?,
            _ => {}
        }
    }
    Some(())
}

fn parse_row(line: &str) -> Option<Event> {
    let mut fields = line.split(',').map(str::trim);
    let t = fields.next()?.parse::<u32>().ok()?;
    let x = fields.next()?.parse::<u16>().ok()?;
    let y = fields.next()?.parse::<u16>().ok()?;
    let p = match fields.next()?.parse::<i8>().ok()? {
        1 => Polarity::Pos,
        0 | -1 => Polarity::Neg,
        _ => return None,
    };
    if fields.next().is_some() {
        return None;
    }
    Some(Event::new(t, x, y, p))
}

/// Writes the stream as CSV with a geometry comment, polarity as `1` / `-1`.
pub fn write_event_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(32 + stream.len() * 16);
    let _ = writeln!(out, "# width={} height={}", stream.width(), stream.height());
    out.push_str(HEADER);
    out.push('\n');
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.as_i8());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_and_zero_polarity() {
        let s = parse_event_csv("t_us,x,y,p\n5000,2,1,1\n").unwrap();
        assert_eq!(s.events(), &[Event::new(5000, 2, 1, Polarity::Pos)]);
        let s = parse_event_csv("t_us,x,y,p\n5000,2,1,0\n").unwrap();
        assert_eq!(s.events(), &[Event::new(5000, 2, 1, Polarity::Neg)]);
        let s = parse_event_csv("t_us,x,y,p\n5000,2,1,-1\n").unwrap();
        assert_eq!(s.events()[0].p, Polarity::Neg);
    }

    #[test]
    fn invalid_polarity_reports_line() {
        assert_eq!(
            parse_event_csv("t_us,x,y,p\n5000,2,1,7\n"),
            Err(EventError::MalformedRow(2))
        );
        assert_eq!(
            parse_event_csv("t_us,x,y,p\n1,2,3,1\nfoo\n"),
            Err(EventError::MalformedRow(3))
        );
    }

    #[test]
    fn missing_header_and_order_errors() {
        assert_eq!(
            parse_event_csv("1,2,3,1\n"),
            Err(EventError::MalformedRow(1))
        );
        assert!(matches!(
            parse_event_csv("t_us,x,y,p\n10,0,0,1\n5,0,0,1\n"),
            Err(EventError::NonMonotoneTimestamp { .. })
        ));
        assert!(matches!(
            parse_event_csv("# width=4 height=4\nt_us,x,y,p\n10,4,0,1\n"),
            Err(EventError::OutOfBounds { x: 4, y: 0 })
        ));
    }

    #[test]
    fn geometry_comment() {
        let s = parse_event_csv("# width=32 height=16\nt_us,x,y,p\n").unwrap();
        assert_eq!((s.width(), s.height()), (32, 16));
    }
}
