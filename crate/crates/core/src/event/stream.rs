use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    pub fn from_sign(p: i64) -> Option<Self> {
        match p {
            1 => Some(Polarity::Positive),
            -1 => Some(Polarity::Negative),
            _ => None,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Positive => 1,
            Polarity::Negative => -1,
        }
    }

    /// Frame channel holding counts of this polarity.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Positive => 0,
            Polarity::Negative => 1,
        }
    }
}

/// One asynchronous brightness change: pixel, microsecond timestamp, polarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventPoint {
    pub x: u32,
    pub y: u32,
    pub t: u64,
    pub p: Polarity,
}

/// Time-ordered events from one `width x height` sensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    events: Vec<EventPoint>,
    width: u32,
    height: u32,
}

impl EventStream {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    /// Validates bounds and timestamp order.
    pub fn new(events: Vec<EventPoint>, width: u32, height: u32) -> Result<Self> {
        let mut prev = 0;
        for (i, e) in events.iter().enumerate() {
            check_event(e, i + 1, prev, width, height)?;
            prev = e.t;
        }
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn events(&self) -> &[EventPoint] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    /// Text form: one `t,x,y,p` record per LF-terminated line.
    pub fn to_text(&self) -> String {
        let mut out = String::with_capacity(self.events.len() * 16);
        for e in &self.events {
            let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign());
        }
        out
    }
}

fn check_event(e: &EventPoint, line: usize, prev: u64, width: u32, height: u32) -> Result<()> {
    if e.x >= width || e.y >= height {
        return Err(Error::Bounds {
            line,
            x: e.x,
            y: e.y,
            width,
            height,
        });
    }
    if e.t < prev {
        return Err(Error::Ordering { line, t: e.t, prev });
    }
    Ok(())
}

/// Parses newline-delimited `t,x,y,p` records into an [`EventStream`].
///
/// Blank lines are skipped. Errors carry the 1-based line number.
pub fn parse_event_stream(bytes: &[u8], width: u32, height: u32) -> Result<EventStream> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("sensor width and height must be positive"));
    }
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Parse {
        line: 1 + bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count(),
        msg: "invalid UTF-8".into(),
    })?;

    let mut events = Vec::new();
    let mut prev = 0;
    for (i, raw) in text.split('\n').enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let e = parse_record(raw, line)?;
        check_event(&e, line, prev, width, height)?;
        prev = e.t;
        events.push(e);
    }
    Ok(EventStream {
        events,
        width,
        height,
    })
}

fn parse_record(raw: &str, line: usize) -> Result<EventPoint> {
    let err = |msg: String| Error::Parse { line, msg };
    let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 fields `t,x,y,p`, found {}", fields.len())));
    }
    let t = fields[0]
        .parse::<u64>()
        .map_err(|e| err(format!("timestamp `{}`: {e}", fields[0])))?;
    let x = fields[1]
        .parse::<u32>()
        .map_err(|e| err(format!("x `{}`: {e}", fields[1])))?;
    let y = fields[2]
        .parse::<u32>()
        .map_err(|e| err(format!("y `{}`: {e}", fields[2])))?;
    let p = fields[3]
        .parse::<i64>()
        .ok()
        .and_then(Polarity::from_sign)
        .ok_or_else(|| err(format!("polarity `{}` is not 1 or -1", fields[3])))?;
    Ok(EventPoint { x, y, t, p })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_records() {
        let s = parse_event_stream(b"0,0,0,1\n10,1,1,-1", 2, 2).unwrap();
        assert_eq!(s.len(), 2);
        let ts: Vec<u64> = s.events().iter().map(|e| e.t).collect();
        assert_eq!(ts, vec![0, 10]);
        assert_eq!(s.events()[1].p, Polarity::Negative);
    }

    #[test]
    fn empty_input_is_empty_stream() {
        let s = parse_event_stream(b"", 4, 4).unwrap();
        assert!(s.is_empty());
    }

    #[test]
    fn out_of_bounds_x() {
        let err = parse_event_stream(b"5,3,0,1", 2, 2).unwrap_err();
        assert!(matches!(err, Error::Bounds { line: 1, x: 3, .. }), "{err}");
    }

    #[test]
    fn decreasing_timestamp_is_ordering_error() {
        let err = parse_event_stream(b"10,0,0,1\n5,0,0,1\n", 2, 2).unwrap_err();
        assert!(matches!(err, Error::Ordering { line: 2, t: 5, prev: 10 }), "{err}");
    }

    #[test]
    fn malformed_lines_report_line_number() {
        for bad in ["0,0,0", "0,0,0,2", "a,0,0,1", "0,-1,0,1", "0,0,0,1,9"] {
            let text = format!("0,0,0,1\n{bad}\n");
            match parse_event_stream(text.as_bytes(), 2, 2) {
                Err(Error::Parse { line: 2, .. }) => {}
                other => panic!("{bad}: {other:?}"),
            }
        }
    }

    #[test]
    fn text_round_trip() {
        let s = parse_event_stream(b"0,0,0,1\n10,1,1,-1\n10,0,1,1\n", 2, 2).unwrap();
        let again = parse_event_stream(s.to_text().as_bytes(), 2, 2).unwrap();
        assert_eq!(s, again);
        assert_eq!(s.to_text(), "0,0,0,1\n10,1,1,-1\n10,0,1,1\n");
    }
}
