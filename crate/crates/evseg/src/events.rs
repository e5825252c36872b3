//! Event records, stream parsing, and temporal windowing.
//!
//! Event files are UTF-8 text with one `t,x,y,p` record per line (comma or
//! whitespace separated), `#` comment lines, and at most one header line.
//! Label files are parallel text files carrying one class per event line
//! (`0` background, `1` foreground) with an optional object id column.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};

/// A single brightness-change event.
///
/// Timestamps are integer microseconds so ordering and equality are exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    /// Timestamp in microseconds, non-negative.
    pub t: i64,
    /// Pixel column.
    pub x: u16,
    /// Pixel row.
    pub y: u16,
    /// Polarity, -1 or +1. Parsed and preserved, never used as a model feature.
    pub p: i8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorGeometry {
    pub width: u32,
    pub height: u32,
}

impl SensorGeometry {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "sensor geometry must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width && y < self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// A bounded slice of a stream: all events with `t` in `[t_start, t_end)`,
/// capped to the `n_max` most recent.
#[derive(Debug, Clone)]
pub struct EventWindow {
    pub events: Vec<Event>,
    pub t_start: i64,
    pub t_end: i64,
    pub n_max: usize,
}

impl EventWindow {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Per-event ground-truth or predicted class.
///
/// `object` is 0 for background and the 1-based object id for foreground
/// events when instance information is available.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EventLabel {
    pub foreground: bool,
    pub object: u16,
}

impl EventLabel {
    pub fn background() -> Self {
        EventLabel { foreground: false, object: 0 }
    }

    pub fn foreground(object: u16) -> Self {
        EventLabel { foreground: true, object }
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_event_line(fields: &[&str], line_no: usize, geometry: SensorGeometry) -> Result<Event> {
    if fields.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            msg: format!("expected 4 fields t,x,y,p, got {}", fields.len()),
        });
    }
    let t: i64 = fields[0].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad timestamp {:?}", fields[0]),
    })?;
    if t < 0 {
        return Err(Error::Parse { line: line_no, msg: format!("negative timestamp {t}") });
    }
    let x: u32 = fields[1].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad x coordinate {:?}", fields[1]),
    })?;
    let y: u32 = fields[2].parse().map_err(|_| Error::Parse {
        line: line_no,
        msg: format!("bad y coordinate {:?}", fields[2]),
    })?;
    if !geometry.contains(x, y) {
        return Err(Error::Bounds {
            line: line_no,
            x,
            y,
            width: geometry.width,
            height: geometry.height,
        });
    }
    // Polarity in files is 0/1 or -1/+1; {0,1} remaps to {-1,+1}.
    let p: i8 = match fields[3] {
        "0" => -1,
        "1" | "+1" => 1,
        "-1" => -1,
        other => {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("bad polarity {other:?}"),
            })
        }
    };
    Ok(Event { t, x: x as u16, y: y as u16, p })
}

/// Parse an event stream in file order.
///
/// `#` lines are skipped; one malformed leading line is tolerated as a
/// header. Any later malformed line is an error carrying its line number.
pub fn parse_events<R: BufRead>(reader: R, geometry: SensorGeometry) -> Result<Vec<Event>> {
    let mut events = Vec::new();
    let mut header_allowed = true;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        match parse_event_line(&fields, line_no, geometry) {
            Ok(ev) => {
                header_allowed = false;
                events.push(ev);
            }
            // Bounds failures are real records, never a header.
            Err(e @ Error::Bounds { .. }) => return Err(e),
            Err(e) => {
                if !header_allowed {
                    return Err(e);
                }
                // First data-bearing line failed to parse: treat as header.
                header_allowed = false;
            }
        }
    }
    Ok(events)
}

pub fn write_events<W: Write>(mut w: W, events: &[Event]) -> Result<()> {
    for ev in events {
        writeln!(w, "{},{},{},{}", ev.t, ev.x, ev.y, if ev.p > 0 { 1 } else { 0 })?;
    }
    Ok(())
}

/// Tile a sorted stream into consecutive non-overlapping windows of
/// `duration` microseconds anchored at t = 0.
///
/// A window holding more than `n_max` events keeps only the `n_max` most
/// recent ones. Interior empty windows are emitted with empty event lists.
pub fn slice_windows(events: &[Event], duration: i64, n_max: usize) -> Result<Vec<EventWindow>> {
    if duration <= 0 {
        return Err(Error::InvalidConfig(format!("window duration must be positive, got {duration}")));
    }
    if n_max == 0 {
        return Err(Error::InvalidConfig("n_max must be positive".into()));
    }
    for i in 1..events.len() {
        if events[i].t < events[i - 1].t {
            return Err(Error::Ordering { index: i });
        }
    }
    if events.is_empty() {
        return Ok(Vec::new());
    }
    let last_bucket = (events.last().unwrap().t / duration) as usize;
    let mut windows: Vec<EventWindow> = (0..=last_bucket)
        .map(|i| EventWindow {
            events: Vec::new(),
            t_start: i as i64 * duration,
            t_end: (i as i64 + 1) * duration,
            n_max,
        })
        .collect();
    for &ev in events {
        windows[(ev.t / duration) as usize].events.push(ev);
    }
    for w in &mut windows {
        if w.events.len() > n_max {
            // Most recent n_max events; input order already breaks timestamp ties.
            let drop = w.events.len() - n_max;
            w.events.drain(..drop);
        }
    }
    Ok(windows)
}

/// Parse a label file parallel to an event file: `class [object_id]` per line.
pub fn parse_labels<R: BufRead>(reader: R) -> Result<Vec<EventLabel>> {
    let mut labels = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields = split_fields(trimmed);
        if fields.is_empty() || fields.len() > 2 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected `class [object_id]`, got {trimmed:?}"),
            });
        }
        let class: u8 = fields[0].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad class {:?}", fields[0]),
        })?;
        if class > 1 {
            return Err(Error::Parse { line: line_no, msg: format!("class must be 0 or 1, got {class}") });
        }
        let object: u16 = if fields.len() == 2 {
            fields[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("bad object id {:?}", fields[1]),
            })?
        } else if class == 1 {
            1
        } else {
            0
        };
        if class == 1 && object == 0 {
            return Err(Error::Parse { line: line_no, msg: "foreground object id must be >= 1".into() });
        }
        labels.push(EventLabel { foreground: class == 1, object });
    }
    Ok(labels)
}

pub fn write_labels<W: Write>(mut w: W, labels: &[EventLabel]) -> Result<()> {
    let with_ids = labels.iter().any(|l| l.object > 1);
    for l in labels {
        if with_ids {
            writeln!(w, "{} {}", l.foreground as u8, l.object)?;
        } else {
            writeln!(w, "{}", l.foreground as u8)?;
        }
    }
    Ok(())
}
