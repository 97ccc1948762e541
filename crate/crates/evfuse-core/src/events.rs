//! Event stream model: parsing, windowing, and hot-pixel denoising.
//!
//! An event camera emits asynchronous `(x, y, t, p)` records. This module
//! owns the validated in-memory representation, the CSV interchange format,
//! half-open time windowing, and the rate-based hot-pixel filter that runs
//! before voxelization.

use std::collections::{BTreeSet, HashMap};

use crate::error::{Error, Result};

/// Sign of the brightness change that triggered an event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Polarity {
    Negative,
    Positive,
}

impl Polarity {
    /// Channel block index used by the voxel grid layout: negative = 0, positive = 1.
    pub fn block(self) -> usize {
        match self {
            Polarity::Negative => 0,
            Polarity::Positive => 1,
        }
    }

    pub fn sign(self) -> i8 {
        match self {
            Polarity::Negative => -1,
            Polarity::Positive => 1,
        }
    }
}

/// One asynchronous event record.
///
/// `t` is in microseconds. Coordinates are 0-based and must lie inside the
/// sensor geometry of the stream that owns the event.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub x: u16,
    pub y: u16,
    pub t: u64,
    pub polarity: Polarity,
}

/// A validated, time-ordered collection of events for one sensor.
///
/// Invariants enforced at construction: every event lies inside the sensor
/// bounds, and timestamps are non-decreasing (equal timestamps are allowed;
/// real DVS streams contain same-microsecond events).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    sensor_width: u16,
    sensor_height: u16,
    events: Vec<Event>,
}

/// Half-open time window `[t0, t0 + dt)` in microseconds.
///
/// The half-open convention prevents double-counting an event that falls on
/// the boundary of two adjacent windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeWindow {
    t0: u64,
    dt: u64,
}

impl TimeWindow {
    pub fn new(t0: u64, dt: u64) -> Result<Self> {
        if dt == 0 {
            return Err(Error::invalid("time window: dt must be positive"));
        }
        Ok(TimeWindow { t0, dt })
    }

    pub fn t0(&self) -> u64 {
        self.t0
    }

    pub fn dt(&self) -> u64 {
        self.dt
    }

    /// Exclusive upper bound `t0 + dt`.
    pub fn end(&self) -> u64 {
        self.t0 + self.dt
    }

    pub fn contains(&self, t: u64) -> bool {
        t >= self.t0 && t < self.end()
    }
}

impl EventStream {
    pub fn new(sensor_width: u16, sensor_height: u16, events: Vec<Event>) -> Result<Self> {
        if sensor_width == 0 || sensor_height == 0 {
            return Err(Error::invalid("sensor geometry must be non-zero"));
        }
        let mut prev_t = 0u64;
        for (i, e) in events.iter().enumerate() {
            if e.x >= sensor_width || e.y >= sensor_height {
                return Err(Error::invalid(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, sensor_width, sensor_height
                )));
            }
            if i > 0 && e.t < prev_t {
                return Err(Error::invalid(format!(
                    "event {i} timestamp {} precedes previous timestamp {prev_t}",
                    e.t
                )));
            }
            prev_t = e.t;
        }
        Ok(EventStream {
            sensor_width,
            sensor_height,
            events,
        })
    }

    pub fn sensor_width(&self) -> u16 {
        self.sensor_width
    }

    pub fn sensor_height(&self) -> u16 {
        self.sensor_height
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

    fn with_events(&self, events: Vec<Event>) -> EventStream {
        EventStream {
            sensor_width: self.sensor_width,
            sensor_height: self.sensor_height,
            events,
        }
    }
}

const CSV_HEADER_PREFIX: &str = "# evfuse-events v1 ";

/// Parse the event CSV format against a declared sensor geometry.
///
/// Format: first line `# evfuse-events v1 W=<int> H=<int>`, then one
/// `t_us,x,y,p` line per event with `p` in `{-1, 0, 1}` (0 is normalized to
/// -1, matching datasets that encode polarity as 0/1). ASCII with LF line
/// endings and no trailing whitespace. The header geometry must equal the
/// `geometry` argument.
pub fn parse_stream(bytes: &[u8], geometry: (u16, u16)) -> Result<EventStream> {
    let stream = parse_stream_any(bytes)?;
    if (stream.sensor_width, stream.sensor_height) != geometry {
        return Err(Error::parse_line(
            1,
            format!(
                "header geometry {}x{} does not match expected {}x{}",
                stream.sensor_width, stream.sensor_height, geometry.0, geometry.1
            ),
        ));
    }
    Ok(stream)
}

/// Parse the event CSV format, taking the sensor geometry from the header.
pub fn parse_stream_any(bytes: &[u8]) -> Result<EventStream> {
    let text = std::str::from_utf8(bytes)
        .map_err(|e| Error::parse_byte(e.valid_up_to(), "input is not valid UTF-8"))?;
    if let Some(pos) = text.bytes().position(|b| !b.is_ascii()) {
        return Err(Error::parse_byte(pos, "input must be ASCII"));
    }

    let segments: Vec<&str> = text.split('\n').collect();
    let header = segments[0];
    if header.is_empty() {
        return Err(Error::parse_line(1, "missing header line"));
    }
    let (width, height) = parse_header(header)?;

    let mut events = Vec::new();
    let mut prev_t: Option<u64> = None;
    for (i, line) in segments.iter().enumerate().skip(1) {
        let line_no = i + 1;
        if line.is_empty() {
            // A single empty final segment is the trailing LF; anything else
            // is an interior blank line.
            if line_no == segments.len() {
                continue;
            }
            return Err(Error::parse_line(line_no, "empty line"));
        }
        if *line != line.trim_end() {
            return Err(Error::parse_line(line_no, "trailing whitespace"));
        }
        let event = parse_event_line(line, line_no, width, height)?;
        if let Some(p) = prev_t {
            if event.t < p {
                return Err(Error::parse_line(
                    line_no,
                    format!("timestamp {} precedes previous timestamp {p}", event.t),
                ));
            }
        }
        prev_t = Some(event.t);
        events.push(event);
    }

    EventStream::new(width, height, events)
}

fn parse_header(header: &str) -> Result<(u16, u16)> {
    let rest = header
        .strip_prefix(CSV_HEADER_PREFIX)
        .ok_or_else(|| Error::parse_line(1, format!("bad header, expected `{CSV_HEADER_PREFIX}W=<int> H=<int>`")))?;
    let mut parts = rest.split(' ');
    let w = parts
        .next()
        .and_then(|p| p.strip_prefix("W="))
        .and_then(|v| v.parse::<u16>().ok())
        .ok_or_else(|| Error::parse_line(1, "bad header width field"))?;
    let h = parts
        .next()
        .and_then(|p| p.strip_prefix("H="))
        .and_then(|v| v.parse::<u16>().ok())
        .ok_or_else(|| Error::parse_line(1, "bad header height field"))?;
    if parts.next().is_some() {
        return Err(Error::parse_line(1, "unexpected extra header field"));
    }
    if w == 0 || h == 0 {
        return Err(Error::parse_line(1, "header geometry must be non-zero"));
    }
    Ok((w, h))
}

fn parse_event_line(line: &str, line_no: usize, width: u16, height: u16) -> Result<Event> {
    let mut fields = line.split(',');
    let mut next = |name: &str| {
        fields
            .next()
            .ok_or_else(|| Error::parse_line(line_no, format!("missing field `{name}`")))
    };
    let t: u64 = next("t_us")?
        .parse()
        .map_err(|_| Error::parse_line(line_no, "bad timestamp"))?;
    let x: u16 = next("x")?
        .parse()
        .map_err(|_| Error::parse_line(line_no, "bad x coordinate"))?;
    let y: u16 = next("y")?
        .parse()
        .map_err(|_| Error::parse_line(line_no, "bad y coordinate"))?;
    let p_raw: i8 = next("p")?
        .parse()
        .map_err(|_| Error::parse_line(line_no, "bad polarity"))?;
    if fields.next().is_some() {
        return Err(Error::parse_line(line_no, "too many fields"));
    }
    let polarity = match p_raw {
        1 => Polarity::Positive,
        // 0/1 encodings are normalized to -1/+1 at parse time.
        0 | -1 => Polarity::Negative,
        other => {
            return Err(Error::parse_line(
                line_no,
                format!("polarity {other} outside {{-1, 0, 1}}"),
            ))
        }
    };
    if x >= width || y >= height {
        return Err(Error::parse_line(
            line_no,
            format!("coordinate ({x}, {y}) outside {width}x{height} sensor"),
        ));
    }
    Ok(Event { x, y, t, polarity })
}

/// Serialize a stream to the event CSV format.
///
/// The writer always emits polarity as -1/1 and ends every line (including
/// the last) with a single LF, so `parse_stream . write_stream` is the
/// identity on valid streams at the byte level.
pub fn write_stream(stream: &EventStream) -> Vec<u8> {
    let mut out = String::new();
    out.push_str(CSV_HEADER_PREFIX);
    out.push_str(&format!(
        "W={} H={}\n",
        stream.sensor_width, stream.sensor_height
    ));
    for e in stream.events() {
        out.push_str(&format!("{},{},{},{}\n", e.t, e.x, e.y, e.polarity.sign()));
    }
    out.into_bytes()
}

/// Restrict a stream to the events with `t0 <= t < t0 + dt`, order preserved.
pub fn restrict(stream: &EventStream, window: &TimeWindow) -> EventStream {
    // Timestamps are sorted, so the window is a contiguous run.
    let events = stream.events();
    let start = events.partition_point(|e| e.t < window.t0());
    let end = events.partition_point(|e| e.t < window.end());
    stream.with_events(events[start..end].to_vec())
}

/// Remove every event at pixels whose in-window event rate exceeds `theta_hot`.
///
/// The rate for a pixel is (events at that pixel inside `window`) / (dt in
/// seconds). The comparison is strictly greater-than, so a pixel at exactly
/// the threshold rate is kept. Rates are compared as
/// `count * 1e6 > theta_hot * dt_us` to keep threshold ties exact.
/// Returns the filtered stream and the set of removed pixel coordinates.
pub fn hot_pixel_filter(
    stream: &EventStream,
    window: &TimeWindow,
    theta_hot: f64,
) -> Result<(EventStream, BTreeSet<(u16, u16)>)> {
    if !theta_hot.is_finite() || theta_hot <= 0.0 {
        return Err(Error::invalid("hot-pixel filter: theta_hot must be finite and positive"));
    }
    let mut counts: HashMap<(u16, u16), u64> = HashMap::new();
    for e in stream.events() {
        if window.contains(e.t) {
            *counts.entry((e.x, e.y)).or_insert(0) += 1;
        }
    }
    let hot: BTreeSet<(u16, u16)> = counts
        .into_iter()
        .filter(|&(_, count)| (count as f64) * 1e6 > theta_hot * (window.dt() as f64))
        .map(|(pixel, _)| pixel)
        .collect();
    let events = stream
        .events()
        .iter()
        .filter(|e| !hot.contains(&(e.x, e.y)))
        .copied()
        .collect();
    Ok((stream.with_events(events), hot))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(w: u16, h: u16, raw: &[(u64, u16, u16, i8)]) -> EventStream {
        let events = raw
            .iter()
            .map(|&(t, x, y, p)| Event {
                x,
                y,
                t,
                polarity: if p > 0 {
                    Polarity::Positive
                } else {
                    Polarity::Negative
                },
            })
            .collect();
        EventStream::new(w, h, events).unwrap()
    }

    #[test]
    fn parse_header_only() {
        let s = parse_stream(b"# evfuse-events v1 W=346 H=260\n", (346, 260)).unwrap();
        assert_eq!(s.len(), 0);
        assert_eq!(s.sensor_width(), 346);
        assert_eq!(s.sensor_height(), 260);
    }

    #[test]
    fn parse_single_event() {
        let s = parse_stream(b"# evfuse-events v1 W=346 H=260\n100,5,7,1\n", (346, 260)).unwrap();
        assert_eq!(
            s.events(),
            &[Event {
                x: 5,
                y: 7,
                t: 100,
                polarity: Polarity::Positive
            }]
        );
    }

    #[test]
    fn parse_normalizes_zero_polarity() {
        let s = parse_stream_any(b"# evfuse-events v1 W=10 H=10\n5,1,2,0\n").unwrap();
        assert_eq!(s.events()[0].polarity, Polarity::Negative);
    }

    #[test]
    fn parse_rejects_malformed_line_with_number() {
        let err = parse_stream_any(b"# evfuse-events v1 W=10 H=10\n1,2,3,1\nnonsense\n")
            .unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn parse_rejects_out_of_bounds() {
        let err = parse_stream_any(b"# evfuse-events v1 W=10 H=10\n1,10,3,1\n").unwrap_err();
        assert!(err.to_string().contains("outside"), "{err}");
    }

    #[test]
    fn parse_rejects_non_monotone() {
        let err =
            parse_stream_any(b"# evfuse-events v1 W=10 H=10\n5,1,1,1\n4,1,1,1\n").unwrap_err();
        assert!(err.to_string().contains("precedes"), "{err}");
    }

    #[test]
    fn parse_rejects_bad_polarity() {
        let err = parse_stream_any(b"# evfuse-events v1 W=10 H=10\n1,1,1,2\n").unwrap_err();
        assert!(err.to_string().contains("polarity"), "{err}");
    }

    #[test]
    fn parse_rejects_geometry_mismatch() {
        let err = parse_stream(b"# evfuse-events v1 W=10 H=10\n", (11, 10)).unwrap_err();
        assert!(err.to_string().contains("does not match"), "{err}");
    }

    #[test]
    fn parse_allows_equal_timestamps() {
        let s = parse_stream_any(b"# evfuse-events v1 W=10 H=10\n5,1,1,1\n5,2,2,-1\n").unwrap();
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn restrict_half_open_boundary() {
        let s = stream(10, 10, &[(10, 0, 0, 1), (20, 1, 1, 1), (30, 2, 2, 1)]);
        let w = TimeWindow::new(15, 10).unwrap();
        let r = restrict(&s, &w);
        assert_eq!(r.len(), 1);
        assert_eq!(r.events()[0].t, 20);
    }

    #[test]
    fn restrict_full_cover_is_identity() {
        let s = stream(10, 10, &[(10, 0, 0, 1), (20, 1, 1, -1), (30, 2, 2, 1)]);
        let w = TimeWindow::new(0, 100).unwrap();
        assert_eq!(restrict(&s, &w), s);
    }

    #[test]
    fn hot_pixel_threshold_is_strict() {
        // theta_hot = 500 Hz over a 30 ms window: 16 events = 533 Hz is
        // removed, 15 events = exactly 500 Hz is kept.
        let mut raw = Vec::new();
        for i in 0..16u64 {
            raw.push((i * 100, 3u16, 3u16, 1i8));
        }
        for i in 0..15u64 {
            raw.push((i * 100, 7, 7, 1));
        }
        raw.sort();
        let s = stream(10, 10, &raw);
        let w = TimeWindow::new(0, 30_000).unwrap();
        let (filtered, removed) = hot_pixel_filter(&s, &w, 500.0).unwrap();
        assert_eq!(removed.into_iter().collect::<Vec<_>>(), vec![(3, 3)]);
        assert_eq!(filtered.len(), 15);
        assert!(filtered.events().iter().all(|e| (e.x, e.y) == (7, 7)));
    }

    #[test]
    fn hot_pixel_noop_below_threshold() {
        let s = stream(10, 10, &[(0, 1, 1, 1), (1000, 2, 2, -1)]);
        let w = TimeWindow::new(0, 30_000).unwrap();
        let (filtered, removed) = hot_pixel_filter(&s, &w, 500.0).unwrap();
        assert!(removed.is_empty());
        assert_eq!(filtered, s);
    }

    #[test]
    fn hot_pixel_rejects_zero_threshold() {
        let s = stream(10, 10, &[]);
        let w = TimeWindow::new(0, 1000).unwrap();
        assert!(hot_pixel_filter(&s, &w, 0.0).is_err());
    }

    #[test]
    fn window_rejects_zero_dt() {
        assert!(TimeWindow::new(5, 0).is_err());
    }

    #[test]
    fn stream_rejects_out_of_bounds_event() {
        let e = Event {
            x: 10,
            y: 0,
            t: 0,
            polarity: Polarity::Positive,
        };
        assert!(EventStream::new(10, 10, vec![e]).is_err());
    }
}
