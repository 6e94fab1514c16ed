//! Point records, their text formats, and replayable sources.
//!
//! Two line-oriented formats are understood:
//!
//! * CSV in the T-Drive layout: `id,datetime,longitude,latitude`. The
//!   datetime is `YYYY-MM-DD HH:MM:SS[.fff]` (a `T` separator is also
//!   accepted) read as a naive timestamp, or an integer of epoch
//!   milliseconds.
//! * Newline-delimited GeoJSON, one `Feature` with `Point` geometry per
//!   line. The object id is read from `properties.oID` (falling back to
//!   `properties.id`) and the event time from `properties.timestamp`
//!   (falling back to `properties.time`); either may be a string or a
//!   number, and times follow the same rules as the CSV datetime column.
//!
//! Malformed records never stop a source; they are skipped and counted.

use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, NaiveDateTime};
use serde_json::Value;
use thiserror::Error;

use crate::grid::{CellKey, Grid, GridError};

const DATETIME_FORMATS: [&str; 2] = ["%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M:%S%.f"];
const CSV_DATETIME_OUT: &str = "%Y-%m-%d %H:%M:%S%.3f";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("expected 4 comma-separated fields, found {0}")]
    FieldCount(usize),
    #[error("empty object id")]
    EmptyId,
    #[error("invalid coordinate {0:?}")]
    BadCoordinate(String),
    #[error("invalid timestamp {0:?}")]
    BadTimestamp(String),
    #[error("timestamp {0} is before the epoch")]
    NegativeTimestamp(i64),
    #[error("invalid json: {0}")]
    Json(String),
    #[error("record is not a GeoJSON Point feature")]
    NotAPointFeature,
    #[error("missing property {0:?}")]
    MissingProperty(&'static str),
    #[error("record is not valid UTF-8")]
    NotUtf8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Format {
    Csv,
    GeoJson,
}

impl FromStr for Format {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(Format::Csv),
            "geojson" | "json" => Ok(Format::GeoJson),
            other => Err(format!("unknown format {other:?}, expected csv or geojson")),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::GeoJson => "geojson",
        })
    }
}

/// A parsed record before it is placed on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPoint {
    pub object_id: Arc<str>,
    pub x: f64,
    pub y: f64,
    /// Milliseconds since the epoch.
    pub event_time: i64,
}

impl RawPoint {
    pub fn new(object_id: impl Into<Arc<str>>, x: f64, y: f64, event_time: i64) -> Self {
        Self {
            object_id: object_id.into(),
            x,
            y,
            event_time,
        }
    }
}

/// A timestamped point with the key of the cell it falls in.
///
/// Cloning is cheap: the id is shared.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialPoint {
    pub object_id: Arc<str>,
    pub x: f64,
    pub y: f64,
    pub event_time: i64,
    pub cell: CellKey,
}

impl SpatialPoint {
    /// Total order used wherever results must be canonical: id, then time,
    /// then coordinates.
    pub fn canonical_cmp(&self, other: &SpatialPoint) -> std::cmp::Ordering {
        self.object_id
            .cmp(&other.object_id)
            .then(self.event_time.cmp(&other.event_time))
            .then(self.x.total_cmp(&other.x))
            .then(self.y.total_cmp(&other.y))
    }

    pub fn to_raw(&self) -> RawPoint {
        RawPoint {
            object_id: self.object_id.clone(),
            x: self.x,
            y: self.y,
            event_time: self.event_time,
        }
    }

    /// CSV line in the T-Drive layout (no trailing newline).
    pub fn to_csv_line(&self) -> String {
        format_csv_line(&self.object_id, self.event_time, self.x, self.y)
    }
}

pub(crate) fn format_csv_line(id: &str, event_time: i64, x: f64, y: f64) -> String {
    format!("{},{},{},{}", id, format_datetime(event_time), x, y)
}

/// Renders epoch milliseconds as a naive datetime with millisecond
/// precision; out-of-range values fall back to the integer form.
pub fn format_datetime(event_time: i64) -> String {
    match DateTime::from_timestamp_millis(event_time) {
        Some(dt) => dt.naive_utc().format(CSV_DATETIME_OUT).to_string(),
        None => event_time.to_string(),
    }
}

/// Parses a naive datetime or an integer of epoch milliseconds.
pub fn parse_timestamp(text: &str) -> Result<i64, ParseError> {
    let text = text.trim();
    let millis = if !text.is_empty()
        && text
            .strip_prefix('-')
            .unwrap_or(text)
            .bytes()
            .all(|b| b.is_ascii_digit())
    {
        text.parse::<i64>()
            .map_err(|_| ParseError::BadTimestamp(text.to_owned()))?
    } else {
        DATETIME_FORMATS
            .iter()
            .find_map(|fmt| NaiveDateTime::parse_from_str(text, fmt).ok())
            .map(|dt| dt.and_utc().timestamp_millis())
            .ok_or_else(|| ParseError::BadTimestamp(text.to_owned()))?
    };
    if millis < 0 {
        return Err(ParseError::NegativeTimestamp(millis));
    }
    Ok(millis)
}

fn parse_coordinate(text: &str) -> Result<f64, ParseError> {
    let text = text.trim();
    match text.parse::<f64>() {
        Ok(v) if v.is_finite() => Ok(v),
        _ => Err(ParseError::BadCoordinate(text.to_owned())),
    }
}

/// Parses one record; the result has no cell yet.
pub fn parse_point(record: &str, format: Format) -> Result<RawPoint, ParseError> {
    match format {
        Format::Csv => parse_csv(record),
        Format::GeoJson => parse_geojson(record),
    }
}

fn parse_csv(record: &str) -> Result<RawPoint, ParseError> {
    let record = record.trim_end_matches(['\r', '\n']);
    let fields: Vec<&str> = record.split(',').collect();
    if fields.len() != 4 {
        return Err(ParseError::FieldCount(fields.len()));
    }
    let id = fields[0].trim();
    if id.is_empty() {
        return Err(ParseError::EmptyId);
    }
    let event_time = parse_timestamp(fields[1])?;
    let x = parse_coordinate(fields[2])?;
    let y = parse_coordinate(fields[3])?;
    Ok(RawPoint::new(id, x, y, event_time))
}

fn property<'a>(props: &'a Value, names: &[&str]) -> Option<&'a Value> {
    names.iter().find_map(|n| props.get(*n)).filter(|v| !v.is_null())
}

fn parse_geojson(record: &str) -> Result<RawPoint, ParseError> {
    let value: Value =
        serde_json::from_str(record).map_err(|e| ParseError::Json(e.to_string()))?;
    if value.get("type").and_then(Value::as_str) != Some("Feature") {
        return Err(ParseError::NotAPointFeature);
    }
    let geometry = value.get("geometry").ok_or(ParseError::NotAPointFeature)?;
    if geometry.get("type").and_then(Value::as_str) != Some("Point") {
        return Err(ParseError::NotAPointFeature);
    }
    let coords = geometry
        .get("coordinates")
        .and_then(Value::as_array)
        .filter(|c| c.len() >= 2)
        .ok_or(ParseError::NotAPointFeature)?;
    let coord = |v: &Value| {
        v.as_f64()
            .filter(|f| f.is_finite())
            .ok_or_else(|| ParseError::BadCoordinate(v.to_string()))
    };
    let (x, y) = (coord(&coords[0])?, coord(&coords[1])?);

    let empty = Value::Null;
    let props = value.get("properties").unwrap_or(&empty);
    let id = match property(props, &["oID", "id"]) {
        Some(Value::String(s)) => s.trim().to_owned(),
        Some(Value::Number(n)) => n.to_string(),
        Some(_) => return Err(ParseError::EmptyId),
        None => return Err(ParseError::MissingProperty("oID")),
    };
    if id.is_empty() {
        return Err(ParseError::EmptyId);
    }
    let event_time = match property(props, &["timestamp", "time"]) {
        Some(Value::String(s)) => parse_timestamp(s)?,
        Some(Value::Number(n)) => match n.as_i64() {
            Some(v) if v >= 0 => v,
            Some(v) => return Err(ParseError::NegativeTimestamp(v)),
            None => return Err(ParseError::BadTimestamp(n.to_string())),
        },
        Some(other) => return Err(ParseError::BadTimestamp(other.to_string())),
        None => return Err(ParseError::MissingProperty("timestamp")),
    };
    Ok(RawPoint::new(id, x, y, event_time))
}

/// Places a parsed record on the grid.
pub fn assign_key(grid: &Grid, raw: RawPoint) -> Result<SpatialPoint, GridError> {
    let cell = grid.key_of(raw.x, raw.y)?;
    Ok(SpatialPoint {
        object_id: raw.object_id,
        x: raw.x,
        y: raw.y,
        event_time: raw.event_time,
        cell,
    })
}

/// Keys every record, dropping those outside the grid.
pub fn key_points(grid: &Grid, raws: impl IntoIterator<Item = RawPoint>) -> Vec<SpatialPoint> {
    raws.into_iter()
        .filter_map(|r| assign_key(grid, r).ok())
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SourceStats {
    /// Non-blank records read.
    pub records: u64,
    pub emitted: u64,
    pub outside_grid: u64,
    pub malformed: u64,
    pub io_errors: u64,
}

impl SourceStats {
    pub fn merge(&mut self, other: &SourceStats) {
        self.records += other.records;
        self.emitted += other.emitted;
        self.outside_grid += other.outside_grid;
        self.malformed += other.malformed;
        self.io_errors += other.io_errors;
    }
}

/// An ordered stream of keyed points.
pub trait PointSource: Iterator<Item = SpatialPoint> + Send {
    fn stats(&self) -> SourceStats;
}

/// Replays points held in memory.
#[derive(Debug)]
pub struct MemorySource {
    points: std::vec::IntoIter<SpatialPoint>,
    emitted: u64,
}

impl MemorySource {
    pub fn new(points: Vec<SpatialPoint>) -> Self {
        Self {
            points: points.into_iter(),
            emitted: 0,
        }
    }
}

impl Iterator for MemorySource {
    type Item = SpatialPoint;

    fn next(&mut self) -> Option<SpatialPoint> {
        let p = self.points.next()?;
        self.emitted += 1;
        Some(p)
    }
}

impl PointSource for MemorySource {
    fn stats(&self) -> SourceStats {
        SourceStats {
            records: self.emitted,
            emitted: self.emitted,
            ..SourceStats::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceKind {
    File(PathBuf),
    Stdin,
    /// Listen on the address and read lines from the first connection.
    Tcp(SocketAddr),
}

impl FromStr for SourceKind {
    type Err = String;

    /// Accepts `stdin`, `tcp:<port>`, `tcp:<host:port>`, `file:<path>`, or
    /// a bare path.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "stdin" || s == "-" {
            return Ok(SourceKind::Stdin);
        }
        if let Some(rest) = s.strip_prefix("tcp:") {
            let addr = if let Ok(port) = rest.parse::<u16>() {
                SocketAddr::from(([127, 0, 0, 1], port))
            } else {
                rest.parse::<SocketAddr>()
                    .map_err(|e| format!("invalid tcp address {rest:?}: {e}"))?
            };
            return Ok(SourceKind::Tcp(addr));
        }
        let path = s.strip_prefix("file:").unwrap_or(s);
        if path.is_empty() {
            return Err("empty source path".to_owned());
        }
        Ok(SourceKind::File(PathBuf::from(path)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceSpec {
    pub kind: SourceKind,
    pub format: Format,
    /// Event-time to wall-clock ratio; 0 replays as fast as possible.
    pub replay_speed: f64,
    /// How many times a file is replayed (at least once).
    pub loop_count: u32,
}

impl SourceSpec {
    pub fn file(path: impl Into<PathBuf>, format: Format) -> Self {
        Self {
            kind: SourceKind::File(path.into()),
            format,
            replay_speed: 0.0,
            loop_count: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("cannot open {path}: {source}")]
    Open { path: PathBuf, source: io::Error },
    #[error("cannot listen on {addr}: {source}")]
    Listen { addr: SocketAddr, source: io::Error },
    #[error("replay speed must be finite and non-negative, got {0}")]
    ReplaySpeed(f64),
    #[error("looping is only supported for file sources")]
    LoopUnsupported,
}

struct Pacer {
    speed: f64,
    anchor: Option<(i64, Instant)>,
}

impl Pacer {
    fn wait_for(&mut self, event_time: i64) {
        if self.speed <= 0.0 {
            return;
        }
        let (t0, start) = *self.anchor.get_or_insert((event_time, Instant::now()));
        let offset_ms = (event_time - t0).max(0) as f64 / self.speed;
        let due = start + Duration::from_secs_f64(offset_ms / 1000.0);
        let now = Instant::now();
        if due > now {
            std::thread::sleep(due - now);
        }
    }
}

/// Line-oriented source over a file, stdin, or a TCP connection.
pub struct LineSource {
    reader: Box<dyn BufRead + Send>,
    format: Format,
    grid: Grid,
    stats: SourceStats,
    pacer: Pacer,
    buf: Vec<u8>,
    done: bool,
    replay: Option<FileReplay>,
}

struct FileReplay {
    path: PathBuf,
    loops_left: u32,
    shift: i64,
    min_t: i64,
    max_t: i64,
}

impl LineSource {
    pub fn from_reader<R: BufRead + Send + 'static>(reader: R, format: Format, grid: Grid) -> Self {
        Self {
            reader: Box::new(reader),
            format,
            grid,
            stats: SourceStats::default(),
            pacer: Pacer {
                speed: 0.0,
                anchor: None,
            },
            buf: Vec::new(),
            done: false,
            replay: None,
        }
    }

    /// Accepts one connection and reads newline-delimited records from it.
    pub fn from_tcp_listener(
        listener: &TcpListener,
        format: Format,
        grid: Grid,
    ) -> io::Result<Self> {
        let (stream, peer) = listener.accept()?;
        log::info!("tcp source connected from {peer}");
        Ok(Self::from_reader(BufReader::new(stream), format, grid))
    }

    pub fn with_replay_speed(mut self, speed: f64) -> Self {
        self.pacer.speed = speed;
        self
    }

    fn open_file(path: &Path) -> Result<BufReader<File>, SourceError> {
        File::open(path)
            .map(BufReader::new)
            .map_err(|source| SourceError::Open {
                path: path.to_owned(),
                source,
            })
    }

    fn restart(&mut self) -> bool {
        let Some(replay) = self.replay.as_mut() else {
            return false;
        };
        if replay.loops_left == 0 || replay.min_t > replay.max_t {
            return false;
        }
        match File::open(&replay.path) {
            Ok(f) => {
                replay.loops_left -= 1;
                replay.shift += replay.max_t - replay.min_t + 1;
                self.reader = Box::new(BufReader::new(f));
                true
            }
            Err(e) => {
                log::warn!("cannot reopen {}: {e}", replay.path.display());
                self.stats.io_errors += 1;
                false
            }
        }
    }

    fn handle_line(&mut self) -> Option<SpatialPoint> {
        let line = match std::str::from_utf8(&self.buf) {
            Ok(s) => s.trim(),
            Err(_) => {
                self.stats.records += 1;
                self.stats.malformed += 1;
                return None;
            }
        };
        if line.is_empty() {
            return None;
        }
        self.stats.records += 1;
        let mut raw = match parse_point(line, self.format) {
            Ok(raw) => raw,
            Err(e) => {
                log::debug!("skipping malformed record: {e}");
                self.stats.malformed += 1;
                return None;
            }
        };
        if let Some(replay) = self.replay.as_mut() {
            if replay.shift == 0 {
                replay.min_t = replay.min_t.min(raw.event_time);
                replay.max_t = replay.max_t.max(raw.event_time);
            }
            raw.event_time += replay.shift;
        }
        match assign_key(&self.grid, raw) {
            Ok(point) => {
                self.stats.emitted += 1;
                Some(point)
            }
            Err(_) => {
                self.stats.outside_grid += 1;
                None
            }
        }
    }
}

impl Iterator for LineSource {
    type Item = SpatialPoint;

    fn next(&mut self) -> Option<SpatialPoint> {
        while !self.done {
            self.buf.clear();
            match self.reader.read_until(b'\n', &mut self.buf) {
                Ok(0) => {
                    if !self.restart() {
                        self.done = true;
                    }
                }
                Ok(_) => {
                    if let Some(point) = self.handle_line() {
                        self.pacer.wait_for(point.event_time);
                        return Some(point);
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => {
                    log::warn!("source read error, ending stream: {e}");
                    self.stats.io_errors += 1;
                    self.done = true;
                }
            }
        }
        None
    }
}

impl PointSource for LineSource {
    fn stats(&self) -> SourceStats {
        self.stats
    }
}

/// Opens a source; failure to open is fatal, later read errors end the
/// stream and are counted.
pub fn open_source(spec: &SourceSpec, grid: &Grid) -> Result<LineSource, SourceError> {
    if !(spec.replay_speed >= 0.0 && spec.replay_speed.is_finite()) {
        return Err(SourceError::ReplaySpeed(spec.replay_speed));
    }
    let loops = spec.loop_count.max(1);
    let source = match &spec.kind {
        SourceKind::File(path) => {
            let reader = LineSource::open_file(path)?;
            let mut source = LineSource::from_reader(reader, spec.format, grid.clone());
            source.replay = Some(FileReplay {
                path: path.clone(),
                loops_left: loops - 1,
                shift: 0,
                min_t: i64::MAX,
                max_t: i64::MIN,
            });
            source
        }
        SourceKind::Stdin | SourceKind::Tcp(_) if loops > 1 => {
            return Err(SourceError::LoopUnsupported)
        }
        SourceKind::Stdin => {
            LineSource::from_reader(BufReader::new(io::stdin()), spec.format, grid.clone())
        }
        SourceKind::Tcp(addr) => {
            let listener =
                TcpListener::bind(addr).map_err(|source| SourceError::Listen { addr: *addr, source })?;
            LineSource::from_tcp_listener(&listener, spec.format, grid.clone())
                .map_err(|source| SourceError::Listen { addr: *addr, source })?
        }
    };
    Ok(source.with_replay_speed(spec.replay_speed))
}
