//! Frame ingestion and tumbling windows.
//!
//! JSONL records, one frame per line:
//!
//! ```text
//! {"t": 0.033, "joints": [{"id": 1, "p": [0.1, 1.4, 2.0], "c": 0.9}, ...]}
//! {"t": 0.040, "a0": -137.5, "da": 0.385, "ranges": [4.001, null, 3.998, ...]}
//! {"t": 1.000, "channels": {"pressure": 101.3}}
//! ```
//!
//! CSV is accepted for scan streams only, in wide form with the header
//! `t,a0,da,r0,r1,...`; an empty cell marks an invalid beam.
//!
//! A malformed record is skipped and counted. Header or scan-geometry
//! disagreement is fatal.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::frame::{
    GenericFrame, JointId, JointObservation, MeasurementFrame, Payload, PayloadKind, ScanFrame, ScanGeometry,
    SkeletonFrame,
};

/// Record errors kept verbatim in the summary; the count is always exact.
const MAX_RECORDED_ERRORS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum IngestError {
    #[error("read failure: {0}")]
    Io(String),
    #[error("line {line}: {message}")]
    Format { line: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordError {
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub total_records: u64,
    pub parsed: u64,
    pub skipped: u64,
    pub errors: Vec<RecordError>,
}

impl IngestStats {
    fn skip(&mut self, line: u64, message: String) {
        log::debug!("skipping record at line {line}: {message}");
        self.skipped += 1;
        if self.errors.len() < MAX_RECORDED_ERRORS {
            self.errors.push(RecordError { line, message });
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawJoint {
    id: u8,
    p: [f64; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawRecord {
    t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    joints: Option<Vec<RawJoint>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    a0: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    da: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranges: Option<Vec<Option<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    channels: Option<BTreeMap<String, f64>>,
}

/// Writes one frame as a JSONL record readable by [`FrameReader`].
pub fn write_frame<W: Write>(out: &mut W, frame: &MeasurementFrame) -> std::io::Result<()> {
    let mut raw = RawRecord {
        t: frame.timestamp,
        joints: None,
        a0: None,
        da: None,
        ranges: None,
        channels: None,
    };
    match &frame.payload {
        Payload::Skeleton(s) => {
            raw.joints = Some(
                s.joints
                    .iter()
                    .map(|(id, o)| RawJoint {
                        id: id.index() as u8,
                        p: o.position,
                        c: o.confidence,
                    })
                    .collect(),
            )
        }
        Payload::Scan(s) => {
            raw.a0 = Some(s.angle_start);
            raw.da = Some(s.angle_step);
            raw.ranges = Some(s.ranges.clone());
        }
        Payload::Generic(g) => raw.channels = Some(g.channels.clone()),
    }
    serde_json::to_writer(&mut *out, &raw)?;
    out.write_all(b"\n")
}

enum Parsed {
    Frame(MeasurementFrame),
    Skip(String),
}

/// Streaming frame reader over a byte source.
pub struct FrameReader<R> {
    input: R,
    format: InputFormat,
    geometry: Option<ScanGeometry>,
    /// Beam count fixed by the geometry or by the first scan record.
    beams: Option<usize>,
    kind: Option<PayloadKind>,
    last_t: Option<f64>,
    line: u64,
    buf: String,
    header_seen: bool,
    done: bool,
    stats: IngestStats,
}

impl<R: BufRead> FrameReader<R> {
    pub fn new(input: R, format: InputFormat, geometry: Option<ScanGeometry>) -> Self {
        Self {
            input,
            format,
            geometry,
            beams: geometry.map(|g| g.beam_count()),
            kind: None,
            last_t: None,
            line: 0,
            buf: String::new(),
            header_seen: false,
            done: false,
            stats: IngestStats::default(),
        }
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn into_stats(self) -> IngestStats {
        self.stats
    }

    fn fatal(&mut self, message: String) -> IngestError {
        self.done = true;
        IngestError::Format {
            line: self.line,
            message,
        }
    }

    fn check_beams(&mut self, count: usize, angle_step: f64) -> Result<(), IngestError> {
        if let Some(g) = self.geometry {
            if (g.angle_step - angle_step).abs() > 1e-9 {
                return Err(self.fatal(format!(
                    "angle step {angle_step} disagrees with configured geometry {}",
                    g.angle_step
                )));
            }
        }
        match self.beams {
            Some(expected) if expected != count => Err(self.fatal(format!(
                "scan has {count} beams, geometry requires {expected}"
            ))),
            Some(_) => Ok(()),
            None => {
                self.beams = Some(count);
                Ok(())
            }
        }
    }

    fn parse_jsonl(&mut self, text: &str) -> Result<Parsed, IngestError> {
        let raw: RawRecord = match serde_json::from_str(text) {
            Ok(r) => r,
            Err(e) => return Ok(Parsed::Skip(format!("invalid record: {e}"))),
        };
        let frame = match (raw.joints, raw.ranges, raw.channels) {
            (Some(joints), None, None) => {
                let mut skel = SkeletonFrame::default();
                for j in joints {
                    let Some(id) = JointId::new(j.id) else {
                        return Ok(Parsed::Skip(format!("joint id {} outside 0..=24", j.id)));
                    };
                    if let Some(c) = j.c {
                        if !(0.0..=1.0).contains(&c) {
                            return Ok(Parsed::Skip(format!("joint {} confidence {c} outside [0, 1]", j.id)));
                        }
                    }
                    let obs = JointObservation {
                        position: j.p,
                        confidence: j.c,
                    };
                    if skel.joints.insert(id, obs).is_some() {
                        return Ok(Parsed::Skip(format!("duplicate joint id {}", j.id)));
                    }
                }
                MeasurementFrame::skeleton(raw.t, skel)
            }
            (None, Some(ranges), None) => {
                let (Some(a0), Some(da)) = (raw.a0, raw.da) else {
                    return Ok(Parsed::Skip("scan record needs a0 and da".into()));
                };
                if ranges.iter().flatten().any(|r| *r < 0.0) {
                    return Ok(Parsed::Skip("negative range".into()));
                }
                self.check_beams(ranges.len(), da)?;
                MeasurementFrame::scan(
                    raw.t,
                    ScanFrame {
                        angle_start: a0,
                        angle_step: da,
                        ranges,
                    },
                )
            }
            (None, None, Some(channels)) => MeasurementFrame::generic(raw.t, GenericFrame { channels }),
            _ => {
                return Ok(Parsed::Skip(
                    "record must carry exactly one of joints, ranges, channels".into(),
                ))
            }
        };
        Ok(Parsed::Frame(frame))
    }

    fn parse_csv_header(&mut self, text: &str) -> Result<(), IngestError> {
        let cols: Vec<&str> = text.split(',').map(str::trim).collect();
        if cols.len() < 4 || cols[..3] != ["t", "a0", "da"] {
            return Err(self.fatal("CSV header must start with t,a0,da followed by range columns".into()));
        }
        for (i, c) in cols[3..].iter().enumerate() {
            if *c != format!("r{i}") {
                return Err(self.fatal(format!("unexpected CSV column '{c}', expected 'r{i}'")));
            }
        }
        let beams = cols.len() - 3;
        if let Some(expected) = self.beams {
            if expected != beams {
                return Err(self.fatal(format!(
                    "CSV header has {beams} range columns, geometry requires {expected}"
                )));
            }
        }
        self.beams = Some(beams);
        Ok(())
    }

    fn parse_csv_row(&mut self, text: &str) -> Result<Parsed, IngestError> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_reader(text.as_bytes());
        let Some(record) = reader.records().next() else {
            return Ok(Parsed::Skip("empty CSV row".into()));
        };
        let record = match record {
            Ok(r) => r,
            Err(e) => return Ok(Parsed::Skip(format!("invalid CSV row: {e}"))),
        };
        let beams = self.beams.unwrap_or(0);
        if record.len() != beams + 3 {
            return Ok(Parsed::Skip(format!(
                "row has {} fields, header has {}",
                record.len(),
                beams + 3
            )));
        }
        let num = |s: &str| s.trim().parse::<f64>();
        let (Ok(t), Ok(a0), Ok(da)) = (num(&record[0]), num(&record[1]), num(&record[2])) else {
            return Ok(Parsed::Skip("t, a0 and da must be numbers".into()));
        };
        let mut ranges = Vec::with_capacity(beams);
        for cell in record.iter().skip(3) {
            if cell.trim().is_empty() {
                ranges.push(None);
                continue;
            }
            match num(cell) {
                Ok(r) if r >= 0.0 => ranges.push(Some(r)),
                _ => return Ok(Parsed::Skip(format!("invalid range cell '{cell}'"))),
            }
        }
        self.check_beams(ranges.len(), da)?;
        Ok(Parsed::Frame(MeasurementFrame::scan(
            t,
            ScanFrame {
                angle_start: a0,
                angle_step: da,
                ranges,
            },
        )))
    }

    fn accept(&mut self, frame: MeasurementFrame) -> Result<MeasurementFrame, String> {
        if !frame.timestamp.is_finite() {
            return Err("non-finite timestamp".into());
        }
        if let Some(last) = self.last_t {
            if frame.timestamp < last {
                return Err(format!("timestamp {} precedes {last}", frame.timestamp));
            }
        }
        match self.kind {
            Some(k) if k != frame.kind() => {
                return Err(format!("{} record in a {k} stream", frame.kind()));
            }
            _ => {}
        }
        self.kind = Some(frame.kind());
        self.last_t = Some(frame.timestamp);
        Ok(frame)
    }
}

impl<R: BufRead> Iterator for FrameReader<R> {
    type Item = Result<MeasurementFrame, IngestError>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            self.buf.clear();
            match self.input.read_line(&mut self.buf) {
                Ok(0) => {
                    self.done = true;
                    return None;
                }
                Ok(_) => self.line += 1,
                Err(e) => {
                    self.done = true;
                    return Some(Err(IngestError::Io(e.to_string())));
                }
            }
            let text = std::mem::take(&mut self.buf);
            let trimmed = text.trim();
            if trimmed.is_empty() {
                self.buf = text;
                continue;
            }
            if self.format == InputFormat::Csv && !self.header_seen {
                self.header_seen = true;
                let r = self.parse_csv_header(trimmed);
                self.buf = text;
                if let Err(e) = r {
                    return Some(Err(e));
                }
                continue;
            }
            self.stats.total_records += 1;
            let parsed = match self.format {
                InputFormat::Jsonl => self.parse_jsonl(trimmed),
                InputFormat::Csv => self.parse_csv_row(trimmed),
            };
            self.buf = text;
            match parsed {
                Err(e) => {
                    self.stats.total_records -= 1;
                    return Some(Err(e));
                }
                Ok(Parsed::Skip(msg)) => self.stats.skip(self.line, msg),
                Ok(Parsed::Frame(f)) => match self.accept(f) {
                    Ok(f) => {
                        self.stats.parsed += 1;
                        return Some(Ok(f));
                    }
                    Err(msg) => self.stats.skip(self.line, msg),
                },
            }
        }
        None
    }
}

/// Reads a whole input into memory. Prefer [`FrameReader`] for streams.
pub fn parse_frames(
    input: impl BufRead,
    format: InputFormat,
    geometry: Option<ScanGeometry>,
) -> Result<(Vec<MeasurementFrame>, IngestStats), IngestError> {
    let mut reader = FrameReader::new(input, format, geometry);
    let frames = reader.by_ref().collect::<Result<Vec<_>, _>>()?;
    Ok((frames, reader.into_stats()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub id: u64,
    pub frames: Vec<MeasurementFrame>,
}

/// Cuts a frame stream into non-overlapping windows of exactly `size` frames.
#[derive(Debug)]
pub struct Windower {
    size: usize,
    buf: Vec<MeasurementFrame>,
    next_id: u64,
    peak: usize,
}

impl Windower {
    pub fn new(size: usize) -> Self {
        assert!(size >= 2, "window size must be at least 2");
        Self {
            size,
            buf: Vec::with_capacity(size),
            next_id: 0,
            peak: 0,
        }
    }

    pub fn push(&mut self, frame: MeasurementFrame) -> Option<Window> {
        self.buf.push(frame);
        self.peak = self.peak.max(self.buf.len());
        if self.buf.len() < self.size {
            return None;
        }
        let frames = std::mem::replace(&mut self.buf, Vec::with_capacity(self.size));
        let id = self.next_id;
        self.next_id += 1;
        Some(Window { id, frames })
    }

    /// Most frames ever held at once.
    pub fn peak_buffered(&self) -> usize {
        self.peak
    }

    pub fn windows_emitted(&self) -> u64 {
        self.next_id
    }

    /// Drops the trailing partial window and returns how many frames it held.
    pub fn finish(&mut self) -> usize {
        let skipped = self.buf.len();
        if skipped > 0 {
            log::warn!(
                "{skipped} trailing frame(s) do not fill a window of {} and were skipped",
                self.size
            );
        }
        self.buf.clear();
        skipped
    }
}

/// Splits frames into windows; returns the windows and the count of trailing
/// frames that did not fill one.
pub fn window_stream(
    frames: impl IntoIterator<Item = MeasurementFrame>,
    window_size: usize,
) -> (Vec<Window>, usize) {
    let mut w = Windower::new(window_size);
    let windows = frames.into_iter().filter_map(|f| w.push(f)).collect();
    (windows, w.finish())
}
