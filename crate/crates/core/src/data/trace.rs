use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GazePosition, HeadPosition};

/// One 1 Hz observation of a user watching a video.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub video_id: String,
    pub user_id: String,
    pub t_sec: u32,
    pub head: HeadPosition,
    pub gaze: GazePosition,
}

/// On-disk JSON-lines row.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TraceLine {
    video_id: String,
    user_id: String,
    t_sec: u32,
    yaw: f64,
    pitch: f64,
    gx: f64,
    gy: f64,
}

impl TraceRecord {
    fn to_line(&self) -> TraceLine {
        TraceLine {
            video_id: self.video_id.clone(),
            user_id: self.user_id.clone(),
            t_sec: self.t_sec,
            yaw: self.head.yaw(),
            pitch: self.head.pitch(),
            gx: self.gaze.x(),
            gy: self.gaze.y(),
        }
    }

    fn from_line(line: TraceLine) -> Result<Self> {
        Ok(Self {
            head: HeadPosition::new(line.yaw, line.pitch)?,
            gaze: GazePosition::new(line.gx, line.gy)?,
            video_id: line.video_id,
            user_id: line.user_id,
            t_sec: line.t_sec,
        })
    }
}

pub fn parse_trace_line(line: &str) -> Result<TraceRecord> {
    let raw: TraceLine = serde_json::from_str(line)?;
    TraceRecord::from_line(raw)
}

/// Reads a JSON-lines trace file. Blank lines are ignored; any malformed,
/// out-of-range or duplicate `(video_id, user_id, t_sec)` row is rejected
/// with its 1-based line number.
pub fn load_traces(path: &Path) -> Result<Vec<TraceRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::Trace {
            path: path.to_path_buf(),
            line: idx + 1,
            reason,
        };
        let record = parse_trace_line(&line).map_err(|e| fail(e.to_string()))?;
        let key = (record.video_id.clone(), record.user_id.clone(), record.t_sec);
        if !seen.insert(key) {
            return Err(fail(format!(
                "duplicate record for video `{}`, user `{}`, t_sec {}",
                record.video_id, record.user_id, record.t_sec
            )));
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_traces(path: &Path, records: &[TraceRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for record in records {
        serde_json::to_writer(&mut out, &record.to_line())?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// A raw, frame-rate trace observation used by dataset adapters.
#[derive(Debug, Clone, Copy)]
pub struct RawObservation {
    pub time_sec: f64,
    pub head: HeadPosition,
    pub gaze: GazePosition,
}

/// Resamples a time-sorted stream to 1 Hz by taking, for every integer
/// second covered by the stream, the observation nearest to it. Earlier
/// observations win exact ties.
pub fn resample_1hz(video_id: &str, user_id: &str, raw: &[RawObservation]) -> Vec<TraceRecord> {
    let (Some(first), Some(last)) = (raw.first(), raw.last()) else {
        return Vec::new();
    };
    let start = first.time_sec.ceil().max(0.0) as u32;
    let end = last.time_sec.floor();
    if end < start as f64 {
        return Vec::new();
    }
    let mut out = Vec::new();
    let mut cursor = 0;
    for sec in start..=end as u32 {
        let target = sec as f64;
        while cursor + 1 < raw.len()
            && (raw[cursor + 1].time_sec - target).abs() < (raw[cursor].time_sec - target).abs()
        {
            cursor += 1;
        }
        let obs = raw[cursor];
        out.push(TraceRecord {
            video_id: video_id.to_string(),
            user_id: user_id.to_string(),
            t_sec: sec,
            head: obs.head,
            gaze: obs.gaze,
        });
    }
    out
}
