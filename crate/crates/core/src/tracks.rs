//! `tracks.jsonl`: one JSON record per frame with pose, expression and gaze.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Driving parameters of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrack {
    pub pose: [f64; 6],
    pub expression: Vec<f64>,
    pub gaze: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default)]
    frame: Option<usize>,
    pose: [f64; 6],
    expression: Vec<f64>,
    gaze: [f64; 2],
}

#[derive(Debug, Error)]
pub enum TrackError {
    #[error("line {line}: {detail}")]
    Line { line: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub fn write_tracks<W: Write>(mut w: W, tracks: &[FrameTrack]) -> std::io::Result<()> {
    for (i, t) in tracks.iter().enumerate() {
        let rec = Record {
            frame: Some(i),
            pose: t.pose,
            expression: t.expression.clone(),
            gaze: t.gaze,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

/// Parses one record. Blank lines yield `None`.
pub fn parse_track_line(text: &str, line: usize) -> Result<Option<FrameTrack>, TrackError> {
    if text.trim().is_empty() {
        return Ok(None);
    }
    let rec: Record = serde_json::from_str(text).map_err(|e| TrackError::Line {
        line,
        detail: e.to_string(),
    })?;
    if !rec.pose.iter().chain(&rec.expression).chain(&rec.gaze).all(|v| v.is_finite()) {
        return Err(TrackError::Line {
            line,
            detail: "non-finite value".into(),
        });
    }
    Ok(Some(FrameTrack {
        pose: rec.pose,
        expression: rec.expression,
        gaze: rec.gaze,
    }))
}

/// Reads every record; line numbers in errors are 1-based.
pub fn read_tracks<R: BufRead>(r: R) -> Result<Vec<FrameTrack>, TrackError> {
    let mut out = Vec::new();
    for (k, line) in r.lines().enumerate() {
        if let Some(t) = parse_track_line(&line?, k + 1)? {
            out.push(t);
        }
    }
    Ok(out)
}
