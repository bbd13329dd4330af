//! AVA-format CSV ingestion and serialization.
//!
//! Ground truth rows are `video_id,timestamp,x1,y1,x2,y2,action_id,person_id`
//! with coordinates normalized to `[0, 1]` and action ids in `[1, K]`.
//! Proposal and prediction rows append a trailing `score` column; proposals
//! may leave `action_id` empty. Internally labels are stored 0-based
//! (`action_id - 1`).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::data::{canonicalize, BoxAnnotation, BoxCoords, Keyframe};
use crate::error::{Error, Result};
use crate::eval::Detection;

struct RawRow {
    video_id: String,
    timestamp: f64,
    coords: BoxCoords,
    action: Option<u32>,
    person_id: Option<i64>,
    score: Option<f64>,
}

fn parse_row(
    path: &Path,
    line_no: usize,
    line: &str,
    num_classes: usize,
    expect_score: bool,
) -> Result<RawRow> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    let expected = if expect_score { 9 } else { 8 };
    if fields.len() != expected {
        return Err(Error::parse(
            path,
            line_no,
            format!("expected {expected} columns, found {}", fields.len()),
        ));
    }
    let parse_f = |s: &str, what: &str| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::parse(path, line_no, format!("bad {what}: {s:?}")))
    };
    let timestamp = parse_f(fields[1], "timestamp")?;
    let x1 = parse_f(fields[2], "x1")?;
    let y1 = parse_f(fields[3], "y1")?;
    let x2 = parse_f(fields[4], "x2")?;
    let y2 = parse_f(fields[5], "y2")?;
    let coords = BoxCoords::new(x1, y1, x2, y2)
        .map_err(|e| Error::parse(path, line_no, format!("{e}")))?;
    let action = if fields[6].is_empty() {
        None
    } else {
        let id: i64 = fields[6]
            .parse()
            .map_err(|_| Error::parse(path, line_no, format!("bad action_id: {:?}", fields[6])))?;
        if id < 1 || id as usize > num_classes {
            return Err(Error::parse(
                path,
                line_no,
                format!("action_id {id} outside [1, {num_classes}]"),
            ));
        }
        Some((id - 1) as u32)
    };
    let person_id = if fields[7].is_empty() {
        None
    } else {
        Some(fields[7].parse::<i64>().map_err(|_| {
            Error::parse(path, line_no, format!("bad person_id: {:?}", fields[7]))
        })?)
    };
    let score = if expect_score {
        let s = parse_f(fields[8], "score")?;
        if !(0.0..=1.0).contains(&s) {
            return Err(Error::parse(path, line_no, format!("score {s} outside [0, 1]")));
        }
        Some(s)
    } else {
        None
    };
    Ok(RawRow {
        video_id: fields[0].to_string(),
        timestamp,
        coords,
        action,
        person_id,
        score,
    })
}

fn read_rows(path: &Path, num_classes: usize, expect_score: bool) -> Result<Vec<RawRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(parse_row(path, idx + 1, &line, num_classes, expect_score)?);
    }
    Ok(rows)
}

/// Merge rows into keyframes. Rows sharing `(video_id, timestamp, box
/// rounded to 6 decimals, person_id)` collapse into one multi-label box.
fn merge(rows: Vec<RawRow>, require_labels: bool, path: &Path) -> Result<Vec<Keyframe>> {
    type BoxKey = ([i64; 4], Option<i64>);
    let mut frames: BTreeMap<(String, u64), BTreeMap<BoxKey, BoxAnnotation>> = BTreeMap::new();
    for row in rows {
        let fkey = (row.video_id.clone(), super::canonical_ts_bits(row.timestamp));
        let bkey = (row.coords.rounded_key(), row.person_id);
        let entry = frames
            .entry(fkey)
            .or_default()
            .entry(bkey)
            .or_insert_with(|| BoxAnnotation {
                coords: row.coords,
                labels: Default::default(),
                score: row.score,
                person_id: row.person_id,
            });
        if let Some(a) = row.action {
            entry.labels.insert(a);
        }
        if let Some(s) = row.score {
            entry.score = Some(s);
        }
    }
    let mut out = Vec::with_capacity(frames.len());
    for ((clip_id, ts_bits), boxes) in frames {
        let boxes: Vec<BoxAnnotation> = boxes.into_values().collect();
        if require_labels {
            if let Some(b) = boxes.iter().find(|b| b.labels.is_empty()) {
                return Err(Error::Other(format!(
                    "ground-truth box {:?} in {} has no labels",
                    b.coords.as_array(),
                    path.display()
                )));
            }
        }
        out.push(Keyframe {
            clip_id,
            timestamp: f64::from_bits(ts_bits),
            boxes,
        });
    }
    canonicalize(&mut out);
    Ok(out)
}

/// Load ground-truth keyframes from an AVA-layout CSV.
pub fn load_ava_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<Keyframe>> {
    let path = path.as_ref();
    let rows = read_rows(path, num_classes, false)?;
    merge(rows, true, path)
}

/// Load detector proposals: AVA columns plus a trailing score, action id
/// optional (usually empty for person detections).
pub fn load_ava_proposals(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<Keyframe>> {
    let path = path.as_ref();
    let rows = read_rows(path, num_classes, true)?;
    merge(rows, false, path)
}

/// Load per-class predictions (one row per box/class pair, score required).
pub fn load_ava_predictions(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let rows = read_rows(path, num_classes, true)?;
    let mut out = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        let class = row.action.ok_or_else(|| {
            Error::parse(path, i + 1, "prediction rows need an action_id".to_string())
        })?;
        out.push(Detection {
            clip_id: row.video_id,
            timestamp: row.timestamp,
            coords: row.coords,
            class,
            score: row.score.expect("score parsed for prediction rows"),
        });
    }
    Ok(out)
}

fn fmt_ts(ts: f64) -> String {
    if ts.fract() == 0.0 && ts.abs() < 1e15 {
        format!("{}", ts as i64)
    } else {
        format!("{ts}")
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{:.6}", v)
}

/// Write keyframes back in the AVA layout, one row per (box, label), in
/// canonical order. Re-loading yields an equal structure.
pub fn save_ava_csv(path: impl AsRef<Path>, keyframes: &[Keyframe]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = keyframes.to_vec();
    canonicalize(&mut sorted);
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for kf in &sorted {
        for b in &kf.boxes {
            let pid = b.person_id.map(|p| p.to_string()).unwrap_or_default();
            let score_suffix = b.score.map(|s| format!(",{s}")).unwrap_or_default();
            if b.labels.is_empty() {
                writeln!(
                    file,
                    "{},{},{},{},{},{},,{}{}",
                    kf.clip_id,
                    fmt_ts(kf.timestamp),
                    fmt_coord(b.coords.x1),
                    fmt_coord(b.coords.y1),
                    fmt_coord(b.coords.x2),
                    fmt_coord(b.coords.y2),
                    pid,
                    score_suffix,
                )
                .map_err(|e| Error::io(path, e))?;
            } else {
                for &label in &b.labels {
                    writeln!(
                        file,
                        "{},{},{},{},{},{},{},{}{}",
                        kf.clip_id,
                        fmt_ts(kf.timestamp),
                        fmt_coord(b.coords.x1),
                        fmt_coord(b.coords.y1),
                        fmt_coord(b.coords.x2),
                        fmt_coord(b.coords.y2),
                        label + 1,
                        pid,
                        score_suffix,
                    )
                    .map_err(|e| Error::io(path, e))?;
                }
            }
        }
    }
    Ok(())
}

/// Write per-class predictions: AVA columns plus score, empty person id.
pub fn save_ava_predictions(path: impl AsRef<Path>, detections: &[Detection]) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = detections.to_vec();
    sorted.sort_by(|a, b| {
        a.clip_id
            .cmp(&b.clip_id)
            .then(a.timestamp.partial_cmp(&b.timestamp).unwrap())
            .then(a.coords.lex_cmp(&b.coords))
            .then(a.class.cmp(&b.class))
    });
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    for d in &sorted {
        writeln!(
            file,
            "{},{},{},{},{},{},{},,{}",
            d.clip_id,
            fmt_ts(d.timestamp),
            fmt_coord(d.coords.x1),
            fmt_coord(d.coords.y1),
            fmt_coord(d.coords.x2),
            fmt_coord(d.coords.y2),
            d.class + 1,
            d.score,
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}
