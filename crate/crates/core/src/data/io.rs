use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde_json::{Map, Value};

use super::{DatasetHeader, StayPoint};
use crate::error::{Error, Result};

/// Format tag written into the header record.
pub const CHECKIN_FORMAT: &str = "semtraj-checkins/1";

const RECORD_FIELDS: [&str; 5] = ["user", "t", "x", "y", "category"];
const HEADER_FIELDS: [&str; 9] = [
    "format",
    "x_min",
    "x_max",
    "y_min",
    "y_max",
    "epoch",
    "epoch_weekday",
    "split_day",
    "n_days",
];

/// Parsed check-in file: header plus per-user streams in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckinLog {
    pub header: DatasetHeader,
    pub streams: BTreeMap<String, Vec<StayPoint>>,
    /// Count of unrecognized keys that were skipped while parsing.
    pub unknown_fields: usize,
}

impl CheckinLog {
    pub fn n_records(&self) -> usize {
        self.streams.values().map(Vec::len).sum()
    }
}

fn field<'a>(obj: &'a Map<String, Value>, key: &str, file: &str, line: usize) -> Result<&'a Value> {
    obj.get(key)
        .ok_or_else(|| Error::parse(file, line, format!("missing field `{key}`")))
}

fn as_f64(v: &Value, key: &str, file: &str, line: usize) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::parse(file, line, format!("field `{key}` is not a number")))
}

fn as_i64(v: &Value, key: &str, file: &str, line: usize) -> Result<i64> {
    v.as_i64()
        .ok_or_else(|| Error::parse(file, line, format!("field `{key}` is not an integer")))
}

fn parse_header(obj: &Map<String, Value>, file: &str, line: usize, unknown: &mut usize) -> Result<DatasetHeader> {
    *unknown += obj.keys().filter(|k| !HEADER_FIELDS.contains(&k.as_str())).count();
    let num = |k: &str| as_f64(field(obj, k, file, line)?, k, file, line);
    let int = |k: &str| as_i64(field(obj, k, file, line)?, k, file, line);
    let epoch_weekday = int("epoch_weekday")?;
    if !(0..7).contains(&epoch_weekday) {
        return Err(Error::parse(file, line, "epoch_weekday must be in 0..=6"));
    }
    let split_day = int("split_day")?;
    let n_days = obj
        .get("n_days")
        .map(|v| as_i64(v, "n_days", file, line))
        .transpose()?
        .unwrap_or(0);
    if split_day < 0 || n_days < 0 {
        return Err(Error::parse(file, line, "split_day and n_days must be non-negative"));
    }
    let h = DatasetHeader {
        x_min: num("x_min")?,
        x_max: num("x_max")?,
        y_min: num("y_min")?,
        y_max: num("y_max")?,
        epoch: int("epoch")?,
        epoch_weekday: epoch_weekday as u8,
        split_day: split_day as usize,
        n_days: n_days as usize,
    };
    if !(h.x_max > h.x_min && h.y_max > h.y_min) {
        return Err(Error::parse(file, line, "degenerate bounding box"));
    }
    Ok(h)
}

fn normalize(v: f64, lo: f64, hi: f64) -> f64 {
    if lo == 0.0 && hi == 1.0 {
        v
    } else {
        (v - lo) / (hi - lo)
    }
}

/// Parse check-in text (one JSON object per line, header first). Lines
/// starting with `#` are comments.
pub fn parse_checkins(text: &str, file: &str) -> Result<CheckinLog> {
    let mut log = CheckinLog::default();
    let mut header: Option<DatasetHeader> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() || raw.starts_with('#') {
            continue;
        }
        let value: Value = serde_json::from_str(raw).map_err(|e| Error::parse(file, line, e.to_string()))?;
        let Value::Object(obj) = value else {
            return Err(Error::parse(file, line, "record is not an object"));
        };
        let Some(h) = &header else {
            if !obj.contains_key("format") {
                return Err(Error::parse(file, line, "first record must be the header"));
            }
            header = Some(parse_header(&obj, file, line, &mut log.unknown_fields)?);
            continue;
        };
        log.unknown_fields += obj.keys().filter(|k| !RECORD_FIELDS.contains(&k.as_str())).count();
        let user = field(&obj, "user", file, line)?
            .as_str()
            .ok_or_else(|| Error::parse(file, line, "field `user` is not a string"))?;
        let category = field(&obj, "category", file, line)?
            .as_str()
            .ok_or_else(|| Error::parse(file, line, "field `category` is not a string"))?;
        if category.is_empty() {
            return Err(Error::parse(file, line, "empty category"));
        }
        let t = as_i64(field(&obj, "t", file, line)?, "t", file, line)?;
        let x = normalize(
            as_f64(field(&obj, "x", file, line)?, "x", file, line)?,
            h.x_min,
            h.x_max,
        );
        let y = normalize(
            as_f64(field(&obj, "y", file, line)?, "y", file, line)?,
            h.y_min,
            h.y_max,
        );
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::parse(file, line, "coordinate outside the header bounding box"));
        }
        log.streams.entry(user.to_string()).or_default().push(StayPoint {
            x,
            y,
            t,
            category: category.to_string(),
        });
    }
    if let Some(h) = header {
        log.header = h;
    }
    if log.unknown_fields > 0 {
        log::warn!("{file}: ignored {} unknown field(s)", log.unknown_fields);
    }
    Ok(log)
}

pub fn load_checkins(path: &Path) -> Result<CheckinLog> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_checkins(&text, &path.display().to_string())
}

/// Serialize a log; records are emitted sorted by `(user, t)` with a stable
/// order for equal timestamps.
pub fn render_checkins(log: &CheckinLog) -> String {
    let h = &log.header;
    let mut out = String::new();
    let header = serde_json::json!({
        "format": CHECKIN_FORMAT,
        "x_min": h.x_min,
        "x_max": h.x_max,
        "y_min": h.y_min,
        "y_max": h.y_max,
        "epoch": h.epoch,
        "epoch_weekday": h.epoch_weekday,
        "split_day": h.split_day,
        "n_days": h.n_days,
    });
    writeln!(out, "{header}").unwrap();
    for (user, pts) in &log.streams {
        let mut order: Vec<&StayPoint> = pts.iter().collect();
        order.sort_by_key(|p| p.t);
        for p in order {
            let rec = serde_json::json!({
                "user": user,
                "t": p.t,
                "x": p.x,
                "y": p.y,
                "category": p.category,
            });
            writeln!(out, "{rec}").unwrap();
        }
    }
    out
}

pub fn write_checkins(path: &Path, log: &CheckinLog) -> Result<()> {
    std::fs::write(path, render_checkins(log)).map_err(|e| Error::io(path, e))
}
