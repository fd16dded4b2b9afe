//! Semantic-trajectory domain model: staypoints, calendar-aligned daily
//! trajectories, weekly day-pattern sets, and the check-in / label files.

mod io;
mod labels;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_checkins, parse_checkins, render_checkins, write_checkins, CheckinLog, CHECKIN_FORMAT};
pub use labels::{load_labels, parse_labels, render_labels, write_labels, Intensity, Label, LabelTable, OutlierType};

pub const SECONDS_PER_DAY: i64 = 86_400;
/// Default number of staypoints kept per day.
pub const DEFAULT_CUTOFF_LEN: usize = 16;
/// Weekly repetition of day patterns.
pub const WEEK: usize = 7;

/// One check-in: normalized location, epoch seconds, semantic class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayPoint {
    pub x: f64,
    pub y: f64,
    pub t: i64,
    pub category: String,
}

/// Dataset-wide calendar and normalization metadata, carried by the
/// header record of a check-in file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    /// Epoch seconds of the start of day 0.
    pub epoch: i64,
    /// Weekday of day 0, Monday = 0.
    pub epoch_weekday: u8,
    /// First test day.
    pub split_day: usize,
    /// Calendar length; days past the last check-in are kept as empty days.
    pub n_days: usize,
}

impl Default for DatasetHeader {
    fn default() -> Self {
        Self {
            x_min: 0.0,
            x_max: 1.0,
            y_min: 0.0,
            y_max: 1.0,
            epoch: 0,
            epoch_weekday: 0,
            split_day: 0,
            n_days: 0,
        }
    }
}

impl DatasetHeader {
    pub fn weekday_of(&self, day_index: usize) -> u8 {
        ((day_index + self.epoch_weekday as usize) % WEEK) as u8
    }
}

/// One user's staypoints on one calendar day, truncated to `cutoff_len`.
///
/// Only real points are stored; slots `valid_len()..cutoff_len` are padding.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyTrajectory {
    pub user_id: String,
    pub day_index: usize,
    pub weekday: u8,
    pub points: Vec<StayPoint>,
    pub cutoff_len: usize,
}

impl DailyTrajectory {
    pub fn valid_len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-slot flags, `true` for real points.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.cutoff_len).map(|i| i < self.points.len()).collect()
    }
}

/// All users' daily trajectories over a shared calendar.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub cutoff_len: usize,
    /// Every user's days `0..header.n_days`, indexed by day.
    pub daily: BTreeMap<String, Vec<DailyTrajectory>>,
    pub vocabulary: BTreeSet<String>,
}

/// Which side of the split a query refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Dataset {
    pub fn empty(cutoff_len: usize) -> Self {
        Self {
            header: DatasetHeader::default(),
            cutoff_len,
            daily: BTreeMap::new(),
            vocabulary: BTreeSet::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.daily.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.daily.keys().map(String::as_str)
    }

    pub fn n_users(&self) -> usize {
        self.daily.len()
    }

    pub fn split_day(&self) -> usize {
        self.header.split_day
    }

    pub fn days(&self, user: &str) -> &[DailyTrajectory] {
        self.daily.get(user).map_or(&[], Vec::as_slice)
    }

    pub fn split_days(&self, user: &str, split: Split) -> &[DailyTrajectory] {
        let days = self.days(user);
        let cut = self.header.split_day.min(days.len());
        match split {
            Split::Train => &days[..cut],
            Split::Test => &days[cut..],
        }
    }

    pub fn train(&self, user: &str) -> &[DailyTrajectory] {
        self.split_days(user, Split::Train)
    }

    pub fn test(&self, user: &str) -> &[DailyTrajectory] {
        self.split_days(user, Split::Test)
    }

    /// Copy with a different split day.
    pub fn with_split_day(&self, split_day: usize) -> Self {
        let mut d = self.clone();
        d.header.split_day = split_day;
        d
    }

    /// Restrict to days `[0, n_days)`; used to shorten the calendar.
    pub fn truncated(&self, n_days: usize) -> Self {
        let mut d = self.clone();
        for days in d.daily.values_mut() {
            days.truncate(n_days);
        }
        d.header.n_days = d.header.n_days.min(n_days);
        d
    }

    /// Flatten back into per-user check-in streams with a unit bounding box.
    pub fn to_checkin_log(&self) -> CheckinLog {
        let mut header = self.header.clone();
        header.x_min = 0.0;
        header.x_max = 1.0;
        header.y_min = 0.0;
        header.y_max = 1.0;
        let streams = self
            .daily
            .iter()
            .map(|(u, days)| (u.clone(), days.iter().flat_map(|d| d.points.iter().cloned()).collect()))
            .collect();
        CheckinLog {
            header,
            streams,
            unknown_fields: 0,
        }
    }

    pub fn write(&self, path: &std::path::Path) -> Result<()> {
        write_checkins(path, &self.to_checkin_log())
    }

    pub fn load(path: &std::path::Path, cutoff_len: usize) -> Result<Self> {
        segment_daily(&load_checkins(path)?, cutoff_len)
    }
}

/// Partition each user's check-ins by calendar day, keeping the first
/// `cutoff_len` points of every day. Days without check-ins become empty
/// trajectories so day indices stay calendar-aligned.
pub fn segment_daily(log: &CheckinLog, cutoff_len: usize) -> Result<Dataset> {
    if cutoff_len == 0 {
        return Err(Error::Config("cutoff_len must be at least 1".into()));
    }
    let header = &log.header;
    let mut max_day: Option<usize> = None;
    for (user, pts) in &log.streams {
        for w in pts.windows(2) {
            if w[1].t < w[0].t {
                return Err(Error::Unsorted {
                    user: user.clone(),
                    t: w[1].t,
                });
            }
        }
        if let Some(first) = pts.first() {
            if first.t < header.epoch {
                return Err(Error::Data(format!(
                    "user {user}: timestamp {} precedes the dataset epoch {}",
                    first.t, header.epoch
                )));
            }
        }
        if let Some(last) = pts.last() {
            let d = ((last.t - header.epoch) / SECONDS_PER_DAY) as usize;
            max_day = Some(max_day.map_or(d, |m| m.max(d)));
        }
    }
    let n_days = header.n_days.max(max_day.map_or(0, |d| d + 1));
    let mut out = Dataset::empty(cutoff_len);
    out.header = header.clone();
    out.header.n_days = n_days;
    for (user, pts) in &log.streams {
        let mut days: Vec<DailyTrajectory> = (0..n_days)
            .map(|d| DailyTrajectory {
                user_id: user.clone(),
                day_index: d,
                weekday: header.weekday_of(d),
                points: Vec::new(),
                cutoff_len,
            })
            .collect();
        for p in pts {
            let d = ((p.t - header.epoch) / SECONDS_PER_DAY) as usize;
            let day = &mut days[d];
            if day.points.len() < cutoff_len {
                out.vocabulary.insert(p.category.clone());
                day.points.push(p.clone());
            }
        }
        out.daily.insert(user.clone(), days);
    }
    Ok(out)
}

/// Days sharing `d`'s pattern: `{d + f q | q != 0, 1 <= d + f q <= total}`
/// with 1-based day numbers.
pub fn day_pattern_set(d: usize, f: usize, total: usize) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    if f == 0 || d == 0 {
        return out;
    }
    let mut back = d;
    while back > f {
        back -= f;
        out.insert(back);
    }
    let mut fwd = d + f;
    while fwd <= total {
        out.insert(fwd);
        fwd += f;
    }
    out
}

/// Membership test for [`day_pattern_set`] without building the set.
pub fn in_day_pattern(d: usize, other: usize, f: usize, total: usize) -> bool {
    other != d && other >= 1 && other <= total && f > 0 && d.abs_diff(other).is_multiple_of(f)
}

#[cfg(test)]
mod tests;
