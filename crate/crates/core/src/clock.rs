//! Time-of-day arithmetic and timestamp formatting.
//!
//! All timestamps are UTC and time of day is read directly off the UTC clock.

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, NaiveDate, NaiveDateTime, TimeZone, Timelike, Utc};
use thiserror::Error;

pub const SECONDS_PER_DAY: u32 = 86_400;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ClockError {
    #[error("invalid time of day `{0}` (expected HH:MM, 00:00..=24:00)")]
    TimeOfDay(String),
    #[error("invalid window `{0}` (expected HH:MM-HH:MM with start < end)")]
    Window(String),
    #[error("invalid timestamp `{0}` (expected ISO-8601 UTC, e.g. 2008-05-15T12:00:00Z)")]
    Timestamp(String),
}

/// Seconds since midnight; `24:00` is representable as the end of the day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TimeOfDay(u32);

impl TimeOfDay {
    pub const MIDNIGHT: TimeOfDay = TimeOfDay(0);
    pub const END_OF_DAY: TimeOfDay = TimeOfDay(SECONDS_PER_DAY);

    pub fn from_seconds(secs: u32) -> Option<Self> {
        (secs <= SECONDS_PER_DAY).then_some(TimeOfDay(secs))
    }

    pub fn hm(hours: u32, minutes: u32) -> Self {
        Self::from_seconds(hours * 3600 + minutes * 60).expect("time of day out of range")
    }

    pub fn seconds(self) -> u32 {
        self.0
    }

    pub fn of(ts: DateTime<Utc>) -> Self {
        TimeOfDay(ts.num_seconds_from_midnight())
    }
}

impl fmt::Display for TimeOfDay {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (h, rem) = (self.0 / 3600, self.0 % 3600);
        let (m, s) = (rem / 60, rem % 60);
        if s == 0 {
            write!(f, "{h:02}:{m:02}")
        } else {
            write!(f, "{h:02}:{m:02}:{s:02}")
        }
    }
}

impl FromStr for TimeOfDay {
    type Err = ClockError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ClockError::TimeOfDay(s.to_string());
        let mut parts = s.trim().split(':');
        let h: u32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let m: u32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
        let sec: u32 = match parts.next() {
            Some(p) => p.parse().map_err(|_| bad())?,
            None => 0,
        };
        if parts.next().is_some() || m >= 60 || sec >= 60 {
            return Err(bad());
        }
        TimeOfDay::from_seconds(h * 3600 + m * 60 + sec).ok_or_else(bad)
    }
}

/// A daily window, start inclusive and end exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DailyWindow {
    pub start: TimeOfDay,
    pub end: TimeOfDay,
}

impl DailyWindow {
    pub fn new(start: TimeOfDay, end: TimeOfDay) -> Option<Self> {
        (start < end).then_some(Self { start, end })
    }

    pub fn full_day() -> Self {
        Self { start: TimeOfDay::MIDNIGHT, end: TimeOfDay::END_OF_DAY }
    }

    /// Bike-share service hours used throughout the analysis.
    pub fn service() -> Self {
        Self { start: TimeOfDay::hm(5, 0), end: TimeOfDay::END_OF_DAY }
    }

    pub fn morning() -> Self {
        Self { start: TimeOfDay::hm(5, 0), end: TimeOfDay::hm(12, 0) }
    }

    pub fn contains(&self, t: TimeOfDay) -> bool {
        t >= self.start && t < self.end
    }

    pub fn len_seconds(&self) -> u32 {
        self.end.0 - self.start.0
    }
}

impl fmt::Display for DailyWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.start, self.end)
    }
}

impl FromStr for DailyWindow {
    type Err = ClockError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.trim().split_once('-').ok_or_else(|| ClockError::Window(s.to_string()))?;
        let start: TimeOfDay = a.parse().map_err(|_| ClockError::Window(s.to_string()))?;
        let end: TimeOfDay = b.parse().map_err(|_| ClockError::Window(s.to_string()))?;
        DailyWindow::new(start, end).ok_or_else(|| ClockError::Window(s.to_string()))
    }
}

/// `2008-05-15T12:00:00Z`
pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format("%Y-%m-%dT%H:%M:%SZ").to_string()
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>, ClockError> {
    let s = s.trim();
    if let Ok(ts) = DateTime::parse_from_rfc3339(s) {
        return Ok(ts.with_timezone(&Utc));
    }
    // compact basic form, used for KML file names: 20080515T120000Z
    NaiveDateTime::parse_from_str(s, "%Y%m%dT%H%M%SZ")
        .map(|naive| Utc.from_utc_datetime(&naive))
        .map_err(|_| ClockError::Timestamp(s.to_string()))
}

pub fn midnight(date: NaiveDate) -> DateTime<Utc> {
    Utc.from_utc_datetime(&date.and_hms_opt(0, 0, 0).expect("valid midnight"))
}

pub fn at(date: NaiveDate, t: TimeOfDay) -> DateTime<Utc> {
    midnight(date) + chrono::Duration::seconds(i64::from(t.seconds()))
}
