//! Average daily activity cycles per station and city-wide, weekly patterns,
//! and the spatial delta surface relative to a baseline time of day.

use std::collections::BTreeMap;

use chrono::{Datelike, NaiveDate, Weekday};
use thiserror::Error;

use crate::clock::TimeOfDay;
use crate::geo::{haversine, BoundingBox, LatLon};
use crate::ingest::Snapshot;
use crate::preprocess::{classify_day, median_filter, BinGrid, DayClass, DayProfile, HolidayCalendar, MedianOrder};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CycleError {
    #[error("no days match the requested class")]
    NoMatchingDays,
    #[error("time {0} is not on the cycle bin grid")]
    TimeOffGrid(TimeOfDay),
    #[error("interpolation needs at least one station")]
    EmptyInput,
    #[error("grid resolution must be at least 1x1")]
    EmptyResolution,
    #[error(transparent)]
    Preprocess(#[from] crate::preprocess::PreprocessError),
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum CycleKey {
    Station(String),
    Global,
}

/// Which days feed a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CycleClass {
    All,
    Day(DayClass),
    Weekday(Weekday),
}

impl CycleClass {
    pub fn matches(self, date: NaiveDate, calendar: &HolidayCalendar) -> bool {
        match self {
            CycleClass::All => true,
            CycleClass::Day(class) => classify_day(date, calendar) == class,
            CycleClass::Weekday(w) => date.weekday() == w,
        }
    }

    pub fn label(self) -> String {
        match self {
            CycleClass::All => "all".to_string(),
            CycleClass::Day(c) => c.as_str().to_string(),
            CycleClass::Weekday(w) => format!("{w:?}").to_lowercase(),
        }
    }
}

impl std::str::FromStr for CycleClass {
    type Err = String;

    /// `all`, `weekday`, `weekend`, or a day name such as `tue`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        if s == "all" {
            return Ok(CycleClass::All);
        }
        if let Ok(c) = s.parse::<DayClass>() {
            return Ok(CycleClass::Day(c));
        }
        s.parse::<Weekday>()
            .map(CycleClass::Weekday)
            .map_err(|_| format!("unknown day class `{s}` (all|weekday|weekend|mon..sun)"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CycleOptions {
    pub median_window: usize,
    pub order: MedianOrder,
}

impl Default for CycleOptions {
    fn default() -> Self {
        Self { median_window: 3, order: MedianOrder::AverageThenFilter }
    }
}

/// Per-bin mean, population standard deviation and day count.
/// Bins with zero support hold `None` in `mean` and `stdev`.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyCycle {
    pub key: CycleKey,
    pub class: CycleClass,
    pub bins: BinGrid,
    pub mean: Vec<Option<f64>>,
    pub stdev: Vec<Option<f64>>,
    pub support: Vec<u32>,
    /// Number of days that fed the cycle.
    pub days: usize,
}

impl DailyCycle {
    pub fn mean_at(&self, t: TimeOfDay) -> Option<f64> {
        self.bins.bin_of(t).and_then(|b| self.mean[b])
    }
}

/// Mean/stdev aggregation over day rows, then median smoothing of the mean
/// according to `opts.order`.
fn aggregate(
    key: CycleKey,
    class: CycleClass,
    bins: BinGrid,
    rows: &[&[Option<f64>]],
    opts: &CycleOptions,
) -> Result<DailyCycle, CycleError> {
    if rows.is_empty() {
        return Err(CycleError::NoMatchingDays);
    }
    let n = bins.len;
    let mut support = vec![0u32; n];
    let mut sum = vec![0.0; n];
    let mut sum_smoothed = vec![0.0; n];
    let smoothed: Vec<Vec<Option<f64>>> = match opts.order {
        MedianOrder::FilterThenAverage => {
            rows.iter().map(|r| median_filter(r, opts.median_window)).collect::<Result<_, _>>()?
        }
        MedianOrder::AverageThenFilter => Vec::new(),
    };
    for (d, row) in rows.iter().enumerate() {
        for (i, v) in row.iter().enumerate().take(n) {
            if let Some(v) = v {
                support[i] += 1;
                sum[i] += v;
                if let Some(s) = smoothed.get(d).and_then(|s| s[i]) {
                    sum_smoothed[i] += s;
                }
            }
        }
    }
    let raw_mean: Vec<Option<f64>> =
        (0..n).map(|i| (support[i] > 0).then(|| sum[i] / f64::from(support[i]))).collect();
    let mut sq = vec![0.0; n];
    for row in rows {
        for (i, v) in row.iter().enumerate().take(n) {
            if let (Some(v), Some(m)) = (v, raw_mean[i]) {
                sq[i] += (v - m).powi(2);
            }
        }
    }
    let stdev = (0..n).map(|i| (support[i] > 0).then(|| (sq[i] / f64::from(support[i])).sqrt())).collect();
    let mean = match opts.order {
        MedianOrder::AverageThenFilter => median_filter(&raw_mean, opts.median_window)?,
        MedianOrder::FilterThenAverage => {
            (0..n).map(|i| (support[i] > 0).then(|| sum_smoothed[i] / f64::from(support[i]))).collect()
        }
    };
    Ok(DailyCycle { key, class, bins, mean, stdev, support, days: rows.len() })
}

/// Average daily cycle of one station over the days matching `class`.
pub fn station_cycle(
    station_id: &str,
    days: &[DayProfile],
    bins: BinGrid,
    class: CycleClass,
    calendar: &HolidayCalendar,
    opts: &CycleOptions,
) -> Result<DailyCycle, CycleError> {
    let rows: Vec<&[Option<f64>]> =
        days.iter().filter(|d| class.matches(d.date, calendar)).map(|d| d.bikes.as_slice()).collect();
    aggregate(CycleKey::Station(station_id.to_string()), class, bins, &rows, opts)
}

/// Cycle of the city-wide bike total. Snapshots whose summed slots do not
/// exceed `min_total_slots` are dropped (`0` disables the filter). Within a
/// day the latest snapshot in each bin is used.
pub fn global_cycle(
    snapshots: &[Snapshot],
    bins: BinGrid,
    class: CycleClass,
    calendar: &HolidayCalendar,
    min_total_slots: u64,
    opts: &CycleOptions,
) -> Result<DailyCycle, CycleError> {
    let mut by_day: BTreeMap<NaiveDate, Vec<Option<f64>>> = BTreeMap::new();
    for snap in snapshots {
        if min_total_slots > 0 && snap.total_slots() <= min_total_slots {
            continue;
        }
        let date = snap.timestamp.date_naive();
        if !class.matches(date, calendar) {
            continue;
        }
        let Some(bin) = bins.bin_of(TimeOfDay::of(snap.timestamp)) else { continue };
        by_day.entry(date).or_insert_with(|| vec![None; bins.len])[bin] = Some(snap.total_bikes() as f64);
    }
    let rows: Vec<&[Option<f64>]> = by_day.values().map(Vec::as_slice).collect();
    aggregate(CycleKey::Global, class, bins, &rows, opts)
}

/// One cycle per day of the week, Monday first.
pub fn weekly_pattern(
    station_id: &str,
    days: &[DayProfile],
    bins: BinGrid,
    opts: &CycleOptions,
) -> Vec<(Weekday, Result<DailyCycle, CycleError>)> {
    let calendar = HolidayCalendar::empty();
    [Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri, Weekday::Sat, Weekday::Sun]
        .into_iter()
        .map(|w| (w, station_cycle(station_id, days, bins, CycleClass::Weekday(w), &calendar, opts)))
        .collect()
}

/// `mean(t) - mean(t0)` per station cycle; stations missing either bin are
/// omitted. Global cycles are skipped.
pub fn geo_delta(cycles: &[DailyCycle], t: TimeOfDay, t0: TimeOfDay) -> Result<Vec<(String, f64)>, CycleError> {
    let mut out = Vec::new();
    for c in cycles {
        let bin = c.bins.exact_bin(t).ok_or(CycleError::TimeOffGrid(t))?;
        let bin0 = c.bins.exact_bin(t0).ok_or(CycleError::TimeOffGrid(t0))?;
        let CycleKey::Station(id) = &c.key else { continue };
        if let (Some(a), Some(b)) = (c.mean[bin], c.mean[bin0]) {
            out.push((id.clone(), a - b));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationDelta {
    pub station_id: String,
    pub location: LatLon,
    pub delta: f64,
}

/// Interpolated delta surface. `values[r][c]` is the cell whose center is
/// `cell_center(r, c)`; row 0 is the southern edge.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoDeltaGrid {
    pub bbox: BoundingBox,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<Vec<f64>>,
    pub reference_time: TimeOfDay,
    pub baseline_time: TimeOfDay,
}

impl GeoDeltaGrid {
    pub fn cell_size(&self) -> (f64, f64) {
        (
            (self.bbox.max_lat - self.bbox.min_lat) / self.rows as f64,
            (self.bbox.max_lon - self.bbox.min_lon) / self.cols as f64,
        )
    }

    pub fn cell_center(&self, r: usize, c: usize) -> LatLon {
        let (dlat, dlon) = self.cell_size();
        LatLon::new(self.bbox.min_lat + (r as f64 + 0.5) * dlat, self.bbox.min_lon + (c as f64 + 0.5) * dlon)
    }
}

/// Cells closer than this to a station take its delta exactly.
pub const IDW_SNAP_METERS: f64 = 1.0;

pub fn idw_value(points: &[StationDelta], at: LatLon, power: f64) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for p in points {
        let d = haversine(at, p.location);
        if d < IDW_SNAP_METERS {
            return p.delta;
        }
        let w = d.powf(-power);
        num += w * p.delta;
        den += w;
    }
    num / den
}

/// Inverse-distance-weighted surface over `bbox` at `rows x cols` cells.
pub fn idw_grid(
    points: &[StationDelta],
    bbox: BoundingBox,
    rows: usize,
    cols: usize,
    power: f64,
    reference_time: TimeOfDay,
    baseline_time: TimeOfDay,
) -> Result<GeoDeltaGrid, CycleError> {
    if points.is_empty() {
        return Err(CycleError::EmptyInput);
    }
    if rows == 0 || cols == 0 {
        return Err(CycleError::EmptyResolution);
    }
    let mut grid = GeoDeltaGrid { bbox, rows, cols, values: Vec::with_capacity(rows), reference_time, baseline_time };
    for r in 0..rows {
        let row = (0..cols).map(|c| idw_value(points, grid.cell_center(r, c), power)).collect();
        grid.values.push(row);
    }
    Ok(grid)
}
