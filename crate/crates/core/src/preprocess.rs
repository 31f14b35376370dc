//! Regular-grid station series, capacity filtering, median smoothing and
//! day classification.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use thiserror::Error;

use crate::clock::{midnight, DailyWindow, TimeOfDay};
use crate::ingest::Snapshot;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum PreprocessError {
    #[error("station `{0}` does not appear in any snapshot")]
    UnknownStation(String),
    #[error("median window must be odd and positive, got {0}")]
    EvenWindow(usize),
    #[error("grid step must be positive")]
    NonPositiveStep,
}

/// The regular time grid `[start, end)` sampled every `step`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub step: Duration,
}

impl GridSpec {
    pub fn new(start: DateTime<Utc>, end: DateTime<Utc>, step: Duration) -> Result<Self, PreprocessError> {
        if step <= Duration::zero() {
            return Err(PreprocessError::NonPositiveStep);
        }
        Ok(Self { start, end, step })
    }

    /// Whole UTC days from the first snapshot's midnight to the midnight after
    /// the last snapshot.
    pub fn whole_days(snapshots: &[Snapshot], step: Duration) -> Result<Option<Self>, PreprocessError> {
        let (Some(first), Some(last)) = (snapshots.first(), snapshots.last()) else {
            return Ok(None);
        };
        let start = midnight(first.timestamp.date_naive());
        let end = midnight(last.timestamp.date_naive()) + Duration::days(1);
        Self::new(start, end, step).map(Some)
    }

    /// `ceil((end - start) / step)`, zero for an empty or inverted range.
    pub fn len(&self) -> usize {
        let span = (self.end - self.start).num_milliseconds();
        let step = self.step.num_milliseconds();
        if span <= 0 {
            0
        } else {
            ((span + step - 1) / step) as usize
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, ts: DateTime<Utc>) -> Option<usize> {
        if ts < self.start || ts >= self.end {
            return None;
        }
        Some(((ts - self.start).num_milliseconds() / self.step.num_milliseconds()) as usize)
    }
}

/// Per-station series on a regular grid; `None` marks a missing sample.
#[derive(Debug, Clone, PartialEq)]
pub struct StationSeries {
    pub station_id: String,
    pub grid_start: DateTime<Utc>,
    pub step: Duration,
    pub bikes: Vec<Option<u32>>,
    pub total_slots: Vec<Option<u32>>,
}

impl StationSeries {
    pub fn len(&self) -> usize {
        self.bikes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bikes.is_empty()
    }

    pub fn time_at(&self, i: usize) -> DateTime<Utc> {
        self.grid_start + self.step * i as i32
    }

    fn blank(station_id: &str, grid: &GridSpec) -> Self {
        let n = grid.len();
        Self {
            station_id: station_id.to_string(),
            grid_start: grid.start,
            step: grid.step,
            bikes: vec![None; n],
            total_slots: vec![None; n],
        }
    }
}

/// Samples one station onto `grid`. Each grid point holds the latest
/// observation in `[t, t + step)`; snapshots are visited in time order.
pub fn regularize(snapshots: &[Snapshot], station_id: &str, grid: &GridSpec) -> Result<StationSeries, PreprocessError> {
    let mut series = StationSeries::blank(station_id, grid);
    let mut seen = false;
    for snap in snapshots {
        let Some(obs) = snap.get(station_id) else { continue };
        seen = true;
        if let Some(i) = grid.index_of(snap.timestamp) {
            series.bikes[i] = Some(obs.bikes);
            series.total_slots[i] = Some(obs.capacity());
        }
    }
    if !seen {
        return Err(PreprocessError::UnknownStation(station_id.to_string()));
    }
    Ok(series)
}

/// [`regularize`] for every station in one pass.
pub fn regularize_all(snapshots: &[Snapshot], grid: &GridSpec) -> BTreeMap<String, StationSeries> {
    let mut out: BTreeMap<String, StationSeries> = BTreeMap::new();
    for snap in snapshots {
        let idx = grid.index_of(snap.timestamp);
        for obs in &snap.observations {
            let series = out
                .entry(obs.station_id.clone())
                .or_insert_with(|| StationSeries::blank(&obs.station_id, grid));
            if let Some(i) = idx {
                series.bikes[i] = Some(obs.bikes);
                series.total_slots[i] = Some(obs.capacity());
            }
        }
    }
    out
}

/// Marks samples whose total slots fall below `min_total` as missing.
pub fn filter_low_capacity(series: &StationSeries, min_total: u32) -> StationSeries {
    let mut out = series.clone();
    for (b, t) in out.bikes.iter_mut().zip(out.total_slots.iter_mut()) {
        if matches!(*t, Some(total) if total < min_total) {
            *b = None;
            *t = None;
        }
    }
    out
}

/// Marks samples outside the daily `window` as missing.
pub fn clip_service_window(series: &StationSeries, window: DailyWindow) -> StationSeries {
    let mut out = series.clone();
    for i in 0..out.len() {
        if !window.contains(TimeOfDay::of(series.time_at(i))) {
            out.bikes[i] = None;
            out.total_slots[i] = None;
        }
    }
    out
}

fn median_of(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        (buf[n / 2 - 1] + buf[n / 2]) / 2.0
    }
}

/// Centered running median.
///
/// The window shrinks symmetrically at the edges, so the first and last
/// samples pass through unchanged. Missing neighbours are left out of the
/// median; a missing sample stays missing.
pub fn median_filter(values: &[Option<f64>], window: usize) -> Result<Vec<Option<f64>>, PreprocessError> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(PreprocessError::EvenWindow(window));
    }
    let half = window / 2;
    let n = values.len();
    let mut buf = Vec::with_capacity(window);
    Ok((0..n)
        .map(|i| {
            values[i]?;
            let h = half.min(i).min(n - 1 - i);
            buf.clear();
            buf.extend(values[i - h..=i + h].iter().flatten());
            Some(median_of(&mut buf))
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum DayClass {
    Weekday,
    Weekend,
}

impl DayClass {
    pub fn as_str(self) -> &'static str {
        match self {
            DayClass::Weekday => "weekday",
            DayClass::Weekend => "weekend",
        }
    }
}

impl FromStr for DayClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "weekday" => Ok(DayClass::Weekday),
            "weekend" => Ok(DayClass::Weekend),
            _ => Err(format!("unknown day class `{s}` (weekday|weekend)")),
        }
    }
}

/// Dates that behave like a weekend regardless of weekday.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HolidayCalendar {
    holidays: BTreeSet<NaiveDate>,
}

impl Default for HolidayCalendar {
    fn default() -> Self {
        Self::new([NaiveDate::from_ymd_opt(2008, 6, 24).expect("valid date")])
    }
}

impl HolidayCalendar {
    pub fn new<I: IntoIterator<Item = NaiveDate>>(dates: I) -> Self {
        Self { holidays: dates.into_iter().collect() }
    }

    pub fn empty() -> Self {
        Self { holidays: BTreeSet::new() }
    }

    pub fn is_holiday(&self, date: NaiveDate) -> bool {
        self.holidays.contains(&date)
    }
}

pub fn classify_day(date: NaiveDate, calendar: &HolidayCalendar) -> DayClass {
    if matches!(date.weekday(), Weekday::Sat | Weekday::Sun) || calendar.is_holiday(date) {
        DayClass::Weekend
    } else {
        DayClass::Weekday
    }
}

/// Whether daily profiles are averaged before or after median smoothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MedianOrder {
    #[default]
    AverageThenFilter,
    FilterThenAverage,
}

impl FromStr for MedianOrder {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "average-then-filter" => Ok(MedianOrder::AverageThenFilter),
            "filter-then-average" => Ok(MedianOrder::FilterThenAverage),
            _ => Err(format!("unknown median order `{s}`")),
        }
    }
}

/// Time-of-day bins shared by every daily profile and cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinGrid {
    pub start: TimeOfDay,
    pub step_secs: u32,
    pub len: usize,
}

impl BinGrid {
    pub fn new(window: DailyWindow, step: Duration) -> Result<Self, PreprocessError> {
        let step_secs = u32::try_from(step.num_seconds()).map_err(|_| PreprocessError::NonPositiveStep)?;
        if step_secs == 0 {
            return Err(PreprocessError::NonPositiveStep);
        }
        let len = window.len_seconds().div_ceil(step_secs) as usize;
        Ok(Self { start: window.start, step_secs, len })
    }

    /// Bin containing `t`, if it falls inside the grid.
    pub fn bin_of(&self, t: TimeOfDay) -> Option<usize> {
        let offset = t.seconds().checked_sub(self.start.seconds())?;
        let bin = (offset / self.step_secs) as usize;
        (bin < self.len).then_some(bin)
    }

    /// Bin starting exactly at `t`.
    pub fn exact_bin(&self, t: TimeOfDay) -> Option<usize> {
        let offset = t.seconds().checked_sub(self.start.seconds())?;
        (offset % self.step_secs == 0).then_some(())?;
        self.bin_of(t)
    }

    pub fn time_of(&self, bin: usize) -> TimeOfDay {
        TimeOfDay::from_seconds(self.start.seconds() + bin as u32 * self.step_secs).expect("bin inside day")
    }
}

/// One station-day on a [`BinGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct DayProfile {
    pub date: NaiveDate,
    pub bikes: Vec<Option<f64>>,
    pub total_slots: Vec<Option<f64>>,
}

impl DayProfile {
    pub fn present(&self) -> usize {
        self.bikes.iter().flatten().count()
    }
}

/// Cuts a series into per-date profiles on `bins`. Days without any present
/// sample are dropped; when several samples fall into one bin the later wins.
pub fn split_days(series: &StationSeries, bins: &BinGrid) -> Vec<DayProfile> {
    let mut days: BTreeMap<NaiveDate, DayProfile> = BTreeMap::new();
    for i in 0..series.len() {
        let Some(bikes) = series.bikes[i] else { continue };
        let ts = series.time_at(i);
        let Some(bin) = bins.bin_of(TimeOfDay::of(ts)) else { continue };
        let date = ts.date_naive();
        let day = days.entry(date).or_insert_with(|| DayProfile {
            date,
            bikes: vec![None; bins.len],
            total_slots: vec![None; bins.len],
        });
        day.bikes[bin] = Some(f64::from(bikes));
        day.total_slots[bin] = series.total_slots[i].map(f64::from);
    }
    days.into_values().collect()
}

/// Filtered daily profiles of one station.
#[derive(Debug, Clone, PartialEq)]
pub struct StationDays {
    pub station_id: String,
    pub days: Vec<DayProfile>,
}

impl StationDays {
    pub fn day(&self, date: NaiveDate) -> Option<&DayProfile> {
        self.days.binary_search_by_key(&date, |d| d.date).ok().map(|i| &self.days[i])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrepareOptions {
    pub step: Duration,
    pub min_total_slots: u32,
    pub service_window: DailyWindow,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self { step: Duration::minutes(2), min_total_slots: 10, service_window: DailyWindow::service() }
    }
}

/// Regularize, drop low-capacity samples, clip to service hours and split
/// into days, for every station.
pub fn prepare_station_days(snapshots: &[Snapshot], opts: &PrepareOptions) -> Result<Vec<StationDays>, PreprocessError> {
    let Some(grid) = GridSpec::whole_days(snapshots, opts.step)? else {
        return Ok(Vec::new());
    };
    let bins = BinGrid::new(opts.service_window, opts.step)?;
    Ok(regularize_all(snapshots, &grid)
        .into_values()
        .map(|series| {
            let filtered = filter_low_capacity(&series, opts.min_total_slots);
            let clipped = clip_service_window(&filtered, opts.service_window);
            StationDays { station_id: series.station_id, days: split_days(&clipped, &bins) }
        })
        .collect())
}

/// Lookup table from station id to position, used by callers that index
/// matrices by station.
pub fn index_by_id(days: &[StationDays]) -> HashMap<&str, usize> {
    days.iter().enumerate().map(|(i, d)| (d.station_id.as_str(), i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::StationObservation;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn t(h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2008, 5, 15, h, m, 0).unwrap()
    }

    fn snap(ts: DateTime<Utc>, bikes: u32, total: u32) -> Snapshot {
        Snapshot::new(
            ts,
            vec![StationObservation {
                station_id: "1".into(),
                name: "A".into(),
                latitude: 41.4,
                longitude: 2.1,
                bikes,
                free_slots: total - bikes,
            }],
        )
    }

    fn some(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn on_grid_snapshots_are_copied() {
        let snaps = vec![snap(t(8, 0), 3, 20), snap(t(8, 2), 4, 20), snap(t(8, 4), 5, 20)];
        let grid = GridSpec::new(t(8, 0), t(8, 6), Duration::minutes(2)).unwrap();
        let s = regularize(&snaps, "1", &grid).unwrap();
        assert_eq!(s.bikes, vec![Some(3), Some(4), Some(5)]);
        assert_eq!(s.total_slots, vec![Some(20); 3]);
    }

    #[test]
    fn gap_leaves_missing_samples() {
        let snaps = vec![snap(t(8, 0), 3, 20), snap(t(8, 12), 4, 20)];
        let grid = GridSpec::new(t(8, 0), t(8, 14), Duration::minutes(2)).unwrap();
        let s = regularize(&snaps, "1", &grid).unwrap();
        assert_eq!(s.bikes[0], Some(3));
        assert!(s.bikes[1..6].iter().all(Option::is_none));
        assert_eq!(s.bikes[1..6].len(), 5);
        assert_eq!(s.bikes[6], Some(4));
    }

    #[test]
    fn later_observation_wins_within_bucket() {
        let snaps = vec![snap(t(8, 0), 3, 20), Snapshot { timestamp: t(8, 0) + Duration::seconds(50), ..snap(t(8, 0), 9, 20) }];
        let grid = GridSpec::new(t(8, 0), t(8, 2), Duration::minutes(2)).unwrap();
        assert_eq!(regularize(&snaps, "1", &grid).unwrap().bikes, vec![Some(9)]);
    }

    #[test]
    fn unknown_station() {
        let grid = GridSpec::new(t(8, 0), t(8, 2), Duration::minutes(2)).unwrap();
        assert_eq!(
            regularize(&[snap(t(8, 0), 1, 20)], "x", &grid),
            Err(PreprocessError::UnknownStation("x".into()))
        );
        assert_eq!(GridSpec::new(t(8, 0), t(8, 2), Duration::zero()), Err(PreprocessError::NonPositiveStep));
    }

    #[test]
    fn low_capacity_filter() {
        let snaps: Vec<_> = [(0, 20), (2, 4), (4, 20)].iter().map(|&(m, tot)| snap(t(8, m), 2, tot)).collect();
        let grid = GridSpec::new(t(8, 0), t(8, 6), Duration::minutes(2)).unwrap();
        let s = regularize(&snaps, "1", &grid).unwrap();
        let f = filter_low_capacity(&s, 10);
        assert_eq!(f.bikes, vec![Some(2), None, Some(2)]);
        assert_eq!(filter_low_capacity(&s, 0), s);
        let constant: Vec<_> = [0, 2, 4].iter().map(|&m| snap(t(8, m), 2, 20)).collect();
        let c = regularize(&constant, "1", &grid).unwrap();
        assert_eq!(filter_low_capacity(&c, 10), c);
    }

    #[test]
    fn median_filter_examples() {
        assert_eq!(median_filter(&some(&[5.0; 4]), 3).unwrap(), some(&[5.0; 4]));
        assert_eq!(median_filter(&some(&[1.0, 9.0, 1.0]), 3).unwrap(), some(&[1.0, 1.0, 1.0]));
        let v = some(&[3.0, 1.0, 4.0, 1.0, 5.0]);
        assert_eq!(median_filter(&v, 1).unwrap(), v);
        assert_eq!(median_filter(&v, 2), Err(PreprocessError::EvenWindow(2)));
        assert_eq!(median_filter(&v, 0), Err(PreprocessError::EvenWindow(0)));
    }

    #[test]
    fn median_filter_skips_missing() {
        let v = vec![Some(1.0), None, Some(7.0), Some(3.0), None];
        // index 2: window {None, 7, 3} -> median of [7, 3] = 5
        assert_eq!(median_filter(&v, 3).unwrap(), vec![Some(1.0), None, Some(5.0), Some(5.0), None]);
    }

    #[test]
    fn day_classes() {
        let cal = HolidayCalendar::default();
        let d = |m, day| NaiveDate::from_ymd_opt(2008, m, day).unwrap();
        assert_eq!(classify_day(d(6, 24), &cal), DayClass::Weekend);
        assert_eq!(classify_day(d(6, 24), &HolidayCalendar::empty()), DayClass::Weekday);
        assert_eq!(classify_day(d(5, 15), &cal), DayClass::Weekday);
        assert_eq!(classify_day(d(5, 17), &cal), DayClass::Weekend);
        assert_eq!(classify_day(d(5, 18), &cal), DayClass::Weekend);
    }

    #[test]
    fn service_window_clipping() {
        let snaps = vec![snap(t(4, 58), 1, 20), snap(t(5, 0), 2, 20), snap(t(5, 2), 3, 20)];
        let grid = GridSpec::new(t(4, 58), t(5, 4), Duration::minutes(2)).unwrap();
        let s = regularize(&snaps, "1", &grid).unwrap();
        let c = clip_service_window(&s, DailyWindow::service());
        assert_eq!(c.bikes, vec![None, Some(2), Some(3)]);
        assert_eq!(clip_service_window(&s, DailyWindow::full_day()), s);
    }

    #[test]
    fn split_days_on_bins() {
        let snaps = vec![snap(t(5, 0), 2, 20), snap(t(5, 4), 3, 20)];
        let grid = GridSpec::whole_days(&snaps, Duration::minutes(2)).unwrap().unwrap();
        assert_eq!(grid.len(), 720);
        let s = regularize(&snaps, "1", &grid).unwrap();
        let bins = BinGrid::new(DailyWindow::service(), Duration::minutes(2)).unwrap();
        assert_eq!(bins.len, 570);
        let days = split_days(&s, &bins);
        assert_eq!(days.len(), 1);
        assert_eq!(&days[0].bikes[..3], &[Some(2.0), None, Some(3.0)]);
        assert_eq!(days[0].present(), 2);
    }

    #[test]
    fn bin_lookup() {
        let bins = BinGrid::new(DailyWindow::service(), Duration::minutes(2)).unwrap();
        assert_eq!(bins.bin_of(TimeOfDay::hm(5, 0)), Some(0));
        assert_eq!(bins.bin_of(TimeOfDay::hm(4, 59)), None);
        assert_eq!(bins.exact_bin(TimeOfDay::hm(9, 30)), Some(135));
        assert_eq!(bins.exact_bin(TimeOfDay::from_seconds(9 * 3600 + 30 * 60 + 30).unwrap()), None);
        assert_eq!(bins.time_of(135), TimeOfDay::hm(9, 30));
        assert_eq!(bins.bin_of(TimeOfDay::END_OF_DAY), None);
    }

    proptest! {
        #[test]
        fn median3_fixes_monotone(mut v in prop::collection::vec(-100.0f64..100.0, 0..40)) {
            v.sort_by(f64::total_cmp);
            let once = median_filter(&some(&v), 3).unwrap();
            prop_assert_eq!(&once, &some(&v));
            prop_assert_eq!(median_filter(&once, 3).unwrap(), once);
        }

        #[test]
        fn median3_removes_isolated_spike(base in -50.0f64..50.0, spike in -500.0f64..500.0, len in 3usize..20, at in 1usize..18) {
            let at = at.min(len - 2);
            let mut v = vec![base; len];
            v[at] = spike;
            prop_assert_eq!(median_filter(&some(&v), 3).unwrap(), some(&vec![base; len]));
        }

        #[test]
        fn capacity_filter_idempotent(totals in prop::collection::vec(prop::option::of(0u32..40), 0..50), min in 0u32..30) {
            let series = StationSeries {
                station_id: "x".into(),
                grid_start: t(5, 0),
                step: Duration::minutes(2),
                bikes: totals.iter().map(|t| t.map(|v| v / 2)).collect(),
                total_slots: totals.clone(),
            };
            let once = filter_low_capacity(&series, min);
            prop_assert_eq!(filter_low_capacity(&once, min), once);
        }

        #[test]
        fn grid_length_is_ceil(span_s in 0i64..100_000, step_s in 1i64..5000, n_obs in 0usize..30) {
            let start = t(0, 0);
            let grid = GridSpec::new(start, start + Duration::seconds(span_s), Duration::seconds(step_s)).unwrap();
            let expected = ((span_s + step_s - 1) / step_s) as usize;
            let snaps: Vec<_> = (0..=n_obs).map(|i| snap(start + Duration::seconds(i as i64 * 37), 1, 20)).collect();
            let s = regularize(&snaps, "1", &grid).unwrap();
            prop_assert_eq!(s.len(), expected);
            prop_assert_eq!(s.total_slots.len(), expected);
        }
    }
}
