//! Availability forecasts: persistence and cycle-gradient models, and their
//! mean absolute error against observed data at a set of offsets.

use std::collections::BTreeMap;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, Utc, Weekday};
use thiserror::Error;

use crate::clock::TimeOfDay;
use crate::cycles::{station_cycle, CycleClass, CycleError, CycleOptions, DailyCycle};
use crate::preprocess::{classify_day, BinGrid, DayProfile, HolidayCalendar, StationDays};

#[derive(Debug, Error, PartialEq)]
pub enum PredictError {
    #[error("no data left to build a cycle model")]
    InsufficientData,
    #[error("offsets must be positive multiples of the {0}-second bin")]
    BadOffset(u32),
    #[error(transparent)]
    Cycle(#[from] CycleError),
}

/// Which days feed the cycle used for a given date.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scheme {
    AllOtherDays,
    SameWeekday,
    WeekdayWeekendSplit,
}

impl Scheme {
    pub const ALL: [Scheme; 3] = [Scheme::AllOtherDays, Scheme::SameWeekday, Scheme::WeekdayWeekendSplit];

    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::AllOtherDays => "all-other-days",
            Scheme::SameWeekday => "same-weekday",
            Scheme::WeekdayWeekendSplit => "weekday-weekend",
        }
    }

    pub fn class_of(self, date: NaiveDate, calendar: &HolidayCalendar) -> CycleClass {
        match self {
            Scheme::AllOtherDays => CycleClass::All,
            Scheme::SameWeekday => CycleClass::Weekday(date.weekday()),
            Scheme::WeekdayWeekendSplit => CycleClass::Day(classify_day(date, calendar)),
        }
    }

    fn classes(self) -> Vec<CycleClass> {
        use crate::preprocess::DayClass;
        match self {
            Scheme::AllOtherDays => vec![CycleClass::All],
            Scheme::SameWeekday => [Weekday::Mon, Weekday::Tue, Weekday::Wed, Weekday::Thu, Weekday::Fri, Weekday::Sat, Weekday::Sun]
                .into_iter()
                .map(CycleClass::Weekday)
                .collect(),
            Scheme::WeekdayWeekendSplit => vec![CycleClass::Day(DayClass::Weekday), CycleClass::Day(DayClass::Weekend)],
        }
    }
}

impl FromStr for Scheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scheme::ALL
            .into_iter()
            .find(|x| x.as_str() == s.trim())
            .ok_or_else(|| format!("unknown scheme `{s}` (all-other-days|same-weekday|weekday-weekend)"))
    }
}

fn class_key(class: CycleClass) -> String {
    class.label()
}

/// Station cycles per class, built without `excluded_day`.
#[derive(Debug, Clone, PartialEq)]
pub struct CycleModel {
    pub scheme: Scheme,
    pub excluded_day: Option<NaiveDate>,
    pub calendar: HolidayCalendar,
    pub cycles: BTreeMap<(String, String), DailyCycle>,
}

impl CycleModel {
    pub fn cycle_for(&self, station_id: &str, date: NaiveDate) -> Option<&DailyCycle> {
        let class = self.scheme.class_of(date, &self.calendar);
        self.cycles.get(&(station_id.to_string(), class_key(class)))
    }
}

fn days_without(days: &[DayProfile], excluded: Option<NaiveDate>) -> Vec<DayProfile> {
    days.iter().filter(|d| Some(d.date) != excluded).cloned().collect()
}

fn build_classes(
    stations: &[StationDays],
    bins: BinGrid,
    scheme: Scheme,
    classes: &[CycleClass],
    excluded_day: Option<NaiveDate>,
    calendar: &HolidayCalendar,
    opts: &CycleOptions,
) -> Result<CycleModel, PredictError> {
    let mut cycles = BTreeMap::new();
    for st in stations {
        let days = days_without(&st.days, excluded_day);
        for &class in classes {
            match station_cycle(&st.station_id, &days, bins, class, calendar, opts) {
                Ok(c) => {
                    cycles.insert((st.station_id.clone(), class_key(class)), c);
                }
                Err(CycleError::NoMatchingDays) => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
    if cycles.is_empty() {
        return Err(PredictError::InsufficientData);
    }
    Ok(CycleModel { scheme, excluded_day, calendar: calendar.clone(), cycles })
}

/// Cycles for every class of `scheme`, leaving out `excluded_day`.
pub fn build_cycle_model(
    stations: &[StationDays],
    bins: BinGrid,
    scheme: Scheme,
    excluded_day: Option<NaiveDate>,
    calendar: &HolidayCalendar,
    opts: &CycleOptions,
) -> Result<CycleModel, PredictError> {
    build_classes(stations, bins, scheme, &scheme.classes(), excluded_day, calendar, opts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ModelTag {
    Persistence,
    Gradient(Scheme),
    Oracle,
}

impl ModelTag {
    pub fn name(self) -> &'static str {
        match self {
            ModelTag::Persistence => "persistence",
            ModelTag::Gradient(_) => "gradient",
            ModelTag::Oracle => "oracle",
        }
    }

    pub fn scheme(self) -> &'static str {
        match self {
            ModelTag::Gradient(s) => s.as_str(),
            _ => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub station_id: String,
    pub issue_time: DateTime<Utc>,
    pub offset: Duration,
    pub predicted_bikes: f64,
    pub model: ModelTag,
    /// Set when the gradient model fell back to persistence.
    pub fallback: bool,
}

pub fn predict_persistence(station_id: &str, current_bikes: f64, issue_time: DateTime<Utc>, offset: Duration) -> Forecast {
    Forecast {
        station_id: station_id.to_string(),
        issue_time,
        offset,
        predicted_bikes: current_bikes.max(0.0),
        model: ModelTag::Persistence,
        fallback: false,
    }
}

/// `current + mean(t + offset) - mean(t)`, clamped to `[0, capacity]`. Falls
/// back to persistence when either bin is missing or outside the cycle.
pub fn gradient_step(current: f64, cycle: Option<&DailyCycle>, from: TimeOfDay, to: Option<TimeOfDay>, capacity: f64) -> (f64, bool) {
    let delta = cycle.zip(to).and_then(|(c, to)| Some(c.mean_at(to)? - c.mean_at(from)?));
    match delta {
        Some(d) => ((current + d).clamp(0.0, capacity.max(0.0)), false),
        None => (current.clamp(0.0, capacity.max(0.0)), true),
    }
}

pub fn predict_gradient(
    station_id: &str,
    current_bikes: f64,
    capacity: f64,
    issue_time: DateTime<Utc>,
    offset: Duration,
    model: &CycleModel,
) -> Forecast {
    let target = issue_time + offset;
    let cycle = model.cycle_for(station_id, issue_time.date_naive());
    let to = (target.date_naive() == issue_time.date_naive()).then(|| TimeOfDay::of(target));
    let (predicted_bikes, fallback) = gradient_step(current_bikes, cycle, TimeOfDay::of(issue_time), to, capacity);
    Forecast {
        station_id: station_id.to_string(),
        issue_time,
        offset,
        predicted_bikes,
        model: ModelTag::Gradient(model.scheme),
        fallback,
    }
}

/// One row of the error table.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRow {
    pub model: ModelTag,
    pub offset_min: i64,
    pub mae: f64,
    /// Mean of `predicted - actual`.
    pub bias: f64,
    pub n_points: u64,
    /// Points where the gradient model fell back to persistence.
    pub fallbacks: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct Acc {
    abs: f64,
    signed: f64,
    n: u64,
    fallbacks: u64,
}

/// Mean absolute error of each model at each offset over every station, day
/// and issue bin where both the current and the actual future value exist.
/// Gradient models are rebuilt for every day without that day.
pub fn evaluate(
    stations: &[StationDays],
    bins: BinGrid,
    calendar: &HolidayCalendar,
    opts: &CycleOptions,
    models: &[ModelTag],
    offsets: &[Duration],
) -> Result<Vec<ErrorRow>, PredictError> {
    evaluate_against(stations, stations, bins, calendar, opts, models, offsets)
}

/// Like [`evaluate`], but the oracle predicts the value found in `reference`
/// (same stations and days) rather than the observed one.
pub fn evaluate_against(
    stations: &[StationDays],
    reference: &[StationDays],
    bins: BinGrid,
    calendar: &HolidayCalendar,
    opts: &CycleOptions,
    models: &[ModelTag],
    offsets: &[Duration],
) -> Result<Vec<ErrorRow>, PredictError> {
    let step = i64::from(bins.step_secs);
    let offset_bins: Vec<usize> = offsets
        .iter()
        .map(|o| {
            let s = o.num_seconds();
            if s <= 0 || s % step != 0 {
                Err(PredictError::BadOffset(bins.step_secs))
            } else {
                Ok((s / step) as usize)
            }
        })
        .collect::<Result<_, _>>()?;

    let mut dates: Vec<NaiveDate> = stations.iter().flat_map(|s| s.days.iter().map(|d| d.date)).collect();
    dates.sort();
    dates.dedup();

    let mut acc = vec![vec![Acc::default(); offsets.len()]; models.len()];
    for &date in &dates {
        for (mi, &tag) in models.iter().enumerate() {
            let model = match tag {
                ModelTag::Gradient(scheme) => {
                    let class = scheme.class_of(date, calendar);
                    match build_classes(stations, bins, scheme, &[class], Some(date), calendar, opts) {
                        Ok(m) => Some(m),
                        Err(PredictError::InsufficientData) => None,
                        Err(e) => return Err(e),
                    }
                }
                _ => None,
            };
            for st in stations {
                let Some(day) = st.day(date) else { continue };
                let truth = reference.iter().find(|r| r.station_id == st.station_id).and_then(|r| r.day(date));
                let cycle = model.as_ref().and_then(|m| m.cycle_for(&st.station_id, date));
                for (oi, &ob) in offset_bins.iter().enumerate() {
                    let a = &mut acc[mi][oi];
                    for b in 0..bins.len.saturating_sub(ob) {
                        let (Some(current), Some(actual)) = (day.bikes[b], day.bikes[b + ob]) else { continue };
                        let capacity = day.total_slots[b].unwrap_or(current);
                        let (predicted, fallback) = match tag {
                            ModelTag::Persistence => (current, false),
                            ModelTag::Oracle => (truth.and_then(|t| t.bikes[b + ob]).unwrap_or(actual), false),
                            ModelTag::Gradient(_) => {
                                gradient_step(current, cycle, bins.time_of(b), Some(bins.time_of(b + ob)), capacity)
                            }
                        };
                        a.abs += (predicted - actual).abs();
                        a.signed += predicted - actual;
                        a.n += 1;
                        a.fallbacks += u64::from(fallback);
                    }
                }
            }
        }
    }

    let mut rows = Vec::new();
    for (mi, &model) in models.iter().enumerate() {
        for (oi, o) in offsets.iter().enumerate() {
            let a = acc[mi][oi];
            let n = a.n.max(1) as f64;
            rows.push(ErrorRow {
                model,
                offset_min: o.num_minutes(),
                mae: if a.n == 0 { f64::NAN } else { a.abs / n },
                bias: if a.n == 0 { f64::NAN } else { a.signed / n },
                n_points: a.n,
                fallbacks: a.fallbacks,
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;
    use proptest::prelude::*;

    fn bins(n: usize) -> BinGrid {
        BinGrid { start: TimeOfDay::hm(5, 0), step_secs: 120, len: n }
    }

    fn d(day: u32) -> NaiveDate {
        NaiveDate::from_ymd_opt(2008, 5, day).unwrap()
    }

    fn day(date: NaiveDate, v: &[f64]) -> DayProfile {
        DayProfile { date, bikes: v.iter().copied().map(Some).collect(), total_slots: vec![Some(20.0); v.len()] }
    }

    fn station(id: &str, days: Vec<DayProfile>) -> StationDays {
        StationDays { station_id: id.into(), days }
    }

    fn ts(day: u32, h: u32, m: u32) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2008, 5, day, h, m, 0).unwrap()
    }

    #[test]
    fn persistence_examples() {
        let t = ts(15, 9, 0);
        assert_eq!(predict_persistence("1", 5.0, t, Duration::minutes(10)).predicted_bikes, 5.0);
        assert_eq!(predict_persistence("1", 0.0, t, Duration::hours(4)).predicted_bikes, 0.0);
        assert_eq!(predict_persistence("1", 7.0, t, Duration::zero()).predicted_bikes, 7.0);
    }

    fn model_with(values: Vec<f64>) -> CycleModel {
        let n = values.len();
        let st = vec![station("1", vec![day(d(8), &values)])];
        let opts = CycleOptions { median_window: 1, ..Default::default() };
        let m = build_cycle_model(&st, bins(n), Scheme::AllOtherDays, None, &HolidayCalendar::empty(), &opts).unwrap();
        assert_eq!(m.cycles.len(), 1);
        m
    }

    #[test]
    fn gradient_examples() {
        // 05:00 + 60 bins = 07:00; 07:00 + 2 h = bin 120
        let mut v = vec![8.0; 200];
        for x in v.iter_mut().skip(120) {
            *x = 14.0;
        }
        let m = model_with(v);
        let t = ts(15, 7, 0);
        let f = predict_gradient("1", 5.0, 20.0, t, Duration::hours(2), &m);
        assert_eq!((f.predicted_bikes, f.fallback), (11.0, false));

        let mut down = vec![8.0; 200];
        for x in down.iter_mut().skip(120) {
            *x = 2.0;
        }
        let m = model_with(down);
        assert_eq!(predict_gradient("1", 1.0, 20.0, t, Duration::hours(2), &m).predicted_bikes, 0.0);
        assert_eq!(predict_gradient("1", 19.0, 20.0, t, Duration::minutes(2), &m).predicted_bikes, 19.0);

        let flat = model_with(vec![6.0; 200]);
        for mins in [10, 60, 120] {
            assert_eq!(predict_gradient("1", 4.0, 20.0, t, Duration::minutes(mins), &flat).predicted_bikes, 4.0);
        }
        // beyond the cycle's bins
        let late = predict_gradient("1", 4.0, 20.0, ts(15, 11, 0), Duration::hours(3), &flat);
        assert!(late.fallback);
        assert_eq!(late.predicted_bikes, 4.0);
        assert!(predict_gradient("unknown", 4.0, 20.0, t, Duration::hours(1), &flat).fallback);
    }

    #[test]
    fn leave_one_out_models() {
        // 2008-05-06, -13, -20 are Tuesdays
        let st = vec![station("1", vec![day(d(6), &[1.0; 4]), day(d(7), &[9.0; 4]), day(d(13), &[3.0; 4]), day(d(20), &[5.0; 4])])];
        let cal = HolidayCalendar::empty();
        let opts = CycleOptions::default();
        let m = build_cycle_model(&st, bins(4), Scheme::SameWeekday, Some(d(20)), &cal, &opts).unwrap();
        let tue = m.cycle_for("1", d(20)).unwrap();
        assert_eq!(tue.mean, vec![Some(2.0); 4]);
        assert_eq!(tue.days, 2);

        let two = vec![station("1", vec![day(d(6), &[1.0; 4]), day(d(7), &[9.0; 4])])];
        let m = build_cycle_model(&two, bins(4), Scheme::AllOtherDays, Some(d(6)), &cal, &opts).unwrap();
        assert_eq!(m.cycle_for("1", d(6)).unwrap().mean, vec![Some(9.0); 4]);

        let one = vec![station("1", vec![day(d(6), &[1.0; 4])])];
        assert_eq!(
            build_cycle_model(&one, bins(4), Scheme::AllOtherDays, Some(d(6)), &cal, &opts),
            Err(PredictError::InsufficientData)
        );
    }

    #[test]
    fn excluded_day_does_not_leak() {
        let cal = HolidayCalendar::empty();
        let opts = CycleOptions::default();
        let a = vec![station("1", vec![day(d(6), &[1.0, 2.0, 3.0]), day(d(7), &[4.0, 4.0, 4.0])])];
        let mut b = a.clone();
        b[0].days[1].bikes = vec![Some(17.0), None, Some(0.0)];
        for scheme in Scheme::ALL {
            let ma = build_cycle_model(&a, bins(3), scheme, Some(d(7)), &cal, &opts).unwrap();
            let mb = build_cycle_model(&b, bins(3), scheme, Some(d(7)), &cal, &opts).unwrap();
            assert_eq!(ma, mb);
        }
    }

    #[test]
    fn evaluation_baselines() {
        let cal = HolidayCalendar::empty();
        let opts = CycleOptions::default();
        let constant: Vec<StationDays> = vec![station("1", (5..10).map(|i| day(d(i), &[7.0; 30])).collect())];
        let tags = [ModelTag::Persistence, ModelTag::Oracle, ModelTag::Gradient(Scheme::AllOtherDays)];
        let offs = [Duration::minutes(10), Duration::minutes(20)];
        let rows = evaluate(&constant, bins(30), &cal, &opts, &tags, &offs).unwrap();
        assert_eq!(rows.len(), 6);
        for r in &rows {
            assert_eq!(r.mae, 0.0, "{r:?}");
            assert_eq!(r.n_points, 5 * (30 - r.offset_min as u64 / 2), "{r:?}");
        }
        assert_eq!(rows[0].offset_min, 10);

        let ramp: Vec<f64> = (0..30).map(f64::from).map(|x| x.min(20.0)).collect();
        let rising: Vec<StationDays> = vec![station("1", (5..10).map(|i| day(d(i), &ramp)).collect())];
        let rows = evaluate(&rising, bins(30), &cal, &CycleOptions { median_window: 1, ..opts }, &tags, &offs[..1]).unwrap();
        assert!(rows[0].mae > 0.0);
        assert_eq!(rows[1].mae, 0.0);
        assert_eq!(rows[2].mae, 0.0);
        assert!(rows[0].bias < 0.0);

        assert_eq!(evaluate(&rising, bins(30), &cal, &opts, &tags, &[Duration::minutes(3)]), Err(PredictError::BadOffset(120)));
    }

    proptest! {
        #[test]
        fn forecasts_stay_within_capacity(current in 0.0f64..40.0, cap in 0.0f64..40.0, a in 0.0f64..40.0, b in 0.0f64..40.0) {
            let m = model_with(vec![a, a, b, b]);
            let c = m.cycle_for("1", d(15));
            let (p, _) = gradient_step(current.min(cap), c, TimeOfDay::hm(5, 0), Some(TimeOfDay::hm(5, 6)), cap);
            prop_assert!((0.0..=cap).contains(&p));
        }

        #[test]
        fn zero_offset_matches_persistence(current in 0.0f64..30.0, v in proptest::collection::vec(0.0f64..30.0, 5), bin in 0usize..5) {
            let m = model_with(v);
            let t = TimeOfDay::from_seconds(5 * 3600 + 120 * bin as u32).unwrap();
            let (p, _) = gradient_step(current, m.cycle_for("1", d(15)), t, Some(t), 30.0);
            prop_assert_eq!(p, current);
        }

        #[test]
        fn noise_never_helps_the_oracle(noise in proptest::collection::vec(-3.0f64..3.0, 20)) {
            let clean: Vec<StationDays> = vec![station("1", (5..9).map(|i| day(d(i), &[4.0, 5.0, 6.0, 7.0, 8.0])).collect())];
            let mut noisy = clean.clone();
            for (k, x) in noisy[0].days.iter_mut().flat_map(|dd| dd.bikes.iter_mut()).enumerate() {
                *x = x.map(|v| v + noise[k]);
            }
            let cal = HolidayCalendar::empty();
            let opts = CycleOptions::default();
            let offs = [Duration::minutes(2)];
            let base = evaluate_against(&clean, &clean, bins(5), &cal, &opts, &[ModelTag::Oracle], &offs).unwrap();
            let corrupted = evaluate_against(&noisy, &clean, bins(5), &cal, &opts, &[ModelTag::Oracle], &offs).unwrap();
            prop_assert!(corrupted[0].mae >= base[0].mae);
        }
    }

    #[test]
    fn scheme_names() {
        for s in Scheme::ALL {
            assert_eq!(s.as_str().parse::<Scheme>(), Ok(s));
        }
        assert!("weekly".parse::<Scheme>().is_err());
    }
}
