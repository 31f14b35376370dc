//! `key = value` configuration files.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is optional;
//! unknown keys and out-of-range values are rejected.

use chrono::NaiveDate;
use thiserror::Error;

use crate::clock::{DailyWindow, TimeOfDay};
use crate::cluster::InternalSimilarity;
use crate::preprocess::MedianOrder;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`")]
    Syntax { line: usize },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: invalid value `{value}` for `{key}`")]
    InvalidValue { line: usize, key: String, value: String },
    #[error("`{key}` = {value} outside allowed range {range}")]
    OutOfRange { key: &'static str, value: String, range: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

pub fn parse_key_values(text: &str) -> Result<Vec<Entry>, ConfigError> {
    let mut entries = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        entries.push(Entry { line: i + 1, key: key.to_string(), value: value.trim().to_string() });
    }
    Ok(entries)
}

/// Every tunable constant of the pipeline, with the defaults used by the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub step_minutes: u32,
    pub min_total_slots: u32,
    pub median_window: usize,
    pub median_order: MedianOrder,
    pub service_window: DailyWindow,
    pub holidays: Vec<NaiveDate>,
    pub global_min_slots: u64,
    pub baseline_time: TimeOfDay,
    pub idw_power: f64,
    pub internal_similarity: InternalSimilarity,
    pub ungrouped_agreement: f64,
    pub kmeans_max_iter: usize,
    pub morning_window: DailyWindow,
    pub route_threshold: f64,
    pub coupling_score: f64,
    pub role_threshold: f64,
    pub speed_kmh: f64,
    pub lognormal_sigma: f64,
    pub fit_tol: f64,
    pub fit_max_iter: usize,
    pub seed: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            step_minutes: 2,
            min_total_slots: 10,
            median_window: 3,
            median_order: MedianOrder::AverageThenFilter,
            service_window: DailyWindow::service(),
            holidays: vec![NaiveDate::from_ymd_opt(2008, 6, 24).expect("valid date")],
            global_min_slots: 8000,
            baseline_time: TimeOfDay::hm(5, 0),
            idw_power: 2.0,
            internal_similarity: InternalSimilarity::Separation,
            ungrouped_agreement: 0.5,
            kmeans_max_iter: 100,
            morning_window: DailyWindow::morning(),
            route_threshold: 0.03,
            coupling_score: 0.5,
            role_threshold: 3.0,
            speed_kmh: 25.0,
            lognormal_sigma: 0.5,
            fit_tol: 1e-4,
            fit_max_iter: 500,
            seed: None,
        }
    }
}

fn parse_value<T: std::str::FromStr>(e: &Entry) -> Result<T, ConfigError> {
    e.value
        .parse()
        .map_err(|_| ConfigError::InvalidValue { line: e.line, key: e.key.clone(), value: e.value.clone() })
}

fn check<T: PartialOrd + ToString>(key: &'static str, v: T, lo: T, hi: T, range: &'static str) -> Result<(), ConfigError> {
    if v < lo || v > hi {
        return Err(ConfigError::OutOfRange { key, value: v.to_string(), range });
    }
    Ok(())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        for e in parse_key_values(text)? {
            match e.key.as_str() {
                "step_minutes" => cfg.step_minutes = parse_value(&e)?,
                "min_total_slots" => cfg.min_total_slots = parse_value(&e)?,
                "median_window" => cfg.median_window = parse_value(&e)?,
                "median_order" => cfg.median_order = parse_value(&e)?,
                "service_window" => cfg.service_window = parse_value(&e)?,
                "holidays" => {
                    cfg.holidays = e
                        .value
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(|s| {
                            NaiveDate::parse_from_str(s, "%Y-%m-%d").map_err(|_| ConfigError::InvalidValue {
                                line: e.line,
                                key: e.key.clone(),
                                value: s.to_string(),
                            })
                        })
                        .collect::<Result<_, _>>()?
                }
                "global_min_slots" => cfg.global_min_slots = parse_value(&e)?,
                "baseline_time" => cfg.baseline_time = parse_value(&e)?,
                "idw_power" => cfg.idw_power = parse_value(&e)?,
                "internal_similarity" => cfg.internal_similarity = parse_value(&e)?,
                "ungrouped_agreement" => cfg.ungrouped_agreement = parse_value(&e)?,
                "kmeans_max_iter" => cfg.kmeans_max_iter = parse_value(&e)?,
                "morning_window" => cfg.morning_window = parse_value(&e)?,
                "route_threshold" => cfg.route_threshold = parse_value(&e)?,
                "coupling_score" => cfg.coupling_score = parse_value(&e)?,
                "role_threshold" => cfg.role_threshold = parse_value(&e)?,
                "speed_kmh" => cfg.speed_kmh = parse_value(&e)?,
                "lognormal_sigma" => cfg.lognormal_sigma = parse_value(&e)?,
                "fit_tol" => cfg.fit_tol = parse_value(&e)?,
                "fit_max_iter" => cfg.fit_max_iter = parse_value(&e)?,
                "seed" => cfg.seed = Some(parse_value(&e)?),
                _ => return Err(ConfigError::UnknownKey { line: e.line, key: e.key }),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check("step_minutes", self.step_minutes, 1, 60, "[1, 60]")?;
        if 1440 % self.step_minutes != 0 {
            return Err(ConfigError::OutOfRange {
                key: "step_minutes",
                value: self.step_minutes.to_string(),
                range: "divisors of 1440",
            });
        }
        check("min_total_slots", self.min_total_slots, 0, 1000, "[0, 1000]")?;
        check("median_window", self.median_window, 1, 99, "odd, [1, 99]")?;
        if self.median_window.is_multiple_of(2) {
            return Err(ConfigError::OutOfRange {
                key: "median_window",
                value: self.median_window.to_string(),
                range: "odd, [1, 99]",
            });
        }
        check("global_min_slots", self.global_min_slots, 0, 10_000_000, "[0, 1e7]")?;
        check("idw_power", self.idw_power, 0.1, 10.0, "[0.1, 10]")?;
        check("ungrouped_agreement", self.ungrouped_agreement, 0.0, 1.0, "[0, 1]")?;
        check("kmeans_max_iter", self.kmeans_max_iter, 1, 100_000, "[1, 1e5]")?;
        check("route_threshold", self.route_threshold, 0.0, 1.0, "[0, 1]")?;
        check("coupling_score", self.coupling_score, -1.0, 1.0, "[-1, 1]")?;
        check("role_threshold", self.role_threshold, 0.0, 1000.0, "[0, 1000]")?;
        check("speed_kmh", self.speed_kmh, 1.0, 100.0, "[1, 100]")?;
        check("lognormal_sigma", self.lognormal_sigma, 0.05, 5.0, "[0.05, 5]")?;
        check("fit_tol", self.fit_tol, 1e-14, 1.0, "[1e-14, 1]")?;
        check("fit_max_iter", self.fit_max_iter, 1, 1_000_000, "[1, 1e6]")?;
        Ok(())
    }

    pub fn step(&self) -> chrono::Duration {
        chrono::Duration::minutes(i64::from(self.step_minutes))
    }
}
