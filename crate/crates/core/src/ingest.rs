//! Station-status KML parsing and the append-only snapshot store.
//!
//! A KML document carries one `Placemark` per station:
//!
//! ```text
//! <Placemark id="13">
//!   <name>Pg. Lluis Companys</name>
//!   <description>bikes=7|slots=12</description>
//!   <Point><coordinates>2.194,41.397</coordinates></Point>
//! </Placemark>
//! ```
//!
//! Snapshots persist as a flat CSV with one row per observation, see
//! [`CSV_HEADER`].

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use thiserror::Error;

use crate::clock::{format_timestamp, parse_timestamp};
use crate::config::{parse_key_values, ConfigError};
use crate::geo::LatLon;

pub const CSV_HEADER: [&str; 7] = ["timestamp", "station_id", "name", "lat", "lon", "bikes", "free_slots"];

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("malformed KML document: {0}")]
    MalformedDocument(String),
    #[error("snapshot at {new} is not after the last stored snapshot at {last}")]
    NonMonotonicTimestamp { last: DateTime<Utc>, new: DateTime<Utc> },
    #[error("station `{0}` appears more than once in one snapshot")]
    DuplicateStationInSnapshot(String),
    #[error("file not found: {0}")]
    FileNotFound(String),
    #[error("schema violation at line {line}: {message}")]
    SchemaViolation { line: u64, message: String },
    #[error("invalid limits: {0}")]
    InvalidLimits(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationObservation {
    pub station_id: String,
    pub name: String,
    pub latitude: f64,
    pub longitude: f64,
    pub bikes: u32,
    pub free_slots: u32,
}

impl StationObservation {
    pub fn capacity(&self) -> u32 {
        self.bikes + self.free_slots
    }

    pub fn location(&self) -> LatLon {
        LatLon::new(self.latitude, self.longitude)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub timestamp: DateTime<Utc>,
    pub observations: Vec<StationObservation>,
}

impl Snapshot {
    pub fn new(timestamp: DateTime<Utc>, observations: Vec<StationObservation>) -> Self {
        Self { timestamp, observations }
    }

    pub fn total_bikes(&self) -> u64 {
        self.observations.iter().map(|o| u64::from(o.bikes)).sum()
    }

    pub fn total_slots(&self) -> u64 {
        self.observations.iter().map(|o| u64::from(o.capacity())).sum()
    }

    pub fn get(&self, station_id: &str) -> Option<&StationObservation> {
        self.observations.iter().find(|o| o.station_id == station_id)
    }
}

/// Why a placemark was dropped by [`parse_kml`].
#[derive(Debug, Clone, PartialEq)]
pub struct SkipDiagnostic {
    /// Zero-based placemark ordinal in document order.
    pub placemark: usize,
    pub station_id: Option<String>,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct KmlParse {
    pub observations: Vec<StationObservation>,
    pub skipped: Vec<SkipDiagnostic>,
}

/// Parses a station-status KML document.
///
/// Only a document that is not well-formed XML is an error. Placemarks lacking
/// an id, coordinates, or the `bikes=`/`slots=` counts are skipped and listed
/// in [`KmlParse::skipped`]. Icon/style elements are ignored.
pub fn parse_kml(document: &str) -> Result<KmlParse, IngestError> {
    let doc = roxmltree::Document::parse(document).map_err(|e| IngestError::MalformedDocument(e.to_string()))?;
    let mut out = KmlParse::default();
    let placemarks = doc.descendants().filter(|n| n.is_element() && n.tag_name().name() == "Placemark");
    for (index, pm) in placemarks.enumerate() {
        match parse_placemark(pm) {
            Ok(obs) => out.observations.push(obs),
            Err(reason) => out.skipped.push(SkipDiagnostic {
                placemark: index,
                station_id: pm.attribute("id").map(str::to_string),
                reason,
            }),
        }
    }
    Ok(out)
}

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<String> {
    node.descendants()
        .find(|n| n.is_element() && n.tag_name().name() == name)
        .map(|n| n.descendants().filter(|t| t.is_text()).filter_map(|t| t.text()).collect::<String>())
}

/// `name = value` pairs in free text. Values run up to the next whitespace
/// or `| ; ,` separator.
fn labeled_fields(text: &str) -> Vec<(&str, &str)> {
    let is_sep = |c: char| c == '|' || c == ';' || c == ',' || c.is_whitespace();
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(eq) = rest.find('=') {
        let key = rest[..eq].trim_end();
        let key = key.rsplit(is_sep).next().unwrap_or(key);
        let after = rest[eq + 1..].trim_start();
        let end = after.find(|c: char| is_sep(c) || c == '=').unwrap_or(after.len());
        out.push((key, &after[..end]));
        rest = &after[end..];
    }
    out
}

fn parse_placemark(pm: roxmltree::Node<'_, '_>) -> Result<StationObservation, String> {
    let station_id = pm
        .attribute("id")
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .ok_or("missing id attribute")?
        .to_string();
    let name = child_text(pm, "name").map(|s| s.trim().to_string()).unwrap_or_default();

    let description = child_text(pm, "description").ok_or("missing description")?;
    let (mut bikes, mut slots) = (None, None);
    for (key, value) in labeled_fields(&description) {
        let target = match key.to_ascii_lowercase().as_str() {
            "bikes" => &mut bikes,
            "slots" => &mut slots,
            _ => continue,
        };
        let parsed: u32 = value.parse().map_err(|_| format!("invalid {key} count `{value}`"))?;
        *target = Some(parsed);
    }
    let bikes = bikes.ok_or("description lacks bikes=")?;
    let free_slots = slots.ok_or("description lacks slots=")?;

    let coords = child_text(pm, "coordinates").ok_or("missing coordinates")?;
    let mut parts = coords.trim().split(',').map(str::trim);
    let lon: f64 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("invalid coordinates `{}`", coords.trim()))?;
    let lat: f64 = parts
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| format!("invalid coordinates `{}`", coords.trim()))?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err(format!("coordinates out of range ({lon},{lat})"));
    }

    Ok(StationObservation { station_id, name, latitude: lat, longitude: lon, bikes, free_slots })
}

/// Registry entry for a station seen at least once.
#[derive(Debug, Clone, PartialEq)]
pub struct StationInfo {
    pub id: String,
    pub name: String,
    pub location: LatLon,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AppendNotice {
    Registered(String),
    Relocated { station_id: String, from: LatLon, to: LatLon },
}

/// In-memory append-only store. Stations are keyed by id and never removed.
#[derive(Debug, Clone, Default)]
pub struct SnapshotStore {
    stations: BTreeMap<String, StationInfo>,
    snapshots: Vec<Snapshot>,
}

impl SnapshotStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rebuilds a store from loaded snapshots (already in time order).
    pub fn from_snapshots(snapshots: Vec<Snapshot>) -> Result<Self, IngestError> {
        let mut store = Self::new();
        for snapshot in snapshots {
            store.append(snapshot)?;
        }
        Ok(store)
    }

    pub fn stations(&self) -> &BTreeMap<String, StationInfo> {
        &self.stations
    }

    pub fn snapshots(&self) -> &[Snapshot] {
        &self.snapshots
    }

    pub fn last_timestamp(&self) -> Option<DateTime<Utc>> {
        self.snapshots.last().map(|s| s.timestamp)
    }

    pub fn row_count(&self) -> usize {
        self.snapshots.iter().map(|s| s.observations.len()).sum()
    }

    pub fn append(&mut self, snapshot: Snapshot) -> Result<Vec<AppendNotice>, IngestError> {
        if let Some(last) = self.last_timestamp() {
            if snapshot.timestamp <= last {
                return Err(IngestError::NonMonotonicTimestamp { last, new: snapshot.timestamp });
            }
        }
        let mut seen = HashSet::new();
        for obs in &snapshot.observations {
            if !seen.insert(obs.station_id.as_str()) {
                return Err(IngestError::DuplicateStationInSnapshot(obs.station_id.clone()));
            }
        }

        let mut notices = Vec::new();
        for obs in &snapshot.observations {
            match self.stations.get_mut(&obs.station_id) {
                None => {
                    self.stations.insert(
                        obs.station_id.clone(),
                        StationInfo { id: obs.station_id.clone(), name: obs.name.clone(), location: obs.location() },
                    );
                    notices.push(AppendNotice::Registered(obs.station_id.clone()));
                }
                Some(info) => {
                    if info.location != obs.location() {
                        notices.push(AppendNotice::Relocated {
                            station_id: obs.station_id.clone(),
                            from: info.location,
                            to: obs.location(),
                        });
                        info.location = obs.location();
                    }
                    info.name.clone_from(&obs.name);
                }
            }
        }
        self.snapshots.push(snapshot);
        Ok(notices)
    }
}

/// Half-open `[start, end)` filter for [`load_snapshots`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeRange {
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
}

impl TimeRange {
    pub fn contains(&self, ts: DateTime<Utc>) -> bool {
        ts >= self.start && ts < self.end
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .quote_style(csv::QuoteStyle::Necessary)
        .from_writer(w)
}

/// Writes snapshot rows in the store CSV format, optionally preceded by the header.
pub fn write_snapshots<W: Write>(w: W, snapshots: &[Snapshot], header: bool) -> Result<(), IngestError> {
    let mut wtr = csv_writer(w);
    if header {
        wtr.write_record(CSV_HEADER)?;
    }
    for snap in snapshots {
        let ts = format_timestamp(snap.timestamp);
        for o in &snap.observations {
            wtr.write_record([
                ts.as_str(),
                o.station_id.as_str(),
                o.name.as_str(),
                &o.latitude.to_string(),
                &o.longitude.to_string(),
                &o.bikes.to_string(),
                &o.free_slots.to_string(),
            ])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Appends rows to a store file, creating it (with header) when absent.
pub fn append_to_file(path: &Path, snapshots: &[Snapshot]) -> Result<(), IngestError> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    write_snapshots(io::BufWriter::new(file), snapshots, fresh)
}

/// Loads snapshots from a store file, sorted by time and filtered to `range`.
pub fn load_snapshots(path: &Path, range: Option<TimeRange>) -> Result<Vec<Snapshot>, IngestError> {
    let file = File::open(path).map_err(|e| match e.kind() {
        io::ErrorKind::NotFound => IngestError::FileNotFound(path.display().to_string()),
        _ => IngestError::Io(e),
    })?;
    read_snapshots(io::BufReader::new(file), range)
}

pub fn read_snapshots<R: Read>(reader: R, range: Option<TimeRange>) -> Result<Vec<Snapshot>, IngestError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut records = rdr.records();

    match records.next() {
        None => return Ok(Vec::new()),
        Some(header) => {
            let header = header?;
            if header.iter().ne(CSV_HEADER.iter().copied()) {
                return Err(IngestError::SchemaViolation {
                    line: 1,
                    message: format!("expected header `{}`", CSV_HEADER.join(",")),
                });
            }
        }
    }

    let mut by_time: BTreeMap<DateTime<Utc>, Vec<(u64, StationObservation)>> = BTreeMap::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            IngestError::SchemaViolation { line, message: e.to_string() }
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let violation = |message: String| IngestError::SchemaViolation { line, message };
        if record.len() != CSV_HEADER.len() {
            return Err(violation(format!("expected {} fields, found {}", CSV_HEADER.len(), record.len())));
        }
        let ts = parse_timestamp(&record[0]).map_err(|e| violation(e.to_string()))?;
        let parse_f64 = |i: usize| -> Result<f64, IngestError> {
            record[i].parse().map_err(|_| violation(format!("invalid {} `{}`", CSV_HEADER[i], &record[i])))
        };
        let parse_u32 = |i: usize| -> Result<u32, IngestError> {
            record[i].parse().map_err(|_| violation(format!("invalid {} `{}`", CSV_HEADER[i], &record[i])))
        };
        let obs = StationObservation {
            station_id: record[1].to_string(),
            name: record[2].to_string(),
            latitude: parse_f64(3)?,
            longitude: parse_f64(4)?,
            bikes: parse_u32(5)?,
            free_slots: parse_u32(6)?,
        };
        if !(-90.0..=90.0).contains(&obs.latitude) || !(-180.0..=180.0).contains(&obs.longitude) {
            return Err(violation("coordinates out of range".to_string()));
        }
        if range.is_none_or(|r| r.contains(ts)) {
            by_time.entry(ts).or_default().push((line, obs));
        }
    }

    let mut snapshots = Vec::with_capacity(by_time.len());
    for (timestamp, rows) in by_time {
        let mut seen = HashSet::new();
        for (line, obs) in &rows {
            if !seen.insert(obs.station_id.as_str()) {
                return Err(IngestError::SchemaViolation {
                    line: *line,
                    message: format!("duplicate station `{}` at {}", obs.station_id, format_timestamp(timestamp)),
                });
            }
        }
        snapshots.push(Snapshot { timestamp, observations: rows.into_iter().map(|(_, o)| o).collect() });
    }
    Ok(snapshots)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValidationLimits {
    pub min_capacity: u32,
    pub max_capacity: u32,
    pub max_total_bikes: u64,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self { min_capacity: 15, max_capacity: 39, max_total_bikes: 3657 }
    }
}

impl ValidationLimits {
    pub fn new(min_capacity: u32, max_capacity: u32, max_total_bikes: u64) -> Result<Self, IngestError> {
        if min_capacity > max_capacity {
            return Err(IngestError::InvalidLimits(format!(
                "min_capacity {min_capacity} exceeds max_capacity {max_capacity}"
            )));
        }
        Ok(Self { min_capacity, max_capacity, max_total_bikes })
    }

    /// Reads `min_capacity`, `max_capacity` and `max_total_bikes` from a
    /// `key = value` file; omitted keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self, IngestError> {
        let mut limits = Self::default();
        for entry in parse_key_values(text)? {
            let invalid = || IngestError::InvalidLimits(format!("line {}: bad value `{}`", entry.line, entry.value));
            match entry.key.as_str() {
                "min_capacity" => limits.min_capacity = entry.value.parse().map_err(|_| invalid())?,
                "max_capacity" => limits.max_capacity = entry.value.parse().map_err(|_| invalid())?,
                "max_total_bikes" => limits.max_total_bikes = entry.value.parse().map_err(|_| invalid())?,
                other => return Err(IngestError::InvalidLimits(format!("line {}: unknown key `{other}`", entry.line))),
            }
        }
        Self::new(limits.min_capacity, limits.max_capacity, limits.max_total_bikes)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ValidationWarning {
    CapacityOutOfRange { station_id: String, capacity: u32 },
    ZeroCapacity { station_id: String },
    TotalBikesExceeded { total: u64, max: u64 },
}

impl std::fmt::Display for ValidationWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::CapacityOutOfRange { station_id, capacity } => {
                write!(f, "station {station_id}: capacity {capacity} outside limits")
            }
            Self::ZeroCapacity { station_id } => write!(f, "station {station_id}: zero capacity"),
            Self::TotalBikesExceeded { total, max } => write!(f, "total bikes {total} exceeds {max}"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub warnings: Vec<ValidationWarning>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty()
    }
}

/// Checks a snapshot against physical limits. Never fails: out-of-range
/// readings are reported, not rejected.
pub fn validate_snapshot(snapshot: &Snapshot, limits: &ValidationLimits) -> ValidationReport {
    let mut warnings = Vec::new();
    for obs in &snapshot.observations {
        let capacity = obs.capacity();
        if capacity == 0 {
            warnings.push(ValidationWarning::ZeroCapacity { station_id: obs.station_id.clone() });
        } else if capacity < limits.min_capacity || capacity > limits.max_capacity {
            warnings.push(ValidationWarning::CapacityOutOfRange { station_id: obs.station_id.clone(), capacity });
        }
    }
    let total = snapshot.total_bikes();
    if total > limits.max_total_bikes {
        warnings.push(ValidationWarning::TotalBikesExceeded { total, max: limits.max_total_bikes });
    }
    ValidationReport { warnings }
}
