//! Synthetic networks and snapshot streams driven by a known trip process.
//!
//! Trips arrive as Poisson processes per origin-destination pair and daypart.
//! A trip leaves only when the origin holds a bike and travels at a constant
//! speed; a bike that finds its destination full goes back to its origin after
//! a fixed delay. Every day starts from the network's initial stock.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Utc, Weekday};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use thiserror::Error;

use crate::clock::{midnight, DailyWindow, TimeOfDay};
use crate::geo::{haversine, BoundingBox, LatLon};
use crate::ingest::{Snapshot, StationObservation};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("schedule line {line}: {message}")]
    ScheduleSyntax { line: usize, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Archetype {
    Residential,
    Office,
    University,
    Beach,
    Leisure,
}

impl Archetype {
    pub const ALL: [Archetype; 5] =
        [Archetype::Residential, Archetype::Office, Archetype::University, Archetype::Beach, Archetype::Leisure];

    pub fn as_str(self) -> &'static str {
        match self {
            Archetype::Residential => "residential",
            Archetype::Office => "office",
            Archetype::University => "university",
            Archetype::Beach => "beach",
            Archetype::Leisure => "leisure",
        }
    }

    /// Share of capacity filled at 05:00.
    pub fn initial_fill(self) -> f64 {
        match self {
            Archetype::Residential => 0.85,
            Archetype::Office => 0.15,
            Archetype::University => 0.2,
            Archetype::Beach => 0.5,
            Archetype::Leisure => 0.45,
        }
    }

    /// Weekday occupancy template as a share of capacity, piecewise linear in
    /// the hour of day.
    pub fn template(self, t: TimeOfDay) -> f64 {
        let knots: &[(f64, f64)] = match self {
            Archetype::Residential => &[(5.0, 0.85), (7.0, 0.8), (10.0, 0.2), (17.0, 0.25), (20.0, 0.8), (24.0, 0.85)],
            Archetype::Office => &[(5.0, 0.15), (7.5, 0.2), (10.0, 0.85), (16.0, 0.8), (19.0, 0.15), (24.0, 0.15)],
            Archetype::University => &[(5.0, 0.2), (8.0, 0.25), (11.0, 0.9), (14.0, 0.6), (18.0, 0.2), (24.0, 0.2)],
            Archetype::Beach => &[(5.0, 0.5), (11.0, 0.45), (14.0, 0.1), (19.0, 0.2), (21.0, 0.6), (24.0, 0.5)],
            Archetype::Leisure => &[(5.0, 0.45), (12.0, 0.5), (18.0, 0.15), (22.0, 0.9), (24.0, 0.45)],
        };
        let h = f64::from(t.seconds()) / 3600.0;
        for w in knots.windows(2) {
            let ((h0, v0), (h1, v1)) = (w[0], w[1]);
            if h <= h1 {
                let s = ((h - h0) / (h1 - h0)).clamp(0.0, 1.0);
                return v0 + s * (v1 - v0);
            }
        }
        knots.last().map_or(0.0, |k| k.1)
    }
}

impl FromStr for Archetype {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Archetype::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim().to_ascii_lowercase())
            .ok_or_else(|| format!("unknown archetype `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub stations: usize,
    pub bbox: BoundingBox,
    pub capacity_range: (u32, u32),
    /// Assigned to stations in turn.
    pub archetypes: Vec<Archetype>,
    pub seed: u64,
}

impl NetworkSpec {
    pub fn new(stations: usize, seed: u64) -> Self {
        Self {
            stations,
            bbox: BoundingBox { min_lat: 41.36, min_lon: 2.11, max_lat: 41.42, max_lon: 2.20 },
            capacity_range: (15, 39),
            archetypes: Archetype::ALL.to_vec(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStation {
    pub id: String,
    pub name: String,
    pub location: LatLon,
    pub capacity: u32,
    pub archetype: Archetype,
    pub initial_bikes: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stations: Vec<SimStation>,
}

impl Network {
    pub fn from_stations(stations: Vec<SimStation>) -> Result<Self, SimError> {
        for s in &stations {
            if s.capacity == 0 || s.initial_bikes > s.capacity {
                return Err(SimError::InvalidSpec(format!("station {}: stock {} / capacity {}", s.id, s.initial_bikes, s.capacity)));
            }
        }
        Ok(Self { stations })
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn ids(&self) -> Vec<String> {
        self.stations.iter().map(|s| s.id.clone()).collect()
    }

    pub fn initial_total(&self) -> u64 {
        self.stations.iter().map(|s| u64::from(s.initial_bikes)).sum()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }
}

pub fn generate_network(spec: &NetworkSpec) -> Result<Network, SimError> {
    let (lo, hi) = spec.capacity_range;
    if spec.stations == 0 {
        return Err(SimError::InvalidSpec("station count must be positive".into()));
    }
    if lo == 0 || lo > hi {
        return Err(SimError::InvalidSpec(format!("capacity range [{lo}, {hi}]")));
    }
    if spec.archetypes.is_empty() {
        return Err(SimError::InvalidSpec("no archetypes".into()));
    }
    let b = spec.bbox;
    if !(b.min_lat < b.max_lat && b.min_lon < b.max_lon) {
        return Err(SimError::InvalidSpec("empty bounding box".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let stations = (0..spec.stations)
        .map(|i| {
            let archetype = spec.archetypes[i % spec.archetypes.len()];
            let capacity = rng.random_range(lo..=hi);
            let location = LatLon::new(rng.random_range(b.min_lat..b.max_lat), rng.random_range(b.min_lon..b.max_lon));
            let initial_bikes = ((f64::from(capacity) * archetype.initial_fill()).round() as u32).min(capacity);
            SimStation { id: (i + 1).to_string(), name: format!("Station {}", i + 1), location, capacity, archetype, initial_bikes }
        })
        .collect();
    Ok(Network { stations })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScheduleDay {
    Weekday,
    Weekend,
}

impl ScheduleDay {
    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => ScheduleDay::Weekend,
            _ => ScheduleDay::Weekday,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleDay::Weekday => "weekday",
            ScheduleDay::Weekend => "weekend",
        }
    }
}

/// Trips per hour from `origin` to `destination` (station indices) while
/// `window` is open.
#[derive(Debug, Clone, PartialEq)]
pub struct OdRate {
    pub day: ScheduleDay,
    pub window: DailyWindow,
    pub origin: usize,
    pub destination: usize,
    pub per_hour: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OdSchedule {
    pub rates: Vec<OdRate>,
}

impl OdSchedule {
    pub fn validate(&self, stations: usize) -> Result<(), SimError> {
        for r in &self.rates {
            if !(r.per_hour >= 0.0 && r.per_hour.is_finite()) {
                return Err(SimError::InvalidSchedule(format!("negative or non-finite rate {}", r.per_hour)));
            }
            if r.origin >= stations || r.destination >= stations {
                return Err(SimError::InvalidSchedule(format!("station index {} or {} out of range", r.origin, r.destination)));
            }
        }
        Ok(())
    }

    pub fn add(&mut self, day: ScheduleDay, window: DailyWindow, origin: usize, destination: usize, per_hour: f64) {
        self.rates.push(OdRate { day, window, origin, destination, per_hour });
    }

    /// Commuting flows between archetypes: residential stations feed offices
    /// and universities in the morning and are refilled in the evening;
    /// beach and leisure stations trade at midday and in the evening. Each
    /// station is linked to its nearest few counterparts. Weekend demand is
    /// a lighter leisure pattern.
    pub fn commuter(network: &Network, intensity: f64) -> Self {
        use Archetype::*;
        let mut s = OdSchedule::default();
        let w = |a: (u32, u32), b: (u32, u32)| DailyWindow::new(TimeOfDay::hm(a.0, a.1), TimeOfDay::hm(b.0, b.1)).expect("ordered");
        let morning = w((7, 0), (10, 0));
        let evening = w((17, 0), (20, 0));
        let midday = w((11, 0), (14, 0));
        let late = w((19, 0), (22, 0));
        let weekend_day = w((10, 0), (19, 0));
        let by_kind = |kinds: &[Archetype]| -> Vec<usize> {
            (0..network.len()).filter(|&i| kinds.contains(&network.stations[i].archetype)).collect()
        };
        let nearest = |from: usize, pool: &[usize], k: usize| -> Vec<usize> {
            let mut p: Vec<usize> = pool.iter().copied().filter(|&j| j != from).collect();
            p.sort_by(|&a, &b| {
                let da = haversine(network.stations[from].location, network.stations[a].location);
                let db = haversine(network.stations[from].location, network.stations[b].location);
                da.total_cmp(&db).then(a.cmp(&b))
            });
            p.truncate(k);
            p
        };
        let homes = by_kind(&[Residential]);
        let work = by_kind(&[Office, University]);
        let fun = by_kind(&[Beach, Leisure]);
        for &h in &homes {
            let cap = f64::from(network.stations[h].capacity);
            let targets = nearest(h, &work, 2);
            for &t in &targets {
                let rate = intensity * cap * 0.7 / 3.0 / targets.len() as f64;
                s.add(ScheduleDay::Weekday, morning, h, t, rate);
                s.add(ScheduleDay::Weekday, evening, t, h, rate);
            }
            for &f in &nearest(h, &fun, 1) {
                s.add(ScheduleDay::Weekend, weekend_day, h, f, intensity * cap * 0.05);
                s.add(ScheduleDay::Weekend, weekend_day, f, h, intensity * cap * 0.05);
            }
        }
        for &f in &fun {
            let cap = f64::from(network.stations[f].capacity);
            for &t in &nearest(f, &fun, 1) {
                s.add(ScheduleDay::Weekday, midday, f, t, intensity * cap * 0.1);
                s.add(ScheduleDay::Weekday, late, t, f, intensity * cap * 0.1);
            }
        }
        s
    }

    /// Reads `day_class,start,end,origin_id,dest_id,trips_per_hour` rows.
    pub fn from_csv(text: &str, network: &Network) -> Result<Self, SimError> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let mut s = OdSchedule::default();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let err = |message: String| SimError::ScheduleSyntax { line, message };
            let rec = rec.map_err(|e| err(e.to_string()))?;
            if rec.len() != 6 {
                return Err(err(format!("expected 6 fields, got {}", rec.len())));
            }
            let day = match &rec[0] {
                "weekday" => ScheduleDay::Weekday,
                "weekend" => ScheduleDay::Weekend,
                other => return Err(err(format!("unknown day class `{other}`"))),
            };
            let time = |f: &str| f.parse::<TimeOfDay>().map_err(|e| err(e.to_string()));
            let window = DailyWindow::new(time(&rec[1])?, time(&rec[2])?).ok_or_else(|| err("empty window".into()))?;
            let station = |f: &str| network.index_of(f).ok_or_else(|| err(format!("unknown station `{f}`")));
            let per_hour: f64 = rec[5].parse().map_err(|_| err(format!("invalid rate `{}`", &rec[5])))?;
            s.add(day, window, station(&rec[3])?, station(&rec[4])?, per_hour);
        }
        s.validate(network.len())?;
        Ok(s)
    }

    pub fn to_csv(&self, network: &Network) -> String {
        let mut out = String::from("day_class,start,end,origin_id,dest_id,trips_per_hour\n");
        for r in &self.rates {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.day.as_str(),
                r.window.start,
                r.window.end,
                network.stations[r.origin].id,
                network.stations[r.destination].id,
                r.per_hour
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TruckEvent {
    pub time: TimeOfDay,
    pub from: usize,
    pub to: usize,
    pub bikes: u32,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NoiseSpec {
    /// Each OD rate is scaled by a factor drawn uniformly from
    /// `[1 - jitter, 1 + jitter]` per day.
    pub demand_jitter: f64,
    /// Chance per station-day of a reporting dropout lasting one to three
    /// hours during which the reported total is at most 4.
    pub dropout_probability: f64,
    /// Chance per day of one truck moving up to 10 bikes from the fullest to
    /// the emptiest station, between 10:00 and 16:00.
    pub truck_probability: f64,
    /// Truck moves applied every day.
    pub trucks: Vec<TruckEvent>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn level(p: f64) -> Self {
        Self { demand_jitter: p, dropout_probability: p, truck_probability: p, trucks: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripRecord {
    pub origin: usize,
    pub destination: usize,
    pub depart: DateTime<Utc>,
    pub arrive: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TripLog {
    pub trips: Vec<TripRecord>,
}

impl TripLog {
    pub fn to_csv(&self, network: &Network) -> String {
        let mut out = String::from("origin_id,dest_id,depart,arrive\n");
        for t in &self.trips {
            out.push_str(&format!(
                "{},{},{},{}\n",
                network.stations[t.origin].id,
                network.stations[t.destination].id,
                crate::clock::format_timestamp(t.depart),
                crate::clock::format_timestamp(t.arrive)
            ));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    pub start_date: NaiveDate,
    pub days: usize,
    pub speed_kmh: f64,
    /// Delay before a bike that found its destination full is back at its
    /// origin.
    pub return_delay_secs: u32,
    pub snapshot_step_secs: u32,
    pub snapshot_window: DailyWindow,
    pub seed: u64,
}

impl SimOptions {
    pub fn new(start_date: NaiveDate, days: usize, seed: u64) -> Self {
        Self {
            start_date,
            days,
            speed_kmh: 25.0,
            return_delay_secs: 600,
            snapshot_step_secs: 120,
            snapshot_window: DailyWindow::service(),
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub snapshots: Vec<Snapshot>,
    pub trips: TripLog,
    /// Bikes riding at each snapshot, aligned with `snapshots`.
    pub in_transit: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Event {
    // variant order breaks ties at equal times: docking before departures,
    // snapshots last
    Arrive { origin: usize, destination: usize, depart: u32 },
    Return { station: usize },
    Truck { index: usize },
    Depart { origin: usize, destination: usize },
    Snapshot,
}

fn travel_secs(a: LatLon, b: LatLon, speed_kmh: f64) -> u32 {
    (haversine(a, b) / (speed_kmh / 3.6)).round().max(1.0) as u32
}

/// Runs the trip process day by day.
pub fn simulate(network: &Network, schedule: &OdSchedule, noise: &NoiseSpec, opts: &SimOptions) -> Result<SimOutput, SimError> {
    schedule.validate(network.len())?;
    if opts.days == 0 {
        return Err(SimError::InvalidSpec("days must be at least 1".into()));
    }
    if opts.snapshot_step_secs == 0 {
        return Err(SimError::InvalidSpec("snapshot step must be positive".into()));
    }
    let n = network.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = SimOutput { snapshots: Vec::new(), trips: TripLog::default(), in_transit: Vec::new() };

    for day_index in 0..opts.days {
        let date = opts.start_date + chrono::Duration::days(day_index as i64);
        let kind = ScheduleDay::of(date);
        let mut bikes: Vec<u32> = network.stations.iter().map(|s| s.initial_bikes).collect();
        let mut riding = 0u32;
        let mut queue: BinaryHeap<Reverse<(u32, Event, u64)>> = BinaryHeap::new();
        let mut seq = 0u64;
        let mut push = |queue: &mut BinaryHeap<Reverse<(u32, Event, u64)>>, t: u32, e: Event| {
            queue.push(Reverse((t, e, seq)));
            seq += 1;
        };

        for r in schedule.rates.iter().filter(|r| r.day == kind) {
            let factor = if noise.demand_jitter > 0.0 {
                1.0 + rng.random_range(-noise.demand_jitter..=noise.demand_jitter)
            } else {
                1.0
            };
            let rate = r.per_hour * factor / 3600.0;
            if rate <= 0.0 || r.origin == r.destination {
                continue;
            }
            let exp = Exp::new(rate).expect("positive rate");
            let mut t = f64::from(r.window.start.seconds());
            loop {
                t += exp.sample(&mut rng);
                if t >= f64::from(r.window.end.seconds()) {
                    break;
                }
                push(&mut queue, t as u32, Event::Depart { origin: r.origin, destination: r.destination });
            }
        }

        let mut trucks: Vec<TruckEvent> = noise.trucks.clone();
        if noise.truck_probability > 0.0 && rng.random::<f64>() < noise.truck_probability {
            let time = TimeOfDay::from_seconds(rng.random_range(10 * 3600..16 * 3600)).expect("inside day");
            // from/to are resolved when the truck runs
            trucks.push(TruckEvent { time, from: usize::MAX, to: usize::MAX, bikes: 10 });
        }
        for (index, tr) in trucks.iter().enumerate() {
            push(&mut queue, tr.time.seconds(), Event::Truck { index });
        }

        let mut dropouts: Vec<Option<(u32, u32)>> = vec![None; n];
        if noise.dropout_probability > 0.0 {
            for d in dropouts.iter_mut() {
                if rng.random::<f64>() < noise.dropout_probability {
                    let start = rng.random_range(opts.snapshot_window.start.seconds()..opts.snapshot_window.end.seconds());
                    let len = rng.random_range(3600..=3 * 3600);
                    *d = Some((start, start + len));
                }
            }
        }

        let mut t = opts.snapshot_window.start.seconds();
        while t < opts.snapshot_window.end.seconds() {
            push(&mut queue, t, Event::Snapshot);
            t += opts.snapshot_step_secs;
        }

        while let Some(Reverse((now, event, _))) = queue.pop() {
            match event {
                Event::Depart { origin, destination } => {
                    if bikes[origin] == 0 {
                        continue;
                    }
                    bikes[origin] -= 1;
                    riding += 1;
                    let s = &network.stations;
                    let arrive = now + travel_secs(s[origin].location, s[destination].location, opts.speed_kmh);
                    push(&mut queue, arrive, Event::Arrive { origin, destination, depart: now });
                }
                Event::Arrive { origin, destination, depart } => {
                    if bikes[destination] < network.stations[destination].capacity {
                        bikes[destination] += 1;
                        riding -= 1;
                        out.trips.trips.push(TripRecord {
                            origin,
                            destination,
                            depart: timestamp(date, depart),
                            arrive: timestamp(date, now),
                        });
                    } else {
                        push(&mut queue, now + opts.return_delay_secs, Event::Return { station: origin });
                    }
                }
                Event::Return { station } => {
                    if bikes[station] < network.stations[station].capacity {
                        bikes[station] += 1;
                        riding -= 1;
                    } else {
                        push(&mut queue, now + opts.return_delay_secs, Event::Return { station });
                    }
                }
                Event::Truck { index } => {
                    let tr = trucks[index];
                    let (from, to) = if tr.from == usize::MAX {
                        let fullest = (0..n).max_by_key(|&i| (bikes[i], Reverse(i))).expect("non-empty network");
                        let emptiest = (0..n)
                            .min_by_key(|&i| (bikes[i] * 1000 / network.stations[i].capacity, i))
                            .expect("non-empty network");
                        (fullest, emptiest)
                    } else {
                        (tr.from, tr.to)
                    };
                    if from < n && to < n && from != to {
                        let room = network.stations[to].capacity - bikes[to];
                        let moved = tr.bikes.min(bikes[from]).min(room);
                        bikes[from] -= moved;
                        bikes[to] += moved;
                    }
                }
                Event::Snapshot => {
                    let observations = network
                        .stations
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let mut b = bikes[i];
                            let mut free = s.capacity - bikes[i];
                            if matches!(dropouts[i], Some((a, z)) if now >= a && now < z) {
                                b = b.min(2);
                                free = free.min(2);
                            }
                            StationObservation {
                                station_id: s.id.clone(),
                                name: s.name.clone(),
                                latitude: s.location.lat,
                                longitude: s.location.lon,
                                bikes: b,
                                free_slots: free,
                            }
                        })
                        .collect();
                    out.snapshots.push(Snapshot::new(timestamp(date, now), observations));
                    out.in_transit.push(riding);
                }
            }
        }
    }
    Ok(out)
}

fn timestamp(date: NaiveDate, secs: u32) -> DateTime<Utc> {
    midnight(date) + chrono::Duration::seconds(i64::from(secs))
}

/// Empirical transition matrix of the trips departing inside `window`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub p: DMatrix<f64>,
    /// Total bikes at the window start, summed over the days used.
    pub initial: Vec<f64>,
    /// `P * initial`.
    pub target: Vec<f64>,
}

/// `p[j][i]` is the share of station `i`'s window-start bikes that rode to
/// `j`; bikes that did not leave count as staying. Departures beyond the
/// starting stock (re-rented bikes) widen the denominator instead of making
/// the stay mass negative. A station with no bikes and no trips keeps an
/// identity column.
pub fn ground_truth_transition(log: &TripLog, initial: &[f64], window: DailyWindow) -> GroundTruth {
    let n = initial.len();
    let mut counts = DMatrix::<f64>::zeros(n, n);
    for t in &log.trips {
        if t.origin == t.destination || t.origin >= n || t.destination >= n {
            continue;
        }
        if window.contains(TimeOfDay::of(t.depart)) {
            counts[(t.destination, t.origin)] += 1.0;
        }
    }
    let mut p = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let departed: f64 = counts.column(i).sum();
        let stay = (initial[i] - departed).max(0.0);
        let total = departed + stay;
        if total <= 0.0 {
            p[(i, i)] = 1.0;
            continue;
        }
        for j in 0..n {
            p[(j, i)] = counts[(j, i)] / total;
        }
        p[(i, i)] = stay / total;
    }
    let target = (&p * nalgebra::DVector::from_column_slice(initial)).iter().copied().collect();
    GroundTruth { p, initial: initial.to_vec(), target }
}

/// Window-start stock per station summed over the snapshots taken exactly at
/// `window.start`.
pub fn window_start_stock(snapshots: &[Snapshot], network: &Network, window: DailyWindow) -> Vec<f64> {
    let mut totals: BTreeMap<usize, f64> = BTreeMap::new();
    for snap in snapshots.iter().filter(|s| TimeOfDay::of(s.timestamp) == window.start) {
        for (i, st) in network.stations.iter().enumerate() {
            if let Some(o) = snap.get(&st.id) {
                *totals.entry(i).or_default() += f64::from(o.bikes);
            }
        }
    }
    (0..network.len()).map(|i| totals.get(&i).copied().unwrap_or(0.0)).collect()
}
