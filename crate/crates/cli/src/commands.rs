use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bikeflow_core::clock::{format_timestamp, parse_timestamp, DailyWindow, TimeOfDay};
use bikeflow_core::cluster::{cycle_vectors, kmeans_abs, meta_cluster, select_k};
use bikeflow_core::config::RunConfig;
use bikeflow_core::cycles::{geo_delta, global_cycle, idw_grid, station_cycle, CycleClass, CycleOptions, DailyCycle, StationDelta};
use bikeflow_core::geo::{haversine, BoundingBox, LatLon};
use bikeflow_core::ingest::{
    append_to_file, load_snapshots, parse_kml, validate_snapshot, Snapshot, SnapshotStore, StationInfo, ValidationLimits,
};
use bikeflow_core::predict::{build_cycle_model, evaluate, predict_gradient, predict_persistence, ModelTag, Scheme};
use bikeflow_core::preprocess::{prepare_station_days, BinGrid, DayClass, HolidayCalendar, PrepareOptions, StationDays};
use bikeflow_core::routes::{analyze, top_routes, window_bins, AnalysisOptions, CouplingOptions, FitOptions, RouteAnalysis};
use bikeflow_core::simgen::{generate_network, simulate, NetworkSpec, NoiseSpec, OdSchedule, SimOptions};
use bikeflow_core::stats::moving_average;
use chrono::{DateTime, Duration, NaiveDate, NaiveDateTime, Utc};
use serde_json::json;

use crate::export::{self, num};
use crate::{
    ClusterArgs, Cli, CliError, Command, CyclesArgs, EvalPredictArgs, GeopatternArgs, IngestArgs, PredictArgs, RoutesArgs,
    SimulateArgs, ValidateArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub const SEED_ENV: &str = "BIKEFLOW_SEED";
const RANK_SMOOTHING: usize = 21;

pub(crate) fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Ingest(a) => ingest(&a),
        Command::Validate(a) => validate(&a),
        Command::Cycles(a) => cycles(&cfg, &a),
        Command::Geopattern(a) => geopattern(&cfg, &a),
        Command::Cluster(a) => cluster(&cfg, &a),
        Command::Predict(a) => predict(&cfg, &a),
        Command::EvalPredict(a) => eval_predict(&cfg, &a),
        Command::Routes(a) => routes(&cfg, &a),
        Command::Simulate(a) => simulate_cmd(&cfg, &a),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    RunConfig::parse(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// `--seed`, then `BIKEFLOW_SEED`, then the config file, then 0.
fn resolve_seed(flag: Option<u64>, cfg: &RunConfig) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    if let Ok(v) = std::env::var(SEED_ENV) {
        return v.trim().parse().map_err(|_| CliError::Usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer")));
    }
    Ok(cfg.seed.unwrap_or(0))
}

fn write_output(path: Option<&Path>, content: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, content).map_err(|e| CliError::Data(format!("{}: {e}", p.display()))),
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(CliError::data)?;
    text.push('\n');
    write_output(Some(path), &text)
}

fn parse_arg<T: std::str::FromStr>(what: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| CliError::Usage(format!("--{what}: {e}")))
}

struct Dataset {
    snapshots: Vec<Snapshot>,
    stations: BTreeMap<String, StationInfo>,
    days: Vec<StationDays>,
    bins: BinGrid,
    calendar: HolidayCalendar,
    cycle_opts: CycleOptions,
}

impl Dataset {
    fn load(cfg: &RunConfig, path: &Path) -> Result<Self> {
        let snapshots = load_snapshots(path, None).map_err(CliError::data)?;
        let stations = SnapshotStore::from_snapshots(snapshots.clone()).map_err(CliError::data)?.stations().clone();
        let opts = PrepareOptions { step: cfg.step(), min_total_slots: cfg.min_total_slots, service_window: cfg.service_window };
        let days = prepare_station_days(&snapshots, &opts).map_err(CliError::data)?;
        let bins = BinGrid::new(cfg.service_window, cfg.step()).map_err(CliError::data)?;
        Ok(Self {
            snapshots,
            stations,
            days,
            bins,
            calendar: HolidayCalendar::new(cfg.holidays.iter().copied()),
            cycle_opts: CycleOptions { median_window: cfg.median_window, order: cfg.median_order },
        })
    }

    /// Cycles of every station with at least one day of `class`.
    fn station_cycles(&self, class: CycleClass) -> Result<Vec<DailyCycle>> {
        let mut out = Vec::new();
        for st in &self.days {
            match station_cycle(&st.station_id, &st.days, self.bins, class, &self.calendar, &self.cycle_opts) {
                Ok(c) => out.push(c),
                Err(bikeflow_core::cycles::CycleError::NoMatchingDays) => {
                    eprintln!("station {}: no {} days, skipped", st.station_id, class.label());
                }
                Err(e) => return Err(CliError::data(e)),
            }
        }
        if out.is_empty() {
            return Err(CliError::Data(format!("no station has {} data", class.label())));
        }
        Ok(out)
    }

    fn location(&self, id: &str) -> Result<LatLon> {
        self.stations.get(id).map(|s| s.location).ok_or_else(|| CliError::Data(format!("unknown station `{id}`")))
    }
}

fn station_id(c: &DailyCycle) -> &str {
    match &c.key {
        bikeflow_core::cycles::CycleKey::Station(id) => id,
        bikeflow_core::cycles::CycleKey::Global => "global",
    }
}

/// Accepts `2008-05-15T12-00-00Z`, `20080515T120000Z` or an RFC 3339 stamp.
fn kml_timestamp(path: &Path) -> Result<DateTime<Utc>> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    for fmt in ["%Y-%m-%dT%H-%M-%SZ", "%Y%m%dT%H%M%SZ"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(stem, fmt) {
            return Ok(t.and_utc());
        }
    }
    parse_timestamp(stem).map_err(|_| CliError::Data(format!("{}: file name is not a UTC timestamp", path.display())))
}

fn ingest(a: &IngestArgs) -> Result<()> {
    let entries = fs::read_dir(&a.kml_dir).map_err(|e| CliError::Data(format!("{}: {e}", a.kml_dir.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("kml")))
        .collect();
    let mut stamped = files.drain(..).map(|p| kml_timestamp(&p).map(|t| (t, p))).collect::<Result<Vec<_>>>()?;
    stamped.sort();

    let existing = if a.store.exists() { load_snapshots(&a.store, None).map_err(CliError::data)? } else { Vec::new() };
    let mut store = SnapshotStore::from_snapshots(existing).map_err(CliError::data)?;
    let before = store.stations().len();
    let mut fresh = Vec::with_capacity(stamped.len());
    for (ts, path) in stamped {
        let text = fs::read_to_string(&path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        let parsed = parse_kml(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
        for s in &parsed.skipped {
            eprintln!(
                "{}: placemark {} ({}) skipped: {}",
                path.display(),
                s.placemark,
                s.station_id.as_deref().unwrap_or("no id"),
                s.reason
            );
        }
        let snapshot = Snapshot::new(ts, parsed.observations);
        for notice in store.append(snapshot.clone()).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))? {
            if let bikeflow_core::ingest::AppendNotice::Relocated { station_id, from, to } = notice {
                eprintln!("station {station_id} moved from {},{} to {},{}", from.lat, from.lon, to.lat, to.lon);
            }
        }
        fresh.push(snapshot);
    }
    append_to_file(&a.store, &fresh).map_err(CliError::data)?;
    eprintln!("ingested {} snapshots, {} new stations", fresh.len(), store.stations().len() - before);
    Ok(())
}

fn validate(a: &ValidateArgs) -> Result<()> {
    let limits = match &a.limits {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
            ValidationLimits::parse(&text).map_err(CliError::usage)?
        }
        None => ValidationLimits::default(),
    };
    let snapshots = load_snapshots(&a.store, None).map_err(CliError::data)?;
    let mut out = String::from("timestamp,warning\n");
    let mut count = 0;
    for snap in &snapshots {
        for w in validate_snapshot(snap, &limits).warnings {
            count += 1;
            let _ = writeln!(out, "{},{}", format_timestamp(snap.timestamp), w);
        }
    }
    print!("{out}");
    eprintln!("{} snapshots, {count} warnings", snapshots.len());
    Ok(())
}

fn cycle_csv(c: &DailyCycle) -> String {
    let mut out = String::from("time_of_day,mean,stdev,support\n");
    for i in 0..c.bins.len {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            c.bins.time_of(i),
            c.mean[i].map(num).unwrap_or_default(),
            c.stdev[i].map(num).unwrap_or_default(),
            c.support[i]
        );
    }
    out
}

fn cycles(cfg: &RunConfig, a: &CyclesArgs) -> Result<()> {
    let class: CycleClass = parse_arg("day-class", &a.day_class)?;
    let data = Dataset::load(cfg, &a.store)?;
    let cycle = if a.global {
        let dropped = data.snapshots.iter().filter(|s| cfg.global_min_slots > 0 && s.total_slots() <= cfg.global_min_slots).count();
        if dropped > 0 {
            eprintln!("{dropped} of {} snapshots at or below global_min_slots = {}", data.snapshots.len(), cfg.global_min_slots);
        }
        global_cycle(&data.snapshots, data.bins, class, &data.calendar, cfg.global_min_slots, &data.cycle_opts)
    } else {
        let id = a.station.as_deref().expect("clap requires --station without --global");
        let st = data.days.iter().find(|s| s.station_id == id).ok_or_else(|| CliError::Data(format!("unknown station `{id}`")))?;
        station_cycle(id, &st.days, data.bins, class, &data.calendar, &data.cycle_opts)
    }
    .map_err(CliError::data)?;
    eprintln!("{} cycle from {} days", class.label(), cycle.days);
    write_output(a.out.as_deref(), &cycle_csv(&cycle))
}

fn parse_grid(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--grid: expected ROWSxCOLS, got `{s}`"));
    let (r, c) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((r.trim().parse().map_err(|_| bad())?, c.trim().parse().map_err(|_| bad())?))
}

fn geopattern(cfg: &RunConfig, a: &GeopatternArgs) -> Result<()> {
    let t: TimeOfDay = parse_arg("time", &a.time)?;
    let t0: TimeOfDay = match &a.baseline {
        Some(b) => parse_arg("baseline", b)?,
        None => cfg.baseline_time,
    };
    let (rows, cols) = parse_grid(&a.grid)?;
    let class: CycleClass = parse_arg("day-class", &a.day_class)?;
    let data = Dataset::load(cfg, &a.store)?;
    let cycles = data.station_cycles(class)?;
    let deltas = geo_delta(&cycles, t, t0).map_err(CliError::data)?;
    let points = deltas
        .into_iter()
        .map(|(id, delta)| Ok(StationDelta { location: data.location(&id)?, station_id: id, delta }))
        .collect::<Result<Vec<_>>>()?;
    let bbox = BoundingBox::enclosing(points.iter().map(|p| p.location))
        .ok_or_else(|| CliError::Data("no station has both times in its cycle".into()))?;
    let grid = idw_grid(&points, bbox, rows, cols, cfg.idw_power, t, t0).map_err(CliError::data)?;
    let doc = export::grid_geojson(&grid, &points);
    match &a.out {
        Some(p) => write_json(p, &doc),
        None => write_output(None, &format!("{}\n", serde_json::to_string_pretty(&doc).map_err(CliError::data)?)),
    }
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let bad = || CliError::Usage(format!("--k-range: expected MIN-MAX, got `{s}`"));
    let (lo, hi) = s.split_once('-').ok_or_else(bad)?;
    let (lo, hi) = (lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?);
    if lo > hi {
        return Err(bad());
    }
    Ok((lo, hi))
}

fn cluster(cfg: &RunConfig, a: &ClusterArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, cfg)?;
    let fixed_k: Option<usize> = if a.k == "auto" { None } else { Some(parse_arg("k", &a.k)?) };
    let (k_lo, k_hi) = parse_range(&a.k_range)?;
    let data = Dataset::load(cfg, &a.store)?;
    let vectors = cycle_vectors(&data.station_cycles(CycleClass::Day(DayClass::Weekday))?);
    let n = vectors.len();
    let k = match fixed_k {
        Some(k) => k,
        None => {
            let sel = select_k(&vectors, k_lo..=k_hi.min(n), seed, cfg.kmeans_max_iter, cfg.internal_similarity)
                .map_err(CliError::data)?;
            if let Some(w) = &sel.warning {
                eprintln!("warning: {w}");
            }
            if let Some(p) = &a.out_curve {
                let mut out = String::from("k,min_internal_similarity,smoothed\n");
                for ((k, s), sm) in sel.curve.iter().zip(&sel.smoothed) {
                    let _ = writeln!(out, "{k},{},{}", sim_str(*s), sim_str(*sm));
                }
                write_output(Some(p), &out)?;
            }
            sel.k
        }
    };
    let model = kmeans_abs(&vectors, k, seed, cfg.kmeans_max_iter).map_err(CliError::data)?;
    let model = meta_cluster(&model, a.meta_k.min(k), seed, cfg.kmeans_max_iter, cfg.ungrouped_agreement).map_err(CliError::data)?;
    let meta = model.station_meta().expect("meta-clustering ran");
    eprintln!("k = {k}, meta-k = {}", a.meta_k.min(k));

    let mut out = String::from("station_id,cluster,meta_cluster\n");
    for (i, id) in model.station_ids.iter().enumerate() {
        let _ = writeln!(out, "{id},{},{}", model.assignment[i], meta[i]);
    }
    write_output(a.out.as_deref(), &out)?;
    if let Some(p) = &a.out_geojson {
        let zones = model
            .station_ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                Ok(export::ZoneStation {
                    station_id: id,
                    location: data.location(id)?,
                    cluster: model.assignment[i],
                    meta: Some(meta[i]),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        write_json(p, &export::zones_geojson(&zones))?;
    }
    Ok(())
}

fn sim_str(s: bikeflow_core::cluster::Similarity) -> String {
    match s.finite() {
        Some(v) => num(v),
        None => "max".to_string(),
    }
}

fn predict(cfg: &RunConfig, a: &PredictArgs) -> Result<()> {
    let at = parse_timestamp(&a.at).map_err(CliError::usage)?;
    if a.offset < 0 {
        return Err(CliError::Usage("--offset must not be negative".into()));
    }
    let offset = Duration::minutes(a.offset);
    let scheme: Option<Scheme> = if a.scheme == "persistence" { None } else { Some(parse_arg("scheme", &a.scheme)?) };
    let data = Dataset::load(cfg, &a.store)?;
    let obs = data
        .snapshots
        .iter()
        .rev()
        .filter(|s| s.timestamp <= at && s.timestamp.date_naive() == at.date_naive())
        .find_map(|s| s.get(&a.station))
        .ok_or_else(|| CliError::Data(format!("no observation of station `{}` on the issue day before {}", a.station, a.at)))?;
    let current = f64::from(obs.bikes);
    let forecast = match scheme {
        None => predict_persistence(&a.station, current, at, offset),
        Some(scheme) => {
            let model = build_cycle_model(&data.days, data.bins, scheme, Some(at.date_naive()), &data.calendar, &data.cycle_opts)
                .map_err(CliError::data)?;
            predict_gradient(&a.station, current, f64::from(obs.capacity()), at, offset, &model)
        }
    };
    println!(
        "{},{},{},{},{},{},{}",
        forecast.station_id,
        format_timestamp(forecast.issue_time),
        forecast.offset.num_minutes(),
        num(forecast.predicted_bikes),
        forecast.model.name(),
        forecast.model.scheme(),
        forecast.fallback
    );
    Ok(())
}

fn eval_predict(cfg: &RunConfig, a: &EvalPredictArgs) -> Result<()> {
    let offsets = a
        .offsets
        .split(',')
        .map(|s| parse_arg::<i64>("offsets", s.trim()).map(Duration::minutes))
        .collect::<Result<Vec<_>>>()?;
    let mut models = vec![ModelTag::Persistence];
    for s in a.schemes.split(',').filter(|s| !s.trim().is_empty()) {
        models.push(ModelTag::Gradient(parse_arg("schemes", s.trim())?));
    }
    models.push(ModelTag::Oracle);
    let data = Dataset::load(cfg, &a.store)?;
    let rows = evaluate(&data.days, data.bins, &data.calendar, &data.cycle_opts, &models, &offsets).map_err(|e| match e {
        bikeflow_core::predict::PredictError::BadOffset(_) => CliError::usage(e),
        e => CliError::data(e),
    })?;
    let mut out = String::from("model,scheme,offset_min,mae,bias,n_points\n");
    for r in &rows {
        let _ = writeln!(out, "{},{},{},{},{},{}", r.model.name(), r.model.scheme(), r.offset_min, num(r.mae), num(r.bias), r.n_points);
        if r.fallbacks > 0 {
            eprintln!("{} {} at {} min: {} persistence fallbacks", r.model.name(), r.model.scheme(), r.offset_min, r.fallbacks);
        }
    }
    write_output(a.out.as_deref(), &out)
}

fn routes(cfg: &RunConfig, a: &RoutesArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, cfg)?;
    let window: DailyWindow = match &a.window {
        Some(w) => parse_arg("window", w)?,
        None => cfg.morning_window,
    };
    let threshold = a.threshold.unwrap_or(cfg.route_threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(CliError::Usage("--threshold must lie in [0, 1]".into()));
    }
    let class: CycleClass = parse_arg("day-class", &a.day_class)?;
    let data = Dataset::load(cfg, &a.store)?;
    let all = data.station_cycles(class)?;
    let mut usable = Vec::new();
    for c in &all {
        let ok = window_bins(c, window).map(|(s, e)| c.mean[s].is_some() && c.mean[e].is_some()).map_err(CliError::data)?;
        if ok {
            usable.push((station_id(c).to_string(), c));
        } else {
            eprintln!("station {}: no cycle value at a window edge, skipped", station_id(c));
        }
    }
    let coords = usable.iter().map(|(id, _)| data.location(id)).collect::<Result<Vec<_>>>()?;
    let opts = AnalysisOptions {
        window,
        role_threshold: cfg.role_threshold,
        coupling: CouplingOptions { speed_kmh: cfg.speed_kmh, step_secs: data.bins.step_secs, min_score: cfg.coupling_score },
        sigma: cfg.lognormal_sigma,
        fit: FitOptions { tol: cfg.fit_tol, max_iter: cfg.fit_max_iter, seed, ..FitOptions::default() },
    };
    let analysis = analyze(&usable, &coords, &opts).map_err(CliError::data)?;
    let RouteAnalysis { aggregate: agg, profiles, roles, couplings, model, .. } = &analysis;
    if !model.converged {
        eprintln!("warning: fit stopped after {} iterations without converging", model.iterations);
    }
    let found = top_routes(&model.p, threshold);
    let ids = &agg.station_ids;

    let mut out = String::from("origin_id,dest_id,probability,distance_m\n");
    for r in &found {
        let d = haversine(coords[r.origin], coords[r.destination]);
        let _ = writeln!(out, "{},{},{},{}", ids[r.origin], ids[r.destination], num(r.probability), num(d));
    }
    write_output(a.out.as_deref(), &out)?;
    if let Some(p) = &a.out_geojson {
        let lines: Vec<_> = found
            .iter()
            .map(|r| export::RouteLine {
                origin_id: &ids[r.origin],
                dest_id: &ids[r.destination],
                from: coords[r.origin],
                to: coords[r.destination],
                probability: r.probability,
            })
            .collect();
        let stations: Vec<_> = ids
            .iter()
            .enumerate()
            .map(|(i, id)| export::RoleStation { station_id: id, location: coords[i], role: roles[i] })
            .collect();
        write_json(p, &export::routes_geojson(&lines, &stations))?;
    }
    if let Some(p) = &a.report {
        let predicted = analysis.predicted();
        let average: Vec<f64> = profiles.iter().map(|p| p.iter().sum::<f64>() / p.len().max(1) as f64).collect();
        let mut order: Vec<usize> = (0..ids.len()).collect();
        order.sort_by(|&i, &j| average[i].total_cmp(&average[j]).then(ids[i].cmp(&ids[j])));
        let ranked_actual: Vec<f64> = order.iter().map(|&i| agg.target[i]).collect();
        let ranked_predicted: Vec<f64> = order.iter().map(|&i| predicted[i]).collect();
        let r6 = |v: f64| (v * 1e6).round() / 1e6;
        let stations: Vec<_> = (0..ids.len())
            .map(|i| {
                json!({
                    "station_id": ids[i],
                    "role": roles[i].as_str(),
                    "initial": r6(agg.initial[i]),
                    "actual": r6(agg.target[i]),
                    "predicted": r6(predicted[i]),
                    "average": r6(average[i]),
                })
            })
            .collect();
        let report = json!({
            "window": format!("{}-{}", window.start, window.end),
            "day_class": class.label(),
            "lambda": model.lambda.map(r6),
            "objective": model.objective,
            "iterations": model.iterations,
            "converged": model.converged,
            "objective_history": model.history,
            "couplings": couplings.iter().map(|c| json!({
                "departure": ids[c.departure],
                "arrival": ids[c.arrival],
                "score": r6(c.score),
                "shift_minutes": c.shift_bins as u64 * u64::from(data.bins.step_secs) / 60,
            })).collect::<Vec<_>>(),
            "stations": stations,
            "ranked": {
                "smoothing_window": RANK_SMOOTHING,
                "station_ids": order.iter().map(|&i| ids[i].as_str()).collect::<Vec<_>>(),
                "actual": ranked_actual.iter().copied().map(r6).collect::<Vec<_>>(),
                "predicted": ranked_predicted.iter().copied().map(r6).collect::<Vec<_>>(),
                "actual_smoothed": moving_average(&ranked_actual, RANK_SMOOTHING).into_iter().map(r6).collect::<Vec<_>>(),
                "predicted_smoothed": moving_average(&ranked_predicted, RANK_SMOOTHING).into_iter().map(r6).collect::<Vec<_>>(),
            },
        });
        write_json(p, &report)?;
    }
    eprintln!(
        "{} stations, {} couplings, lambda = ({:.3}, {:.3}, {:.3}), {} routes",
        ids.len(),
        couplings.len(),
        model.lambda[0],
        model.lambda[1],
        model.lambda[2],
        found.len()
    );
    Ok(())
}

fn simulate_cmd(cfg: &RunConfig, a: &SimulateArgs) -> Result<()> {
    let seed = resolve_seed(a.seed, cfg)?;
    let start: NaiveDate = parse_arg("start", &a.start)?;
    if !(0.0..=1.0).contains(&a.noise) {
        return Err(CliError::Usage("--noise must lie in [0, 1]".into()));
    }
    let network = generate_network(&NetworkSpec::new(a.stations, seed)).map_err(CliError::usage)?;
    let schedule = match &a.schedule {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            OdSchedule::from_csv(&text, &network).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?
        }
        None => OdSchedule::commuter(&network, a.intensity),
    };
    let opts = SimOptions { speed_kmh: cfg.speed_kmh, ..SimOptions::new(start, a.days, seed) };
    let out = simulate(&network, &schedule, &NoiseSpec::level(a.noise), &opts).map_err(CliError::data)?;

    let mut store = Vec::new();
    bikeflow_core::ingest::write_snapshots(&mut store, &out.snapshots, true).map_err(CliError::data)?;
    write_output(a.out_store.as_deref(), &String::from_utf8(store).expect("csv output is UTF-8"))?;
    if let Some(p) = &a.out_trips {
        write_output(Some(p), &out.trips.to_csv(&network))?;
    }
    if let Some(p) = &a.out_schedule {
        write_output(Some(p), &schedule.to_csv(&network))?;
    }
    eprintln!("{} stations, {} days, {} trips", network.len(), a.days, out.trips.trips.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kml_file_names() {
        let want = parse_timestamp("2008-05-15T12:00:00Z").unwrap();
        assert_eq!(kml_timestamp(Path::new("d/2008-05-15T12-00-00Z.kml")).unwrap(), want);
        assert_eq!(kml_timestamp(Path::new("20080515T120000Z.kml")).unwrap(), want);
        assert_eq!(kml_timestamp(Path::new("2008-05-15T12:00:00Z.kml")).unwrap(), want);
        assert!(kml_timestamp(Path::new("latest.kml")).is_err());
    }

    #[test]
    fn grid_and_range_arguments() {
        assert_eq!(parse_grid("100x80").unwrap(), (100, 80));
        assert!(parse_grid("100").is_err());
        assert_eq!(parse_range("2-40").unwrap(), (2, 40));
        assert!(parse_range("9-3").is_err());
    }

    #[test]
    fn explicit_seed_wins() {
        let cfg = RunConfig { seed: Some(5), ..RunConfig::default() };
        assert_eq!(resolve_seed(Some(3), &cfg).unwrap(), 3);
    }
}
