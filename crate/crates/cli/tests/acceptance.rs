//! Acceptance criteria 1-8. Each test prints one PASS/FAIL line to stderr
//! (uncaptured) and then asserts.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration as StdDuration, Instant};

use bikeflow_core::clock::{DailyWindow, TimeOfDay};
use bikeflow_core::cluster::{
    abs_distance, abs_sim, adjusted_rand_index, grad_sign, hamming, kmeans_abs, meta_cluster, rel_sim, select_k, CycleVector,
    InternalSimilarity, MetaLabel, Similarity,
};
use bikeflow_core::cycles::{station_cycle, CycleClass, CycleOptions, DailyCycle};
use bikeflow_core::geo::LatLon;
use bikeflow_core::ingest::{parse_kml, read_snapshots, write_snapshots, Snapshot, StationObservation};
use bikeflow_core::predict::{evaluate, ModelTag, Scheme};
use bikeflow_core::preprocess::{prepare_station_days, BinGrid, DayClass, HolidayCalendar, PrepareOptions};
use bikeflow_core::routes::{
    analyze, build_transition, fit_lambda, propagate, top_routes, AnalysisOptions, Coupling, FeatureSet, FitOptions,
    MorningAggregate, FEATURE_EPS,
};
use bikeflow_core::simgen::{
    generate_network, simulate, Archetype, Network, NetworkSpec, NoiseSpec, OdSchedule, ScheduleDay, SimOptions, SimStation,
};
use bikeflow_core::stats::spearman;
use chrono::{Duration, NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn report(n: u32, name: &str, pass: bool, detail: &str, elapsed: StdDuration, limit: StdDuration) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "criterion {n} [{status}] {name}: {detail} ({:.2} s, limit {} s)",
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
}

fn monday() -> NaiveDate {
    NaiveDate::from_ymd_opt(2008, 5, 19).unwrap()
}

#[test]
fn criterion_1_metric_correctness() {
    let limit = StdDuration::from_secs(1);
    let t0 = Instant::now();
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            failures.push(what.to_string());
        }
    };

    check(abs_distance(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() == 0.0, "abs_distance p=q");
    check(abs_sim(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap() == Similarity::Max, "abs_sim p=q");
    check(abs_distance(&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]).unwrap() == 2.0, "abs_distance [1,2,3],[2,2,4]");
    check(abs_sim(&[1.0, 2.0, 3.0], &[2.0, 2.0, 4.0]).unwrap() == Similarity::Finite(0.5), "abs_sim 0.5");
    check(abs_distance(&[0.0, 0.0], &[10.0, 10.0]).unwrap() == 20.0, "abs_distance [0,0],[10,10]");
    check(abs_sim(&[0.0, 0.0], &[10.0, 10.0]).unwrap() == Similarity::Finite(0.05), "abs_sim 0.05");
    check(grad_sign(&[1.0, 2.0, 3.0]).unwrap().as_slice() == [1, 1], "grad_sign monotone");
    check(grad_sign(&[5.0, 5.0, 4.0]).unwrap().as_slice() == [1, -1], "grad_sign tie");
    check(grad_sign(&[3.0, 1.0]).unwrap().as_slice() == [-1], "grad_sign [3,1]");
    check(rel_sim(&[1.0, 2.0, 1.0, 2.0], &[0.0, 5.0, 9.0, 2.0]).unwrap() == 1, "rel_sim worked example");
    check(rel_sim(&[1.0, 4.0, 2.0, 7.0], &[1.0, 4.0, 2.0, 7.0]).unwrap() == 3, "rel_sim p=q");
    check(rel_sim(&[1.0, 4.0, 2.0, 7.0], &[9.0, 3.0, 8.0, 1.0]).unwrap() == 0, "rel_sim opposite");

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut identity_ok = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..60);
        // integer-valued vectors so ties (zero gradients) occur
        let p: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6))).collect();
        let q: Vec<f64> = (0..n).map(|_| f64::from(rng.random_range(0..6))).collect();
        let lhs = rel_sim(&p, &q).unwrap() + hamming(&grad_sign(&p).unwrap(), &grad_sign(&q).unwrap());
        if lhs == n - 1 {
            identity_ok += 1;
        }
    }
    check(identity_ok == 1000, "rel_sim + hamming = n - 1");

    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && elapsed < limit;
    let detail = if failures.is_empty() {
        format!("12 worked examples exact, identity held on {identity_ok}/1000 random pairs")
    } else {
        format!("failed: {}", failures.join(", "))
    };
    report(1, "metric correctness", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

fn random_features(rng: &mut ChaCha8Rng, n: usize) -> FeatureSet {
    let f = |rng: &mut ChaCha8Rng| {
        nalgebra::DMatrix::from_fn(n, n, |_, _| if rng.random_bool(0.1) { FEATURE_EPS } else { rng.random_range(FEATURE_EPS..1.0) })
    };
    let f1 = f(rng);
    let f2 = f(rng);
    let f3 = nalgebra::DMatrix::from_fn(n, n, |_, _| [0.1, 0.5, 1.0][rng.random_range(0..3)]);
    FeatureSet { f1, f2, f3 }
}

#[test]
fn criterion_2_transition_invariants() {
    let limit = StdDuration::from_secs(5);
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_col, mut worst_mass) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(2..=40);
        let lambda = [rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0), rng.random_range(-5.0..=5.0)];
        let features = random_features(&mut rng, n);
        let p = build_transition(lambda, &features);
        for col in p.column_iter() {
            worst_col = worst_col.max((col.sum() - 1.0).abs());
        }
        let initial: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..40.0)).collect();
        let total: f64 = initial.iter().sum();
        let f_hat = propagate(&p, &initial).unwrap();
        worst_mass = worst_mass.max((f_hat.iter().sum::<f64>() - total).abs() / total);
    }
    let elapsed = t0.elapsed();
    let pass = worst_col <= 1e-9 && worst_mass <= 1e-6 && elapsed < limit;
    let detail = format!("max |column sum - 1| = {worst_col:.2e} (tol 1e-9), max relative mass drift = {worst_mass:.2e} (tol 1e-6)");
    report(2, "transition-model invariants", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

/// `(x, y)` kilometres east and north of a reference point.
fn km(x: f64, y: f64) -> LatLon {
    let lat0: f64 = 41.38;
    LatLon::new(lat0 + y / 111.195, 2.10 + x / (111.195 * lat0.to_radians().cos()))
}

fn station(id: usize, at: LatLon, archetype: Archetype, initial: u32) -> SimStation {
    SimStation {
        id: (id + 1).to_string(),
        name: format!("Station {}", id + 1),
        location: at,
        capacity: 30,
        archetype,
        initial_bikes: initial,
    }
}

fn window(a: (u32, u32), b: (u32, u32)) -> DailyWindow {
    DailyWindow::new(TimeOfDay::hm(a.0, a.1), TimeOfDay::hm(b.0, b.1)).unwrap()
}

#[test]
fn criterion_3_route_recovery() {
    let limit = StdDuration::from_secs(120);
    let t0 = Instant::now();
    // four groups of (departure, arrival, neutral), 5 km apart along an axis
    let mut stations = Vec::new();
    for k in 0..4 {
        let x = 5.0 * k as f64;
        stations.push(station(3 * k, km(x, 0.0), Archetype::Residential, 26));
        stations.push(station(3 * k + 1, km(x + 2.0, 0.0), Archetype::Office, 4));
        stations.push(station(3 * k + 2, km(x + 1.0, 2.0), Archetype::Leisure, 15));
    }
    let network = Network::from_stations(stations).unwrap();
    let morning = window((7, 0), (10, 0));
    let evening = window((17, 0), (20, 0));
    let mut schedule = OdSchedule::default();
    let (coupled_rate, side_rate) = (4.5, 2.0);
    for k in 0..4 {
        let (d, a, n) = (3 * k, 3 * k + 1, 3 * k + 2);
        schedule.add(ScheduleDay::Weekday, morning, d, a, coupled_rate);
        schedule.add(ScheduleDay::Weekday, morning, d, n, side_rate);
        schedule.add(ScheduleDay::Weekday, evening, a, d, coupled_rate);
        schedule.add(ScheduleDay::Weekday, evening, n, d, side_rate);
        // neutral stations pass their inflow on, so their net change is zero
        schedule.add(ScheduleDay::Weekday, morning, n, a, side_rate);
        schedule.add(ScheduleDay::Weekday, evening, a, n, side_rate);
        let next = 3 * ((k + 1) % 4) + 2;
        schedule.add(ScheduleDay::Weekday, morning, n, next, 0.5);
        schedule.add(ScheduleDay::Weekday, morning, next, n, 0.5);
    }
    let share = coupled_rate / (coupled_rate + side_rate);
    let noise = NoiseSpec { demand_jitter: 0.1, ..NoiseSpec::none() };
    // 18 days from a Monday hold 14 weekdays
    let sim = simulate(&network, &schedule, &noise, &SimOptions::new(monday(), 18, 3)).unwrap();

    let days = prepare_station_days(&sim.snapshots, &PrepareOptions::default()).unwrap();
    let bins = BinGrid::new(DailyWindow::service(), Duration::minutes(2)).unwrap();
    let calendar = HolidayCalendar::empty();
    let class = CycleClass::Day(DayClass::Weekday);
    let cycles: Vec<DailyCycle> =
        days.iter().map(|s| station_cycle(&s.station_id, &s.days, bins, class, &calendar, &CycleOptions::default()).unwrap()).collect();
    let weekdays = cycles[0].days;
    let pairs: Vec<(String, &DailyCycle)> = days.iter().map(|s| s.station_id.clone()).zip(cycles.iter()).collect();
    let coords: Vec<LatLon> = pairs.iter().map(|(id, _)| network.stations[network.index_of(id).unwrap()].location).collect();
    let opts = AnalysisOptions { fit: FitOptions { seed: 3, ..FitOptions::default() }, ..AnalysisOptions::default() };
    let analysis = analyze(&pairs, &coords, &opts).unwrap();
    let routes = top_routes(&analysis.model.p, 0.03);

    let ids = &analysis.aggregate.station_ids;
    let pos = |id: &str| ids.iter().position(|x| x == id).unwrap();
    let recovered = (0..4)
        .filter(|&k| {
            let (d, a) = (pos(&network.stations[3 * k].id), pos(&network.stations[3 * k + 1].id));
            routes.iter().any(|r| r.origin == d && r.destination == a)
        })
        .count();
    let rho = spearman(&analysis.predicted(), &analysis.aggregate.target);

    let elapsed = t0.elapsed();
    let pass = weekdays == 14 && share >= 0.6 && recovered >= 3 && rho >= 0.8 && elapsed < limit;
    let detail = format!(
        "{recovered}/4 planted pairs among {} routes (need 3), Spearman {rho:.3} (need 0.8), lambda = ({:.3}, {:.3}, {:.3}), {} couplings, {weekdays} weekdays, coupled share {share:.2}",
        routes.len(),
        analysis.model.lambda[0],
        analysis.model.lambda[1],
        analysis.model.lambda[2],
        analysis.couplings.len()
    );
    report(3, "route recovery", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_4_optimizer_self_consistency() {
    let limit = StdDuration::from_secs(30);
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let n = 12;
    let coords: Vec<LatLon> = (0..n).map(|_| km(rng.random_range(0.0..8.0), rng.random_range(0.0..6.0))).collect();
    let profiles: Vec<Vec<f64>> = (0..n).map(|_| (0..40).map(|_| rng.random_range(0.0..30.0)).collect()).collect();
    let couplings = [
        Coupling { departure: 0, arrival: 5, score: 0.9, shift_bins: 2 },
        Coupling { departure: 3, arrival: 7, score: 0.8, shift_bins: 3 },
    ];
    let features = FeatureSet::build(&coords, &profiles, &couplings, 0.5).unwrap();
    let initial: Vec<f64> = (0..n).map(|_| rng.random_range(2.0..28.0)).collect();
    let lambda_true = [1.0, 1.2, 1.1];
    let target = propagate(&build_transition(lambda_true, &features), &initial).unwrap();
    let agg = MorningAggregate {
        station_ids: (1..=n).map(|i| i.to_string()).collect(),
        initial,
        target,
        window: DailyWindow::morning(),
    };
    let model = fit_lambda(&agg, &features, &FitOptions::default()).unwrap();
    let elapsed = t0.elapsed();
    let pass = model.objective <= 1e-6 && model.iterations <= 500 && elapsed < limit;
    let detail = format!(
        "J = {:.2e} (need 1e-6) after {} iterations, lambda = ({:.3}, {:.3}, {:.3})",
        model.objective, model.iterations, model.lambda[0], model.lambda[1], model.lambda[2]
    );
    report(4, "optimizer self-consistency", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_5_prediction_ordering() {
    let limit = StdDuration::from_secs(60);
    let t0 = Instant::now();
    let network = generate_network(&NetworkSpec::new(20, 42)).unwrap();
    let schedule = OdSchedule::commuter(&network, 2.0);
    let sim = simulate(&network, &schedule, &NoiseSpec::level(0.1), &SimOptions::new(monday(), 28, 42)).unwrap();
    let days = prepare_station_days(&sim.snapshots, &PrepareOptions::default()).unwrap();
    let bins = BinGrid::new(DailyWindow::service(), Duration::minutes(2)).unwrap();
    let models = [ModelTag::Persistence, ModelTag::Gradient(Scheme::SameWeekday)];
    let rows = evaluate(
        &days,
        bins,
        &HolidayCalendar::empty(),
        &CycleOptions::default(),
        &models,
        &[Duration::minutes(10), Duration::minutes(120)],
    )
    .unwrap();
    let mae = |m: ModelTag, off: i64| rows.iter().find(|r| r.model == m && r.offset_min == off).unwrap().mae;
    let (p10, g10) = (mae(models[0], 10), mae(models[1], 10));
    let (p120, g120) = (mae(models[0], 120), mae(models[1], 120));
    let ratio = g120 / p120;
    let gap = (g10 - p10).abs() / p10;
    let elapsed = t0.elapsed();
    let pass = ratio <= 0.8 && gap <= 0.10 && elapsed < limit;
    let detail = format!(
        "120 min: gradient {g120:.3} / persistence {p120:.3} = {ratio:.3} (need <= 0.8); 10 min: {g10:.3} vs {p10:.3}, gap {:.1}% (need <= 10%)",
        gap * 100.0
    );
    report(5, "prediction ordering", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_6_capacity_invariance() {
    let limit = StdDuration::from_secs(60);
    let t0 = Instant::now();
    let archetypes = [Archetype::Residential, Archetype::Office, Archetype::Beach];
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut vectors = Vec::new();
    let mut labels = Vec::new();
    for (a, arch) in archetypes.iter().enumerate() {
        for scale in 1..=3 {
            for s in 0..5 {
                let capacity = 20.0 * f64::from(scale);
                let values = (0..48)
                    .map(|i| {
                        let t = TimeOfDay::from_seconds(5 * 3600 + i * 1425).unwrap();
                        arch.template(t) * capacity + noise.sample(&mut rng)
                    })
                    .collect();
                vectors.push(CycleVector::new(format!("{a}-{scale}-{s}"), values));
                labels.push((a, scale));
            }
        }
    }
    let sel = select_k(&vectors, 2..=20, 0, 100, InternalSimilarity::Separation).unwrap();
    let model = kmeans_abs(&vectors, sel.k, 0, 100).unwrap();
    let scale_pure = (0..sel.k).all(|c| {
        let m = model.members(c);
        m.iter().all(|&i| labels[i].1 == labels[m[0]].1)
    });
    let meta = meta_cluster(&model, 3, 0, 100, 0.5).unwrap();
    let station_meta: Vec<MetaLabel> = meta.station_meta().unwrap();
    let planted: Vec<usize> = labels.iter().map(|l| l.0).collect();
    let ari = adjusted_rand_index(&station_meta, &planted);

    let elapsed = t0.elapsed();
    let pass = sel.k.abs_diff(9) <= 1 && scale_pure && ari >= 0.9 && elapsed < limit;
    let detail = format!(
        "select_k = {} (planted 9 +/- 1), stage-1 clusters scale-pure: {scale_pure}, meta ARI vs archetype = {ari:.3} (need 0.9)",
        sel.k
    );
    report(6, "clustering capacity-invariance", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_bikeflow")
}

fn run_ok(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(bin());
    cmd.args(args).env_remove("BIKEFLOW_SEED");
    if let Some(s) = seed_env {
        cmd.env("BIKEFLOW_SEED", s);
    }
    let out = cmd.output().expect("run bikeflow");
    assert!(out.status.success(), "bikeflow {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/kml")
}

/// Runs `args` twice, with `{run}` in any argument replaced by the run
/// number, and compares stdout and every listed output file.
fn identical_reruns(dir: &Path, args: &[&str], outputs: &[&str], seed_env: Option<&str>) -> Result<(), String> {
    let mut stdouts = Vec::new();
    for run in 0..2 {
        let argv: Vec<String> = args.iter().map(|a| a.replace("{run}", &run.to_string())).collect();
        let argv: Vec<&str> = argv.iter().map(String::as_str).collect();
        stdouts.push(run_ok(&argv, seed_env).stdout);
    }
    if stdouts[0] != stdouts[1] {
        return Err(format!("{}: stdout differs", args[0]));
    }
    for o in outputs {
        let a = std::fs::read(dir.join(o.replace("{run}", "0"))).map_err(|e| format!("{o}: {e}"))?;
        let b = std::fs::read(dir.join(o.replace("{run}", "1"))).map_err(|e| format!("{o}: {e}"))?;
        if a.is_empty() || a != b {
            return Err(format!("{}: {o} differs or is empty", args[0]));
        }
    }
    Ok(())
}

#[test]
fn criterion_7_determinism_and_round_trip() {
    let limit = StdDuration::from_secs(300);
    let t0 = Instant::now();
    let mut failures = Vec::new();

    let mut files: Vec<PathBuf> = std::fs::read_dir(fixtures()).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    let mut parsed = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let obs = parse_kml(&std::fs::read_to_string(f).unwrap()).unwrap().observations;
        parsed.push(Snapshot::new(Utc.with_ymd_and_hms(2008, 5, 15, 12, 2 * i as u32, 0).unwrap(), obs));
    }
    let mut buf = Vec::new();
    write_snapshots(&mut buf, &parsed, true).unwrap();
    if read_snapshots(buf.as_slice(), None).unwrap() != parsed {
        failures.push("parse -> serialize -> load changed the snapshots".to_string());
    }

    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let p = |name: &str| d.join(name).to_str().unwrap().to_string();
    let kml = fixtures().to_str().unwrap().to_string();
    std::fs::write(d.join("cfg.txt"), "global_min_slots = 0\nseed = 11\n").unwrap();
    let cfg = p("cfg.txt");

    let ingest = identical_reruns(d, &["ingest", "--kml-dir", &kml, "--store", &p("kml{run}.csv")], &["kml{run}.csv"], None);
    if let Err(e) = ingest {
        failures.push(e);
    } else {
        let loaded = bikeflow_core::ingest::load_snapshots(&d.join("kml0.csv"), None).unwrap();
        if loaded != parsed {
            failures.push("CLI ingest store differs from the parsed documents".to_string());
        }
    }

    let sim = [
        "simulate", "--stations", "12", "--days", "10", "--seed", "42", "--noise", "0.1", "--out-store", &p("sim{run}.csv"),
        "--out-trips", &p("trips{run}.csv"), "--out-schedule", &p("sched{run}.csv"),
    ];
    let p_sched0_csv = p("sched0.csv");
    let p_resimr_csv = p("resim{run}.csv");
    let p_cr_csv = p("c{run}.csv");
    let p_gr_csv = p("g{run}.csv");
    let p_gridr_geojson = p("grid{run}.geojson");
    let p_clr_csv = p("cl{run}.csv");
    let p_zonesr_geojson = p("zones{run}.geojson");
    let p_curver_csv = p("curve{run}.csv");
    let p_maer_csv = p("mae{run}.csv");
    let p_routesr_csv = p("routes{run}.csv");
    let p_routesr_geojson = p("routes{run}.geojson");
    let p_fitr_json = p("fit{run}.json");
    let store = p("sim0.csv");
    let runs: Vec<(Vec<&str>, Vec<&str>, Option<&str>)> = vec![
        (sim.to_vec(), vec!["sim{run}.csv", "trips{run}.csv", "sched{run}.csv"], None),
        (
            vec!["simulate", "--stations", "12", "--days", "3", "--schedule", &p_sched0_csv, "--out-store", &p_resimr_csv],
            vec!["resim{run}.csv"],
            Some("42"),
        ),
        (vec!["validate", "--store", &store], vec![], None),
        (vec!["cycles", "--store", &store, "--station", "3", "--out", &p_cr_csv], vec!["c{run}.csv"], None),
        (
            vec!["--config", &cfg, "cycles", "--store", &store, "--global", "--day-class", "all", "--out", &p_gr_csv],
            vec!["g{run}.csv"],
            None,
        ),
        (
            vec!["geopattern", "--store", &store, "--time", "09:30", "--grid", "12x12", "--out", &p_gridr_geojson],
            vec!["grid{run}.geojson"],
            None,
        ),
        (
            vec![
                "cluster", "--store", &store, "--k-range", "2-8", "--meta-k", "3", "--seed", "5", "--out", &p_clr_csv,
                "--out-geojson", &p_zonesr_geojson, "--out-curve", &p_curver_csv,
            ],
            vec!["cl{run}.csv", "zones{run}.geojson", "curve{run}.csv"],
            None,
        ),
        (
            vec!["predict", "--store", &store, "--station", "2", "--at", "2008-05-22T08:00:00Z", "--offset", "60", "--scheme", "same-weekday"],
            vec![],
            None,
        ),
        (vec!["eval-predict", "--store", &store, "--offsets", "10,60", "--out", &p_maer_csv], vec!["mae{run}.csv"], None),
        (
            vec![
                "--config", &cfg, "routes", "--store", &store, "--out", &p_routesr_csv, "--out-geojson",
                &p_routesr_geojson, "--report", &p_fitr_json,
            ],
            vec!["routes{run}.csv", "routes{run}.geojson", "fit{run}.json"],
            Some("9"),
        ),
    ];
    let mut covered = std::collections::BTreeSet::new();
    for (args, outputs, seed) in &runs {
        covered.insert(args.iter().find(|a| !a.starts_with('-') && !a.contains('/')).unwrap().to_string());
        if let Err(e) = identical_reruns(d, args, outputs, *seed) {
            failures.push(e);
        }
    }
    covered.insert("ingest".to_string());

    let mae_rows = std::fs::read_to_string(d.join("mae0.csv")).unwrap_or_default().lines().count();
    // persistence + 3 gradient schemes + oracle, 2 offsets, plus header
    if mae_rows != 11 {
        failures.push(format!("mae.csv has {mae_rows} lines, expected 11"));
    }

    let elapsed = t0.elapsed();
    let pass = failures.is_empty() && covered.len() == 9 && elapsed < limit;
    let detail = if failures.is_empty() {
        format!("round trip exact on {} KML fixtures; {} subcommands byte-identical on rerun", files.len(), covered.len())
    } else {
        failures.join("; ")
    };
    report(7, "determinism and round trip", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}

fn obs(id: &str, bikes: u32, free: u32) -> StationObservation {
    StationObservation { station_id: id.into(), name: format!("S{id}"), latitude: 41.39, longitude: 2.17, bikes, free_slots: free }
}

fn support_column(csv: &str, from: &str, count: usize) -> Vec<u32> {
    let lines: Vec<&str> = csv.lines().skip(1).collect();
    let start = lines.iter().position(|l| l.starts_with(from)).unwrap();
    lines[start..start + count].iter().map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect()
}

#[test]
fn criterion_8_filtering_constants() {
    let limit = StdDuration::from_secs(60);
    let t0 = Instant::now();
    // 300 stations x 27 slots = 8,100 city-wide; station "A" dips to 4 slots
    // at 05:08 and 05:10; the 05:04 snapshot totals 7,900
    let mut snapshots = Vec::new();
    for i in 0..8u32 {
        let ts = Utc.with_ymd_and_hms(2008, 5, 20, 5, 2 * i, 0).unwrap();
        let mut o = Vec::new();
        o.push(if i == 4 || i == 5 { obs("A", 2, 2) } else { obs("A", 10, 17) });
        for s in 1..300 {
            let free = if i == 2 && s <= 200 { 13 } else { 14 };
            o.push(obs(&s.to_string(), 13, free));
        }
        snapshots.push(Snapshot::new(ts, o));
    }
    let totals: Vec<u64> = snapshots.iter().map(Snapshot::total_slots).collect();

    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store.csv");
    let mut f = std::fs::File::create(&store).unwrap();
    write_snapshots(&mut f, &snapshots, true).unwrap();
    drop(f);
    let s = store.to_str().unwrap();
    let station_csv = String::from_utf8(run_ok(&["cycles", "--store", s, "--station", "A", "--day-class", "all"], None).stdout).unwrap();
    let global_csv = String::from_utf8(run_ok(&["cycles", "--store", s, "--global", "--day-class", "all"], None).stdout).unwrap();
    let station_support = support_column(&station_csv, "05:00", 8);
    let global_support = support_column(&global_csv, "05:00", 8);

    let elapsed = t0.elapsed();
    let station_ok = station_support == [1, 1, 1, 1, 0, 0, 1, 1];
    let global_ok = global_support == [1, 1, 0, 1, 1, 1, 1, 1];
    let pass = totals[2] == 7900 && totals.iter().enumerate().all(|(i, &t)| i == 2 || t > 8000) && station_ok && global_ok && elapsed < limit;
    let detail = format!(
        "station support 05:00-05:14 {station_support:?} (slots 4 at 05:08, 05:10), global support {global_support:?} (7,900 slots at 05:04)"
    );
    report(8, "filtering constants", pass, &detail, elapsed, limit);
    assert!(pass, "{detail}");
}
