//! Morning transition matrix and most probable routes from aggregate counts.
//!
//! Each column `i` of the transition matrix holds the probabilities that a
//! bike starting the window at station `i` ends it at each station `j`. The
//! matrix is a log-linear combination of three pairwise features (distance,
//! cycle dissimilarity and departure/arrival coupling), column-normalised,
//! with exponents fitted by a downhill simplex so that `P * I` matches `F`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::clock::DailyWindow;
use crate::cycles::DailyCycle;
use crate::geo::LatLon;
pub use crate::geo::haversine;
use crate::simplex::{minimize, SimplexOptions};
use crate::stats::pearson;

/// Floor applied to every feature value.
pub const FEATURE_EPS: f64 = 1e-3;

#[derive(Debug, Error, PartialEq)]
pub enum RouteError {
    #[error("expected {expected} values, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("cycles differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 stations, got {0}")]
    TooFewStations(usize),
    #[error("station `{station}` has no cycle value at {time}")]
    MissingCycleValue { station: String, time: String },
    #[error("window {0} does not lie on the cycle bins")]
    WindowOffGrid(DailyWindow),
}

/// Average bikes per station at the start (`initial`) and end (`target`) of
/// the window.
#[derive(Debug, Clone, PartialEq)]
pub struct MorningAggregate {
    pub station_ids: Vec<String>,
    pub initial: Vec<f64>,
    pub target: Vec<f64>,
    pub window: DailyWindow,
}

impl MorningAggregate {
    pub fn len(&self) -> usize {
        self.station_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.station_ids.is_empty()
    }
}

/// Bin range `[first, last]` of `window` on the cycles' grid. The end bin is
/// the one starting at the window end, or the grid's last bin if the window
/// runs past it.
pub fn window_bins(cycle: &DailyCycle, window: DailyWindow) -> Result<(usize, usize), RouteError> {
    let first = cycle.bins.exact_bin(window.start).ok_or(RouteError::WindowOffGrid(window))?;
    let last = match cycle.bins.exact_bin(window.end) {
        Some(b) => b,
        None if window.end.seconds() >= cycle.bins.time_of(cycle.bins.len - 1).seconds() => cycle.bins.len - 1,
        None => return Err(RouteError::WindowOffGrid(window)),
    };
    if last <= first {
        return Err(RouteError::WindowOffGrid(window));
    }
    Ok((first, last))
}

/// Reads `I` and `F` off per-station cycles (one per station, same grid).
pub fn morning_aggregate(cycles: &[(String, &DailyCycle)], window: DailyWindow) -> Result<MorningAggregate, RouteError> {
    let mut agg = MorningAggregate { station_ids: Vec::new(), initial: Vec::new(), target: Vec::new(), window };
    for (id, c) in cycles {
        let (first, last) = window_bins(c, window)?;
        let value = |b: usize| {
            c.mean[b].ok_or_else(|| RouteError::MissingCycleValue { station: id.clone(), time: c.bins.time_of(b).to_string() })
        };
        agg.station_ids.push(id.clone());
        agg.initial.push(value(first)?.max(0.0));
        agg.target.push(value(last)?.max(0.0));
    }
    Ok(agg)
}

/// Cycle means over the window bins, one vector per station. Missing bins
/// are filled from the nearest earlier value (or the first present one).
pub fn window_profiles(cycles: &[(String, &DailyCycle)], window: DailyWindow) -> Result<Vec<Vec<f64>>, RouteError> {
    cycles
        .iter()
        .map(|(id, c)| {
            let (first, last) = window_bins(c, window)?;
            let slice = &c.mean[first..=last];
            let seed = slice.iter().flatten().next().copied().ok_or_else(|| RouteError::MissingCycleValue {
                station: id.clone(),
                time: window.to_string(),
            })?;
            let mut prev = seed;
            Ok(slice
                .iter()
                .map(|v| {
                    prev = v.unwrap_or(prev);
                    prev
                })
                .collect())
        })
        .collect()
}

/// Log-normal density of the distance in km with mode 2 km.
pub fn f1_distance(meters: f64, sigma: f64) -> f64 {
    let d = meters / 1000.0;
    if d <= 0.0 {
        return FEATURE_EPS;
    }
    let mu = 2f64.ln() + sigma * sigma;
    let z = (d.ln() - mu) / sigma;
    let density = (-0.5 * z * z).exp() / (d * sigma * (2.0 * std::f64::consts::PI).sqrt());
    density.max(FEATURE_EPS)
}

/// `(1 - r) / 2` for the Pearson correlation `r` of two cycles, floored.
pub fn f2_similarity(a: &[f64], b: &[f64]) -> Result<f64, RouteError> {
    if a.len() != b.len() {
        return Err(RouteError::LengthMismatch(a.len(), b.len()));
    }
    Ok(((1.0 - pearson(a, b)) / 2.0).max(FEATURE_EPS))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StationRole {
    Departure,
    Arrival,
    NonPattern,
}

impl StationRole {
    pub fn as_str(self) -> &'static str {
        match self {
            StationRole::Departure => "departure",
            StationRole::Arrival => "arrival",
            StationRole::NonPattern => "non-pattern",
        }
    }

    pub fn color(self) -> &'static str {
        match self {
            StationRole::Departure => "blue",
            StationRole::Arrival => "red",
            StationRole::NonPattern => "black",
        }
    }
}

pub fn classify_roles(agg: &MorningAggregate, threshold: f64) -> Vec<StationRole> {
    agg.initial
        .iter()
        .zip(&agg.target)
        .map(|(i, f)| {
            if i - f >= threshold {
                StationRole::Departure
            } else if f - i >= threshold {
                StationRole::Arrival
            } else {
                StationRole::NonPattern
            }
        })
        .collect()
}

/// A matched departure/arrival pair (station indices).
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    pub departure: usize,
    pub arrival: usize,
    pub score: f64,
    pub shift_bins: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingOptions {
    pub speed_kmh: f64,
    pub step_secs: u32,
    pub min_score: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self { speed_kmh: 25.0, step_secs: 120, min_score: 0.5 }
    }
}

/// Travel time between two points at `speed_kmh`, rounded to whole bins.
pub fn travel_shift(a: LatLon, b: LatLon, speed_kmh: f64, step_secs: u32) -> usize {
    let secs = haversine(a, b) / (speed_kmh / 3.6);
    (secs / f64::from(step_secs)).round() as usize
}

fn diff(v: &[f64]) -> Vec<f64> {
    v.windows(2).map(|w| w[1] - w[0]).collect()
}

/// Pairs departure and arrival stations whose shifted cycles mirror each
/// other: the outflow `-d/dt` of departure `k` at `t` is correlated with the
/// inflow of arrival `m` at `t + shift`. Pairs are matched greedily one to
/// one in decreasing score; pairs below `min_score` are dropped.
pub fn detect_couplings(
    profiles: &[Vec<f64>],
    coords: &[LatLon],
    roles: &[StationRole],
    opts: &CouplingOptions,
) -> Vec<Coupling> {
    let deltas: Vec<Vec<f64>> = profiles.iter().map(|p| diff(p)).collect();
    let mut candidates = Vec::new();
    for (k, rk) in roles.iter().enumerate() {
        if *rk != StationRole::Departure {
            continue;
        }
        for (m, rm) in roles.iter().enumerate() {
            if *rm != StationRole::Arrival {
                continue;
            }
            let shift = travel_shift(coords[k], coords[m], opts.speed_kmh, opts.step_secs);
            let len = deltas[k].len().min(deltas[m].len());
            if shift + 2 >= len {
                continue;
            }
            let out: Vec<f64> = deltas[k][..len - shift].iter().map(|d| -d).collect();
            let inflow = &deltas[m][shift..len];
            let score = pearson(&out, inflow);
            if score >= opts.min_score {
                candidates.push(Coupling { departure: k, arrival: m, score, shift_bins: shift });
            }
        }
    }
    candidates.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.departure, a.arrival).cmp(&(b.departure, b.arrival))));
    let mut used_dep = vec![false; roles.len()];
    let mut used_arr = vec![false; roles.len()];
    candidates
        .into_iter()
        .filter(|c| {
            if used_dep[c.departure] || used_arr[c.arrival] {
                return false;
            }
            used_dep[c.departure] = true;
            used_arr[c.arrival] = true;
            true
        })
        .collect()
}

/// `f3[j][i]` for arriving at `j` from `i`.
pub fn f3_coupling(j: usize, i: usize, couplings: &[Coupling]) -> f64 {
    for c in couplings {
        if c.arrival == j && c.departure == i {
            return 1.0;
        }
        if c.departure == j && c.arrival == i {
            return 0.1;
        }
    }
    0.5
}

/// Pairwise features, indexed `(j, i)` like the transition matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub f1: DMatrix<f64>,
    pub f2: DMatrix<f64>,
    pub f3: DMatrix<f64>,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.f1.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.f1.nrows() == 0
    }

    pub fn build(
        coords: &[LatLon],
        profiles: &[Vec<f64>],
        couplings: &[Coupling],
        sigma: f64,
    ) -> Result<Self, RouteError> {
        let n = coords.len();
        if profiles.len() != n {
            return Err(RouteError::DimensionMismatch { expected: n, actual: profiles.len() });
        }
        let mut f1 = DMatrix::from_element(n, n, FEATURE_EPS);
        let mut f2 = DMatrix::from_element(n, n, FEATURE_EPS);
        for i in 0..n {
            for j in 0..i {
                let d = f1_distance(haversine(coords[i], coords[j]), sigma);
                let s = f2_similarity(&profiles[i], &profiles[j])?;
                f1[(j, i)] = d;
                f1[(i, j)] = d;
                f2[(j, i)] = s;
                f2[(i, j)] = s;
            }
        }
        let f3 = DMatrix::from_fn(n, n, |j, i| f3_coupling(j, i, couplings));
        Ok(Self { f1, f2, f3 })
    }
}

/// Column-stochastic matrix from the weighted log-linear feature product.
pub fn build_transition(lambda: [f64; 3], features: &FeatureSet) -> DMatrix<f64> {
    let n = features.len();
    let mut p = DMatrix::from_fn(n, n, |j, i| {
        let f = |m: &DMatrix<f64>| m[(j, i)].ln();
        (lambda[0] * f(&features.f1) + lambda[1] * f(&features.f2) + lambda[2] * f(&features.f3)).exp()
    });
    for mut col in p.column_iter_mut() {
        let sum: f64 = col.iter().sum();
        col /= sum;
    }
    p
}

/// `F_hat = P * I`.
pub fn propagate(p: &DMatrix<f64>, initial: &[f64]) -> Result<Vec<f64>, RouteError> {
    if p.ncols() != initial.len() {
        return Err(RouteError::DimensionMismatch { expected: p.ncols(), actual: initial.len() });
    }
    Ok((p * DVector::from_column_slice(initial)).iter().copied().collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransitionModel {
    pub p: DMatrix<f64>,
    pub lambda: [f64; 3],
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Best objective after each simplex iteration.
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub init: [f64; 3],
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { init: [1.0, 1.0, 1.0], tol: 1e-4, max_iter: 500, seed: 0 }
    }
}

/// Sum of squared residuals between `P(lambda) * I` and `F`.
pub fn fit_objective(lambda: [f64; 3], agg: &MorningAggregate, features: &FeatureSet) -> f64 {
    let p = build_transition(lambda, features);
    let f_hat = p * DVector::from_column_slice(&agg.initial);
    f_hat.iter().zip(&agg.target).map(|(a, b)| (a - b).powi(2)).sum()
}

/// Fits the exponents by Nelder-Mead from `opts.init`. A run that hits the
/// iteration cap returns its best point with `converged = false`.
pub fn fit_lambda(agg: &MorningAggregate, features: &FeatureSet, opts: &FitOptions) -> Result<TransitionModel, RouteError> {
    let n = agg.len();
    if n < 2 {
        return Err(RouteError::TooFewStations(n));
    }
    if features.len() != n || agg.target.len() != n || agg.initial.len() != n {
        return Err(RouteError::DimensionMismatch { expected: n, actual: features.len() });
    }
    let simplex = SimplexOptions { tol: opts.tol, max_iter: opts.max_iter, seed: opts.seed, ..Default::default() };
    let r = minimize(|x| fit_objective([x[0], x[1], x[2]], agg, features), &opts.init, &simplex);
    let lambda = [r.x[0], r.x[1], r.x[2]];
    Ok(TransitionModel {
        p: build_transition(lambda, features),
        lambda,
        objective: r.value,
        iterations: r.iterations,
        converged: r.converged,
        history: r.history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub origin: usize,
    pub destination: usize,
    pub probability: f64,
}

/// Off-diagonal transitions above `threshold`, most probable first.
pub fn top_routes(p: &DMatrix<f64>, threshold: f64) -> Vec<Route> {
    let mut routes = Vec::new();
    for i in 0..p.ncols() {
        for j in 0..p.nrows() {
            if i != j && p[(j, i)] > threshold {
                routes.push(Route { origin: i, destination: j, probability: p[(j, i)] });
            }
        }
    }
    routes.sort_by(|a, b| {
        b.probability.total_cmp(&a.probability).then((a.origin, a.destination).cmp(&(b.origin, b.destination)))
    });
    routes
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalysisOptions {
    pub window: DailyWindow,
    pub role_threshold: f64,
    pub coupling: CouplingOptions,
    pub sigma: f64,
    pub fit: FitOptions,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            window: DailyWindow::morning(),
            role_threshold: 3.0,
            coupling: CouplingOptions::default(),
            sigma: 0.5,
            fit: FitOptions::default(),
        }
    }
}

/// Everything derived from one window of station cycles.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteAnalysis {
    pub aggregate: MorningAggregate,
    pub profiles: Vec<Vec<f64>>,
    pub coords: Vec<LatLon>,
    pub roles: Vec<StationRole>,
    pub couplings: Vec<Coupling>,
    pub features: FeatureSet,
    pub model: TransitionModel,
}

impl RouteAnalysis {
    /// `P * I`, the fitted final counts.
    pub fn predicted(&self) -> Vec<f64> {
        propagate(&self.model.p, &self.aggregate.initial).expect("dimensions checked by the fit")
    }
}

/// Aggregates, roles, couplings, features and the fitted model for the
/// stations in `cycles`, located at `coords` (same order).
pub fn analyze(cycles: &[(String, &DailyCycle)], coords: &[LatLon], opts: &AnalysisOptions) -> Result<RouteAnalysis, RouteError> {
    if coords.len() != cycles.len() {
        return Err(RouteError::DimensionMismatch { expected: cycles.len(), actual: coords.len() });
    }
    let aggregate = morning_aggregate(cycles, opts.window)?;
    let profiles = window_profiles(cycles, opts.window)?;
    let roles = classify_roles(&aggregate, opts.role_threshold);
    let couplings = detect_couplings(&profiles, coords, &roles, &opts.coupling);
    let features = FeatureSet::build(coords, &profiles, &couplings, opts.sigma)?;
    let model = fit_lambda(&aggregate, &features, &opts.fit)?;
    Ok(RouteAnalysis { aggregate, profiles, coords: coords.to_vec(), roles, couplings, features, model })
}
