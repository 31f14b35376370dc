//! Station clustering on weekday activity cycles.
//!
//! Stage one groups stations by absolute similarity, the reciprocal of the L1
//! distance between their cycles, using k-medians under L1. Stage two groups
//! the stage-one centroids by relative similarity: the number of time steps
//! on which the signs of their gradients agree. That second grouping ignores
//! station capacity.

use std::cmp::Ordering;
use std::ops::RangeInclusive;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::cycles::{CycleKey, DailyCycle};

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least 2 samples per vector, got {0}")]
    TooShort(usize),
    #[error("k = {k} exceeds the number of vectors ({n})")]
    KTooLarge { k: usize, n: usize },
    #[error("k must be at least 1")]
    KZero,
    #[error("meta k = {meta_k} exceeds the number of clusters ({k})")]
    MetaKTooLarge { meta_k: usize, k: usize },
    #[error("empty k range")]
    RangeEmpty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleVector {
    pub station_id: String,
    pub values: Vec<f64>,
}

impl CycleVector {
    pub fn new(station_id: impl Into<String>, values: Vec<f64>) -> Self {
        Self { station_id: station_id.into(), values }
    }
}

/// Restricts station cycles to the bins present in every one of them.
/// Global cycles are ignored.
pub fn cycle_vectors(cycles: &[DailyCycle]) -> Vec<CycleVector> {
    let stations: Vec<_> = cycles.iter().filter(|c| matches!(c.key, CycleKey::Station(_))).collect();
    let Some(n) = stations.iter().map(|c| c.mean.len()).min() else { return Vec::new() };
    let common: Vec<usize> = (0..n).filter(|&i| stations.iter().all(|c| c.mean[i].is_some())).collect();
    stations
        .iter()
        .map(|c| {
            let CycleKey::Station(id) = &c.key else { unreachable!() };
            CycleVector::new(id.clone(), common.iter().map(|&i| c.mean[i].expect("common bin")).collect())
        })
        .collect()
}

/// Absolute similarity. Identical vectors have zero distance, so they map to
/// `Max`, which orders above every finite value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Similarity {
    Finite(f64),
    Max,
}

impl Similarity {
    pub fn finite(self) -> Option<f64> {
        match self {
            Similarity::Finite(v) => Some(v),
            Similarity::Max => None,
        }
    }
}

impl Eq for Similarity {}

impl Ord for Similarity {
    fn cmp(&self, other: &Self) -> Ordering {
        match (self, other) {
            (Similarity::Max, Similarity::Max) => Ordering::Equal,
            (Similarity::Max, _) => Ordering::Greater,
            (_, Similarity::Max) => Ordering::Less,
            (Similarity::Finite(a), Similarity::Finite(b)) => a.total_cmp(b),
        }
    }
}

impl PartialOrd for Similarity {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl std::fmt::Display for Similarity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Similarity::Finite(v) => write!(f, "{v}"),
            Similarity::Max => f.write_str("max"),
        }
    }
}

fn same_len(p: &[f64], q: &[f64]) -> Result<(), ClusterError> {
    if p.len() != q.len() {
        return Err(ClusterError::LengthMismatch(p.len(), q.len()));
    }
    Ok(())
}

fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

/// Sum of absolute differences.
pub fn abs_distance(p: &[f64], q: &[f64]) -> Result<f64, ClusterError> {
    same_len(p, q)?;
    Ok(l1(p, q))
}

pub fn similarity_from_distance(d: f64) -> Similarity {
    if d == 0.0 {
        Similarity::Max
    } else {
        Similarity::Finite(1.0 / d)
    }
}

pub fn abs_sim(p: &[f64], q: &[f64]) -> Result<Similarity, ClusterError> {
    abs_distance(p, q).map(similarity_from_distance)
}

/// Gradient signs; `+1` where the next sample is not lower, `-1` otherwise.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignVector(Vec<i8>);

impl SignVector {
    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn grad_sign(p: &[f64]) -> Result<SignVector, ClusterError> {
    if p.len() < 2 {
        return Err(ClusterError::TooShort(p.len()));
    }
    Ok(SignVector(p.windows(2).map(|w| if w[1] - w[0] >= 0.0 { 1 } else { -1 }).collect()))
}

/// Number of positions where two sign vectors disagree.
pub fn hamming(a: &SignVector, b: &SignVector) -> usize {
    a.0.iter().zip(&b.0).filter(|(x, y)| x != y).count()
}

/// Relative similarity: count of steps on which the gradient signs agree,
/// in `[0, n - 1]`.
pub fn rel_sim(p: &[f64], q: &[f64]) -> Result<usize, ClusterError> {
    same_len(p, q)?;
    let (dp, dq) = (grad_sign(p)?, grad_sign(q)?);
    let agree: i64 = dp.0.iter().zip(&dq.0).map(|(&a, &b)| (1 + i64::from(a) * i64::from(b)) / 2).sum();
    Ok(agree as usize)
}

/// Label of a stage-one cluster after meta-clustering.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetaLabel {
    Group(usize),
    Ungrouped,
}

impl std::fmt::Display for MetaLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            MetaLabel::Group(g) => write!(f, "{g}"),
            MetaLabel::Ungrouped => f.write_str("UNGROUPED"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub meta_k: usize,
    /// Indexed by stage-one cluster.
    pub assignment: Vec<MetaLabel>,
    pub centroids: Vec<SignVector>,
    /// Meta-clusters that ended with no member.
    pub empty: Vec<usize>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub station_ids: Vec<String>,
    pub k: usize,
    /// Indexed like `station_ids`.
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Total L1 distance to assigned centroids after each update.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub meta: Option<MetaModel>,
}

impl ClusterModel {
    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        (0..self.assignment.len()).filter(|&i| self.assignment[i] == cluster).collect()
    }

    /// Meta label of each station, when meta-clustering has run.
    pub fn station_meta(&self) -> Option<Vec<MetaLabel>> {
        let meta = self.meta.as_ref()?;
        Some(self.assignment.iter().map(|&c| meta.assignment[c]).collect())
    }
}

fn median_in_place(buf: &mut [f64]) -> f64 {
    buf.sort_by(f64::total_cmp);
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        (buf[n / 2 - 1] + buf[n / 2]) / 2.0
    }
}

fn component_median(points: &[&[f64]]) -> Vec<f64> {
    let dim = points[0].len();
    let mut buf = Vec::with_capacity(points.len());
    (0..dim)
        .map(|j| {
            buf.clear();
            buf.extend(points.iter().map(|p| p[j]));
            median_in_place(&mut buf)
        })
        .collect()
}

/// Seeded farthest-point initialisation: a random first center, then
/// repeatedly the point farthest from every chosen center.
fn farthest_point_init<T>(points: &[T], k: usize, seed: u64, dist: impl Fn(&T, &T) -> f64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = vec![rng.random_range(0..points.len())];
    let mut nearest: Vec<f64> = points.iter().map(|p| dist(p, &points[centers[0]])).collect();
    while centers.len() < k {
        let mut best = None;
        for (i, &d) in nearest.iter().enumerate() {
            if centers.contains(&i) {
                continue;
            }
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (next, _) = best.expect("k <= n");
        centers.push(next);
        for (i, p) in points.iter().enumerate() {
            nearest[i] = nearest[i].min(dist(p, &points[next]));
        }
    }
    centers
}

fn nearest_center(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = l1(p, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn check_vectors(vectors: &[CycleVector]) -> Result<usize, ClusterError> {
    let n = vectors.first().map_or(0, |v| v.values.len());
    for v in vectors {
        same_len(&vectors[0].values, &v.values)?;
    }
    if !vectors.is_empty() && n < 2 {
        return Err(ClusterError::TooShort(n));
    }
    Ok(n)
}

/// Stage one: k-medians under L1.
///
/// Points go to the nearest centroid (lowest index on ties), centroids move to
/// the component-wise median of their members, and a cluster left empty is
/// re-seeded with the point farthest from its own centroid. Stops when the
/// assignment no longer changes or after `max_iter` rounds.
pub fn kmeans_abs(vectors: &[CycleVector], k: usize, seed: u64, max_iter: usize) -> Result<ClusterModel, ClusterError> {
    check_vectors(vectors)?;
    if k == 0 {
        return Err(ClusterError::KZero);
    }
    if k > vectors.len() {
        return Err(ClusterError::KTooLarge { k, n: vectors.len() });
    }
    let points: Vec<&[f64]> = vectors.iter().map(|v| v.values.as_slice()).collect();
    let init = farthest_point_init(&points, k, seed, |a, b| l1(a, b));
    let mut centroids: Vec<Vec<f64>> = init.iter().map(|&i| points[i].to_vec()).collect();
    let mut assignment = vec![usize::MAX; points.len()];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter {
        iterations += 1;
        let mut next: Vec<usize> = points.iter().map(|p| nearest_center(p, &centroids).0).collect();

        // re-seed empty clusters from the worst-fitting point of a cluster with
        // more than one member
        for c in 0..k {
            if next.contains(&c) {
                continue;
            }
            let mut sizes = vec![0usize; k];
            next.iter().for_each(|&a| sizes[a] += 1);
            let donor = (0..points.len())
                .filter(|&i| sizes[next[i]] > 1)
                .map(|i| (i, l1(points[i], &centroids[next[i]])))
                .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                    Some((_, bd)) if bd >= d => best,
                    _ => Some((i, d)),
                });
            if let Some((i, _)) = donor {
                next[i] = c;
                centroids[c] = points[i].to_vec();
            }
        }

        let changed = next != assignment;
        assignment = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&[f64]> = (0..points.len()).filter(|&i| assignment[i] == c).map(|i| points[i]).collect();
            if !members.is_empty() {
                *centroid = component_median(&members);
            }
        }
        history.push(points.iter().zip(&assignment).map(|(p, &a)| l1(p, &centroids[a])).sum());
        if !changed {
            converged = true;
            break;
        }
    }

    Ok(ClusterModel {
        station_ids: vectors.iter().map(|v| v.station_id.clone()).collect(),
        k,
        assignment,
        centroids,
        objective_history: history,
        iterations,
        converged,
        meta: None,
    })
}

/// How a cluster's internal similarity is summarised for k selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InternalSimilarity {
    /// Mean absolute similarity over member pairs.
    MeanPairwise,
    /// Lowest absolute similarity over member pairs.
    MinPairwise,
    /// Mean absolute similarity of members to the cluster centroid.
    ToCentroid,
    /// Mean pairwise similarity divided by the mean similarity between the
    /// cluster's members and those of its most similar neighbour.
    #[default]
    Separation,
}

impl FromStr for InternalSimilarity {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "mean-pairwise" => Ok(Self::MeanPairwise),
            "min-pairwise" => Ok(Self::MinPairwise),
            "to-centroid" => Ok(Self::ToCentroid),
            "separation" => Ok(Self::Separation),
            _ => Err(format!("unknown internal similarity `{s}`")),
        }
    }
}

/// Internal similarity of one cluster. Singletons, and clusters whose members
/// all coincide, are `Max`; zero-distance pairs are left out of means.
pub fn internal_similarity(members: &[&[f64]], centroid: &[f64], mode: InternalSimilarity) -> Similarity {
    let distances: Vec<f64> = match mode {
        InternalSimilarity::MeanPairwise | InternalSimilarity::MinPairwise | InternalSimilarity::Separation => {
            if members.len() < 2 {
                return Similarity::Max;
            }
            let mut d = Vec::new();
            for i in 0..members.len() {
                for j in i + 1..members.len() {
                    d.push(l1(members[i], members[j]));
                }
            }
            d
        }
        InternalSimilarity::ToCentroid => members.iter().map(|m| l1(m, centroid)).collect(),
    };
    let positive: Vec<f64> = distances.into_iter().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        return Similarity::Max;
    }
    match mode {
        InternalSimilarity::MinPairwise => {
            Similarity::Finite(1.0 / positive.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        }
        _ => Similarity::Finite(positive.iter().map(|d| 1.0 / d).sum::<f64>() / positive.len() as f64),
    }
}

fn mean_cross_similarity(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    let mut sum = 0.0;
    for p in a {
        for q in b {
            let d = l1(p, q);
            if d == 0.0 {
                return f64::INFINITY;
            }
            sum += 1.0 / d;
        }
    }
    sum / (a.len() * b.len()) as f64
}

/// Smallest internal similarity over the clusters of `model`.
///
/// In `Separation` mode, singleton clusters and a lone cluster are `Max`, and
/// a cluster sharing a point with another scores zero.
pub fn min_internal_similarity(vectors: &[CycleVector], model: &ClusterModel, mode: InternalSimilarity) -> Similarity {
    let groups: Vec<Vec<&[f64]>> = (0..model.k)
        .map(|c| model.members(c).into_iter().map(|i| vectors[i].values.as_slice()).collect())
        .collect();
    (0..model.k)
        .filter(|&c| !groups[c].is_empty())
        .map(|c| {
            let intra = internal_similarity(&groups[c], &model.centroids[c], mode);
            if mode != InternalSimilarity::Separation || groups[c].len() < 2 {
                return intra;
            }
            let nearest = (0..model.k)
                .filter(|&o| o != c && !groups[o].is_empty())
                .map(|o| mean_cross_similarity(&groups[c], &groups[o]))
                .fold(None, |acc: Option<f64>, x| Some(acc.map_or(x, |a| a.max(x))));
            match (intra, nearest) {
                (_, None) => Similarity::Max,
                (_, Some(x)) if x.is_infinite() => Similarity::Finite(0.0),
                (Similarity::Max, Some(_)) => Similarity::Max,
                (Similarity::Finite(v), Some(x)) => Similarity::Finite(v / x),
            }
        })
        .min()
        .unwrap_or(Similarity::Max)
}

#[derive(Debug, Clone, PartialEq)]
pub struct KSelection {
    pub k: usize,
    /// `(k, minimum internal similarity)` for every k tried.
    pub curve: Vec<(usize, Similarity)>,
    /// The curve after a window-3 running median.
    pub smoothed: Vec<Similarity>,
    /// Set when the smoothed curve never decreased.
    pub warning: Option<String>,
}

fn median3(values: &[Similarity]) -> Vec<Similarity> {
    let n = values.len();
    (0..n)
        .map(|i| {
            if i == 0 || i + 1 == n {
                return values[i];
            }
            let mut w = [values[i - 1], values[i], values[i + 1]];
            w.sort();
            w[1]
        })
        .collect()
}

/// Relative size of the step from `a` down to `b`; zero when it does not drop.
fn relative_drop(a: Similarity, b: Similarity) -> f64 {
    match (a, b) {
        (Similarity::Max, Similarity::Finite(_)) => f64::INFINITY,
        (Similarity::Finite(x), Similarity::Finite(y)) if y < x => (x - y) / x,
        _ => 0.0,
    }
}

/// Picks the number of stage-one clusters: the k just before the largest
/// relative drop of the smoothed minimum-internal-similarity curve (earliest
/// on ties). A curve that never drops yields the largest k in the range, with
/// a warning.
pub fn select_k(
    vectors: &[CycleVector],
    k_range: RangeInclusive<usize>,
    seed: u64,
    max_iter: usize,
    mode: InternalSimilarity,
) -> Result<KSelection, ClusterError> {
    let ks: Vec<usize> = k_range.filter(|&k| k >= 2).collect();
    if ks.is_empty() {
        return Err(ClusterError::RangeEmpty);
    }
    let mut curve = Vec::with_capacity(ks.len());
    for &k in &ks {
        let model = kmeans_abs(vectors, k, seed, max_iter)?;
        curve.push((k, min_internal_similarity(vectors, &model, mode)));
    }
    let raw: Vec<Similarity> = curve.iter().map(|&(_, s)| s).collect();
    let smoothed = median3(&raw);
    let mut best: Option<(usize, f64)> = None;
    for i in 0..smoothed.len().saturating_sub(1) {
        let drop = relative_drop(smoothed[i], smoothed[i + 1]);
        if drop > 0.0 && best.is_none_or(|(_, b)| drop > b) {
            best = Some((i, drop));
        }
    }
    let (k, warning) = match best {
        Some((i, _)) => (ks[i], None),
        None => (
            *ks.last().expect("non-empty"),
            Some("minimum internal similarity never decreased; using the largest k".to_string()),
        ),
    };
    Ok(KSelection { k, curve, smoothed, warning })
}

fn majority(members: &[&SignVector]) -> SignVector {
    let n = members[0].len();
    SignVector(
        (0..n)
            .map(|j| {
                let sum: i64 = members.iter().map(|m| i64::from(m.0[j])).sum();
                if sum >= 0 {
                    1
                } else {
                    -1
                }
            })
            .collect(),
    )
}

fn nearest_sign(s: &SignVector, centroids: &[SignVector], skip: Option<usize>) -> Option<(usize, usize)> {
    centroids
        .iter()
        .enumerate()
        .filter(|(c, _)| Some(*c) != skip)
        .map(|(c, m)| (c, hamming(s, m)))
        .min_by_key(|&(c, d)| (d, c))
}

/// Stage two: groups the stage-one clusters by the gradient signs of their
/// centroids, with Hamming distance and majority-vote centroids (ties `+1`).
///
/// A cluster whose gradient signs agree with the nearest meta-centroid on
/// less than `min_agreement` of the steps is `Ungrouped`. A cluster that sits
/// alone in its meta-cluster is measured against the other meta-centroids
/// instead, so an outlier cannot vouch for itself.
pub fn meta_cluster(
    model: &ClusterModel,
    meta_k: usize,
    seed: u64,
    max_iter: usize,
    min_agreement: f64,
) -> Result<ClusterModel, ClusterError> {
    if meta_k == 0 {
        return Err(ClusterError::KZero);
    }
    if meta_k > model.k {
        return Err(ClusterError::MetaKTooLarge { meta_k, k: model.k });
    }
    let signs: Vec<SignVector> = model.centroids.iter().map(|c| grad_sign(c)).collect::<Result<_, _>>()?;
    let steps = signs[0].len() as f64;
    let init = farthest_point_init(&signs, meta_k, seed, |a, b| hamming(a, b) as f64);
    let mut centroids: Vec<SignVector> = init.iter().map(|&i| signs[i].clone()).collect();
    let mut assignment: Vec<usize> = vec![usize::MAX; signs.len()];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let next: Vec<usize> = signs.iter().map(|s| nearest_sign(s, &centroids, None).expect("meta_k >= 1").0).collect();
        let changed = next != assignment;
        assignment = next;
        for (c, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<&SignVector> = (0..signs.len()).filter(|&i| assignment[i] == c).map(|i| &signs[i]).collect();
            if !members.is_empty() {
                *centroid = majority(&members);
            }
        }
        if !changed {
            break;
        }
    }

    let mut sizes = vec![0usize; meta_k];
    assignment.iter().for_each(|&a| sizes[a] += 1);
    let occupied: Vec<usize> = (0..meta_k).filter(|&c| sizes[c] > 0).collect();
    let labels = signs
        .iter()
        .zip(&assignment)
        .map(|(s, &a)| {
            let agreement = if sizes[a] == 1 {
                let others: Vec<SignVector> = occupied.iter().filter(|&&c| c != a).map(|&c| centroids[c].clone()).collect();
                nearest_sign(s, &others, None).map_or(0.0, |(_, d)| 1.0 - d as f64 / steps)
            } else {
                1.0 - hamming(s, &centroids[a]) as f64 / steps
            };
            if agreement < min_agreement {
                MetaLabel::Ungrouped
            } else {
                MetaLabel::Group(a)
            }
        })
        .collect();

    let mut out = model.clone();
    out.meta = Some(MetaModel {
        meta_k,
        assignment: labels,
        centroids,
        empty: (0..meta_k).filter(|&c| sizes[c] == 0).collect(),
        iterations,
    });
    Ok(out)
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index<A: Ord + Clone, B: Ord + Clone>(a: &[A], b: &[B]) -> f64 {
    use std::collections::BTreeMap;
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let mut table: BTreeMap<(A, B), f64> = BTreeMap::new();
    let mut rows: BTreeMap<A, f64> = BTreeMap::new();
    let mut cols: BTreeMap<B, f64> = BTreeMap::new();
    for (x, y) in a.iter().zip(b) {
        *table.entry((x.clone(), y.clone())).or_default() += 1.0;
        *rows.entry(x.clone()).or_default() += 1.0;
        *cols.entry(y.clone()).or_default() += 1.0;
    }
    let index: f64 = table.values().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.values().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as f64);
    if total == 0.0 {
        return 1.0;
    }
    let expected = sum_a * sum_b / total;
    let max = (sum_a + sum_b) / 2.0;
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
