//! Spherical K-means, clustering metrics and the evaluation protocol.

use std::collections::HashMap;
use std::io::Write;
use std::ops::RangeInclusive;

use itertools::Itertools;
use nalgebra::DMatrix;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{cf_fit, nmf_fit};
use crate::data::{normalize_columns, LabeledDataset};
use crate::exec::Execution;
use crate::model::Hyperparams;
use crate::solver::fit;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult {
    pub assignments: Vec<usize>,
    /// `K x R`, unit rows (zero rows only when no point is nonzero).
    pub centroids: DMatrix<f64>,
    /// Sum of cosine distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after each assignment pass.
    pub history: Vec<f64>,
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        1.0 - dot / (na.sqrt() * nb.sqrt())
    }
}

fn unit_rows(points: &DMatrix<f64>) -> Vec<Vec<f64>> {
    points
        .row_iter()
        .map(|r| {
            let n = r.norm();
            if n > 0.0 {
                r.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; r.len()]
            }
        })
        .collect()
}

/// Unit-length-distance between a unit point and a unit centroid.
fn dist_unit(p: &[f64], c: &[f64]) -> f64 {
    if p.iter().all(|v| *v == 0.0) || c.iter().all(|v| *v == 0.0) {
        return 1.0;
    }
    1.0 - p.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()
}

/// K-means with cosine distance on the rows of `points`.
///
/// Points are scaled to unit length first (cosine distance ignores scale), so
/// the renormalised mean of a cluster is its best centroid and inertia never
/// increases. Seeding is k-means++ on cosine distance; a cluster left empty
/// is reseeded with the point farthest from its centroid.
pub fn kmeans_cosine(points: &DMatrix<f64>, k: usize, seed: u64, max_iters: usize) -> Result<ClusteringResult> {
    let n = points.nrows();
    if k == 0 || k > n {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={n}")));
    }
    if max_iters == 0 {
        return Err(Error::invalid("K-means needs at least one iteration"));
    }
    let pts = unit_rows(points);
    let dim = points.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = plus_plus_seeds(&pts, k, &mut rng);

    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in pts.iter().enumerate() {
            let (best, d) = centroids
                .iter()
                .enumerate()
                .map(|(c, cen)| (c, dist_unit(p, cen)))
                .fold((0, f64::INFINITY), |acc, cur| if cur.1 < acc.1 { cur } else { acc });
            dists[i] = d;
            if assignments[i] != best {
                assignments[i] = best;
                changed = true;
            }
        }
        reseed_empty(&mut assignments, &mut dists, k);
        history.push(dists.iter().sum());
        if !changed && history.len() > 1 {
            break;
        }
        centroids = (0..k)
            .map(|c| {
                let mut sum = vec![0.0; dim];
                for (p, _) in pts.iter().zip(&assignments).filter(|(_, a)| **a == c) {
                    for (s, v) in sum.iter_mut().zip(p) {
                        *s += v;
                    }
                }
                let norm = sum.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm > 0.0 {
                    sum.iter_mut().for_each(|v| *v /= norm);
                }
                sum
            })
            .collect();
    }
    let inertia = pts
        .iter()
        .zip(&assignments)
        .map(|(p, &a)| dist_unit(p, &centroids[a]))
        .sum();
    history.push(inertia);
    Ok(ClusteringResult {
        assignments,
        centroids: DMatrix::from_fn(k, dim, |c, j| centroids[c][j]),
        inertia,
        history,
    })
}

fn plus_plus_seeds(pts: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = pts.len();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut nearest: Vec<f64> = pts.iter().map(|p| dist_unit(p, &pts[chosen[0]])).collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in nearest.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // every point coincides with a seed; fall back to distinct indices
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        };
        let next = if chosen.contains(&next) {
            (0..n).find(|i| !chosen.contains(i)).unwrap()
        } else {
            next
        };
        chosen.push(next);
        for (i, p) in pts.iter().enumerate() {
            nearest[i] = nearest[i].min(dist_unit(p, &pts[next]));
        }
    }
    chosen.iter().map(|&i| pts[i].clone()).collect()
}

/// Moves the farthest point of a non-singleton cluster into each empty one.
fn reseed_empty(assignments: &mut [usize], dists: &mut [f64], k: usize) {
    for c in 0..k {
        if assignments.contains(&c) {
            continue;
        }
        let mut sizes = vec![0usize; k];
        for a in assignments.iter() {
            sizes[*a] += 1;
        }
        let far = (0..assignments.len())
            .filter(|&i| sizes[assignments[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]));
        if let Some(i) = far {
            assignments[i] = c;
            dists[i] = 0.0;
        }
    }
}

fn dense_labels<T: Copy + Eq + std::hash::Hash + Ord>(labels: &[T]) -> (Vec<usize>, usize) {
    let alphabet: Vec<T> = labels.iter().copied().sorted().dedup().collect();
    let index: HashMap<T, usize> = alphabet.iter().enumerate().map(|(i, l)| (*l, i)).collect();
    (labels.iter().map(|l| index[l]).collect(), alphabet.len())
}

/// `pred x truth` count table over dense label indices.
fn contingency<P, T>(pred: &[P], truth: &[T]) -> Result<DMatrix<f64>>
where
    P: Copy + Eq + std::hash::Hash + Ord,
    T: Copy + Eq + std::hash::Hash + Ord,
{
    if pred.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} ground-truth labels",
            pred.len(),
            truth.len()
        )));
    }
    let (p, kp) = dense_labels(pred);
    let (t, kt) = dense_labels(truth);
    let mut table = DMatrix::zeros(kp, kt);
    for (a, b) in p.into_iter().zip(t) {
        table[(a, b)] += 1.0;
    }
    Ok(table)
}

fn pad_square(table: &DMatrix<f64>) -> DMatrix<f64> {
    let n = table.nrows().max(table.ncols());
    DMatrix::from_fn(n, n, |i, j| {
        if i < table.nrows() && j < table.ncols() {
            table[(i, j)]
        } else {
            0.0
        }
    })
}

/// Largest sum over a one-to-one matching of rows to columns, by enumeration.
pub fn max_matching_exhaustive(table: &DMatrix<f64>) -> f64 {
    let sq = pad_square(table);
    let n = sq.nrows();
    (0..n)
        .permutations(n)
        .map(|perm| perm.iter().enumerate().map(|(i, &j)| sq[(i, j)]).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Largest sum over a one-to-one matching, via the O(n^3) Hungarian method
/// on the cost `max - table`.
pub fn max_matching_hungarian(table: &DMatrix<f64>) -> f64 {
    let sq = pad_square(table);
    let n = sq.nrows();
    if n == 0 {
        return 0.0;
    }
    let top = sq.max();
    let cost = |i: usize, j: usize| top - sq[(i - 1, j - 1)];
    // potentials and matching are 1-based; column 0 is a sentinel
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut row_of = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=n).map(|j| sq[(row_of[j] - 1, j - 1)]).sum()
}

const EXHAUSTIVE_LIMIT: usize = 8;

/// Clustering accuracy: the fraction of samples matched under the best
/// one-to-one map from predicted clusters to true classes.
pub fn accuracy<P, T>(pred: &[P], truth: &[T]) -> Result<f64>
where
    P: Copy + Eq + std::hash::Hash + Ord,
    T: Copy + Eq + std::hash::Hash + Ord,
{
    let table = contingency(pred, truth)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    let best = if table.nrows().max(table.ncols()) <= EXHAUSTIVE_LIMIT {
        max_matching_exhaustive(&table)
    } else {
        max_matching_hungarian(&table)
    };
    Ok(best / pred.len() as f64)
}

fn pairs(c: f64) -> f64 {
    c * (c - 1.0) / 2.0
}

/// Pairwise F-measure: precision and recall of the same-cluster relation.
/// Zero when either partition has no same-cluster pair.
pub fn f_measure<P, T>(pred: &[P], truth: &[T]) -> Result<f64>
where
    P: Copy + Eq + std::hash::Hash + Ord,
    T: Copy + Eq + std::hash::Hash + Ord,
{
    let table = contingency(pred, truth)?;
    let both: f64 = table.iter().map(|c| pairs(*c)).sum();
    let in_pred: f64 = table.row_iter().map(|r| pairs(r.sum())).sum();
    let in_truth: f64 = table.column_iter().map(|c| pairs(c.sum())).sum();
    if in_pred == 0.0 || in_truth == 0.0 || both == 0.0 {
        return Ok(0.0);
    }
    let precision = both / in_pred;
    let recall = both / in_truth;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Factorization whose representation is clustered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    RfaLcf,
    Cf,
    Nmf,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rfa-lcf" => Ok(Method::RfaLcf),
            "cf" => Ok(Method::Cf),
            "nmf" => Ok(Method::Nmf),
            other => Err(Error::invalid(format!("unknown method {other:?}, expected rfa-lcf, cf or nmf"))),
        }
    }
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::RfaLcf => "rfa-lcf",
            Method::Cf => "cf",
            Method::Nmf => "nmf",
        }
    }

    /// Fits `x` (`d x N`) and returns the `N x rank` representation.
    pub fn represent(self, x: &DMatrix<f64>, params: &Hyperparams, seed: u64) -> Result<DMatrix<f64>> {
        match self {
            Method::RfaLcf => {
                let data = crate::model::DataMatrix::new(x.clone())?;
                Ok(fit(&data, params, seed)?.state.v)
            }
            Method::Cf => Ok(cf_fit(x, params.rank, params.max_iter, seed, params.guard_eps)?.representation),
            Method::Nmf => Ok(nmf_fit(x, params.rank, params.max_iter, seed, params.guard_eps)?.representation),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolConfig {
    pub k_range: RangeInclusive<usize>,
    /// Random class subsets drawn per K.
    pub subset_draws: usize,
    /// K-means initialisations per fitted representation.
    pub restarts: usize,
    pub kmeans_iters: usize,
    pub method: Method,
    /// Scale samples to unit norm before fitting.
    pub normalize: bool,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            k_range: 2..=10,
            subset_draws: 10,
            restarts: 30,
            kmeans_iters: 100,
            method: Method::RfaLcf,
            normalize: true,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KReport {
    pub k: usize,
    pub mean_ac: f64,
    pub std_ac: f64,
    pub best_ac: f64,
    pub mean_f: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_ac: f64,
    pub std_ac: f64,
    pub best_ac: f64,
    pub mean_f: f64,
    pub per_k: Vec<KReport>,
    /// Values of K skipped because the data has fewer classes.
    pub skipped: Vec<usize>,
}

impl EvalReport {
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(sink);
        out.write_record(["k", "mean_ac", "std_ac", "best_ac", "mean_f"])?;
        for r in &self.per_k {
            out.write_record([
                r.k.to_string(),
                r.mean_ac.to_string(),
                r.std_ac.to_string(),
                r.best_ac.to_string(),
                r.mean_f.to_string(),
            ])?;
        }
        out.flush().map_err(|e| Error::io("eval sink", e))
    }
}

/// SplitMix64 finaliser over a base seed and two stream indices.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Clusters one representation `restarts` times; returns `(AC, F)` per run.
pub fn score_representation(
    repr: &DMatrix<f64>,
    truth: &[u32],
    k: usize,
    restarts: usize,
    kmeans_iters: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    (0..restarts)
        .map(|r| {
            let res = kmeans_cosine(repr, k, derive_seed(seed, r as u64, 0x6b6d), kmeans_iters)?;
            Ok((accuracy(&res.assignments, truth)?, f_measure(&res.assignments, truth)?))
        })
        .collect()
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Clustering protocol: for each K, draw random K-class subsets, fit with
/// rank `K + 1`, cluster the representation with several K-means restarts and
/// aggregate accuracy and F-measure. Cells run through `config.execution`.
pub fn run_protocol(dataset: &LabeledDataset, params: &Hyperparams, config: &ProtocolConfig) -> Result<EvalReport> {
    let classes = dataset.classes();
    if classes.len() < 2 {
        return Err(Error::invalid("evaluation needs at least two classes"));
    }
    if config.subset_draws == 0 || config.restarts == 0 {
        return Err(Error::invalid("subset_draws and restarts must be >= 1"));
    }
    let mut ks = Vec::new();
    let mut skipped = Vec::new();
    for k in config.k_range.clone() {
        if k < 2 || k > classes.len() {
            log::warn!("skipping K = {k}: data has {} classes", classes.len());
            skipped.push(k);
        } else {
            ks.push(k);
        }
    }
    let cells: Vec<(usize, usize)> = ks
        .iter()
        .flat_map(|&k| (0..config.subset_draws).map(move |s| (k, s)))
        .collect();

    let outcomes = config.execution.map(cells.len(), |c| {
        let (k, draw) = cells[c];
        let cell_seed = derive_seed(config.seed, k as u64, draw as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(cell_seed);
        let mut chosen: Vec<u32> = index::sample(&mut rng, classes.len(), k)
            .into_iter()
            .map(|i| classes[i])
            .collect();
        chosen.sort_unstable();
        let mut subset = dataset.restrict_to(&chosen);
        if config.normalize {
            subset = normalize_columns(&subset);
        }
        let cell_params = Hyperparams {
            rank: k + 1,
            ..params.clone()
        };
        let repr = config.method.represent(&subset.values, &cell_params, derive_seed(cell_seed, 1, 0))?;
        score_representation(&repr, &subset.labels, k, config.restarts, config.kmeans_iters, derive_seed(cell_seed, 2, 0))
    });

    let mut by_k: Vec<(usize, Vec<(f64, f64)>)> = ks.iter().map(|&k| (k, Vec::new())).collect();
    for ((k, _), outcome) in cells.iter().zip(outcomes) {
        let scores = outcome?;
        let slot = by_k.iter_mut().find(|(kk, _)| kk == k).unwrap();
        slot.1.extend(scores);
    }
    let mut all_ac = Vec::new();
    let mut all_f = Vec::new();
    let per_k = by_k
        .into_iter()
        .map(|(k, scores)| {
            let ac: Vec<f64> = scores.iter().map(|s| s.0).collect();
            let f: Vec<f64> = scores.iter().map(|s| s.1).collect();
            let (mean_ac, std_ac) = mean_std(&ac);
            all_ac.extend(&ac);
            all_f.extend(&f);
            KReport {
                k,
                mean_ac,
                std_ac,
                best_ac: ac.iter().copied().fold(0.0, f64::max),
                mean_f: mean_std(&f).0,
            }
        })
        .collect();
    let (mean_ac, std_ac) = mean_std(&all_ac);
    Ok(EvalReport {
        mean_ac,
        std_ac,
        best_ac: all_ac.iter().copied().fold(0.0, f64::max),
        mean_f: mean_std(&all_f).0,
        per_k,
        skipped,
    })
}

/// Row-normalised copy, handy for inspecting representations.
pub fn normalized_rows(points: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = unit_rows(points);
    DMatrix::from_fn(points.nrows(), points.ncols(), |i, j| rows[i][j])
}
