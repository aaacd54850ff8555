//! K-means over region embeddings.
//!
//! The reported objective is the per-cluster-normalized one: the mean over clusters of the
//! mean squared distance to the cluster centroid. [`KMeansObjective::Sse`] runs plain Lloyd,
//! which minimizes the summed squared error. [`KMeansObjective::Normalized`] minimizes the
//! reported objective itself: each Lloyd step is kept only when it does not raise it, and a
//! single-point-move descent follows.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// What the iterations descend on; restarts are ranked by the same quantity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansObjective {
    /// Summed squared error (plain Lloyd).
    #[default]
    Sse,
    /// Mean over clusters of the mean within-cluster squared distance.
    Normalized,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansOptions {
    pub objective: KMeansObjective,
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest objective wins.
    pub n_init: usize,
    /// Single-point-move descent after Lloyd; only used with the normalized objective.
    pub polish: bool,
    pub max_polish_passes: usize,
}

impl KMeansOptions {
    /// Options that descend on the normalized objective.
    pub fn normalized() -> Self {
        Self {
            objective: KMeansObjective::Normalized,
            ..Self::default()
        }
    }
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            objective: KMeansObjective::default(),
            max_iters: 50,
            tol: 1e-6,
            n_init: 3,
            polish: true,
            max_polish_passes: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel<T> {
    pub k: usize,
    pub dim: usize,
    /// Row-major `k x dim`.
    pub centroids: Vec<T>,
    pub assignment: Vec<usize>,
    /// Mean over clusters of the mean within-cluster squared distance.
    pub inertia: f64,
    pub requested_k: usize,
    /// Set when `requested_k` exceeded the number of distinct points.
    pub clamped: bool,
    /// Summed squared error at init and after each accepted Lloyd iteration of the winning restart.
    pub sse_trace: Vec<f64>,
    /// Normalized objective after init, each accepted Lloyd iteration, and the polish.
    pub objective_trace: Vec<f64>,
}

impl<T: Scalar> ClusterModel<T> {
    pub fn centroid(&self, k: usize) -> &[T] {
        &self.centroids[k * self.dim..(k + 1) * self.dim]
    }

    pub fn n_points(&self) -> usize {
        self.assignment.len()
    }

    /// Nearest centroid by Euclidean distance, ties to the smaller id.
    pub fn nearest(&self, v: &[T]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.k {
            let d: f64 = self.centroid(k).iter().zip(v).map(|(&c, &x)| (c.f64() - x.f64()).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn count_distinct(points: &[f64], dim: usize) -> usize {
    let n = points.len() / dim;
    let mut idx: Vec<usize> = (0..n).collect();
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    idx.sort_by(|&a, &b| {
        row(a)
            .iter()
            .zip(row(b))
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    1 + idx.windows(2).filter(|w| row(w[0]) != row(w[1])).count()
}

/// Normalized objective of an assignment where every cluster is non-empty.
pub fn normalized_objective<T: Scalar>(points: &[T], dim: usize, assignment: &[usize], k: usize) -> f64 {
    let p: Vec<f64> = points.iter().map(|v| v.f64()).collect();
    objective_f64(&p, dim, assignment, k)
}

fn centroids_of(points: &[f64], dim: usize, assignment: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &a) in assignment.iter().enumerate() {
        counts[a] += 1;
        for (s, &x) in sums[a * dim..(a + 1) * dim].iter_mut().zip(&points[i * dim..(i + 1) * dim]) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    (sums, counts)
}

fn objective_f64(points: &[f64], dim: usize, assignment: &[usize], k: usize) -> f64 {
    let (cent, counts) = centroids_of(points, dim, assignment, k);
    let mut within = vec![0.0; k];
    for (i, &a) in assignment.iter().enumerate() {
        within[a] += sq_dist(&points[i * dim..(i + 1) * dim], &cent[a * dim..(a + 1) * dim]);
    }
    let used = counts.iter().filter(|&&n| n > 0).count().max(1);
    within.iter().zip(&counts).filter(|(_, &n)| n > 0).map(|(w, &n)| w / n as f64).sum::<f64>() / used as f64
}

fn sse(points: &[f64], dim: usize, assignment: &[usize], cent: &[f64]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(&points[i * dim..(i + 1) * dim], &cent[a * dim..(a + 1) * dim]))
        .sum()
}

fn plus_plus_init(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut cent = Vec::with_capacity(k * dim);
    cent.extend_from_slice(row(rng.gen_range(0..n)));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &cent[..dim])).collect();
    while cent.len() < k * dim {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if r < d {
                        break;
                    }
                    r -= d;
                }
            }
            chosen.expect("positive total implies a positive weight")
        } else {
            rng.gen_range(0..n)
        };
        let start = cent.len();
        cent.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(row(i), &cent[start..start + dim]));
        }
    }
    cent
}

fn assign_nearest(points: &[f64], dim: usize, cent: &[f64], k: usize) -> Vec<usize> {
    (0..points.len() / dim)
        .map(|i| {
            let p = &points[i * dim..(i + 1) * dim];
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let d = sq_dist(p, &cent[c * dim..(c + 1) * dim]);
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

/// Moves the point farthest from its centroid into each empty cluster.
fn reseed_empty(points: &[f64], dim: usize, cent: &mut [f64], assignment: &mut [usize], k: usize) {
    loop {
        let (_, counts) = centroids_of(points, dim, assignment, k);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let mut best: Option<(usize, f64)> = None;
        for (i, &a) in assignment.iter().enumerate() {
            if counts[a] < 2 {
                continue;
            }
            let d = sq_dist(&points[i * dim..(i + 1) * dim], &cent[a * dim..(a + 1) * dim]);
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let Some((i, _)) = best else { return };
        assignment[i] = empty;
        cent[empty * dim..(empty + 1) * dim].copy_from_slice(&points[i * dim..(i + 1) * dim]);
    }
}

struct Run {
    assignment: Vec<usize>,
    objective: f64,
    sse: f64,
    sse_trace: Vec<f64>,
    objective_trace: Vec<f64>,
}

/// Running per-cluster count, coordinate sum and summed squared norm.
struct Moments {
    dim: usize,
    counts: Vec<usize>,
    sums: Vec<f64>,
    sq: Vec<f64>,
}

impl Moments {
    fn new(points: &[f64], norms: &[f64], dim: usize, assignment: &[usize], k: usize) -> Self {
        let mut m = Self {
            dim,
            counts: vec![0; k],
            sums: vec![0.0; k * dim],
            sq: vec![0.0; k],
        };
        for (i, &a) in assignment.iter().enumerate() {
            m.add(a, &points[i * dim..(i + 1) * dim], norms[i], 1.0);
        }
        m
    }

    fn add(&mut self, c: usize, p: &[f64], norm: f64, sign: f64) {
        if sign > 0.0 {
            self.counts[c] += 1;
        } else {
            self.counts[c] -= 1;
        }
        self.sq[c] += sign * norm;
        for (s, &x) in self.sums[c * self.dim..(c + 1) * self.dim].iter_mut().zip(p) {
            *s += sign * x;
        }
    }

    /// Mean squared distance to the centroid of cluster `c` after adding `plus` and removing `minus`.
    fn spread_with(&self, c: usize, plus: Option<(&[f64], f64)>, minus: Option<(&[f64], f64)>) -> f64 {
        let mut count = self.counts[c] as f64;
        let mut sq = self.sq[c];
        let mut sum2 = 0.0;
        for j in 0..self.dim {
            let mut s = self.sums[c * self.dim + j];
            if let Some((p, _)) = plus {
                s += p[j];
            }
            if let Some((p, _)) = minus {
                s -= p[j];
            }
            sum2 += s * s;
        }
        if let Some((_, n)) = plus {
            count += 1.0;
            sq += n;
        }
        if let Some((_, n)) = minus {
            count -= 1.0;
            sq -= n;
        }
        if count <= 0.0 {
            return 0.0;
        }
        (sq / count - sum2 / (count * count)).max(0.0)
    }
}

/// Local descent on the normalized objective: single-point moves that never empty a
/// cluster, then pairwise swaps between clusters, until neither improves.
fn polish(points: &[f64], dim: usize, assignment: &mut [usize], k: usize, max_passes: usize) {
    let n = assignment.len();
    let norms: Vec<f64> = (0..n).map(|i| points[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum()).collect();
    let mut m = Moments::new(points, &norms, dim, assignment, k);
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let improves = |delta: f64, before: f64| delta < -1e-12 * (1.0 + before);
    for _ in 0..max_passes {
        let mut moved = false;
        for i in 0..n {
            let a = assignment[i];
            if m.counts[a] < 2 {
                continue;
            }
            let pi = (row(i), norms[i]);
            let before_a = m.spread_with(a, None, None);
            let after_a = m.spread_with(a, None, Some(pi));
            let mut best: Option<(usize, f64)> = None;
            for b in (0..k).filter(|&b| b != a) {
                let before_b = m.spread_with(b, None, None);
                let delta = after_a + m.spread_with(b, Some(pi), None) - before_a - before_b;
                if improves(delta, before_a + before_b) && best.is_none_or(|(_, bd)| delta < bd) {
                    best = Some((b, delta));
                }
            }
            if let Some((b, _)) = best {
                m.add(a, pi.0, pi.1, -1.0);
                m.add(b, pi.0, pi.1, 1.0);
                assignment[i] = b;
                moved = true;
            }
        }
        for i in 0..n {
            for j in i + 1..n {
                let (a, b) = (assignment[i], assignment[j]);
                if a == b {
                    continue;
                }
                let (pi, pj) = ((row(i), norms[i]), (row(j), norms[j]));
                let before = m.spread_with(a, None, None) + m.spread_with(b, None, None);
                let after = m.spread_with(a, Some(pj), Some(pi)) + m.spread_with(b, Some(pi), Some(pj));
                if improves(after - before, before) {
                    m.add(a, pi.0, pi.1, -1.0);
                    m.add(b, pi.0, pi.1, 1.0);
                    m.add(b, pj.0, pj.1, -1.0);
                    m.add(a, pj.0, pj.1, 1.0);
                    assignment[i] = b;
                    assignment[j] = a;
                    moved = true;
                }
            }
        }
        if !moved {
            break;
        }
    }
}

/// Peeled starts tried per call with the normalized objective.
const PEEL_STARTS: usize = 8;

/// The `m` points whose removal leaves the tightest remainder, best first.
fn peel_candidates(points: &[f64], dim: usize, m: usize) -> Vec<usize> {
    let n = points.len() / dim;
    let norms: Vec<f64> = (0..n).map(|i| points[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum()).collect();
    let all = Moments::new(points, &norms, dim, &vec![0; n], 1);
    let mut scored: Vec<(f64, usize)> = (0..n)
        .map(|i| (all.spread_with(0, None, Some((&points[i * dim..(i + 1) * dim], norms[i]))), i))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(m).map(|(_, i)| i).collect()
}

/// Extra start for the normalized objective, which favours small tight clusters: peel off
/// `first`, then `k - 2` more single points, each the one whose removal most reduces the
/// spread of the rest, then polish.
fn peeled_run(points: &[f64], dim: usize, k: usize, first: usize, opts: &KMeansOptions) -> Run {
    let n = points.len() / dim;
    let norms: Vec<f64> = (0..n).map(|i| points[i * dim..(i + 1) * dim].iter().map(|x| x * x).sum()).collect();
    let rest = k - 1;
    let mut assignment = vec![rest; n];
    let mut m = Moments::new(points, &norms, dim, &assignment, k);
    for c in 0..rest {
        let mut pick: Option<(usize, f64)> = if c == 0 { Some((first, 0.0)) } else { None };
        for i in (0..n).filter(|&i| c > 0 && assignment[i] == rest) {
            let spread = m.spread_with(rest, None, Some((&points[i * dim..(i + 1) * dim], norms[i])));
            if pick.is_none_or(|(_, s)| spread < s) {
                pick = Some((i, spread));
            }
        }
        let (i, _) = pick.expect("more points than peeled clusters");
        m.add(rest, &points[i * dim..(i + 1) * dim], norms[i], -1.0);
        m.add(c, &points[i * dim..(i + 1) * dim], norms[i], 1.0);
        assignment[i] = c;
    }
    let mut objective_trace = vec![objective_f64(points, dim, &assignment, k)];
    if opts.polish {
        polish(points, dim, &mut assignment, k, opts.max_polish_passes);
        objective_trace.push(objective_f64(points, dim, &assignment, k));
    }
    let (c, _) = centroids_of(points, dim, &assignment, k);
    let sse = sse(points, dim, &assignment, &c);
    Run {
        objective: *objective_trace.last().expect("trace starts non-empty"),
        sse,
        sse_trace: vec![sse],
        objective_trace,
        assignment,
    }
}

fn single_run(points: &[f64], dim: usize, k: usize, opts: &KMeansOptions, rng: &mut ChaCha8Rng) -> Run {
    let mut cent = plus_plus_init(points, dim, k, rng);
    let mut assignment = assign_nearest(points, dim, &cent, k);
    reseed_empty(points, dim, &mut cent, &mut assignment, k);
    let mut objective = objective_f64(points, dim, &assignment, k);
    let mut prev_sse = {
        let (c, _) = centroids_of(points, dim, &assignment, k);
        sse(points, dim, &assignment, &c)
    };
    let mut sse_trace = vec![prev_sse];
    let mut objective_trace = vec![objective];
    for _ in 0..opts.max_iters {
        let (next_cent, _) = centroids_of(points, dim, &assignment, k);
        let mut next_cent = next_cent;
        let mut next = assign_nearest(points, dim, &next_cent, k);
        reseed_empty(points, dim, &mut next_cent, &mut next, k);
        let next_obj = objective_f64(points, dim, &next, k);
        let (c, _) = centroids_of(points, dim, &next, k);
        let next_sse = sse(points, dim, &next, &c);
        let worse = match opts.objective {
            KMeansObjective::Sse => next_sse > prev_sse,
            KMeansObjective::Normalized => next_obj > objective,
        };
        if worse {
            break;
        }
        let converged = next == assignment || (prev_sse - next_sse).abs() <= opts.tol * prev_sse.max(f64::MIN_POSITIVE);
        assignment = next;
        objective = next_obj;
        sse_trace.push(next_sse);
        objective_trace.push(objective);
        prev_sse = next_sse;
        if converged {
            break;
        }
    }
    if opts.polish && opts.objective == KMeansObjective::Normalized {
        polish(points, dim, &mut assignment, k, opts.max_polish_passes);
        let polished = objective_f64(points, dim, &assignment, k);
        if polished < objective {
            objective = polished;
            objective_trace.push(objective);
        }
    }
    let (c, _) = centroids_of(points, dim, &assignment, k);
    Run {
        sse: sse(points, dim, &assignment, &c),
        assignment,
        objective,
        sse_trace,
        objective_trace,
    }
}

/// Clusters the rows of `points` (row-major, `dim` columns) into at most `k` groups.
pub fn kmeans<T: Scalar>(points: &[T], dim: usize, k: usize, seed: u64, opts: &KMeansOptions) -> Result<ClusterModel<T>> {
    if dim == 0 || points.is_empty() || points.len() % dim != 0 {
        return Err(Error::Shape(format!("{} values do not form rows of width {dim}", points.len())));
    }
    if k == 0 {
        return Err(Error::Config("k-means needs K >= 1".into()));
    }
    if opts.n_init == 0 || !(opts.tol >= 0.0) {
        return Err(Error::Config("k-means needs n_init >= 1 and tol >= 0".into()));
    }
    let p: Vec<f64> = points.iter().map(|v| v.f64()).collect();
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("k-means input".into()));
    }
    let distinct = count_distinct(&p, dim);
    let k_eff = k.min(distinct);
    if k_eff < k {
        warn!("k-means: K={k} clamped to {k_eff} distinct points");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Run> = None;
    for _ in 0..opts.n_init {
        let run = single_run(&p, dim, k_eff, opts, &mut rng);
        let better = |b: &Run| match opts.objective {
            KMeansObjective::Sse => run.sse < b.sse,
            KMeansObjective::Normalized => run.objective < b.objective,
        };
        if best.as_ref().is_none_or(better) {
            best = Some(run);
        }
    }
    if opts.objective == KMeansObjective::Normalized && k_eff > 1 {
        for first in peel_candidates(&p, dim, PEEL_STARTS) {
            let run = peeled_run(&p, dim, k_eff, first, opts);
            if best.as_ref().is_none_or(|b| run.objective < b.objective) {
                best = Some(run);
            }
        }
    }
    let run = best.expect("n_init >= 1");
    let (cent, _) = centroids_of(&p, dim, &run.assignment, k_eff);
    Ok(ClusterModel {
        k: k_eff,
        dim,
        centroids: cent.iter().map(|&v| T::cast(v)).collect(),
        assignment: run.assignment,
        inertia: run.objective,
        requested_k: k,
        clamped: k_eff < k,
        sse_trace: run.sse_trace,
        objective_trace: run.objective_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_points_two_clusters() {
        let m = kmeans(&[0.0f64, 0.1, 10.0], 1, 2, 0, &KMeansOptions::default()).unwrap();
        assert_eq!(m.assignment[0], m.assignment[1]);
        assert_ne!(m.assignment[0], m.assignment[2]);
        assert!((m.inertia - 0.00125).abs() < 1e-12);
    }

    #[test]
    fn k_equal_n_gives_singletons() {
        let pts = [0.0f64, 0.0, 1.0, 0.0, 0.0, 3.0, 5.0, 5.0];
        let m = kmeans(&pts, 2, 4, 9, &KMeansOptions::default()).unwrap();
        let mut ids = m.assignment.clone();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3]);
        assert_eq!(m.inertia, 0.0);
    }

    #[test]
    fn identical_points_clamp() {
        let pts = vec![0.5f32; 12];
        let m = kmeans(&pts, 3, 3, 1, &KMeansOptions::default()).unwrap();
        assert!(m.clamped);
        assert_eq!(m.k, 1);
        assert_eq!(m.inertia, 0.0);
        let m = kmeans(&[1.0f64, 2.0], 1, 5, 1, &KMeansOptions::default()).unwrap();
        assert_eq!((m.k, m.clamped, m.requested_k), (2, true, 5));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(kmeans::<f64>(&[], 1, 1, 0, &KMeansOptions::default()).is_err());
        assert!(kmeans(&[1.0f64, 2.0, 3.0], 2, 1, 0, &KMeansOptions::default()).is_err());
        assert!(kmeans(&[1.0f64], 1, 0, 0, &KMeansOptions::default()).is_err());
        assert!(kmeans(&[f64::NAN], 1, 1, 0, &KMeansOptions::default()).is_err());
    }

    #[test]
    fn seeded_determinism_and_nearest() {
        let pts: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let a = kmeans(&pts, 2, 4, 3, &KMeansOptions::default()).unwrap();
        let b = kmeans(&pts, 2, 4, 3, &KMeansOptions::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.nearest(a.centroid(2)) == 2);
    }

    fn lcg_points(n: usize, dim: usize, seed: u64) -> Vec<f64> {
        let mut x = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        (0..n * dim)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (x >> 11) as f64 / (1u64 << 53) as f64 * 10.0
            })
            .collect()
    }

    #[test]
    fn sse_mode_ends_at_a_lloyd_fixed_point() {
        let pts = lcg_points(40, 2, 5);
        let m = kmeans(&pts, 2, 4, 1, &KMeansOptions::default()).unwrap();
        for (i, &a) in m.assignment.iter().enumerate() {
            assert_eq!(m.nearest(&pts[i * 2..i * 2 + 2]), a);
        }
        assert!(m.sse_trace.windows(2).all(|w| w[1] <= w[0]));
        assert!((m.inertia - normalized_objective(&pts, 2, &m.assignment, m.k)).abs() < 1e-12);
    }

    #[test]
    fn normalized_mode_isolates_a_far_point() {
        // Two loose groups and one far point; the normalized optimum leaves it alone.
        let pts = [0.0f64, 2.0, 4.0, 10.0, 12.0, 14.0, 40.0];
        let sse = kmeans(&pts, 1, 2, 0, &KMeansOptions::default()).unwrap();
        let norm = kmeans(&pts, 1, 2, 0, &KMeansOptions::normalized()).unwrap();
        let alone = |m: &ClusterModel<f64>| m.assignment.iter().filter(|&&a| a == m.assignment[6]).count() == 1;
        assert!(alone(&norm));
        assert!(norm.inertia <= sse.inertia);
        assert!(norm.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn polish_never_empties_a_cluster() {
        for seed in 0..20 {
            let pts = lcg_points(12, 1, seed);
            let m = kmeans(&pts, 1, 3, seed, &KMeansOptions::normalized()).unwrap();
            let mut used = vec![false; m.k];
            m.assignment.iter().for_each(|&a| used[a] = true);
            assert!(used.iter().all(|&u| u));
        }
    }
}
