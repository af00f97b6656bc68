//! Seeded Lloyd k-means with k-means++ initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the relative objective decrease falls to or below this.
    pub rel_tol: f64,
    pub seed: u64,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansConfig {
            k,
            max_iter: DEFAULT_MAX_ITER,
            rel_tol: DEFAULT_REL_TOL,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub dim: usize,
    /// Flattened centers, `dim` values each. Never contains duplicates or
    /// centers of empty clusters.
    pub centers: Vec<f64>,
    /// Cluster index of every input point.
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step, plus a
    /// final entry for the returned centers.
    pub objective_history: Vec<f64>,
}

impl KMeansResult {
    pub fn k(&self) -> usize {
        self.centers.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn center(&self, i: usize) -> &[f64] {
        &self.centers[i * self.dim..(i + 1) * self.dim]
    }

    pub fn objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of distinct points (bitwise comparison).
pub fn distinct_count(points: &[f64], dim: usize) -> usize {
    if dim == 0 {
        return 0;
    }
    let mut rows: Vec<Vec<u64>> = points
        .chunks_exact(dim)
        .map(|p| p.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Within-cluster sum of squares of an arbitrary assignment (cluster means as
/// centers).
pub fn assignment_objective(points: &[f64], dim: usize, assignments: &[usize]) -> f64 {
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sums = vec![0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (p, &a) in points.chunks_exact(dim).zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= n as f64;
            }
        }
    }
    points
        .chunks_exact(dim)
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &sums[a * dim..(a + 1) * dim]))
        .sum()
}

fn init_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centers.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &centers[..dim]))
        .collect();
    while centers.len() < k * dim {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            break;
        }
        let mut target = rng.gen::<f64>() * total;
        let mut pick = n - 1;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 && target < d {
                pick = i;
                break;
            }
            target -= d;
        }
        // Guard against landing on an already-chosen point through rounding.
        if d2[pick] <= 0.0 {
            pick = d2
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
        }
        let c = points[pick * dim..(pick + 1) * dim].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.extend_from_slice(&c);
    }
    centers
}

fn assign(points: &[f64], dim: usize, centers: &[f64], out: &mut [usize], dist: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for ((p, a), d) in points.chunks_exact(dim).zip(out.iter_mut()).zip(dist.iter_mut()) {
        let mut best = (0usize, f64::INFINITY);
        for (ci, c) in centers.chunks_exact(dim).enumerate() {
            let dd = sq_dist(p, c);
            if dd < best.1 {
                best = (ci, dd);
            }
        }
        *a = best.0;
        *d = best.1;
        total += best.1;
    }
    total
}

fn update(points: &[f64], dim: usize, assignments: &[usize], centers: &mut [f64]) -> Vec<usize> {
    let k = centers.len() / dim;
    let mut counts = vec![0usize; k];
    let mut sums = vec![0f64; k * dim];
    for (p, &a) in points.chunks_exact(dim).zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(p) {
            *s += v;
        }
    }
    for c in 0..k {
        if counts[c] > 0 {
            for (dst, s) in centers[c * dim..(c + 1) * dim]
                .iter_mut()
                .zip(&sums[c * dim..(c + 1) * dim])
            {
                *dst = s / counts[c] as f64;
            }
        }
    }
    counts
}

/// Clusters `points` (flattened rows of `dim` values).
///
/// The effective number of clusters is `min(k, distinct points)`. Empty
/// clusters are reseeded from the point farthest from its center.
pub fn kmeans(points: &[f64], dim: usize, cfg: &KMeansConfig) -> KMeansResult {
    assert!(dim > 0, "dimension must be positive");
    assert_eq!(points.len() % dim, 0, "points length must be a multiple of dim");
    let n = points.len() / dim;
    let k = cfg.k.min(distinct_count(points, dim));
    if n == 0 || k == 0 {
        return KMeansResult {
            dim,
            centers: Vec::new(),
            assignments: vec![0; n],
            objective_history: Vec::new(),
        };
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = init_plus_plus(points, dim, k, &mut rng);
    let mut assignments = vec![0usize; n];
    let mut dist = vec![0f64; n];
    let mut history = Vec::new();

    for iter in 0..cfg.max_iter.max(1) {
        let obj = assign(points, dim, &centers, &mut assignments, &mut dist);
        let converged = match history.last() {
            Some(&prev) => prev - obj <= cfg.rel_tol * prev,
            None => obj == 0.0,
        };
        history.push(obj);
        if converged || iter + 1 == cfg.max_iter.max(1) {
            break;
        }
        let counts = update(points, dim, &assignments, &mut centers);
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..counts.len() {
            if counts[c] == 0 {
                let far = dist
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap();
                taken.push(far);
                dist[far] = 0.0;
                centers[c * dim..(c + 1) * dim]
                    .copy_from_slice(&points[far * dim..(far + 1) * dim]);
            }
        }
    }

    // Final centers are the means of the final assignment; empty clusters
    // and exact duplicates are dropped.
    let counts = update(points, dim, &assignments, &mut centers);
    let mut keep: Vec<usize> = Vec::new();
    let mut remap = vec![usize::MAX; counts.len()];
    for c in 0..counts.len() {
        if counts[c] == 0 {
            continue;
        }
        let cur = &centers[c * dim..(c + 1) * dim];
        match keep
            .iter()
            .position(|&o| &centers[o * dim..(o + 1) * dim] == cur)
        {
            Some(pos) => remap[c] = pos,
            None => {
                remap[c] = keep.len();
                keep.push(c);
            }
        }
    }
    let final_centers: Vec<f64> = keep
        .iter()
        .flat_map(|&c| centers[c * dim..(c + 1) * dim].iter().copied())
        .collect();
    for a in &mut assignments {
        *a = remap[*a];
    }
    let final_obj: f64 = points
        .chunks_exact(dim)
        .zip(&assignments)
        .map(|(p, &a)| sq_dist(p, &final_centers[a * dim..(a + 1) * dim]))
        .sum();
    // The mean update can only lower the objective; clamp rounding noise.
    let last = *history.last().unwrap();
    history.push(final_obj.min(last));

    KMeansResult {
        dim,
        centers: final_centers,
        assignments,
        objective_history: history,
    }
}
