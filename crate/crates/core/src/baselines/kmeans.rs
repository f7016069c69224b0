use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;

use crate::error::{Error, Result};
use crate::featurizer::SparseVector;
use crate::par;
use crate::util;

/// Squared Euclidean distance between a sparse point and a dense centroid.
pub fn squared_distance(x: &SparseVector, x_sq: f64, centroid: &[f64], c_sq: f64) -> f64 {
    (x_sq - 2.0 * x.dot_dense(centroid) + c_sq).max(0.0)
}

fn sq_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

fn densify(x: &SparseVector, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; dim];
    for &(i, v) in x.entries() {
        out[i] = v;
    }
    out
}

/// Dense centroids with cached squared norms.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    pub dim: usize,
    pub vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
}

impl Centroids {
    pub fn new(dim: usize, vectors: Vec<Vec<f64>>) -> Self {
        let norms = vectors.iter().map(|c| sq_norm(c)).collect();
        Centroids { dim, vectors, norms }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Squared distances from `x` to every centroid.
    pub fn distances(&self, x: &SparseVector) -> Vec<f64> {
        let x_sq = x.norm().powi(2);
        self.vectors
            .iter()
            .zip(&self.norms)
            .map(|(c, &c_sq)| squared_distance(x, x_sq, c, c_sq))
            .collect()
    }

    /// Nearest centroid and its squared distance, ties to the lowest index.
    pub fn nearest(&self, x: &SparseVector) -> (usize, f64) {
        let d = self.distances(x);
        let mut best = 0;
        for (j, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = j;
            }
        }
        (best, d[best])
    }

    /// Centroids ordered by ascending distance, scored `1 / (1 + d)`.
    pub fn rank(&self, x: &SparseVector) -> Vec<(usize, f64)> {
        let d = self.distances(x);
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        order.into_iter().map(|j| (j, 1.0 / (1.0 + d[j]))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AssignRule {
    Nearest,
    /// Capacity-constrained greedy over the globally sorted distance list.
    Balanced,
}

/// Result of clustering: final centroids, the assignment of every input
/// point, and the objective after each assignment step.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub centroids: Centroids,
    pub assignment: Vec<usize>,
    pub objective_history: Vec<f64>,
    pub iterations: usize,
}

/// Per-cluster capacities: `floor(n / k)` each, plus `n mod k` extra slots
/// granted to whichever clusters claim them first.
pub fn balanced_assign(points: &[SparseVector], centroids: &Centroids) -> Vec<usize> {
    let n = points.len();
    let k = centroids.len();
    let dists: Vec<Vec<f64>> = par::map(points, |x| centroids.distances(x));
    let mut triples: Vec<(f64, usize, usize)> = Vec::with_capacity(n * k);
    for (i, row) in dists.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            triples.push((d, i, j));
        }
    }
    triples.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let base = n / k;
    let mut extra = n % k;
    let mut sizes = vec![0usize; k];
    let mut assignment = vec![usize::MAX; n];
    let mut placed = 0;
    for (_, i, j) in triples {
        if placed == n {
            break;
        }
        if assignment[i] != usize::MAX {
            continue;
        }
        if sizes[j] < base {
            sizes[j] += 1;
        } else if sizes[j] == base && extra > 0 {
            sizes[j] += 1;
            extra -= 1;
        } else {
            continue;
        }
        assignment[i] = j;
        placed += 1;
    }
    assignment
}

fn assign(points: &[SparseVector], centroids: &Centroids, rule: AssignRule) -> Vec<usize> {
    match rule {
        AssignRule::Nearest => par::map(points, |x| centroids.nearest(x).0),
        AssignRule::Balanced => balanced_assign(points, centroids),
    }
}

/// Sum of squared distances of each point to its assigned centroid.
pub fn objective(points: &[SparseVector], centroids: &Centroids, assignment: &[usize]) -> f64 {
    let parts = par::map_range(points.len(), |i| {
        let x = &points[i];
        let j = assignment[i];
        squared_distance(x, x.norm().powi(2), &centroids.vectors[j], centroids.norms[j])
    });
    parts.iter().sum()
}

/// k-means++ seeding.
pub fn kmeans_plus_plus<R: Rng>(points: &[SparseVector], dim: usize, k: usize, rng: &mut R) -> Centroids {
    let first = rng.gen_range(0..points.len());
    let mut centroids = Centroids::new(dim, vec![densify(&points[first], dim)]);
    let mut closest: Vec<f64> = par::map(points, |x| centroids.distances(x)[0]);
    while centroids.len() < k {
        let next = match WeightedIndex::new(&closest) {
            Ok(dist) => dist.sample(rng),
            // Every point already coincides with a centroid.
            Err(_) => rng.gen_range(0..points.len()),
        };
        let c = densify(&points[next], dim);
        let c_sq = sq_norm(&c);
        closest = par::map_range(points.len(), |i| {
            let x = &points[i];
            closest[i].min(squared_distance(x, x.norm().powi(2), &c, c_sq))
        });
        centroids.vectors.push(c);
        centroids.norms.push(c_sq);
    }
    centroids
}

fn update(points: &[SparseVector], assignment: &[usize], centroids: &mut Centroids) {
    let k = centroids.len();
    let dim = centroids.dim;
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (x, &j) in points.iter().zip(assignment) {
        counts[j] += 1;
        for &(i, v) in x.entries() {
            sums[j][i] += v;
        }
    }
    let mut empty = Vec::new();
    for j in 0..k {
        if counts[j] == 0 {
            empty.push(j);
            continue;
        }
        let inv = 1.0 / counts[j] as f64;
        sums[j].iter_mut().for_each(|v| *v *= inv);
        centroids.vectors[j] = std::mem::take(&mut sums[j]);
        centroids.norms[j] = sq_norm(&centroids.vectors[j]);
    }
    if empty.is_empty() {
        return;
    }
    // Re-seed empty clusters from the points farthest from their centroids.
    let far: Vec<f64> = par::map_range(points.len(), |i| {
        let x = &points[i];
        let j = assignment[i];
        squared_distance(x, x.norm().powi(2), &centroids.vectors[j], centroids.norms[j])
    });
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| far[b].total_cmp(&far[a]).then(a.cmp(&b)));
    for (j, &p) in empty.iter().zip(&order) {
        centroids.vectors[*j] = densify(&points[p], dim);
        centroids.norms[*j] = sq_norm(&centroids.vectors[*j]);
    }
}

/// Lloyd iterations from k-means++ seeds until the assignment stops
/// changing or `max_iters` updates have run.
pub fn lloyd(
    points: &[SparseVector],
    dim: usize,
    k: usize,
    seed: u64,
    max_iters: usize,
    rule: AssignRule,
) -> Result<Clustering> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    if let Some(m) = points.iter().filter_map(SparseVector::max_index).max() {
        if m >= dim {
            return Err(Error::IndexOutOfRange { index: m, dim });
        }
    }
    let mut rng = util::sub_rng(seed, 0);
    let mut centroids = kmeans_plus_plus(points, dim, k, &mut rng);
    let mut assignment = assign(points, &centroids, rule);
    let mut history = vec![objective(points, &centroids, &assignment)];
    let mut iterations = 0;
    while iterations < max_iters {
        update(points, &assignment, &mut centroids);
        iterations += 1;
        let next = assign(points, &centroids, rule);
        history.push(objective(points, &centroids, &next));
        let done = next == assignment;
        assignment = next;
        if done {
            break;
        }
    }
    Ok(Clustering {
        centroids,
        assignment,
        objective_history: history,
        iterations,
    })
}
