use super::{DenseMatrix, RngStream};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: DenseMatrix,
    /// Sum of squared distances to the assigned centroid, recorded after
    /// every assignment step.
    pub objective: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the centroid nearest to `point`, ties to the lowest index.
pub(crate) fn nearest(point: &[f64], centroids: &DenseMatrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// A cluster that loses all its points keeps its previous centroid, which
/// keeps the objective non-increasing.
pub fn kmeans(
    points: &DenseMatrix,
    k: usize,
    rng: &mut RngStream,
    max_iters: usize,
) -> Result<KMeansResult> {
    let n = points.rows();
    if k == 0 || max_iters == 0 {
        return Err(Error::Domain("k and max_iters must be at least 1".into()));
    }
    if k > n {
        return Err(Error::Domain(format!("k = {k} exceeds {n} points")));
    }

    let mut centroids = DenseMatrix::zeros(k, points.cols());
    centroids
        .row_mut(0)
        .copy_from_slice(points.row(rng.below(n)));
    let mut closest: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = closest.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in closest.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with existing centroids.
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in closest.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(c)));
        }
    }

    let mut assignments = vec![usize::MAX; n];
    let mut objective = Vec::new();
    for _ in 0..max_iters {
        let mut changed = false;
        let mut total = 0.0;
        for i in 0..n {
            let (c, d) = nearest(points.row(i), &centroids);
            total += d;
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
        }
        objective.push(total);
        if !changed {
            break;
        }
        let mut sums = DenseMatrix::zeros(k, points.cols());
        let mut counts = vec![0usize; k];
        for (i, &c) in assignments.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums.row_mut(c).iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        objective,
    })
}
