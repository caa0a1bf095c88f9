//! Lloyd's algorithm over row-major points of arbitrary dimension.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rayon::prelude::*;

use crate::numeric::{CompensatedSum, REDUCE_CHUNK};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LloydOutcome {
    pub dim: usize,
    /// `k × dim`, row-major.
    pub centers: Vec<f64>,
    /// Cluster of each point from the last assignment step; every cluster is non-empty.
    pub labels: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Number of empty clusters re-seeded along the way.
    pub reseeds: usize,
}

impl LloydOutcome {
    pub fn k(&self) -> usize {
        self.centers.len() / self.dim
    }

    pub fn center(&self, c: usize) -> &[f64] {
        &self.centers[c * self.dim..(c + 1) * self.dim]
    }

    pub fn final_inertia(&self) -> f64 {
        self.inertia_trace.last().copied().unwrap_or(f64::NAN)
    }
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center (lowest index on ties) and its squared distance.
#[inline]
pub fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, center) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, center);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// k-means++ seeding: the first center uniformly, each further one with
/// probability proportional to its squared distance from the chosen set.
pub fn plus_plus_centers<R: Rng + ?Sized>(data: &[f64], dim: usize, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::invalid("data must be whole rows of the given dimension"));
    }
    let n = data.len() / dim;
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cannot seed {k} centers from {n} points")));
    }
    let first = rng.random_range(0..n);
    let mut centers = data[first * dim..(first + 1) * dim].to_vec();
    let mut d2: Vec<f64> = data.chunks_exact(dim).map(|p| sq_dist(p, &centers)).collect();
    while centers.len() < k * dim {
        // All mass on chosen points means the remaining rows are duplicates.
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => return Err(Error::Degenerate("too few distinct points to seed k-means".into())),
        };
        let c = data[next * dim..(next + 1) * dim].to_vec();
        for (d, p) in d2.iter_mut().zip(data.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, &c));
        }
        centers.extend_from_slice(&c);
    }
    Ok(centers)
}

fn assign(data: &[f64], dim: usize, centers: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let partials: Vec<CompensatedSum> = data
        .par_chunks(REDUCE_CHUNK * dim)
        .zip(labels.par_chunks_mut(REDUCE_CHUNK))
        .zip(dists.par_chunks_mut(REDUCE_CHUNK))
        .map(|((pts, lab), dst)| {
            let mut acc = CompensatedSum::new();
            for ((p, l), d) in pts.chunks_exact(dim).zip(lab.iter_mut()).zip(dst.iter_mut()) {
                let (c, dist) = nearest(p, centers, dim);
                *l = c;
                *d = dist;
                acc.add(dist);
            }
            acc
        })
        .collect();
    let mut total = CompensatedSum::new();
    for p in &partials {
        total.merge(p);
    }
    total.value()
}

/// Runs Lloyd iterations from `init` (`k × dim`, row-major) until no center
/// moves by `tol` or more, or `max_iters` is reached.
///
/// An empty cluster is re-seeded at the point farthest from its current
/// center (among points whose own cluster keeps at least one other member).
pub fn lloyd(data: &[f64], dim: usize, init: &[f64], tol: f64, max_iters: usize) -> Result<LloydOutcome> {
    if dim == 0 || data.len() % dim != 0 || init.len() % dim != 0 {
        return Err(Error::invalid("data and centers must be whole rows of the given dimension"));
    }
    let n = data.len() / dim;
    let k = init.len() / dim;
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one center"));
    }
    if k > n {
        return Err(Error::invalid(format!("k-means with {k} centers but only {n} points")));
    }
    if !(tol > 0.0) {
        return Err(Error::invalid("k-means tolerance must be positive"));
    }

    let mut centers = init.to_vec();
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0f64; n];
    let mut inertia_trace = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iters {
        let mut inertia = assign(data, dim, &centers, &mut labels, &mut dists);

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .ok_or_else(|| Error::Degenerate("cannot re-seed an empty k-means cluster".into()))?;
            if dists[donor] == 0.0 {
                return Err(Error::Degenerate(
                    "empty k-means cluster and every point coincides with its center".into(),
                ));
            }
            counts[labels[donor]] -= 1;
            counts[empty] = 1;
            labels[donor] = empty;
            inertia -= dists[donor];
            dists[donor] = 0.0;
            centers[empty * dim..(empty + 1) * dim].copy_from_slice(&data[donor * dim..(donor + 1) * dim]);
            reseeds += 1;
        }
        inertia_trace.push(inertia.max(0.0));

        let mut sums = vec![0.0f64; k * dim];
        for (p, &l) in data.chunks_exact(dim).zip(&labels) {
            for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(p) {
                *s += v;
            }
        }
        let mut shift = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let mut moved = 0.0;
            for d in 0..dim {
                let new = sums[c * dim + d] * inv;
                moved += (new - centers[c * dim + d]).powi(2);
                centers[c * dim + d] = new;
            }
            shift = shift.max(moved.sqrt());
        }
        iterations += 1;
        if shift < tol {
            converged = true;
            break;
        }
    }

    Ok(LloydOutcome {
        dim,
        centers,
        labels,
        inertia_trace,
        iterations,
        converged,
        reseeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn points_at_centers_converge_immediately() {
        let data = [0.0, 0.0, 5.0, 5.0, -3.0, 2.0];
        let out = lloyd(&data, 2, &data, 1e-9, 100).unwrap();
        assert_eq!(out.iterations, 1);
        assert!(out.converged);
        assert_eq!(out.inertia_trace, vec![0.0]);
        assert_eq!(out.labels, vec![0, 1, 2]);
    }

    #[test]
    fn two_blobs() {
        let data = [0.0, 0.1, 0.2, -0.1, 10.0, 10.2, 9.8, 10.0];
        let out = lloyd(&data, 1, &[0.0, 0.2], 1e-12, 100).unwrap();
        assert!(out.converged);
        let mut c = out.centers.clone();
        c.sort_by(f64::total_cmp);
        assert!((c[0] - 0.05).abs() < 1e-12);
        assert!((c[1] - 10.0).abs() < 1e-12);
        assert!(out.inertia_trace.windows(2).all(|w| w[1] <= w[0] + 1e-12));
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        let data = [0.0, 1.0, 2.0, 100.0];
        // Second center is far from everything and starts empty.
        let out = lloyd(&data, 1, &[1.0, 1e6], 1e-12, 100).unwrap();
        assert!(out.reseeds >= 1);
        let mut counts = [0; 2];
        for &l in &out.labels {
            counts[l] += 1;
        }
        assert!(counts.iter().all(|&c| c > 0));
        assert!(out.centers.contains(&100.0));
    }

    #[test]
    fn identical_points_cannot_fill_two_clusters() {
        let data = [1.0, 1.0, 1.0];
        assert!(lloyd(&data, 1, &[1.0, 2.0], 1e-9, 10).is_err());
    }

    #[test]
    fn rejects_too_many_centers() {
        assert!(lloyd(&[0.0], 1, &[0.0, 1.0], 1e-9, 10).is_err());
    }

    #[test]
    fn plus_plus_picks_distinct_points() {
        use rand::SeedableRng;
        let data = [0.0, 0.0, 0.0, 0.0, 10.0, 0.0, 0.0, 10.0];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let c = plus_plus_centers(&data, 2, 3, &mut rng).unwrap();
        let mut rows: Vec<[u64; 2]> = c.chunks(2).map(|p| [p[0].to_bits(), p[1].to_bits()]).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 3);
        assert!(plus_plus_centers(&data, 2, 4, &mut rng).is_err());
    }
}
