//! Lloyd's k-means over 3-channel feature vectors with k-means++ seeding.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub type Feature = [f64; 3];

/// Pixels per work unit. Partial sums are combined in chunk order so results
/// do not depend on the thread count.
const CHUNK: usize = 4096;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub max_iterations: usize,
    pub convergence_tol: f64,
    pub rng_seed: u64,
    /// Centroids are estimated on at most this many pixels; every pixel is
    /// then assigned to the final centroids.
    pub max_fit_samples: usize,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            k: 3,
            max_iterations: 300,
            convergence_tol: 1e-4,
            rng_seed: 42,
            max_fit_samples: 200_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Vec<Feature>,
    /// Within-cluster sum of squares of all input pixels against the final centroids.
    pub sse: f64,
    /// SSE of the fitting sample after every assignment step.
    pub sse_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMeansResult {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.centroids.len()];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

#[inline]
pub fn sq_dist(a: &Feature, b: &Feature) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    let d2 = a[2] - b[2];
    d0 * d0 + d1 * d1 + d2 * d2
}

/// Index of the nearest centroid; ties go to the lowest index.
#[inline]
pub fn nearest(p: &Feature, centroids: &[Feature]) -> (usize, f64) {
    let mut best = (0, sq_dist(p, &centroids[0]));
    for (j, c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(p, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Assigns every point and returns the SSE.
fn assign(points: &[Feature], centroids: &[Feature], out: &mut [usize]) -> f64 {
    let partial = |(pts, labels): (&[Feature], &mut [usize])| -> f64 {
        let mut sse = 0.0;
        for (p, l) in pts.iter().zip(labels.iter_mut()) {
            let (j, d) = nearest(p, centroids);
            *l = j;
            sse += d;
        }
        sse
    };
    #[cfg(feature = "parallel")]
    let sums: Vec<f64> = {
        use rayon::prelude::*;
        points
            .par_chunks(CHUNK)
            .zip(out.par_chunks_mut(CHUNK))
            .map(partial)
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let sums: Vec<f64> = points.chunks(CHUNK).zip(out.chunks_mut(CHUNK)).map(partial).collect();
    sums.iter().sum()
}

fn init_plus_plus(points: &[Feature], k: usize, rng: &mut ChaCha8Rng) -> Vec<Feature> {
    let n = points.len();
    let mut centroids = Vec::with_capacity(k);
    centroids.push(points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d <= 0.0 {
                    continue;
                }
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[idx];
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn update(points: &[Feature], labels: &[usize], k: usize) -> (Vec<[f64; 3]>, Vec<usize>) {
    let mut sums = vec![[0.0; 3]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l][0] += p[0];
        sums[l][1] += p[1];
        sums[l][2] += p[2];
        counts[l] += 1;
    }
    (sums, counts)
}

/// Clusters `points` into `params.k` groups.
///
/// Lloyd iterations run until no centroid moves more than `convergence_tol`
/// or `max_iterations` is reached. A cluster that empties is re-seeded at the
/// point farthest from its current centroid.
pub fn kmeans(points: &[Feature], params: &KMeansParams) -> Result<KMeansResult> {
    let k = params.k;
    if k < 1 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if points.len() < k {
        return Err(Error::TooFewPixels { n: points.len(), k });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);

    let subsample: Option<Vec<Feature>> = if points.len() > params.max_fit_samples.max(k) {
        let mut idx = sample(&mut rng, points.len(), params.max_fit_samples.max(k)).into_vec();
        idx.sort_unstable();
        Some(idx.into_iter().map(|i| points[i]).collect())
    } else {
        None
    };
    let fit: &[Feature] = subsample.as_deref().unwrap_or(points);

    let mut centroids = init_plus_plus(fit, k, &mut rng);
    let mut labels = vec![0usize; fit.len()];
    let mut sse_history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < params.max_iterations {
        let sse = assign(fit, &centroids, &mut labels);
        if let Some(&prev) = sse_history.last() {
            debug_assert!(
                sse <= prev * (1.0 + 1e-12) + 1e-9,
                "k-means SSE increased: {prev} -> {sse}"
            );
        }
        sse_history.push(sse);
        iterations += 1;

        let (sums, counts) = update(fit, &labels, k);
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                next[j] = [sums[j][0] / n, sums[j][1] / n, sums[j][2] / n];
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // farthest point from its own assigned centroid
                let mut far = (0usize, -1.0);
                for (i, p) in fit.iter().enumerate() {
                    let d = sq_dist(p, &next[labels[i]]);
                    if d > far.1 {
                        far = (i, d);
                    }
                }
                next[j] = fit[far.0];
            }
        }
        let movement = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if movement < params.convergence_tol {
            converged = true;
            break;
        }
    }

    let mut assignments = vec![0usize; points.len()];
    let sse = assign(points, &centroids, &mut assignments);
    if subsample.is_none() {
        sse_history.push(sse);
    }
    Ok(KMeansResult {
        assignments,
        centroids,
        sse,
        sse_history,
        iterations,
        converged,
    })
}
