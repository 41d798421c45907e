//! Per-modality cluster structure: k-means centroids over gallery features
//! plus a regularized inverse covariance, answering nearest/farthest centroid
//! queries for both attack layers.

use rand::Rng;

use crate::embedder::ModalityModel;
use crate::error::{Error, Result};
use crate::numerics::{covariance, euclidean_sq, mahalanobis_sq, regularized_inverse, Matrix};
use crate::rng;
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    pub modality: u16,
    pub centroids: Vec<Vec<f64>>,
    pub s_inv: Matrix,
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Assignment ties break toward the lowest centroid index; empty clusters are
/// re-seeded to the point farthest from its assigned centroid. Deterministic
/// for a fixed seed.
pub fn kmeans(
    features: &[Vec<f64>],
    n_clusters: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if n_clusters < 2 {
        return Err(Error::InvalidConfig(format!(
            "n_clusters must be >= 2, got {n_clusters}"
        )));
    }
    if features.len() < n_clusters {
        return Err(Error::InsufficientData {
            context: "kmeans features",
            needed: n_clusters,
            got: features.len(),
        });
    }
    let mut rng = rng::stream_from_seed(seed);
    let mut centroids = plus_plus_seed(features, n_clusters, &mut rng);
    let mut assignment = vec![usize::MAX; features.len()];

    for _ in 0..max_iters {
        let new_assignment: Vec<usize> = features
            .iter()
            .map(|f| nearest_euclidean(f, &centroids))
            .collect();
        let mut counts = vec![0usize; n_clusters];
        for &a in &new_assignment {
            counts[a] += 1;
        }

        let mut assignment_now = new_assignment;
        // Re-seed empty clusters to the current farthest point.
        for k in 0..n_clusters {
            if counts[k] > 0 {
                continue;
            }
            let mut far_idx = 0;
            let mut far_d = -1.0;
            for (i, f) in features.iter().enumerate() {
                // Skip points that are alone in their cluster; stealing them
                // would just move the hole.
                if counts[assignment_now[i]] <= 1 {
                    continue;
                }
                let d = euclidean_sq(f, &centroids[assignment_now[i]]);
                if d > far_d {
                    far_d = d;
                    far_idx = i;
                }
            }
            counts[assignment_now[far_idx]] -= 1;
            assignment_now[far_idx] = k;
            counts[k] = 1;
            centroids[k] = features[far_idx].clone();
        }

        let converged = assignment_now == assignment;
        assignment = assignment_now;

        // Mean update.
        let d = features[0].len();
        let mut sums = vec![vec![0.0; d]; n_clusters];
        for (f, &a) in features.iter().zip(assignment.iter()) {
            for (s, v) in sums[a].iter_mut().zip(f.iter()) {
                *s += v;
            }
        }
        for k in 0..n_clusters {
            if counts[k] > 0 {
                for s in &mut sums[k] {
                    *s /= counts[k] as f64;
                }
                centroids[k] = sums[k].clone();
            }
        }

        if converged {
            break;
        }
    }
    Ok(centroids)
}

fn plus_plus_seed<R: Rng>(features: &[Vec<f64>], n_clusters: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut centroids = Vec::with_capacity(n_clusters);
    centroids.push(features[rng.gen_range(0..features.len())].clone());
    let mut dist_sq: Vec<f64> = features
        .iter()
        .map(|f| euclidean_sq(f, &centroids[0]))
        .collect();
    while centroids.len() < n_clusters {
        let total: f64 = dist_sq.iter().sum();
        let idx = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = features.len() - 1;
            for (i, &d) in dist_sq.iter().enumerate() {
                target -= d;
                if target <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            // All points coincide with existing centroids.
            rng.gen_range(0..features.len())
        };
        centroids.push(features[idx].clone());
        for (d, f) in dist_sq.iter_mut().zip(features.iter()) {
            *d = d.min(euclidean_sq(f, centroids.last().unwrap()));
        }
    }
    centroids
}

fn nearest_euclidean(f: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = euclidean_sq(f, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Sum of squared Euclidean distances to the nearest centroid (diagnostic;
/// the non-increasing Lloyd objective).
pub fn kmeans_objective(features: &[Vec<f64>], centroids: &[Vec<f64>]) -> f64 {
    features
        .iter()
        .map(|f| euclidean_sq(f, &centroids[nearest_euclidean(f, centroids)]))
        .sum()
}

/// Build the centroid bank for one modality from its gallery images:
/// features via the model, centroids via k-means, metric via the regularized
/// inverse of the feature covariance.
pub fn build_bank(
    model: &ModalityModel,
    gallery: &[&ImageTensor],
    n_clusters: usize,
    lambda_reg: f64,
    seed: u64,
) -> Result<CentroidBank> {
    if gallery.is_empty() {
        return Err(Error::EmptyInput("build_bank gallery"));
    }
    let features: Vec<Vec<f64>> = gallery
        .iter()
        .map(|img| model.forward(img))
        .collect::<Result<_>>()?;
    let centroids = kmeans(&features, n_clusters, 100, seed)?;
    let s = covariance(&features)?;
    let s_inv = regularized_inverse(&s, lambda_reg)?;
    Ok(CentroidBank {
        modality: model.modality,
        centroids,
        s_inv,
    })
}

impl CentroidBank {
    /// Index of the centroid nearest to `f` under the bank's Mahalanobis
    /// metric (ties toward the lowest index).
    pub fn nearest_index(&self, f: &[f64]) -> Result<usize> {
        Ok(self.nearest_farthest_indices(f)?.0)
    }

    pub fn nearest_farthest_indices(&self, f: &[f64]) -> Result<(usize, usize)> {
        if self.centroids.is_empty() {
            return Err(Error::EmptyInput("nearest_farthest centroids"));
        }
        let mut best = (0, f64::INFINITY);
        let mut worst = (0, f64::NEG_INFINITY);
        for (i, c) in self.centroids.iter().enumerate() {
            let d = mahalanobis_sq(c, f, &self.s_inv)?;
            if d < best.1 {
                best = (i, d);
            }
            if d > worst.1 {
                worst = (i, d);
            }
        }
        Ok((best.0, worst.0))
    }

    /// Nearest (C_p) and farthest (C_n) centroids of `f`.
    pub fn nearest_farthest(&self, f: &[f64]) -> Result<(&[f64], &[f64])> {
        let (p, n) = self.nearest_farthest_indices(f)?;
        Ok((&self.centroids[p], &self.centroids[n]))
    }
}
