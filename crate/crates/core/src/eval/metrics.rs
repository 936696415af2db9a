//! Distribution distances between sample sets.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, rng_for};

/// Empirical mean and unbiased covariance of a sample set.
pub fn mean_cov(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if samples.len() < 2 {
        return Err(Error::invalid("need at least 2 samples for mean and covariance"));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("samples must share a positive dimension"));
    }
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(dim);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    cov /= n - 1.0;
    // syger fills the lower triangle; mirror it
    for r in 0..dim {
        for c in (r + 1)..dim {
            cov[(r, c)] = cov[(c, r)];
        }
    }
    Ok((mean, cov))
}

/// Fréchet distance between the Gaussian fits of two sample sets, plus the
/// diagonal jitter that regularized the matrix square roots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrechetResult {
    /// Squared distance `‖μa − μb‖² + tr(Σa + Σb − 2·(Σa^½ Σb Σa^½)^½)`.
    pub dist2: f64,
    /// `jitter·I` was added to both covariances before taking roots;
    /// it scales with the data (1e-6 times the mean diagonal).
    pub jitter: f64,
}

/// Symmetric PSD square root via eigendecomposition, clamping tiny negative
/// eigenvalues produced by round-off.
fn sqrt_psd(mat: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(mat);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let v = &eig.eigenvectors;
    v * DMatrix::from_diagonal(&roots) * v.transpose()
}

pub fn frechet_gauss(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<FrechetResult> {
    let (mu_a, mut cov_a) = mean_cov(a)?;
    let (mu_b, mut cov_b) = mean_cov(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::invalid("sample sets have different dimensions"));
    }
    let dim = mu_a.len();
    let mean_diag =
        (cov_a.diagonal().sum() + cov_b.diagonal().sum()) / (2.0 * dim as f64);
    let jitter = 1e-6 * mean_diag.max(1e-12);
    for i in 0..dim {
        cov_a[(i, i)] += jitter;
        cov_b[(i, i)] += jitter;
    }
    let root_a = sqrt_psd(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    // symmetrize before the second root; the product drifts off-symmetric
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(inner);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    let trace_term = cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    let dist2 = mean_term + trace_term.max(0.0);
    if !dist2.is_finite() {
        return Err(Error::numeric("frechet distance is not finite"));
    }
    Ok(FrechetResult { dist2, jitter })
}

/// Exact squared 1-D Wasserstein-2 between two empirical distributions,
/// integrating the quantile difference over the merged breakpoint grid.
/// Handles unequal sample counts.
fn w2_1d_sq(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite projections"));
    let (na, nb) = (a.len(), b.len());
    let mut acc = 0.0;
    let mut u_prev = 0.0;
    let (mut i, mut j) = (0usize, 0usize);
    while i < na && j < nb {
        // next breakpoint: min((i+1)/na, (j+1)/nb), compared exactly
        let lhs = (i + 1) as u128 * nb as u128;
        let rhs = (j + 1) as u128 * na as u128;
        let u = if lhs <= rhs {
            (i + 1) as f64 / na as f64
        } else {
            (j + 1) as f64 / nb as f64
        };
        let d = a[i] - b[j];
        acc += d * d * (u - u_prev);
        u_prev = u;
        if lhs <= rhs {
            i += 1;
        }
        if rhs <= lhs {
            j += 1;
        }
    }
    acc
}

/// Sliced Wasserstein-2: root-mean-square of exact 1-D W2 distances over
/// `n_proj` seeded random unit directions.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], n_proj: usize, seed: u64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("sample sets must be non-empty"));
    }
    if n_proj == 0 {
        return Err(Error::invalid("need at least one projection"));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|s| s.len() != dim) {
        return Err(Error::invalid("samples must share a positive dimension"));
    }
    let sq_dists = crate::par::map_indexed(n_proj, |k| {
        let mut rng = rng_for(seed, &[domain::METRIC_PROJ, k as u64]);
        let dir = loop {
            let v: Vec<f64> =
                (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                break v.into_iter().map(|x| x / norm).collect::<Vec<f64>>();
            }
        };
        let project = |set: &[Vec<f64>]| -> Vec<f64> {
            set.iter().map(|s| s.iter().zip(&dir).map(|(x, d)| x * d).sum()).collect()
        };
        w2_1d_sq(project(a), project(b))
    });
    let mean_sq = sq_dists.iter().sum::<f64>() / n_proj as f64;
    if !mean_sq.is_finite() {
        return Err(Error::numeric("sliced distance is not finite"));
    }
    Ok(mean_sq.sqrt())
}

/// Pairs examined exhaustively before [`diversity`] switches to sampling.
pub const DIVERSITY_PAIR_CAP: usize = 10_000;

/// Mean pairwise Euclidean distance. Up to [`DIVERSITY_PAIR_CAP`] pairs are
/// enumerated exactly; beyond that a fixed-seed subsample of that many
/// pairs is used, so the value is still deterministic in the input alone.
pub fn diversity(samples: &[Vec<f64>]) -> Result<f64> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid("diversity needs at least 2 samples"));
    }
    let dim = samples[0].len();
    if dim == 0 || samples.iter().any(|s| s.len() != dim) {
        return Err(Error::invalid("samples must share a positive dimension"));
    }
    let dist = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let total_pairs = n * (n - 1) / 2;
    if total_pairs <= DIVERSITY_PAIR_CAP {
        let mut acc = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                acc += dist(&samples[i], &samples[j]);
            }
        }
        return Ok(acc / total_pairs as f64);
    }
    let mut rng = rng_for(0x9e3779b97f4a7c15, &[domain::DIVERSITY_PAIRS, n as u64]);
    let mut acc = 0.0;
    for _ in 0..DIVERSITY_PAIR_CAP {
        let i = rng.random_range(0..n);
        let j = loop {
            let j = rng.random_range(0..n);
            if j != i {
                break j;
            }
        };
        acc += dist(&samples[i], &samples[j]);
    }
    Ok(acc / DIVERSITY_PAIR_CAP as f64)
}
