//! Fidelity, coupling and consistency measures.

mod energy;
mod report;
mod sweep;

pub use energy::{
    energy_distance, energy_permutation_test, EnergyTest, DEFAULT_NULL_QUANTILE, DEFAULT_PERMUTATIONS,
};
pub use report::{Accept, MetricReport};
pub use sweep::{sweep_summary, SweepPoint, SweepSummary};

use serde::{Deserialize, Serialize};

use crate::coupling::coupling_energy;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::models::{Gmm, ScoreModel};

/// Mean negative clean log density of a cloud. Non-finite points count as
/// `+∞`.
pub fn gmm_nll(g: &Gmm, cloud: &[Vec<f64>]) -> Result<f64> {
    model_nll(g, cloud)
}

/// [`gmm_nll`] for any model with a tractable clean density.
pub fn model_nll(model: &dyn ScoreModel, cloud: &[Vec<f64>]) -> Result<f64> {
    if cloud.is_empty() {
        return Err(Error::Empty("negative log-likelihood of an empty cloud"));
    }
    let mut total = 0.0;
    for x in cloud {
        check_dim(model.dim(), x.len())?;
        total -= model.noised_log_density(x, 1.0)?;
    }
    Ok(total / cloud.len() as f64)
}

/// `log p(x) + U(x, x′)`.
pub fn tilted_log_density(g: &Gmm, x: &[f64], x_prime: &[f64], lambda: f64) -> Result<f64> {
    check_dim(g.dim(), x.len())?;
    let energy = coupling_energy(x, x_prime, lambda)?;
    Ok(g.log_density(x)? + energy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceSummary {
    pub distances: Vec<f64>,
    pub median: f64,
    pub mean: f64,
    pub p90: f64,
}

/// Per-pair L2 distances between two equally sized batches.
pub fn coupling_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<DistanceSummary> {
    if a.len() != b.len() {
        return Err(Error::arg(
            "batch_b",
            format!("has {} samples but batch_a has {}", b.len(), a.len()),
        ));
    }
    if a.is_empty() {
        return Err(Error::Empty("coupling distance of empty batches"));
    }
    let mut distances = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        check_dim(x.len(), y.len())?;
        distances.push(linalg::distance(x, y));
    }
    let mut sorted = distances.clone();
    sorted.sort_by(f64::total_cmp);
    Ok(DistanceSummary {
        median: quantile(&sorted, 0.5),
        mean: distances.iter().sum::<f64>() / distances.len() as f64,
        p90: quantile(&sorted, 0.9),
        distances,
    })
}

/// Linearly interpolated quantile of ascending data (the common "type 7"
/// definition).
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of unsorted data.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    quantile(&sorted, 0.5)
}

/// Mean pairwise distance between the `n_views` blocks of a joint sample.
pub fn consistency_residual(sample: &[f64], n_views: usize, view_dim: usize) -> Result<f64> {
    if n_views < 2 || view_dim == 0 {
        return Err(Error::arg(
            "n_views",
            format!("need at least 2 views of positive dimension, got {n_views} x {view_dim}"),
        ));
    }
    if sample.len() != n_views * view_dim {
        return Err(Error::arg(
            "sample",
            format!(
                "length {} does not split into {n_views} views of dimension {view_dim}",
                sample.len()
            ),
        ));
    }
    let view = |i: usize| &sample[i * view_dim..(i + 1) * view_dim];
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n_views {
        for j in i + 1..n_views {
            total += linalg::distance(view(i), view(j));
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}
