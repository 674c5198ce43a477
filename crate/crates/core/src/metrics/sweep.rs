use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One grid point of a coupling sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub seed: u64,
    pub coupling_median: f64,
    /// Mean NLL of chain A under its own model.
    pub nll_a: f64,
    /// Mean NLL of chain B under its own model.
    pub nll_b: f64,
    pub residual_b: Option<f64>,
}

impl SweepPoint {
    pub fn own_nll(&self) -> f64 {
        0.5 * (self.nll_a + self.nll_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    /// Non-increasing, tolerating one rise of at most 2% relative.
    pub distance_non_increasing: bool,
    pub distance_strictly_decreasing: bool,
    /// Smallest `λ` whose coupling median is at most half of the first.
    pub half_distance_lambda: Option<f64>,
    /// Mean own-model NLL is non-decreasing past `half_distance_lambda`.
    pub nll_non_decreasing: bool,
}

const INVERSION_TOLERANCE: f64 = 0.02;

/// Summarizes a λ sweep given in grid order.
pub fn sweep_summary(points: Vec<SweepPoint>) -> Result<SweepSummary> {
    if points.len() < 3 {
        return Err(Error::arg(
            "lambda_grid",
            format!("a sweep needs at least 3 points, got {}", points.len()),
        ));
    }
    let seed = points[0].seed;
    if points.iter().any(|p| p.seed != seed) {
        return Err(Error::arg("seed", "sweep points were not run with a shared seed"));
    }
    if points.windows(2).any(|w| !(w[1].lambda >= w[0].lambda)) {
        return Err(Error::arg("lambda_grid", "must be sorted in non-decreasing order"));
    }

    let dist: Vec<f64> = points.iter().map(|p| p.coupling_median).collect();
    let mut inversions = 0;
    let mut tolerated = true;
    for w in dist.windows(2) {
        if w[1] > w[0] {
            inversions += 1;
            tolerated &= (w[1] - w[0]) <= INVERSION_TOLERANCE * w[0].abs();
        }
    }
    let distance_non_increasing = inversions == 0 || (inversions == 1 && tolerated);
    let distance_strictly_decreasing = dist.windows(2).all(|w| w[1] < w[0]);

    let half = dist.iter().position(|d| *d <= 0.5 * dist[0] && dist[0] > 0.0);
    let nll_non_decreasing = match half {
        Some(k) => points[k..].windows(2).all(|w| w[1].own_nll() >= w[0].own_nll()),
        None => true,
    };
    Ok(SweepSummary {
        half_distance_lambda: half.map(|k| points[k].lambda),
        points,
        distance_non_increasing,
        distance_strictly_decreasing,
        nll_non_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(lambda: f64, d: f64, nll: f64) -> SweepPoint {
        SweepPoint {
            lambda,
            seed: 1,
            coupling_median: d,
            nll_a: nll,
            nll_b: nll,
            residual_b: None,
        }
    }

    #[test]
    fn constant_sweep_passes_vacuously() {
        let s = sweep_summary(vec![point(0.0, 1.0, 2.0); 4]).unwrap();
        assert!(s.distance_non_increasing && s.nll_non_decreasing);
        assert!(!s.distance_strictly_decreasing);
        assert!(s.half_distance_lambda.is_none());
    }

    #[test]
    fn verdicts() {
        let s = sweep_summary(vec![
            point(0.0, 4.0, 3.0),
            point(1.0, 2.0, 3.1),
            point(2.0, 1.0, 3.3),
            point(4.0, 0.5, 3.2),
        ])
        .unwrap();
        assert!(s.distance_strictly_decreasing);
        assert_eq!(s.half_distance_lambda, Some(1.0));
        assert!(!s.nll_non_decreasing);

        let small_rise = sweep_summary(vec![point(0.0, 4.0, 1.0), point(1.0, 2.0, 1.0), point(2.0, 2.03, 1.0)]).unwrap();
        assert!(small_rise.distance_non_increasing);
        let big_rise = sweep_summary(vec![point(0.0, 4.0, 1.0), point(1.0, 2.0, 1.0), point(2.0, 2.5, 1.0)]).unwrap();
        assert!(!big_rise.distance_non_increasing);
    }

    #[test]
    fn validation() {
        assert!(sweep_summary(vec![point(0.0, 1.0, 1.0); 2]).is_err());
        let mut pts = vec![point(0.0, 1.0, 1.0); 3];
        pts[1].seed = 2;
        assert!(sweep_summary(pts).is_err());
        assert!(sweep_summary(vec![point(1.0, 1.0, 1.0), point(0.0, 1.0, 1.0), point(2.0, 1.0, 1.0)]).is_err());
    }
}
