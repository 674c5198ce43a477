use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ScoreModel;
use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::rng::standard_normal_vec;
use crate::schedule::NoiseSchedule;

const WEIGHT_TOLERANCE: f64 = 1e-12;

/// Gaussian mixture with full covariances stored by lower-triangular factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GmmSpec", into = "GmmSpec")]
pub struct Gmm {
    dim: usize,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    factors: Vec<Vec<f64>>,
    covariances: Vec<Vec<f64>>,
}

/// JSON form: covariances are full matrices and get factored on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmSpec {
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariance: Vec<Vec<Vec<f64>>>,
}

/// Quantities of the marginal of `x = a·x₀ + b·ε` at one point.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedPosterior {
    pub log_density: f64,
    /// `∇ₓ log p(x)`.
    pub score: Vec<f64>,
    /// `E[x₀ | x]`.
    pub posterior_mean: Vec<f64>,
}

impl Gmm {
    /// Builds a mixture from full covariance matrices (row-major `d×d`).
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Vec<f64>>) -> Result<Self> {
        let dim = means.first().map(Vec::len).ok_or_else(|| {
            Error::InvalidMixture("mixture needs at least one component".into())
        })?;
        if covariances.len() != means.len() {
            return Err(Error::InvalidMixture(format!(
                "{} means but {} covariances",
                means.len(),
                covariances.len()
            )));
        }
        let mut factors = Vec::with_capacity(covariances.len());
        for (k, cov) in covariances.iter().enumerate() {
            if cov.len() != dim * dim {
                return Err(Error::InvalidMixture(format!(
                    "covariance {k} has {} entries, expected {}",
                    cov.len(),
                    dim * dim
                )));
            }
            let scale = cov.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for i in 0..dim {
                for j in 0..i {
                    if (cov[i * dim + j] - cov[j * dim + i]).abs() > 1e-12 * scale.max(1.0) {
                        return Err(Error::InvalidMixture(format!(
                            "covariance {k} is not symmetric at ({i}, {j})"
                        )));
                    }
                }
            }
            factors.push(linalg::cholesky(cov, dim)?);
        }
        Self::from_factors(weights, means, factors)
    }

    /// Builds a mixture from lower-triangular factors `L_k` with `Σ_k = L_k L_kᵀ`.
    pub fn from_factors(weights: Vec<f64>, means: Vec<Vec<f64>>, factors: Vec<Vec<f64>>) -> Result<Self> {
        let k = means.len();
        if k == 0 {
            return Err(Error::InvalidMixture("mixture needs at least one component".into()));
        }
        if weights.len() != k || factors.len() != k {
            return Err(Error::InvalidMixture(format!(
                "component counts disagree: {} weights, {k} means, {} factors",
                weights.len(),
                factors.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidMixture("weights must be non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(Error::InvalidMixture(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(Error::InvalidMixture("dimension must be positive".into()));
        }
        for (i, (m, l)) in means.iter().zip(&factors).enumerate() {
            if m.len() != dim {
                return Err(Error::InvalidMixture(format!(
                    "mean {i} has dimension {}, expected {dim}",
                    m.len()
                )));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidMixture(format!("mean {i} is not finite")));
            }
            if l.len() != dim * dim {
                return Err(Error::InvalidMixture(format!(
                    "factor {i} has {} entries, expected {}",
                    l.len(),
                    dim * dim
                )));
            }
            for r in 0..dim {
                if !(l[r * dim + r] > 0.0) {
                    return Err(Error::InvalidMixture(format!(
                        "factor {i} has non-positive diagonal at {r}"
                    )));
                }
                if (r + 1..dim).any(|c| l[r * dim + c] != 0.0) {
                    return Err(Error::InvalidMixture(format!(
                        "factor {i} is not lower triangular"
                    )));
                }
            }
        }
        let covariances = factors.iter().map(|l| linalg::factor_product(l, dim)).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        Ok(Self {
            dim,
            weights,
            log_weights,
            means,
            factors,
            covariances,
        })
    }

    /// Single Gaussian `N(mean, scale²·I)`.
    pub fn isotropic(mean: Vec<f64>, scale: f64) -> Result<Self> {
        let d = mean.len();
        let mut l = vec![0.0; d * d];
        for i in 0..d {
            l[i * d + i] = scale;
        }
        Self::from_factors(vec![1.0], vec![mean], vec![l])
    }

    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::isotropic(vec![0.0; dim], 1.0)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn factors(&self) -> &[Vec<f64>] {
        &self.factors
    }

    pub fn covariances(&self) -> &[Vec<f64>] {
        &self.covariances
    }

    /// Mixture mean `Σ w_k μ_k`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Exact marginal quantities for `x = a·x₀ + b·ε`, `x₀ ~ self`,
    /// `ε ~ N(0, I)`. Component covariances become `a²Σ_k + b²I`.
    pub fn posterior(&self, x: &[f64], a: f64, b: f64) -> Result<NoisedPosterior> {
        check_dim(self.dim, x.len())?;
        let d = self.dim;
        let k = self.num_components();
        let mut log_terms = Vec::with_capacity(k);
        let mut precision_residuals = Vec::with_capacity(k);
        let norm_const = 0.5 * d as f64 * (2.0 * PI).ln();
        for c in 0..k {
            let owned;
            let factor: &[f64] = if b == 0.0 && a == 1.0 {
                &self.factors[c]
            } else {
                let mut cov: Vec<f64> = self.covariances[c].iter().map(|v| a * a * v).collect();
                for i in 0..d {
                    cov[i * d + i] += b * b;
                }
                owned = linalg::cholesky(&cov, d)?;
                &owned
            };
            let residual: Vec<f64> = x
                .iter()
                .zip(&self.means[c])
                .map(|(xi, mi)| xi - a * mi)
                .collect();
            let y = linalg::solve_lower(factor, d, &residual);
            let log_n = -0.5 * linalg::dot(&y, &y) - linalg::sum_log_diag(factor, d) - norm_const;
            log_terms.push(self.log_weights[c] + log_n);
            precision_residuals.push(linalg::solve_lower_transpose(factor, d, &y));
        }
        let log_density = linalg::log_sum_exp(&log_terms);
        let mut score = vec![0.0; d];
        let mut posterior_mean = vec![0.0; d];
        for c in 0..k {
            let gamma = if log_density == f64::NEG_INFINITY {
                0.0
            } else {
                (log_terms[c] - log_density).exp()
            };
            if gamma == 0.0 {
                continue;
            }
            let w = &precision_residuals[c];
            let cov = &self.covariances[c];
            for i in 0..d {
                score[i] -= gamma * w[i];
                let cov_w: f64 = (0..d).map(|j| cov[i * d + j] * w[j]).sum();
                posterior_mean[i] += gamma * (self.means[c][i] + a * cov_w);
            }
        }
        Ok(NoisedPosterior {
            log_density,
            score,
            posterior_mean,
        })
    }

    /// `log p_t(x)` for the variance-preserving marginal at level `ᾱ`.
    pub fn noised_log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        check_alpha_bar(alpha_bar, true)?;
        if x.iter().any(|v| !v.is_finite()) {
            check_dim(self.dim, x.len())?;
            return Ok(f64::NEG_INFINITY);
        }
        let (a, b) = vp_scales(alpha_bar);
        Ok(self.posterior(x, a, b)?.log_density)
    }

    /// Clean data log density.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        self.noised_log_density(x, 1.0)
    }

    /// Exact noise prediction `ε̂ = −√(1 − ᾱ)·∇ log p_t(x)`.
    pub fn epsilon(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        check_alpha_bar(alpha_bar, false)?;
        let (a, b) = vp_scales(alpha_bar);
        let post = self.posterior(x, a, b)?;
        Ok(post.score.into_iter().map(|s| -b * s).collect())
    }

    /// Draws `n` i.i.d. samples.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.num_components() - 1;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        // Guard against a zero-weight tail component absorbing rounding slack.
        while self.weights[comp] == 0.0 && comp > 0 {
            comp -= 1;
        }
        let z = standard_normal_vec(rng, self.dim);
        let lz = linalg::lower_mul_vec(&self.factors[comp], self.dim, &z);
        self.means[comp].iter().zip(lz).map(|(m, v)| m + v).collect()
    }
}

pub(crate) fn vp_scales(alpha_bar: f64) -> (f64, f64) {
    (alpha_bar.sqrt(), (1.0 - alpha_bar).sqrt())
}

fn check_alpha_bar(alpha_bar: f64, allow_one: bool) -> Result<()> {
    let ok = alpha_bar > 0.0 && (alpha_bar < 1.0 || (allow_one && alpha_bar == 1.0));
    if ok {
        Ok(())
    } else {
        let range = if allow_one { "(0, 1]" } else { "(0, 1)" };
        Err(Error::arg(
            "alpha_bar",
            format!("must lie in {range}, got {alpha_bar}"),
        ))
    }
}

impl ScoreModel for Gmm {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        schedule.check_step(t)?;
        self.epsilon(x, schedule.alpha_bar(t))
    }

    fn noised_log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        Gmm::noised_log_density(self, x, alpha_bar)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "gmm": GmmSpec::from(self.clone()) })
    }
}

impl TryFrom<GmmSpec> for Gmm {
    type Error = Error;

    fn try_from(spec: GmmSpec) -> Result<Self> {
        let dim = spec.means.first().map(Vec::len).unwrap_or(0);
        let mut covs = Vec::with_capacity(spec.covariance.len());
        for (k, rows) in spec.covariance.into_iter().enumerate() {
            if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
                return Err(Error::InvalidMixture(format!(
                    "covariance {k} must be a {dim}x{dim} matrix"
                )));
            }
            covs.push(rows.into_iter().flatten().collect());
        }
        Gmm::new(spec.weights, spec.means, covs)
    }
}

impl From<Gmm> for GmmSpec {
    fn from(g: Gmm) -> Self {
        let d = g.dim;
        GmmSpec {
            weights: g.weights,
            means: g.means,
            covariance: g
                .covariances
                .iter()
                .map(|c| c.chunks(d).map(<[f64]>::to_vec).collect())
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;

    fn three_component() -> Gmm {
        Gmm::new(
            vec![0.5, 0.3, 0.2],
            vec![vec![-1.0, 0.5], vec![1.5, -0.5], vec![0.0, 2.0]],
            vec![
                vec![0.5, 0.2, 0.2, 0.4],
                vec![0.3, -0.1, -0.1, 0.6],
                vec![1.0, 0.0, 0.0, 0.25],
            ],
        )
        .unwrap()
    }

    #[test]
    fn standard_normal_density_is_invariant_to_noise_level() {
        let g = Gmm::standard_normal(3).unwrap();
        let x = [0.3, -1.2, 0.7];
        let expected = -0.5 * linalg::dot(&x, &x) - 1.5 * (2.0 * PI).ln();
        for ab in [0.01, 0.3, 0.9, 1.0] {
            assert!((g.noised_log_density(&x, ab).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn density_at_noised_mean() {
        let mu = vec![1.0, -2.0];
        let g = Gmm::isotropic(mu.clone(), 1.0).unwrap();
        let x: Vec<f64> = mu.iter().map(|m| 0.5 * m).collect();
        let v = g.noised_log_density(&x, 0.25).unwrap();
        assert!((v + (2.0 * PI).ln()).abs() < 1e-12);
    }

    #[test]
    fn density_matches_convolution_quadrature() {
        // Two components in R², ᾱ = 0.7, x = (0.3, -1.1): integrate
        // p(x | x₀) p(x₀) over a fine grid of x₀.
        let g = Gmm::new(
            vec![0.6, 0.4],
            vec![vec![-0.5, 0.0], vec![1.0, -1.0]],
            vec![vec![0.4, 0.1, 0.1, 0.3], vec![0.2, 0.0, 0.0, 0.5]],
        )
        .unwrap();
        let ab: f64 = 0.7;
        let x = [0.3, -1.1];
        let (a, b2) = (ab.sqrt(), 1.0 - ab);
        let h = 0.01;
        let mut total = 0.0;
        let n = 900; // x₀ in [-4.5, 4.5)²
        for i in 0..n {
            for j in 0..n {
                let x0 = [-4.5 + (i as f64 + 0.5) * h, -4.5 + (j as f64 + 0.5) * h];
                let prior = g.log_density(&x0).unwrap().exp();
                let r0 = x[0] - a * x0[0];
                let r1 = x[1] - a * x0[1];
                let lik = (-(r0 * r0 + r1 * r1) / (2.0 * b2)).exp() / (2.0 * PI * b2);
                total += prior * lik * h * h;
            }
        }
        let exact = g.noised_log_density(&x, ab).unwrap();
        assert!((exact - total.ln()).abs() < 1e-6, "{exact} vs {}", total.ln());
    }

    #[test]
    fn standard_normal_epsilon_and_tweedie() {
        let g = Gmm::standard_normal(2).unwrap();
        let ab: f64 = 0.36;
        let x = [0.8, -0.4];
        let eps = g.epsilon(&x, ab).unwrap();
        for i in 0..2 {
            assert!((eps[i] - (1.0 - ab).sqrt() * x[i]).abs() < 1e-14);
            // Gaussian conditional: E[x₀|x] = √ᾱ·x for unit-variance data.
            let x0 = (x[i] - (1.0 - ab).sqrt() * eps[i]) / ab.sqrt();
            assert!((x0 - ab.sqrt() * x[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn epsilon_vanishes_at_noised_mean() {
        let mu = vec![2.0, -1.0];
        let g = Gmm::isotropic(mu.clone(), 1.0).unwrap();
        let ab: f64 = 0.4;
        let x: Vec<f64> = mu.iter().map(|m| ab.sqrt() * m).collect();
        let eps = g.epsilon(&x, ab).unwrap();
        assert!(eps.iter().all(|e| e.abs() < 1e-14));
        let x0: Vec<f64> = x.iter().map(|v| v / ab.sqrt()).collect();
        assert!((x0[0] - 2.0).abs() < 1e-14 && (x0[1] + 1.0).abs() < 1e-14);
    }

    #[test]
    fn epsilon_matches_finite_differences() {
        let g = three_component();
        let ab: f64 = 0.5;
        let mut rng = chain_rng(11, 0);
        let h = 1e-5;
        for _ in 0..100 {
            let x: Vec<f64> = standard_normal_vec(&mut rng, 2).iter().map(|v| 2.0 * v).collect();
            let eps = g.epsilon(&x, ab).unwrap();
            for i in 0..2 {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[i] += h;
                xm[i] -= h;
                let fd = (g.noised_log_density(&xp, ab).unwrap()
                    - g.noised_log_density(&xm, ab).unwrap())
                    / (2.0 * h);
                assert!((eps[i] + (1.0 - ab).sqrt() * fd).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn epsilon_rejects_endpoints() {
        let g = Gmm::standard_normal(2).unwrap();
        assert!(g.epsilon(&[0.0, 0.0], 1.0).is_err());
        assert!(g.epsilon(&[0.0, 0.0], 0.0).is_err());
        assert!(g.noised_log_density(&[0.0], 0.5).is_err());
    }

    #[test]
    fn sample_moments() {
        let g = Gmm::standard_normal(2).unwrap();
        let s = g.sample(100_000, &mut chain_rng(3, 0));
        for i in 0..2 {
            let mean: f64 = s.iter().map(|v| v[i]).sum::<f64>() / s.len() as f64;
            assert!(mean.abs() < 0.02, "coordinate {i} mean {mean}");
        }
    }

    #[test]
    fn sample_covariance_matches() {
        let g = three_component();
        let single = Gmm::new(
            vec![1.0],
            vec![vec![0.5, -0.5]],
            vec![g.covariances()[0].clone()],
        )
        .unwrap();
        let s = single.sample(100_000, &mut chain_rng(5, 0));
        let n = s.len() as f64;
        let mean: Vec<f64> = (0..2).map(|i| s.iter().map(|v| v[i]).sum::<f64>() / n).collect();
        for i in 0..2 {
            for j in 0..2 {
                let c: f64 = s.iter().map(|v| (v[i] - mean[i]) * (v[j] - mean[j])).sum::<f64>() / n;
                assert!((c - single.covariances()[0][i * 2 + j]).abs() < 0.05);
            }
        }
    }

    #[test]
    fn zero_weight_component_never_drawn() {
        let g = Gmm::new(
            vec![1.0, 0.0],
            vec![vec![-5.0], vec![5.0]],
            vec![vec![0.01], vec![0.01]],
        )
        .unwrap();
        let s = g.sample(5000, &mut chain_rng(9, 0));
        assert!(s.iter().all(|v| v[0] < 0.0));
    }

    #[test]
    fn construction_errors() {
        assert!(Gmm::new(vec![0.5, 0.6], vec![vec![0.0], vec![1.0]], vec![vec![1.0], vec![1.0]]).is_err());
        assert!(Gmm::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 2.0, 2.0, 1.0]]).is_err());
        assert!(Gmm::new(vec![1.0], vec![vec![0.0, 0.0]], vec![vec![1.0, 0.5, 0.4, 1.0]]).is_err());
        assert!(Gmm::new(vec![0.5, 0.5], vec![vec![0.0], vec![1.0, 2.0]], vec![vec![1.0], vec![1.0]]).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = three_component();
        let text = serde_json::to_string(&g).unwrap();
        let back: Gmm = serde_json::from_str(&text).unwrap();
        for (a, b) in g.factors().iter().zip(back.factors()) {
            for (x, y) in a.iter().zip(b) {
                assert!((x - y).abs() < 1e-14);
            }
        }
        let unknown = r#"{"weights":[1.0],"means":[[0.0]],"covariance":[[[1.0]]],"extra":1}"#;
        assert!(serde_json::from_str::<Gmm>(unknown).is_err());
    }

    #[test]
    fn prediction_is_pure() {
        let g = three_component();
        let s = NoiseSchedule::linear(50, 1e-3, 0.2).unwrap();
        let x = [0.123, -0.456];
        let a = g.predict_epsilon(&x, 17, &s).unwrap();
        let b = g.predict_epsilon(&x, 17, &s).unwrap();
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}
