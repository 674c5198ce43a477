//! Coupled sampling: two chains steered toward each other by the gradient
//! of `U(x, x′) = −(λ/2)‖x − x′‖²` on their clean estimates.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg;
use crate::metrics::consistency_residual;
use crate::models::{mv_consistent_model, MvScene, ScoreModel};
use crate::rng::{derive_seed, roles, standard_normal_vec};
use crate::sampler::{
    fingerprint, reverse_update, sample, sampler_fingerprint, step_levels, step_sigma,
    x0_from_epsilon, ChainState, SampleBatch, SamplerConfig,
};
use crate::schedule::NoiseSchedule;

/// How the coupling gradient is scaled at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceScaleRule {
    /// `√(1 − ᾱ_{t−1})`, the factor on the guidance line of the algorithm.
    #[default]
    AlphaBarPrev,
    /// `√(1 − α_t)`.
    AlphaT,
}

impl GuidanceScaleRule {
    pub fn scale(self, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
        match self {
            GuidanceScaleRule::AlphaBarPrev => (1.0 - alpha_bar_prev).max(0.0).sqrt(),
            GuidanceScaleRule::AlphaT => (1.0 - alpha_bar_t / alpha_bar_prev).max(0.0).sqrt(),
        }
    }
}

impl std::str::FromStr for GuidanceScaleRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha_bar_prev" => Ok(Self::AlphaBarPrev),
            "alpha_t" => Ok(Self::AlphaT),
            other => Err(Error::arg(
                "guidance_scale_rule",
                format!("unknown rule `{other}`, expected `alpha_bar_prev` or `alpha_t`"),
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoisePolicy {
    #[default]
    Independent,
    /// Chain B reuses chain A's injected noise.
    Shared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingConfig {
    pub lambda: f64,
    pub guidance_scale_rule: GuidanceScaleRule,
    pub noise_policy: NoisePolicy,
    /// Per-step multiplier on `λ`, indexed by `t − 1`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_ramp: Option<Vec<f64>>,
}

impl Default for CouplingConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            guidance_scale_rule: GuidanceScaleRule::default(),
            noise_policy: NoisePolicy::default(),
            lambda_ramp: None,
        }
    }
}

impl CouplingConfig {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            ..Self::default()
        }
    }

    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::arg(
                "lambda",
                format!("must be a finite non-negative number, got {}", self.lambda),
            ));
        }
        if let Some(ramp) = &self.lambda_ramp {
            if ramp.len() != schedule.num_steps() {
                return Err(Error::arg(
                    "lambda_ramp",
                    format!(
                        "has {} entries but the schedule has {} steps",
                        ramp.len(),
                        schedule.num_steps()
                    ),
                ));
            }
            if ramp.iter().any(|r| !(*r >= 0.0) || !r.is_finite()) {
                return Err(Error::arg("lambda_ramp", "entries must be non-negative"));
            }
        }
        Ok(())
    }

    /// Coupling strength in effect at step `t`.
    pub fn lambda_at(&self, t: usize) -> f64 {
        match &self.lambda_ramp {
            Some(ramp) => self.lambda * ramp[t - 1],
            None => self.lambda,
        }
    }
}

/// `U(x, x′) = −(λ/2)‖x − x′‖²`.
pub fn coupling_energy(x: &[f64], x_prime: &[f64], lambda: f64) -> Result<f64> {
    check_dim(x.len(), x_prime.len())?;
    let d2: f64 = x.iter().zip(x_prime).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(-0.5 * lambda * d2)
}

/// `∇ₓ U(x, x′) = −λ(x − x′)` with the partner held constant.
pub fn coupling_gradient(x0_self: &[f64], x0_other: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_dim(x0_self.len(), x0_other.len())?;
    Ok(x0_self
        .iter()
        .zip(x0_other)
        .map(|(a, b)| -lambda * (a - b))
        .collect())
}

/// Per-step inputs of one coupled update.
pub struct CoupledStepInputs<'a> {
    pub x0_a: &'a [f64],
    pub eps_a: &'a [f64],
    pub x0_b: &'a [f64],
    pub eps_b: &'a [f64],
    pub alpha_bar_t: f64,
    pub alpha_bar_prev: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub rule: GuidanceScaleRule,
    pub z_a: Option<&'a [f64]>,
    pub z_b: Option<&'a [f64]>,
}

/// Applies one reverse step to both chains and adds the scaled coupling
/// gradient. With `λ = 0` the result is exactly two uncoupled steps.
pub fn coupled_update(inp: &CoupledStepInputs<'_>) -> (Vec<f64>, Vec<f64>) {
    let mut next_a = reverse_update(inp.x0_a, inp.eps_a, inp.alpha_bar_prev, inp.sigma, inp.z_a);
    let mut next_b = reverse_update(inp.x0_b, inp.eps_b, inp.alpha_bar_prev, inp.sigma, inp.z_b);
    if inp.lambda != 0.0 {
        let scale = inp.rule.scale(inp.alpha_bar_t, inp.alpha_bar_prev);
        for i in 0..next_a.len() {
            let diff = inp.x0_a[i] - inp.x0_b[i];
            next_a[i] += scale * (-inp.lambda * diff);
            next_b[i] += scale * (-inp.lambda * -diff);
        }
    }
    (next_a, next_b)
}

/// One coupled step from `t` to `t − 1`, drawing noise from the per-chain
/// streams according to the noise policy.
#[allow(clippy::too_many_arguments)]
pub fn coupled_step<R: Rng + ?Sized>(
    x_a: &[f64],
    x_b: &[f64],
    model_a: &dyn ScoreModel,
    model_b: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    t: usize,
    sampler: &SamplerConfig,
    coupling: &CouplingConfig,
    rng_a: &mut R,
    rng_b: &mut R,
) -> Result<(Vec<f64>, Vec<f64>)> {
    schedule.check_step(t)?;
    coupling.validate(schedule)?;
    check_dim(x_a.len(), x_b.len())?;
    let (ab_t, ab_prev) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
    let eps_a = model_a.predict_epsilon(x_a, t, schedule)?;
    let eps_b = model_b.predict_epsilon(x_b, t, schedule)?;
    let x0_a = x0_from_epsilon(x_a, &eps_a, ab_t)?;
    let x0_b = x0_from_epsilon(x_b, &eps_b, ab_t)?;
    let sigma = step_sigma(sampler, ab_t, ab_prev);
    let z_a = (sigma > 0.0).then(|| standard_normal_vec(rng_a, x_a.len()));
    let z_b = match coupling.noise_policy {
        NoisePolicy::Shared => z_a.clone(),
        NoisePolicy::Independent => (sigma > 0.0).then(|| standard_normal_vec(rng_b, x_b.len())),
    };
    Ok(coupled_update(&CoupledStepInputs {
        x0_a: &x0_a,
        eps_a: &eps_a,
        x0_b: &x0_b,
        eps_b: &eps_b,
        alpha_bar_t: ab_t,
        alpha_bar_prev: ab_prev,
        sigma,
        lambda: coupling.lambda_at(t),
        rule: coupling.guidance_scale_rule,
        z_a: z_a.as_deref(),
        z_b: z_b.as_deref(),
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRunResult {
    pub batch_a: SampleBatch,
    pub batch_b: SampleBatch,
    /// `(t, mean over pairs of ‖x̂₀ᴬ − x̂₀ᴮ‖)` for every visited step.
    pub distance_trace: Vec<(usize, f64)>,
}

/// Seeds used by chains A and B of a coupled run.
pub fn chain_seeds(seed: u64) -> (u64, u64) {
    (derive_seed(seed, roles::CHAIN_A), derive_seed(seed, roles::CHAIN_B))
}

/// Runs `n` coupled pairs. Pair `i` uses stream `i` of each chain's seed,
/// so with `λ = 0` the batches equal two plain [`sample`] runs under
/// [`chain_seeds`].
pub fn coupled_sample(
    model_a: &dyn ScoreModel,
    model_b: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    coupling: &CouplingConfig,
    seed: u64,
    n: usize,
) -> Result<CoupledRunResult> {
    if n == 0 {
        return Err(Error::arg("n", "must be at least 1"));
    }
    check_dim(model_a.dim(), model_b.dim())?;
    coupling.validate(schedule)?;
    let steps = sampler.steps(schedule)?;
    let levels = step_levels(schedule, &steps);
    let dim = model_a.dim();
    let (seed_a, seed_b) = chain_seeds(seed);
    let record = sampler.record_trajectory;

    let pairs: Vec<(ChainState, ChainState, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|pair| {
            let mut a = ChainState::start(seed_a, pair, dim, record);
            let mut b = ChainState::start(seed_b, pair, dim, record);
            let mut distances = Vec::with_capacity(levels.len());
            for &(t, ab_t, ab_prev) in &levels {
                let wrap = |label: &'static str| {
                    move |e: Error| Error::InCoupledChain {
                        chain_label: label,
                        chain: pair,
                        step: t,
                        source: Box::new(e),
                    }
                };
                let eps_a = model_a.predict_epsilon(&a.x, t, schedule).map_err(wrap("A"))?;
                let eps_b = model_b.predict_epsilon(&b.x, t, schedule).map_err(wrap("B"))?;
                check_dim(dim, eps_a.len()).map_err(wrap("A"))?;
                check_dim(dim, eps_b.len()).map_err(wrap("B"))?;
                let x0_a = x0_from_epsilon(&a.x, &eps_a, ab_t).map_err(wrap("A"))?;
                let x0_b = x0_from_epsilon(&b.x, &eps_b, ab_t).map_err(wrap("B"))?;
                a.record(t, &x0_a, &eps_a);
                b.record(t, &x0_b, &eps_b);
                distances.push(linalg::distance(&x0_a, &x0_b));

                let sigma = step_sigma(sampler, ab_t, ab_prev);
                let z_a = a.draw_noise(sigma);
                let z_b = match coupling.noise_policy {
                    NoisePolicy::Shared => z_a.clone(),
                    NoisePolicy::Independent => b.draw_noise(sigma),
                };
                let (next_a, next_b) = coupled_update(&CoupledStepInputs {
                    x0_a: &x0_a,
                    eps_a: &eps_a,
                    x0_b: &x0_b,
                    eps_b: &eps_b,
                    alpha_bar_t: ab_t,
                    alpha_bar_prev: ab_prev,
                    sigma,
                    lambda: coupling.lambda_at(t),
                    rule: coupling.guidance_scale_rule,
                    z_a: z_a.as_deref(),
                    z_b: z_b.as_deref(),
                });
                a.x = next_a;
                b.x = next_b;
            }
            Ok((a, b, distances))
        })
        .collect::<Result<_>>()?;

    let mut trace_sums = vec![0.0; levels.len()];
    let mut samples_a = Vec::with_capacity(n);
    let mut samples_b = Vec::with_capacity(n);
    let mut traj_a = record.then(|| Vec::with_capacity(n));
    let mut traj_b = record.then(|| Vec::with_capacity(n));
    for (a, b, distances) in pairs {
        for (s, d) in trace_sums.iter_mut().zip(&distances) {
            *s += d;
        }
        samples_a.push(a.x);
        samples_b.push(b.x);
        if let (Some(all), Some(tr)) = (&mut traj_a, a.trajectory) {
            all.push(tr);
        }
        if let (Some(all), Some(tr)) = (&mut traj_b, b.trajectory) {
            all.push(tr);
        }
    }
    let distance_trace = levels
        .iter()
        .zip(trace_sums)
        .map(|(&(t, _, _), s)| (t, s / n as f64))
        .collect();

    let run_print = fingerprint(&serde_json::json!({
        "model_a": model_a.describe(),
        "model_b": model_b.describe(),
        "schedule": schedule.betas(),
        "sampler": sampler,
        "coupling": coupling,
    }));
    Ok(CoupledRunResult {
        batch_a: SampleBatch {
            samples: samples_a,
            dim,
            seed: seed_a,
            fingerprint: run_print.clone(),
            trajectories: traj_a,
        },
        batch_b: SampleBatch {
            samples: samples_b,
            dim,
            seed: seed_b,
            fingerprint: run_print,
            trajectories: traj_b,
        },
        distance_trace,
    })
}

/// Weighted sum of noise predictions from models over one domain.
pub struct AveragedScore {
    models: Vec<Arc<dyn ScoreModel>>,
    weights: Vec<f64>,
    dim: usize,
}

impl AveragedScore {
    pub fn new(models: Vec<Arc<dyn ScoreModel>>, weights: Vec<f64>) -> Result<Self> {
        let dim = models
            .first()
            .map(|m| m.dim())
            .ok_or(Error::Empty("score averaging needs at least one model"))?;
        if weights.len() != models.len() {
            return Err(Error::arg(
                "weights",
                format!("{} weights for {} models", weights.len(), models.len()),
            ));
        }
        for m in &models {
            check_dim(dim, m.dim())?;
        }
        if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::arg("weights", "must be non-negative and sum to 1"));
        }
        Ok(Self { models, weights, dim })
    }
}

impl ScoreModel for AveragedScore {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        let mut out: Vec<f64> = self.models[0]
            .predict_epsilon(x, t, schedule)?
            .into_iter()
            .map(|e| self.weights[0] * e)
            .collect();
        for (m, w) in self.models.iter().zip(&self.weights).skip(1) {
            let eps = m.predict_epsilon(x, t, schedule)?;
            check_dim(self.dim, eps.len())?;
            for (o, e) in out.iter_mut().zip(eps) {
                *o += w * e;
            }
        }
        Ok(out)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "score_average": self.models.iter().map(|m| m.describe()).collect::<Vec<_>>(),
            "weights": self.weights,
        })
    }
}

/// Baseline: a single chain driven by the weighted sum of the models'
/// noise predictions.
pub fn score_average_sample(
    models: Vec<Arc<dyn ScoreModel>>,
    weights: Vec<f64>,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<SampleBatch> {
    let avg = AveragedScore::new(models, weights)?;
    sample(&avg, schedule, sampler, seed, n)
}

/// Coupled run on a multi-view scene together with per-sample consistency
/// residuals of both chains.
#[derive(Debug, Clone)]
pub struct MvEditResult {
    pub run: CoupledRunResult,
    pub residuals_a: Vec<f64>,
    pub residuals_b: Vec<f64>,
}

/// Chain A samples independent per-view edits; chain B samples the
/// multi-view consistent model.
pub fn mv_edit_demo(
    scene: &MvScene,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
    coupling: &CouplingConfig,
    seed: u64,
    n: usize,
) -> Result<MvEditResult> {
    let edit = scene.edit_model();
    let consistent = mv_consistent_model(scene)?;
    let run = coupled_sample(&edit, &consistent, schedule, sampler, coupling, seed, n)?;
    let residuals = |batch: &SampleBatch| -> Result<Vec<f64>> {
        batch
            .samples
            .iter()
            .map(|x| consistency_residual(x, scene.n_views(), scene.view_dim()))
            .collect()
    };
    let residuals_a = residuals(&run.batch_a)?;
    let residuals_b = residuals(&run.batch_b)?;
    Ok(MvEditResult {
        run,
        residuals_a,
        residuals_b,
    })
}

/// Fingerprint of a single-model run, exposed for emitters.
pub fn single_run_fingerprint(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    sampler: &SamplerConfig,
) -> String {
    sampler_fingerprint(model, schedule, sampler)
}
