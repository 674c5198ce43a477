//! Single-chain reverse diffusion: ancestral and deterministic steps.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{check_dim, Error, Result};
use crate::models::ScoreModel;
use crate::rng::{chain_rng, standard_normal_vec, ChainRng};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    #[default]
    Ancestral,
    Deterministic,
}

/// Scale of the injected noise `σ_t` in the ancestral step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRule {
    /// `σ_t² = β_t`, capped at `1 − ᾱ_{t−1}`.
    Beta,
    /// Posterior variance `σ_t² = (1 − ᾱ_{t−1}) / (1 − ᾱ_t) · β_t`.
    #[default]
    BetaTilde,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub variance_rule: VarianceRule,
    pub record_trajectory: bool,
    /// Strictly decreasing steps from `T` down to `1`; all steps when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step_subset: Option<Vec<usize>>,
}

impl SamplerConfig {
    pub fn deterministic() -> Self {
        Self {
            kind: SamplerKind::Deterministic,
            ..Self::default()
        }
    }

    /// Every `stride`-th step from `T`, always ending at step 1.
    pub fn with_stride(mut self, num_steps: usize, stride: usize) -> Self {
        let stride = stride.max(1);
        let mut steps: Vec<usize> = (1..=num_steps).rev().step_by(stride).collect();
        if steps.last() != Some(&1) {
            steps.push(1);
        }
        self.step_subset = Some(steps);
        self
    }

    /// The descending list of steps this sampler visits.
    pub fn steps(&self, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
        let t_max = schedule.num_steps();
        match &self.step_subset {
            None => Ok((1..=t_max).rev().collect()),
            Some(steps) => {
                if steps.first() != Some(&t_max) || steps.last() != Some(&1) {
                    return Err(Error::arg(
                        "step_subset",
                        format!("must start at T = {t_max} and end at 1"),
                    ));
                }
                if steps.windows(2).any(|w| w[1] >= w[0]) {
                    return Err(Error::arg("step_subset", "must be strictly decreasing"));
                }
                Ok(steps.clone())
            }
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.kind == SamplerKind::Ancestral
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEntry {
    pub t: usize,
    pub x_t: Vec<f64>,
    pub x0_hat: Vec<f64>,
    pub eps_hat: Vec<f64>,
}

/// Per-step record of one chain, ordered by decreasing `t`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub entries: Vec<TrajectoryEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub samples: Vec<Vec<f64>>,
    pub dim: usize,
    pub seed: u64,
    pub fingerprint: String,
    pub trajectories: Option<Vec<Trajectory>>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

fn check_level(alpha_bar: f64) -> Result<()> {
    if alpha_bar > 0.0 && alpha_bar < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(
            "alpha_bar_t",
            format!("must lie in (0, 1), got {alpha_bar}"),
        ))
    }
}

/// Clean estimate `x̂₀ = (x_t − √(1 − ᾱ_t)·ε̂) / √ᾱ_t`.
pub fn x0_from_epsilon(x_t: &[f64], eps_hat: &[f64], alpha_bar_t: f64) -> Result<Vec<f64>> {
    check_level(alpha_bar_t)?;
    check_dim(x_t.len(), eps_hat.len())?;
    let signal = alpha_bar_t.sqrt();
    let noise = (1.0 - alpha_bar_t).sqrt();
    Ok(x_t
        .iter()
        .zip(eps_hat)
        .map(|(x, e)| (x - noise * e) / signal)
        .collect())
}

/// Injected noise scale when stepping from level `ᾱ_t` to `ᾱ_prev`.
pub fn noise_scale(rule: VarianceRule, alpha_bar_t: f64, alpha_bar_prev: f64) -> f64 {
    if alpha_bar_prev >= 1.0 {
        return 0.0;
    }
    let beta = 1.0 - alpha_bar_t / alpha_bar_prev;
    let var = match rule {
        VarianceRule::Beta => beta.min(1.0 - alpha_bar_prev),
        VarianceRule::BetaTilde => (1.0 - alpha_bar_prev) / (1.0 - alpha_bar_t) * beta,
    };
    var.max(0.0).sqrt()
}

/// `√ᾱ_prev·x̂₀ + √(1 − ᾱ_prev − σ²)·ε̂ + σ·z`. With `σ = 0` this is the
/// deterministic update; the `−σ²` keeps the marginal variance matched when
/// noise is injected.
pub fn reverse_update(
    x0_hat: &[f64],
    eps_hat: &[f64],
    alpha_bar_prev: f64,
    sigma: f64,
    z: Option<&[f64]>,
) -> Vec<f64> {
    let signal = alpha_bar_prev.sqrt();
    let direction = (1.0 - alpha_bar_prev - sigma * sigma).max(0.0).sqrt();
    let mut out: Vec<f64> = x0_hat
        .iter()
        .zip(eps_hat)
        .map(|(x0, e)| signal * x0 + direction * e)
        .collect();
    if let Some(z) = z {
        if sigma > 0.0 {
            for (o, zi) in out.iter_mut().zip(z) {
                *o += sigma * zi;
            }
        }
    }
    out
}

/// Ancestral step from `t` to `t − 1` with caller-supplied `z`. No noise is
/// injected at `t = 1`.
pub fn ddpm_step_with_noise(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    variance_rule: VarianceRule,
    z: &[f64],
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    check_dim(x_t.len(), z.len())?;
    let ab_t = schedule.alpha_bar(t);
    let ab_prev = schedule.alpha_bar(t - 1);
    let x0 = x0_from_epsilon(x_t, eps_hat, ab_t)?;
    let sigma = noise_scale(variance_rule, ab_t, ab_prev);
    Ok(reverse_update(&x0, eps_hat, ab_prev, sigma, Some(z)))
}

/// Ancestral step drawing `z ~ N(0, I)` from `rng`.
pub fn ddpm_step<R: Rng + ?Sized>(
    x_t: &[f64],
    eps_hat: &[f64],
    t: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    variance_rule: VarianceRule,
) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let z = if t > 1 {
        standard_normal_vec(rng, x_t.len())
    } else {
        vec![0.0; x_t.len()]
    };
    ddpm_step_with_noise(x_t, eps_hat, t, schedule, variance_rule, &z)
}

/// Deterministic step: the ancestral update with `σ_t = 0`.
pub fn ddim_step(x_t: &[f64], eps_hat: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    let x0 = x0_from_epsilon(x_t, eps_hat, schedule.alpha_bar(t))?;
    Ok(reverse_update(&x0, eps_hat, schedule.alpha_bar(t - 1), 0.0, None))
}

/// Deterministic hash identifying a run configuration.
pub fn fingerprint(parts: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(parts).expect("json values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub(crate) fn sampler_fingerprint(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> String {
    fingerprint(&serde_json::json!({
        "model": model.describe(),
        "schedule": schedule.betas(),
        "sampler": config,
    }))
}

/// State of one chain between steps. Shared by the single and coupled
/// samplers so both consume random streams identically.
pub(crate) struct ChainState {
    pub x: Vec<f64>,
    pub rng: ChainRng,
    pub trajectory: Option<Trajectory>,
}

impl ChainState {
    pub fn start(seed: u64, chain: usize, dim: usize, record: bool) -> Self {
        let mut rng = chain_rng(seed, chain);
        let x = standard_normal_vec(&mut rng, dim);
        Self {
            x,
            rng,
            trajectory: record.then(Trajectory::default),
        }
    }

    pub fn record(&mut self, t: usize, x0_hat: &[f64], eps_hat: &[f64]) {
        if let Some(tr) = &mut self.trajectory {
            tr.entries.push(TrajectoryEntry {
                t,
                x_t: self.x.clone(),
                x0_hat: x0_hat.to_vec(),
                eps_hat: eps_hat.to_vec(),
            });
        }
    }

    /// Draws the injected noise for one step when the sampler needs it.
    pub fn draw_noise(&mut self, sigma: f64) -> Option<Vec<f64>> {
        (sigma > 0.0).then(|| standard_normal_vec(&mut self.rng, self.x.len()))
    }
}

/// Step levels `(t, ᾱ_t, ᾱ_prev)` along the configured step list.
pub(crate) fn step_levels(schedule: &NoiseSchedule, steps: &[usize]) -> Vec<(usize, f64, f64)> {
    steps
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let prev = steps.get(i + 1).copied().unwrap_or(0);
            (t, schedule.alpha_bar(t), schedule.alpha_bar(prev))
        })
        .collect()
}

pub(crate) fn step_sigma(config: &SamplerConfig, ab_t: f64, ab_prev: f64) -> f64 {
    if config.is_stochastic() {
        noise_scale(config.variance_rule, ab_t, ab_prev)
    } else {
        0.0
    }
}

/// Runs `n` independent chains from `x_T ~ N(0, I)`. Chain `i` draws from
/// stream `i` of `seed`, so output does not depend on thread count.
pub fn sample(
    model: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    seed: u64,
    n: usize,
) -> Result<SampleBatch> {
    if n == 0 {
        return Err(Error::arg("n", "must be at least 1"));
    }
    let steps = config.steps(schedule)?;
    let levels = step_levels(schedule, &steps);
    let dim = model.dim();
    let chains: Vec<ChainState> = (0..n)
        .into_par_iter()
        .map(|chain| {
            let mut state = ChainState::start(seed, chain, dim, config.record_trajectory);
            for &(t, ab_t, ab_prev) in &levels {
                let wrap = |e: Error| Error::AtStep {
                    chain,
                    step: t,
                    source: Box::new(e),
                };
                let eps = model.predict_epsilon(&state.x, t, schedule).map_err(wrap)?;
                check_dim(dim, eps.len()).map_err(wrap)?;
                let x0 = x0_from_epsilon(&state.x, &eps, ab_t).map_err(wrap)?;
                state.record(t, &x0, &eps);
                let sigma = step_sigma(config, ab_t, ab_prev);
                let z = state.draw_noise(sigma);
                state.x = reverse_update(&x0, &eps, ab_prev, sigma, z.as_deref());
            }
            Ok(state)
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(n);
    let mut trajectories = config.record_trajectory.then(|| Vec::with_capacity(n));
    for state in chains {
        samples.push(state.x);
        if let (Some(all), Some(tr)) = (&mut trajectories, state.trajectory) {
            all.push(tr);
        }
    }
    Ok(SampleBatch {
        samples,
        dim,
        seed,
        fingerprint: sampler_fingerprint(model, schedule, config),
        trajectories,
    })
}
