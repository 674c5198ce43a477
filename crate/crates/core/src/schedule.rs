//! Variance schedules and conversions between the variance-preserving,
//! variance-exploding (EDM) and flow-time parameterizations.
//!
//! Steps are indexed `t = 1..=T`; `alpha_bar(0)` is defined as 1 so the
//! final reverse step lands on the clean estimate.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Smallest flow time the engine accepts by default. The flow/score
/// transform is singular at the noise endpoint.
pub const DEFAULT_FLOW_T_MIN: f64 = 1e-4;

pub const COSINE_MAX_BETA: f64 = 0.999;
pub const COSINE_DEFAULT_OFFSET: f64 = 0.008;

/// Immutable DDPM variance schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleFile", into = "ScheduleFile")]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds a schedule from per-step variances, computing `ᾱ` as the running
    /// product of `α = 1 − β`.
    pub fn from_betas(beta: Vec<f64>) -> Result<Self> {
        if beta.is_empty() {
            return Err(Error::InvalidSchedule("num_steps must be at least 1".into()));
        }
        for (i, &b) in beta.iter().enumerate() {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "beta at step {} is {b}, expected a value in (0, 1)",
                    i + 1
                )));
            }
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(alpha.len());
        let mut acc = 1.0;
        for (i, &a) in alpha.iter().enumerate() {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha at step {} is {a}, expected a value in (0, 1)",
                    i + 1
                )));
            }
            let next = acc * a;
            if !(next < acc && next > 0.0) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar is not strictly decreasing and positive at step {}",
                    i + 1
                )));
            }
            alpha_bar.push(next);
            acc = next;
        }
        Ok(Self {
            beta,
            alpha,
            alpha_bar,
        })
    }

    /// Linear `β` schedule with both endpoints included.
    pub fn linear(num_steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be at least 1".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "expected 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let beta = if num_steps == 1 {
            vec![beta_start]
        } else {
            let span = beta_end - beta_start;
            let last = (num_steps - 1) as f64;
            (0..num_steps)
                .map(|i| beta_start + span * (i as f64) / last)
                .collect()
        };
        Self::from_betas(beta)
    }

    /// Cosine `ᾱ` schedule, `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, with each `β`
    /// clipped at [`COSINE_MAX_BETA`] so the last step stays finite.
    pub fn cosine(num_steps: usize, offset: f64) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::InvalidSchedule("num_steps must be at least 1".into()));
        }
        if !(offset > 0.0) || !offset.is_finite() {
            return Err(Error::arg("offset", format!("must be positive, got {offset}")));
        }
        let big_t = num_steps as f64;
        let f = |t: f64| {
            let phase = (t / big_t + offset) / (1.0 + offset) * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let beta = (1..=num_steps)
            .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).min(COSINE_MAX_BETA))
            .collect();
        Self::from_betas(beta)
    }

    /// Rescales the signal-to-noise ratio of every step by `1 / shift²`.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        if !(shift > 0.0) || !shift.is_finite() {
            return Err(Error::arg("shift", format!("must be positive, got {shift}")));
        }
        if shift == 1.0 {
            return Ok(self.clone());
        }
        let s2 = shift * shift;
        let target: Vec<f64> = self
            .alpha_bar
            .iter()
            .map(|&ab| ab / (ab + s2 * (1.0 - ab)))
            .collect();
        Self::from_alpha_bar(&target)
    }

    /// Inverts a strictly decreasing `ᾱ` sequence back into per-step `β`.
    pub fn from_alpha_bar(alpha_bar: &[f64]) -> Result<Self> {
        let mut prev = 1.0;
        let mut beta = Vec::with_capacity(alpha_bar.len());
        for &ab in alpha_bar {
            beta.push(1.0 - ab / prev);
            prev = ab;
        }
        Self::from_betas(beta)
    }

    pub fn num_steps(&self) -> usize {
        self.beta.len()
    }

    /// `β_t` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t` for `t` in `0..=T`, with `ᾱ_0 = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `log(ᾱ_t / (1 − ᾱ_t))` for `t ≥ 1`.
    pub fn log_snr(&self, t: usize) -> f64 {
        let ab = self.alpha_bar(t);
        ab.ln() - (1.0 - ab).ln()
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.num_steps() {
            return Err(Error::arg(
                "t",
                format!("step {t} outside 1..={}", self.num_steps()),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 of the little-endian bytes of the `ᾱ` sequence.
    pub fn alpha_bar_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.alpha_bar {
            hasher.update(v.to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// JSON layout of a schedule. Derived arrays are recomputed on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleFile {
    pub num_steps: usize,
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_bar_checksum: Option<String>,
}

impl TryFrom<ScheduleFile> for NoiseSchedule {
    type Error = Error;

    fn try_from(file: ScheduleFile) -> Result<Self> {
        if file.num_steps != file.beta.len() {
            return Err(Error::InvalidSchedule(format!(
                "num_steps is {} but beta has {} entries",
                file.num_steps,
                file.beta.len()
            )));
        }
        let schedule = NoiseSchedule::from_betas(file.beta)?;
        if let Some(expected) = file.alpha_bar_checksum {
            let actual = schedule.alpha_bar_checksum();
            if !expected.eq_ignore_ascii_case(&actual) {
                return Err(Error::InvalidSchedule(format!(
                    "alpha_bar checksum mismatch: stored {expected}, recomputed {actual}"
                )));
            }
        }
        Ok(schedule)
    }
}

impl From<NoiseSchedule> for ScheduleFile {
    fn from(s: NoiseSchedule) -> Self {
        let checksum = s.alpha_bar_checksum();
        ScheduleFile {
            num_steps: s.num_steps(),
            beta: s.beta,
            alpha_bar_checksum: Some(checksum),
        }
    }
}

/// SNR-matched `ᾱ` for a variance-exploding noise level: `1 / (1 + σ²)`.
pub fn edm_sigma_to_alpha_bar(sigma: f64) -> Result<f64> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::arg("sigma", format!("must be non-negative, got {sigma}")));
    }
    Ok(1.0 / (1.0 + sigma * sigma))
}

pub fn alpha_bar_to_edm_sigma(alpha_bar: f64) -> Result<f64> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::arg(
            "alpha_bar",
            format!("must lie in (0, 1], got {alpha_bar}"),
        ));
    }
    Ok(((1.0 - alpha_bar) / alpha_bar).sqrt())
}

/// SNR-matched `ᾱ` for flow time `t` under `x_t = t·x_0 + (1 − t)·ε`.
pub fn flow_time_to_alpha_bar(t_flow: f64) -> Result<f64> {
    if !(t_flow > 0.0 && t_flow <= 1.0) {
        return Err(Error::arg(
            "t_flow",
            format!("must lie in (0, 1], got {t_flow}"),
        ));
    }
    let s = 1.0 - t_flow;
    Ok(t_flow * t_flow / (t_flow * t_flow + s * s))
}

/// Inverse of [`flow_time_to_alpha_bar`]: `√ᾱ / (√ᾱ + √(1 − ᾱ))`.
pub fn alpha_bar_to_flow_time(alpha_bar: f64) -> Result<f64> {
    if !(alpha_bar > 0.0 && alpha_bar <= 1.0) {
        return Err(Error::arg(
            "alpha_bar",
            format!("must lie in (0, 1], got {alpha_bar}"),
        ));
    }
    let signal = alpha_bar.sqrt();
    Ok(signal / (signal + (1.0 - alpha_bar).sqrt()))
}

/// Step-to-step correspondence between two schedules by nearest log-SNR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleAlignment {
    pub source_steps: usize,
    /// `(source_step, target_step)`, both 1-based.
    pub mapping: Vec<(usize, usize)>,
    pub max_log_snr_gap: f64,
}

impl ScheduleAlignment {
    pub fn target_for(&self, source_step: usize) -> Option<usize> {
        self.mapping
            .get(source_step.checked_sub(1)?)
            .map(|&(_, target)| target)
    }
}

/// Maps every source step to the target step with the closest log-SNR.
/// Ties go to the smaller target index.
pub fn align_schedules(source: &NoiseSchedule, target: &NoiseSchedule) -> ScheduleAlignment {
    let target_snr: Vec<f64> = (1..=target.num_steps()).map(|t| target.log_snr(t)).collect();
    let mut mapping = Vec::with_capacity(source.num_steps());
    let mut max_gap: f64 = 0.0;
    for s in 1..=source.num_steps() {
        let snr = source.log_snr(s);
        let mut best = 0;
        let mut best_gap = f64::INFINITY;
        for (j, &ts) in target_snr.iter().enumerate() {
            let gap = (snr - ts).abs();
            if gap < best_gap {
                best_gap = gap;
                best = j;
            }
        }
        max_gap = max_gap.max(best_gap);
        mapping.push((s, best + 1));
    }
    ScheduleAlignment {
        source_steps: source.num_steps(),
        mapping,
        max_log_snr_gap: max_gap,
    }
}
