//! Flow-matching velocity fields and their conversion to noise predictions.
//!
//! Flow time follows `x_t = t·x₀ + (1 − t)·ε`: `t = 1` is data and `t = 0`
//! is pure noise.

use std::sync::Arc;

use super::{Gmm, ScoreModel};
use crate::error::{check_dim, Error, Result};
use crate::schedule::{alpha_bar_to_flow_time, NoiseSchedule, DEFAULT_FLOW_T_MIN};

pub trait VelocityModel: Send + Sync {
    fn dim(&self) -> usize;

    fn velocity(&self, x: &[f64], t_flow: f64) -> Result<Vec<f64>>;

    fn describe(&self) -> serde_json::Value;
}

fn check_open_unit(t_flow: f64) -> Result<()> {
    if t_flow > 0.0 && t_flow < 1.0 {
        Ok(())
    } else {
        Err(Error::arg(
            "t_flow",
            format!("must lie strictly inside (0, 1), got {t_flow}"),
        ))
    }
}

/// Exact `E[x₀ − ε | x_t = x]` for GMM data.
pub fn velocity_from_gmm(g: &Gmm, x: &[f64], t_flow: f64) -> Result<Vec<f64>> {
    check_open_unit(t_flow)?;
    let post = g.posterior(x, t_flow, 1.0 - t_flow)?;
    Ok(x
        .iter()
        .zip(&post.posterior_mean)
        .map(|(xi, m)| {
            let eps = (xi - t_flow * m) / (1.0 - t_flow);
            m - eps
        })
        .collect())
}

/// Log density of the flow marginal at time `t_flow`.
pub fn flow_marginal_log_density(g: &Gmm, x: &[f64], t_flow: f64) -> Result<f64> {
    check_open_unit(t_flow)?;
    Ok(g.posterior(x, t_flow, 1.0 - t_flow)?.log_density)
}

/// `s = −(−t·v + x) / (1 − t)`.
pub fn score_from_velocity(v: &[f64], x: &[f64], t_flow: f64) -> Result<Vec<f64>> {
    check_open_unit(t_flow)?;
    check_dim(x.len(), v.len())?;
    Ok(v.iter()
        .zip(x)
        .map(|(vi, xi)| -(-t_flow * vi + xi) / (1.0 - t_flow))
        .collect())
}

/// Analytic velocity field of a Gaussian mixture.
#[derive(Debug, Clone)]
pub struct GmmVelocity(pub Gmm);

impl VelocityModel for GmmVelocity {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn velocity(&self, x: &[f64], t_flow: f64) -> Result<Vec<f64>> {
        velocity_from_gmm(&self.0, x, t_flow)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "gmm_velocity": self.0.describe() })
    }
}

/// Exposes a velocity model as a noise predictor on a DDPM schedule.
///
/// Each step's `ᾱ` maps to the SNR-matched flow time and the state is
/// rescaled by `c = t_flow / √ᾱ` so both parameterizations see the same
/// point.
#[derive(Clone)]
pub struct VelocityScoreModel {
    inner: Arc<dyn VelocityModel>,
    t_min: f64,
}

pub fn velocity_wrapped_score_model(vm: Arc<dyn VelocityModel>) -> VelocityScoreModel {
    VelocityScoreModel::new(vm, DEFAULT_FLOW_T_MIN).expect("default t_min is valid")
}

impl VelocityScoreModel {
    pub fn new(inner: Arc<dyn VelocityModel>, t_min: f64) -> Result<Self> {
        if !(t_min > 0.0 && t_min < 1.0) {
            return Err(Error::arg("t_min", format!("must lie in (0, 1), got {t_min}")));
        }
        Ok(Self { inner, t_min })
    }

    pub fn epsilon_at(&self, x: &[f64], alpha_bar: f64) -> Result<Vec<f64>> {
        check_dim(self.inner.dim(), x.len())?;
        if !(alpha_bar > 0.0 && alpha_bar < 1.0) {
            return Err(Error::arg(
                "alpha_bar",
                format!("noise prediction needs alpha_bar in (0, 1), got {alpha_bar}"),
            ));
        }
        let t_flow = alpha_bar_to_flow_time(alpha_bar)?;
        if t_flow < self.t_min {
            return Err(Error::arg(
                "t_flow",
                format!("flow time {t_flow} is below t_min = {}", self.t_min),
            ));
        }
        let c = t_flow / alpha_bar.sqrt();
        let xf: Vec<f64> = x.iter().map(|v| c * v).collect();
        let v = self.inner.velocity(&xf, t_flow)?;
        let s = score_from_velocity(&v, &xf, t_flow)?;
        let noise = (1.0 - alpha_bar).sqrt();
        // p_vp(x) = c^d · p_flow(c·x), so the VP score is c times the flow score.
        Ok(s.into_iter().map(|si| -noise * c * si).collect())
    }
}

impl ScoreModel for VelocityScoreModel {
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        schedule.check_step(t)?;
        self.epsilon_at(x, schedule.alpha_bar(t))
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "velocity_wrapped": self.inner.describe(), "t_min": self.t_min })
    }
}
