//! Analytic probability models with exact noise predictions.

mod flow;
mod gmm;
mod product;
mod scene;

pub use flow::{
    flow_marginal_log_density, score_from_velocity, velocity_from_gmm, velocity_wrapped_score_model, GmmVelocity,
    VelocityModel, VelocityScoreModel,
};
pub use gmm::{Gmm, GmmSpec, NoisedPosterior};
pub use product::{block_product_model, BlockProduct};
pub use scene::{mv_consistent_model, MvScene, MvSceneSpec};

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;

/// A noise predictor `ε̂(x_t, t)`. Implementations must be pure: identical
/// inputs give bitwise-identical outputs.
pub trait ScoreModel: Send + Sync {
    fn dim(&self) -> usize;

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>>;

    /// Log density of the noised marginal at level `alpha_bar` (`1` gives
    /// the clean data density). Models without a tractable density return
    /// [`Error::Unsupported`].
    fn noised_log_density(&self, _x: &[f64], _alpha_bar: f64) -> Result<f64> {
        Err(Error::Unsupported {
            model: self.describe().to_string(),
            operation: "noised_log_density",
        })
    }

    /// Stable description used to fingerprint runs.
    fn describe(&self) -> serde_json::Value;
}

impl<M: ScoreModel + ?Sized> ScoreModel for Arc<M> {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        (**self).predict_epsilon(x, t, schedule)
    }

    fn noised_log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        (**self).noised_log_density(x, alpha_bar)
    }

    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}

impl<M: ScoreModel + ?Sized> ScoreModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        (**self).predict_epsilon(x, t, schedule)
    }

    fn noised_log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        (**self).noised_log_density(x, alpha_bar)
    }

    fn describe(&self) -> serde_json::Value {
        (**self).describe()
    }
}
