use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{block_product_model, BlockProduct, Gmm, ScoreModel};
use crate::error::{Error, Result};

/// Upper bound on `n_views · view_dim` for the joint multi-view mixture.
pub const MAX_JOINT_DIM: usize = 32;

/// Desk-scale multi-view scene: every view is a shared latent point plus
/// independent jitter, and each view also has a per-view edit target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MvSceneSpec", into = "MvSceneSpec")]
pub struct MvScene {
    n_views: usize,
    view_dim: usize,
    latent: Gmm,
    jitter: f64,
    edit: Gmm,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MvSceneSpec {
    pub n_views: usize,
    pub view_dim: usize,
    pub latent: Gmm,
    pub jitter: f64,
    pub edit: Gmm,
}

impl MvScene {
    pub fn new(n_views: usize, view_dim: usize, latent: Gmm, jitter: f64, edit: Gmm) -> Result<Self> {
        if n_views < 2 {
            return Err(Error::arg("n_views", format!("must be at least 2, got {n_views}")));
        }
        if !(jitter > 0.0) || !jitter.is_finite() {
            return Err(Error::arg("jitter", format!("must be positive, got {jitter}")));
        }
        if latent.dim() != view_dim || edit.dim() != view_dim {
            return Err(Error::arg(
                "view_dim",
                format!(
                    "latent has dimension {}, edit has {}, view_dim is {view_dim}",
                    latent.dim(),
                    edit.dim()
                ),
            ));
        }
        if n_views * view_dim > MAX_JOINT_DIM {
            return Err(Error::arg(
                "n_views",
                format!(
                    "joint dimension {} exceeds the cap of {MAX_JOINT_DIM}",
                    n_views * view_dim
                ),
            ));
        }
        Ok(Self {
            n_views,
            view_dim,
            latent,
            jitter,
            edit,
        })
    }

    pub fn n_views(&self) -> usize {
        self.n_views
    }

    pub fn view_dim(&self) -> usize {
        self.view_dim
    }

    pub fn joint_dim(&self) -> usize {
        self.n_views * self.view_dim
    }

    pub fn latent(&self) -> &Gmm {
        &self.latent
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn edit(&self) -> &Gmm {
        &self.edit
    }

    /// Per-view edits, independent across views.
    pub fn edit_model(&self) -> BlockProduct {
        let edit: Arc<dyn ScoreModel> = Arc::new(self.edit.clone());
        block_product_model(vec![edit; self.n_views]).expect("n_views >= 2")
    }
}

/// Joint mixture over `R^{N·d}` for views `x⁽ⁱ⁾ = y + ηᵢ`, `y ~ latent`,
/// `ηᵢ ~ N(0, τ²I)`.
pub fn mv_consistent_model(scene: &MvScene) -> Result<Gmm> {
    let (n, d) = (scene.n_views, scene.view_dim);
    let jd = n * d;
    let tau2 = scene.jitter * scene.jitter;
    let latent = &scene.latent;
    let mut means = Vec::with_capacity(latent.num_components());
    let mut covs = Vec::with_capacity(latent.num_components());
    for (mu, sigma) in latent.means().iter().zip(latent.covariances()) {
        means.push(mu.repeat(n));
        let mut c = vec![0.0; jd * jd];
        for vi in 0..n {
            for vj in 0..n {
                for r in 0..d {
                    for s in 0..d {
                        c[(vi * d + r) * jd + vj * d + s] = sigma[r * d + s];
                    }
                }
            }
            for r in 0..d {
                c[(vi * d + r) * jd + vi * d + r] += tau2;
            }
        }
        covs.push(c);
    }
    Gmm::new(latent.weights().to_vec(), means, covs)
}

impl TryFrom<MvSceneSpec> for MvScene {
    type Error = Error;

    fn try_from(s: MvSceneSpec) -> Result<Self> {
        MvScene::new(s.n_views, s.view_dim, s.latent, s.jitter, s.edit)
    }
}

impl From<MvScene> for MvSceneSpec {
    fn from(s: MvScene) -> Self {
        MvSceneSpec {
            n_views: s.n_views,
            view_dim: s.view_dim,
            latent: s.latent,
            jitter: s.jitter,
            edit: s.edit,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::chain_rng;

    fn scene(latent_scale: f64, tau: f64, n: usize) -> MvScene {
        let latent = Gmm::isotropic(vec![0.0, 0.0], latent_scale).unwrap();
        let edit = Gmm::isotropic(vec![1.0, 0.0], 0.5).unwrap();
        MvScene::new(n, 2, latent, tau, edit).unwrap()
    }

    #[test]
    fn nearly_degenerate_latent_gives_independent_views() {
        let s = scene(1e-4, 0.1, 2);
        let joint = mv_consistent_model(&s).unwrap();
        assert_eq!(joint.dim(), 4);
        let samples = joint.sample(50_000, &mut chain_rng(1, 0));
        let n = samples.len() as f64;
        let var0: f64 = samples.iter().map(|v| v[0] * v[0]).sum::<f64>() / n;
        let cov02: f64 = samples.iter().map(|v| v[0] * v[2]).sum::<f64>() / n;
        // Closed form: variance 1e-8 + 0.01, covariance 1e-8.
        assert!((var0 - 0.01).abs() < 0.0005, "{var0}");
        assert!((cov02 / var0).abs() < 0.03, "{}", cov02 / var0);
    }

    #[test]
    fn tiny_jitter_keeps_views_together() {
        let s = scene(1.0, 1e-4, 2);
        let joint = mv_consistent_model(&s).unwrap();
        let samples = joint.sample(10_000, &mut chain_rng(2, 0));
        let close = samples
            .iter()
            .filter(|v| ((v[0] - v[2]).powi(2) + (v[1] - v[3]).powi(2)).sqrt() <= 1e-3)
            .count();
        assert!(close as f64 / samples.len() as f64 > 0.99);
    }

    #[test]
    fn block_structure() {
        let s = scene(2.0, 0.5, 3);
        let joint = mv_consistent_model(&s).unwrap();
        let c = &joint.covariances()[0];
        assert!((c[0] - 4.25).abs() < 1e-12);
        assert!((c[2] - 4.0).abs() < 1e-12);
        assert!((c[6 * 4 + 2] - 4.0).abs() < 1e-12);
        assert!(c[6 * 4 + 3].abs() < 1e-12);
        assert_eq!(joint.means()[0].len(), 6);
    }

    #[test]
    fn validation() {
        let g = Gmm::standard_normal(2).unwrap();
        assert!(MvScene::new(1, 2, g.clone(), 0.1, g.clone()).is_err());
        assert!(MvScene::new(2, 2, g.clone(), 0.0, g.clone()).is_err());
        assert!(MvScene::new(2, 3, g.clone(), 0.1, g.clone()).is_err());
        assert!(MvScene::new(17, 2, g.clone(), 0.1, g).is_err());
    }
}
