use std::sync::Arc;

use super::ScoreModel;
use crate::error::{check_dim, Error, Result};
use crate::schedule::NoiseSchedule;

/// Independent product of score models over concatenated coordinates.
#[derive(Clone)]
pub struct BlockProduct {
    blocks: Vec<Arc<dyn ScoreModel>>,
    offsets: Vec<usize>,
    dim: usize,
}

pub fn block_product_model(blocks: Vec<Arc<dyn ScoreModel>>) -> Result<BlockProduct> {
    BlockProduct::new(blocks)
}

impl BlockProduct {
    pub fn new(blocks: Vec<Arc<dyn ScoreModel>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::Empty("block product needs at least one block"));
        }
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for b in &blocks {
            offsets.push(dim);
            dim += b.dim();
        }
        Ok(Self {
            blocks,
            offsets,
            dim,
        })
    }

    pub fn blocks(&self) -> &[Arc<dyn ScoreModel>] {
        &self.blocks
    }

    fn slices<'a>(&'a self, x: &'a [f64]) -> impl Iterator<Item = (&'a Arc<dyn ScoreModel>, &'a [f64])> + 'a {
        self.blocks
            .iter()
            .zip(&self.offsets)
            .map(move |(b, &off)| (b, &x[off..off + b.dim()]))
    }
}

impl ScoreModel for BlockProduct {
    fn dim(&self) -> usize {
        self.dim
    }

    fn predict_epsilon(&self, x: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut out = Vec::with_capacity(self.dim);
        for (block, slice) in self.slices(x) {
            out.extend(block.predict_epsilon(slice, t, schedule)?);
        }
        Ok(out)
    }

    fn noised_log_density(&self, x: &[f64], alpha_bar: f64) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let mut total = 0.0;
        for (block, slice) in self.slices(x) {
            total += block.noised_log_density(slice, alpha_bar)?;
        }
        Ok(total)
    }

    fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "block_product": self.blocks.iter().map(|b| b.describe()).collect::<Vec<_>>()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Gmm;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(40, 1e-3, 0.2).unwrap()
    }

    #[test]
    fn single_block_is_transparent() {
        let g = Gmm::new(
            vec![0.4, 0.6],
            vec![vec![1.0, 0.0], vec![-1.0, 0.5]],
            vec![vec![0.5, 0.1, 0.1, 0.3], vec![1.0, 0.0, 0.0, 1.0]],
        )
        .unwrap();
        let p = block_product_model(vec![Arc::new(g.clone())]).unwrap();
        let s = schedule();
        let x = [0.2, -0.3];
        assert_eq!(p.predict_epsilon(&x, 10, &s).unwrap(), g.predict_epsilon(&x, 10, &s).unwrap());
    }

    #[test]
    fn standard_normal_blocks() {
        let n: Arc<dyn ScoreModel> = Arc::new(Gmm::standard_normal(2).unwrap());
        let p = block_product_model(vec![n.clone(), n]).unwrap();
        let s = schedule();
        let x = [0.5, -1.0, 2.0, 0.25];
        let eps = p.predict_epsilon(&x, 20, &s).unwrap();
        let scale = (1.0 - s.alpha_bar(20)).sqrt();
        for (e, v) in eps.iter().zip(&x) {
            assert!((e - scale * v).abs() < 1e-14);
        }
    }

    /// Product mixture with K₁·K₂ components and block-diagonal covariances.
    fn explicit_product(a: &Gmm, b: &Gmm) -> Gmm {
        let (da, db) = (a.dim(), b.dim());
        let d = da + db;
        let mut weights = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for i in 0..a.num_components() {
            for j in 0..b.num_components() {
                weights.push(a.weights()[i] * b.weights()[j]);
                let mut m = a.means()[i].clone();
                m.extend(&b.means()[j]);
                means.push(m);
                let mut c = vec![0.0; d * d];
                for r in 0..da {
                    for s in 0..da {
                        c[r * d + s] = a.covariances()[i][r * da + s];
                    }
                }
                for r in 0..db {
                    for s in 0..db {
                        c[(da + r) * d + da + s] = b.covariances()[j][r * db + s];
                    }
                }
                covs.push(c);
            }
        }
        // Renormalize against rounding in the weight products.
        let total: f64 = weights.iter().sum();
        let weights = weights.iter().map(|w| w / total).collect();
        Gmm::new(weights, means, covs).unwrap()
    }

    #[test]
    fn distinct_blocks_match_product_mixture() {
        let a = Gmm::new(
            vec![0.3, 0.7],
            vec![vec![1.0, 2.0], vec![-1.0, 0.0]],
            vec![vec![0.5, 0.2, 0.2, 0.4], vec![0.3, 0.0, 0.0, 0.2]],
        )
        .unwrap();
        let b = Gmm::new(
            vec![0.2, 0.5, 0.3],
            vec![vec![0.0], vec![2.0], vec![-3.0]],
            vec![vec![0.4], vec![1.0], vec![0.1]],
        )
        .unwrap();
        let joint = explicit_product(&a, &b);
        let p = block_product_model(vec![Arc::new(a), Arc::new(b)]).unwrap();
        let s = schedule();
        for (t, x) in [(5, [0.1, 0.2, -0.3]), (25, [1.5, -0.5, 2.0]), (40, [-2.0, 1.0, 0.0])] {
            let got = p.predict_epsilon(&x, t, &s).unwrap();
            let want = joint.predict_epsilon(&x, t, &s).unwrap();
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-10, "{g} vs {w}");
            }
            let ld = p.noised_log_density(&x, s.alpha_bar(t)).unwrap();
            assert!((ld - joint.noised_log_density(&x, s.alpha_bar(t)).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        assert!(block_product_model(Vec::new()).is_err());
        let n: Arc<dyn ScoreModel> = Arc::new(Gmm::standard_normal(2).unwrap());
        let p = block_product_model(vec![n]).unwrap();
        assert!(p.predict_epsilon(&[0.0; 3], 1, &schedule()).is_err());
    }
}
