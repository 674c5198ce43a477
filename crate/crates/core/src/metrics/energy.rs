//! Energy distance and its permutation test.
//!
//! The permutation null is evaluated for all relabelings at once. With a
//! 0/1 membership vector `a` for the first group, the within-group and
//! cross-group distance sums follow from `aᵀDa` and `rᵀa`, where `D` is the
//! pooled distance matrix and `r` its row sums. `D` is never materialized:
//! it is produced tile by tile and multiplied into the label matrix.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quantile;
use crate::error::{check_dim, Error, Result};
use crate::linalg::distance;

pub const DEFAULT_PERMUTATIONS: usize = 200;
pub const DEFAULT_NULL_QUANTILE: f64 = 0.99;

const TILE: usize = 512;

fn check_clouds(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::arg(
            "cloud",
            format!("energy distance needs at least 2 points per cloud, got {} and {}", a.len(), b.len()),
        ));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        check_dim(d, x.len())?;
    }
    Ok(d)
}

/// `2·E‖X − Y‖ − E‖X − X′‖ − E‖Y − Y′‖` with U-statistic estimators.
///
/// For equally sized clouds the cross term skips the index-aligned pairs
/// `(a_i, b_i)`, so a cloud compared with an exact copy of itself scores 0.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_clouds(a, b)?;
    let (n, m) = (a.len(), b.len());
    let within = |c: &[Vec<f64>]| -> f64 {
        let rows: Vec<f64> = (0..c.len())
            .into_par_iter()
            .map(|i| (i + 1..c.len()).map(|j| distance(&c[i], &c[j])).sum())
            .collect();
        rows.iter().sum::<f64>() / (c.len() * (c.len() - 1) / 2) as f64
    };
    let cross = if n == m {
        let rows: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| distance(&a[i], &b[j]) + distance(&a[j], &b[i]))
                    .sum()
            })
            .collect();
        rows.iter().sum::<f64>() / (n * (n - 1)) as f64
    } else {
        let rows: Vec<f64> = a
            .par_iter()
            .map(|x| b.iter().map(|y| distance(x, y)).sum())
            .collect();
        rows.iter().sum::<f64>() / (n * m) as f64
    };
    Ok(2.0 * cross - within(a) - within(b))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub statistic: f64,
    pub null_quantile: f64,
    pub quantile_level: f64,
    pub p_value: f64,
    pub permutations: usize,
    /// `statistic ≤ null_quantile`.
    pub pass: bool,
}

/// Compares the observed energy distance with its distribution under
/// random relabelings of the pooled sample.
pub fn energy_permutation_test<R: Rng + ?Sized>(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    permutations: usize,
    quantile_level: f64,
    rng: &mut R,
) -> Result<EnergyTest> {
    let d = check_clouds(a, b)?;
    if permutations == 0 {
        return Err(Error::arg("permutations", "must be at least 1"));
    }
    if !(quantile_level > 0.0 && quantile_level < 1.0) {
        return Err(Error::arg("quantile_level", "must lie in (0, 1)"));
    }
    let (n, m) = (a.len(), b.len());
    let total = n + m;
    let cols = permutations + 1;

    let mut pooled = Vec::with_capacity(total * d);
    for x in a.iter().chain(b) {
        pooled.extend_from_slice(x);
    }
    let point = |i: usize| &pooled[i * d..(i + 1) * d];

    // Column 0 holds the observed labeling.
    let mut labels = vec![0.0; total * cols];
    let mut orders: Vec<Vec<usize>> = Vec::with_capacity(cols);
    let identity: Vec<usize> = (0..total).collect();
    orders.push(identity.clone());
    for _ in 0..permutations {
        let mut order = identity.clone();
        order.shuffle(rng);
        orders.push(order);
    }
    for (p, order) in orders.iter().enumerate() {
        for &i in &order[..n] {
            labels[i * cols + p] = 1.0;
        }
    }

    let (quad, row_sums) = pooled_sums(&pooled, d, total, &labels, cols);
    let grand: f64 = row_sums.iter().sum::<f64>() / 2.0;

    let stats: Vec<f64> = orders
        .iter()
        .enumerate()
        .map(|(p, order)| {
            let linear: f64 = (0..total).map(|i| row_sums[i] * labels[i * cols + p]).sum();
            let s_aa = quad[p] / 2.0;
            let s_ab = linear - quad[p];
            let s_bb = grand - s_aa - s_ab;
            let cross = if n == m {
                let aligned: f64 = (0..n).map(|k| distance(point(order[k]), point(order[n + k]))).sum();
                (s_ab - aligned) / (n * (n - 1)) as f64
            } else {
                s_ab / (n * m) as f64
            };
            let within_a = s_aa / (n * (n - 1) / 2) as f64;
            let within_b = s_bb / (m * (m - 1) / 2) as f64;
            2.0 * cross - within_a - within_b
        })
        .collect();

    let statistic = stats[0];
    let mut null = stats[1..].to_vec();
    null.sort_by(f64::total_cmp);
    let null_quantile = quantile(&null, quantile_level);
    let exceed = null.iter().filter(|s| **s >= statistic).count();
    Ok(EnergyTest {
        statistic,
        null_quantile,
        quantile_level,
        p_value: (1 + exceed) as f64 / (1 + permutations) as f64,
        permutations,
        pass: statistic <= null_quantile,
    })
}

/// Returns `aₚᵀ D aₚ` for every label column and the row sums of `D`.
fn pooled_sums(pooled: &[f64], d: usize, total: usize, labels: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let tiles = total.div_ceil(TILE);
    let span = |t: usize| (t * TILE, ((t + 1) * TILE).min(total));
    let pairs: Vec<(usize, usize)> = (0..tiles).flat_map(|i| (i..tiles).map(move |j| (i, j))).collect();

    struct Partial {
        quad: Vec<f64>,
        rows: Vec<f64>,
        cols: Vec<f64>,
    }

    let partials: Vec<Partial> = pairs
        .par_iter()
        .map(|&(ti, tj)| {
            let (r0, r1) = span(ti);
            let (c0, c1) = span(tj);
            let (br, bc) = (r1 - r0, c1 - c0);
            let mut dist = vec![0.0; br * bc];
            let mut rows = vec![0.0; br];
            let mut colsum = vec![0.0; bc];
            for i in 0..br {
                let x = &pooled[(r0 + i) * d..(r0 + i + 1) * d];
                for j in 0..bc {
                    let v = distance(x, &pooled[(c0 + j) * d..(c0 + j + 1) * d]);
                    dist[i * bc + j] = v;
                    rows[i] += v;
                    colsum[j] += v;
                }
            }
            let mut prod = vec![0.0; br * cols];
            // SAFETY: all buffers are sized for the stated shapes and strides,
            // and `prod` does not alias the inputs.
            unsafe {
                matrixmultiply::dgemm(
                    br,
                    bc,
                    cols,
                    1.0,
                    dist.as_ptr(),
                    bc as isize,
                    1,
                    labels[c0 * cols..].as_ptr(),
                    cols as isize,
                    1,
                    0.0,
                    prod.as_mut_ptr(),
                    cols as isize,
                    1,
                );
            }
            let weight = if ti == tj { 1.0 } else { 2.0 };
            let mut quad = vec![0.0; cols];
            for i in 0..br {
                let lab = &labels[(r0 + i) * cols..(r0 + i + 1) * cols];
                let row = &prod[i * cols..(i + 1) * cols];
                for p in 0..cols {
                    quad[p] += lab[p] * row[p];
                }
            }
            for q in &mut quad {
                *q *= weight;
            }
            Partial {
                quad,
                rows,
                cols: if ti == tj { Vec::new() } else { colsum },
            }
        })
        .collect();

    let mut quad = vec![0.0; cols];
    let mut row_sums = vec![0.0; total];
    for (&(ti, tj), part) in pairs.iter().zip(&partials) {
        for (q, v) in quad.iter_mut().zip(&part.quad) {
            *q += v;
        }
        let (r0, _) = span(ti);
        for (k, v) in part.rows.iter().enumerate() {
            row_sums[r0 + k] += v;
        }
        let (c0, _) = span(tj);
        for (k, v) in part.cols.iter().enumerate() {
            row_sums[c0 + k] += v;
        }
    }
    (quad, row_sums)
}
