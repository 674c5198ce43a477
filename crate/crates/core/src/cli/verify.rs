//! Built-in oracle suite behind `coupled-sampler verify`.

use rand::Rng;

use super::commands::preset_gmm;
use super::config::default_schedule;
use super::output::metrics_table;
use crate::coupling::{
    chain_seeds, coupled_sample, coupled_step, coupling_energy, coupling_gradient, CouplingConfig,
    GuidanceScaleRule, NoisePolicy,
};
use crate::error::{Error, Result};
use crate::metrics::{energy_permutation_test, Accept, MetricReport, DEFAULT_NULL_QUANTILE, DEFAULT_PERMUTATIONS};
use crate::models::{flow_marginal_log_density, score_from_velocity, velocity_from_gmm, Gmm};
use crate::rng::{chain_rng, standard_normal_vec, ChainRng};
use crate::sampler::{sample, SamplerConfig};
use crate::schedule::{
    align_schedules, alpha_bar_to_edm_sigma, alpha_bar_to_flow_time, edm_sigma_to_alpha_bar,
    flow_time_to_alpha_bar,
};

/// Overrides the guidance scale rule used by the coupled checks.
pub const GUIDANCE_RULE_ENV: &str = "COUPLED_SAMPLER_GUIDANCE_SCALE_RULE";

const GMM_PRESETS: [&str; 4] = ["standard-normal", "two-modes", "tri-mixture", "aniso-4d"];
const SEED: u64 = 20_240_601;
const FD_STEP: f64 = 1e-5;

fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn fd_gradient(f: impl Fn(&[f64]) -> Result<f64>, x: &[f64]) -> Result<Vec<f64>> {
    let mut g = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[i] += FD_STEP;
        xm[i] -= FD_STEP;
        g.push((f(&xp)? - f(&xm)?) / (2.0 * FD_STEP));
    }
    Ok(g)
}

/// Largest relative gap between `ε̂` and `−√(1 − ᾱ)·∇ log p_ᾱ` by finite
/// differences, on points drawn from the noised marginal.
pub fn score_fd_error(g: &Gmm, rng: &mut ChainRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for ab in [0.05f64, 0.3, 0.7, 0.95] {
        for _ in 0..50 {
            let x0 = g.sample_one(rng);
            let e = standard_normal_vec(rng, g.dim());
            let x: Vec<f64> = x0.iter().zip(&e).map(|(a, b)| ab.sqrt() * a + (1.0 - ab).sqrt() * b).collect();
            let eps = g.epsilon(&x, ab)?;
            let grad = fd_gradient(|y| g.noised_log_density(y, ab), &x)?;
            for (u, v) in eps.iter().zip(&grad) {
                worst = worst.max(rel_err(*u, -(1.0 - ab).sqrt() * v));
            }
        }
    }
    Ok(worst)
}

/// Largest relative gap between the velocity-derived score and the
/// finite-difference gradient of the flow marginal over `t ∈ [0.05, 0.95]`.
pub fn flow_duality_error(g: &Gmm, points_per_time: usize, rng: &mut ChainRng) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for k in 1..=19 {
        let t = 0.05 * k as f64;
        for _ in 0..points_per_time {
            let x0 = g.sample_one(rng);
            let e = standard_normal_vec(rng, g.dim());
            let x: Vec<f64> = x0.iter().zip(&e).map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let s = score_from_velocity(&velocity_from_gmm(g, &x, t)?, &x, t)?;
            let grad = fd_gradient(|y| flow_marginal_log_density(g, y, t), &x)?;
            for (u, v) in s.iter().zip(&grad) {
                worst = worst.max(rel_err(*u, *v));
            }
        }
    }
    Ok(worst)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| 10f64.powf(lo + (hi - lo) * i as f64 / (n - 1) as f64))
}

fn schedule_checks(reports: &mut Vec<MetricReport>) -> Result<()> {
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    let (mut ab_err, mut sigma_err, mut excess): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for sigma in log_grid(-3.0, 3.0, 601) {
        let ab = edm_sigma_to_alpha_bar(sigma)?;
        let back = alpha_bar_to_edm_sigma(ab)?;
        let e = rel(back, sigma);
        sigma_err = sigma_err.max(e);
        // One ulp of ᾱ next to 1 moves σ by about 2.8e-17/σ² relative.
        excess = excess.max(e / (1e-16 / (sigma * sigma)).max(1e-12));
        ab_err = ab_err.max(rel(edm_sigma_to_alpha_bar(back)?, ab));
    }
    reports.push(MetricReport::gated("edm_alpha_bar_round_trip_rel_error", ab_err, 1e-12, Accept::AtMost, 601, 0));
    reports.push(MetricReport::info("edm_sigma_round_trip_rel_error", sigma_err, 601, 0));
    reports.push(MetricReport::gated("edm_sigma_round_trip_over_rounding_bound", excess, 1.0, Accept::AtMost, 601, 0));

    let mut flow_err: f64 = 0.0;
    for k in 1..100 {
        let t = k as f64 / 100.0;
        flow_err = flow_err.max(rel(alpha_bar_to_flow_time(flow_time_to_alpha_bar(t)?)?, t));
    }
    reports.push(MetricReport::gated("flow_time_round_trip_rel_error", flow_err, 1e-12, Accept::AtMost, 99, 0));

    let base = default_schedule();
    let two_step = base.shifted(2.0)?.shifted(0.7)?;
    let direct = base.shifted(1.4)?;
    let comp_err = (1..=base.num_steps())
        .map(|t| rel(two_step.alpha_bar(t), direct.alpha_bar(t)))
        .fold(0.0, f64::max);
    reports.push(MetricReport::gated("shift_composition_rel_error", comp_err, 1e-12, Accept::AtMost, base.num_steps(), 0));

    let alignment = align_schedules(&base, &base);
    let identity = alignment.mapping.iter().all(|(s, t)| s == t) && alignment.max_log_snr_gap == 0.0;
    reports.push(MetricReport::check("self_alignment_identity", identity, base.num_steps(), 0));
    Ok(())
}

fn coupling_checks(reports: &mut Vec<MetricReport>, rule: GuidanceScaleRule) -> Result<()> {
    let mut rng = chain_rng(SEED, 7);
    let mut grad_err: f64 = 0.0;
    for _ in 0..100 {
        let x = standard_normal_vec(&mut rng, 3);
        let y = standard_normal_vec(&mut rng, 3);
        let lambda = 0.1 + 3.0 * rng.random::<f64>();
        let g = coupling_gradient(&x, &y, lambda)?;
        let fd = fd_gradient(|z| coupling_energy(z, &y, lambda), &x)?;
        for (u, v) in g.iter().zip(&fd) {
            grad_err = grad_err.max((u - v).abs());
        }
    }
    reports.push(MetricReport::gated("coupling_gradient_fd_error", grad_err, 1e-6, Accept::AtMost, 100, SEED));

    let schedule = default_schedule();
    let sampler = SamplerConfig::default();
    let a = Gmm::isotropic(vec![-2.0, 0.0], 1.0)?;
    let b = Gmm::isotropic(vec![2.0, 0.0], 1.0)?;

    let free = CouplingConfig {
        lambda: 0.0,
        guidance_scale_rule: rule,
        ..CouplingConfig::default()
    };
    let run = coupled_sample(&a, &b, &schedule, &sampler, &free, SEED, 64)?;
    let (sa, sb) = chain_seeds(SEED);
    let reduced = run.batch_a.samples == sample(&a, &schedule, &sampler, sa, 64)?.samples
        && run.batch_b.samples == sample(&b, &schedule, &sampler, sb, 64)?.samples;
    reports.push(MetricReport::check("zero_lambda_reduction", reduced, 64, SEED));

    let shared = CouplingConfig {
        lambda: 2.0,
        guidance_scale_rule: rule,
        noise_policy: NoisePolicy::Shared,
        lambda_ramp: None,
    };
    let mut xa = standard_normal_vec(&mut rng, 2);
    let mut xb = xa.clone();
    let (mut ra, mut rb) = (chain_rng(SEED, 1), chain_rng(SEED, 2));
    let mut identical = true;
    for t in (1..=schedule.num_steps()).rev() {
        let (na, nb) = coupled_step(&xa, &xb, &a, &a, &schedule, t, &sampler, &shared, &mut ra, &mut rb)?;
        identical &= na == nb;
        xa = na;
        xb = nb;
    }
    reports.push(MetricReport::check("symmetric_fixed_point", identical, 1, SEED));

    // Reference prediction only: the coupled means are logged, not gated.
    let n = 4096;
    for lambda in [0.5, 1.0, 2.0] {
        let cfg = CouplingConfig {
            lambda,
            guidance_scale_rule: rule,
            ..CouplingConfig::default()
        };
        let run = coupled_sample(&a, &b, &schedule, &sampler, &cfg, SEED, n)?;
        let mean_a = run.batch_a.samples.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let mean_b = run.batch_b.samples.iter().map(|x| x[0]).sum::<f64>() / n as f64;
        let fixed = (-2.0 * (1.0 + lambda) + 2.0 * lambda) / (1.0 + 2.0 * lambda);
        let bracket = mean_a > -2.0 && mean_a < 0.0 && mean_b > 0.0 && mean_b < 2.0;
        let deviation = (mean_a - fixed).abs().max((mean_b + fixed).abs());
        eprintln!(
            "fixed point λ={lambda}: means ({mean_a:.4}, {mean_b:.4}) vs ±{:.4}; bracket {}; soft band 0.15 {}",
            fixed.abs(),
            if bracket { "holds" } else { "violated" },
            if deviation <= 0.15 { "met" } else { "missed" },
        );
        reports.push(MetricReport::info(format!("fixed_point_deviation@{lambda}"), deviation, n, SEED));
        reports.push(MetricReport::info(format!("fixed_point_bracket@{lambda}"), bracket as u8 as f64, n, SEED));
    }
    Ok(())
}

fn guidance_rule_from_env() -> Result<GuidanceScaleRule> {
    match std::env::var(GUIDANCE_RULE_ENV) {
        Ok(token) => token
            .parse()
            .map_err(|e: Error| Error::config(GUIDANCE_RULE_ENV, e.to_string())),
        Err(std::env::VarError::NotPresent) => Ok(GuidanceScaleRule::default()),
        Err(e) => Err(Error::config(GUIDANCE_RULE_ENV, e.to_string())),
    }
}

/// Runs every check and returns the reports.
pub fn verify_reports() -> Result<Vec<MetricReport>> {
    let rule = guidance_rule_from_env()?;
    let mut reports = Vec::new();
    for (k, name) in GMM_PRESETS.iter().enumerate() {
        let g = preset_gmm(name)?;
        let mut rng = chain_rng(SEED, k);
        reports.push(MetricReport::gated(
            format!("score_fd_rel_error[{name}]"),
            score_fd_error(&g, &mut rng)?,
            1e-5,
            Accept::AtMost,
            200,
            SEED,
        ));
        reports.push(MetricReport::gated(
            format!("flow_duality_rel_error[{name}]"),
            flow_duality_error(&g, 100, &mut rng)?,
            1e-5,
            Accept::AtMost,
            1900,
            SEED,
        ));
    }
    schedule_checks(&mut reports)?;
    coupling_checks(&mut reports, rule)?;

    let g = preset_gmm("standard-normal")?;
    let schedule = default_schedule();
    let n = 2048;
    let batch = sample(&g, &schedule, &SamplerConfig::default(), SEED, n)?;
    let exact = g.sample(n, &mut chain_rng(SEED, 99));
    let test = energy_permutation_test(
        &batch.samples,
        &exact,
        DEFAULT_PERMUTATIONS,
        DEFAULT_NULL_QUANTILE,
        &mut chain_rng(SEED, 100),
    )?;
    reports.push(MetricReport::gated(
        "sampler_energy_distance[standard-normal]",
        test.statistic,
        test.null_quantile,
        Accept::AtMost,
        n,
        SEED,
    ));
    Ok(reports)
}

pub fn run_verify() -> Result<i32> {
    let reports = verify_reports()?;
    print!("{}", metrics_table(&reports));
    let failed: Vec<&str> = reports.iter().filter(|r| r.failed()).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        println!("all checks passed");
        Ok(0)
    } else {
        println!("failed: {}", failed.join(", "));
        Ok(super::EXIT_FAILURE)
    }
}
