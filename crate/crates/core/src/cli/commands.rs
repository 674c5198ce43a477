use std::fs;
use std::path::{Path, PathBuf};

use serde_json::json;

use super::config::{load_config, CoupleConfig, CoupledModels, SampleConfig, ScheduleSpec};
use super::output::{
    metrics_table, samples_csv, sweep_csv, trace_csv, write_json, write_metrics, write_text,
};
use super::{svg, Cli, Level, ScheduleCommand};
use crate::coupling::{coupled_sample, mv_edit_demo, CoupledRunResult, CouplingConfig};
use crate::error::{Error, Result};
use crate::metrics::{
    coupling_distance, energy_permutation_test, median, model_nll, sweep_summary, Accept, MetricReport,
    SweepPoint, DEFAULT_NULL_QUANTILE,
};
use crate::models::{mv_consistent_model, Gmm, MvScene};
use crate::rng::{chain_rng, derive_seed, roles};
use crate::sampler::{sample, SampleBatch};
use crate::schedule::{
    align_schedules, alpha_bar_to_edm_sigma, alpha_bar_to_flow_time, edm_sigma_to_alpha_bar,
    flow_time_to_alpha_bar, NoiseSchedule,
};

fn require_config(cli: &Cli) -> Result<&Path> {
    cli.config
        .as_deref()
        .ok_or_else(|| Error::config("--config", "this command needs a configuration file"))
}

fn out_dir(cli: &Cli, configured: &Option<PathBuf>) -> Result<PathBuf> {
    let dir = cli
        .out
        .clone()
        .or_else(|| configured.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn check_n(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::config("n", format!("must be at least 2, got {n}")));
    }
    Ok(())
}

fn write_batch(dir: &Path, stem: &str, batch: &SampleBatch, config: &serde_json::Value) -> Result<()> {
    write_text(dir, &format!("{stem}.csv"), &samples_csv(&batch.samples, batch.dim))?;
    write_json(
        dir,
        &format!("{stem}.meta.json"),
        &json!({
            "seed": batch.seed,
            "fingerprint": batch.fingerprint,
            "n": batch.len(),
            "dim": batch.dim,
            "config": config,
        }),
    )
}

pub fn run_sample(cli: &Cli) -> Result<()> {
    let mut cfg: SampleConfig = load_config(require_config(cli)?)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let model = cfg.model.resolve("model")?;
    let schedule = cfg.schedule.build()?;
    cfg.sampler.steps(&schedule)?;
    check_n(cfg.n)?;
    let reference_n = cfg.reference_n.unwrap_or(cfg.n);
    check_n(reference_n)?;
    if cfg.permutations == 0 {
        return Err(Error::config("permutations", "must be at least 1"));
    }
    let dir = out_dir(cli, &cfg.out)?;
    cfg.out = None;

    let batch = sample(&model, &schedule, &cfg.sampler, seed, cfg.n)?;
    let reference = model.sample(reference_n, &mut chain_rng(derive_seed(seed, roles::REFERENCE), 0));
    let test = energy_permutation_test(
        &batch.samples,
        &reference,
        cfg.permutations,
        DEFAULT_NULL_QUANTILE,
        &mut chain_rng(derive_seed(seed, roles::PERMUTATION), 0),
    )?;
    let reports = vec![
        MetricReport::info("nll", model_nll(&model, &batch.samples)?, cfg.n, seed),
        MetricReport::info("nll_exact_reference", model_nll(&model, &reference)?, reference_n, seed),
        MetricReport::gated(
            "energy_distance",
            test.statistic,
            test.null_quantile,
            Accept::AtMost,
            cfg.n,
            seed,
        ),
        MetricReport::info("energy_p_value", test.p_value, cfg.n, seed),
    ];

    let config_echo = serde_json::to_value(&cfg)?;
    write_batch(&dir, "samples", &batch, &config_echo)?;
    write_metrics(&dir, &reports)?;
    if cfg.scatter {
        write_text(&dir, "scatter.svg", &svg::scatter(&batch.samples, "samples"))?;
    }
    print!("{}", metrics_table(&reports));
    Ok(())
}

/// Everything validated before a coupled computation starts.
struct CoupledPlan {
    models: CoupledModels,
    schedule: NoiseSchedule,
    seed: u64,
    dir: PathBuf,
    cfg: CoupleConfig,
}

fn plan_coupled(cli: &Cli, sweep: bool) -> Result<CoupledPlan> {
    let mut cfg: CoupleConfig = load_config(require_config(cli)?)?;
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    cfg.seed = Some(seed);
    let models = cfg.resolve_models()?;
    let schedule = cfg.schedule.build()?;
    cfg.sampler.steps(&schedule)?;
    check_n(cfg.n)?;
    cfg.coupling
        .validate(&schedule)
        .map_err(|e| Error::config("coupling", e.to_string()))?;
    match (&cfg.lambda_grid, sweep) {
        (Some(_), false) => {
            return Err(Error::config("lambda_grid", "only valid for the `sweep` command"));
        }
        (None, true) => return Err(Error::config("lambda_grid", "required by `sweep`")),
        (Some(grid), true) => {
            if grid.len() < 3 {
                return Err(Error::config(
                    "lambda_grid",
                    format!("needs at least 3 values, got {}", grid.len()),
                ));
            }
            if grid.windows(2).any(|w| !(w[1] >= w[0])) {
                return Err(Error::config("lambda_grid", "must be sorted in non-decreasing order"));
            }
            for &lambda in grid {
                let c = CouplingConfig {
                    lambda,
                    ..cfg.coupling.clone()
                };
                c.validate(&schedule)
                    .map_err(|e| Error::config("lambda_grid", e.to_string()))?;
            }
        }
        (None, false) => {}
    }
    let dir = out_dir(cli, &cfg.out)?;
    cfg.out = None;
    Ok(CoupledPlan {
        models,
        schedule,
        seed,
        dir,
        cfg,
    })
}

struct CoupledOutcome {
    run: CoupledRunResult,
    nll_a: f64,
    nll_b: f64,
    residuals: Option<(Vec<f64>, Vec<f64>)>,
    scene: Option<MvScene>,
}

fn run_once(plan: &CoupledPlan, coupling: &CouplingConfig) -> Result<CoupledOutcome> {
    let cfg = &plan.cfg;
    match &plan.models {
        CoupledModels::Pair { model_a, model_b, .. } => {
            let run = coupled_sample(model_a, model_b, &plan.schedule, &cfg.sampler, coupling, plan.seed, cfg.n)?;
            Ok(CoupledOutcome {
                nll_a: model_nll(model_a, &run.batch_a.samples)?,
                nll_b: model_nll(model_b, &run.batch_b.samples)?,
                run,
                residuals: None,
                scene: None,
            })
        }
        CoupledModels::Scene(scene) => {
            let res = mv_edit_demo(scene, &plan.schedule, &cfg.sampler, coupling, plan.seed, cfg.n)?;
            let edit = scene.edit_model();
            let consistent = mv_consistent_model(scene)?;
            Ok(CoupledOutcome {
                nll_a: model_nll(&edit, &res.run.batch_a.samples)?,
                nll_b: model_nll(&consistent, &res.run.batch_b.samples)?,
                run: res.run,
                residuals: Some((res.residuals_a, res.residuals_b)),
                scene: Some(scene.clone()),
            })
        }
    }
}

/// Largest distance between a per-view empirical mean and the edit mean.
pub(crate) fn view_mean_gap(samples: &[Vec<f64>], scene: &MvScene) -> f64 {
    let target = scene.edit().mean();
    let d = scene.view_dim();
    let n = samples.len() as f64;
    (0..scene.n_views())
        .map(|v| {
            let gap2: f64 = (0..d)
                .map(|k| {
                    let m = samples.iter().map(|x| x[v * d + k]).sum::<f64>() / n;
                    (m - target[k]).powi(2)
                })
                .sum();
            gap2.sqrt()
        })
        .fold(0.0, f64::max)
}

pub fn run_couple(cli: &Cli) -> Result<()> {
    let plan = plan_coupled(cli, false)?;
    let (seed, n) = (plan.seed, plan.cfg.n);
    let out = run_once(&plan, &plan.cfg.coupling)?;
    let dist = coupling_distance(&out.run.batch_a.samples, &out.run.batch_b.samples)?;

    let mut reports = Vec::new();
    reports.push(match &plan.models {
        CoupledModels::Pair {
            reference: Some(r), ..
        } => MetricReport::gated(
            "coupling_median",
            dist.median,
            r.uncoupled_coupling_median,
            Accept::AtMost,
            n,
            seed,
        ),
        _ => MetricReport::info("coupling_median", dist.median, n, seed),
    });
    reports.push(MetricReport::info("coupling_mean", dist.mean, n, seed));
    reports.push(MetricReport::info("coupling_p90", dist.p90, n, seed));
    reports.push(MetricReport::info("nll_a", out.nll_a, n, seed));
    reports.push(MetricReport::info("nll_b", out.nll_b, n, seed));
    if let (Some((ra, rb)), Some(scene)) = (&out.residuals, &out.scene) {
        reports.push(MetricReport::info("residual_median_a", median(ra), n, seed));
        reports.push(MetricReport::info("residual_median_b", median(rb), n, seed));
        reports.push(MetricReport::info(
            "view_mean_gap_b",
            view_mean_gap(&out.run.batch_b.samples, scene),
            n,
            seed,
        ));
    }

    let config_echo = serde_json::to_value(&plan.cfg)?;
    write_batch(&plan.dir, "samples_a", &out.run.batch_a, &config_echo)?;
    write_batch(&plan.dir, "samples_b", &out.run.batch_b, &config_echo)?;
    write_text(&plan.dir, "coupling_trace.csv", &trace_csv(&out.run.distance_trace))?;
    write_metrics(&plan.dir, &reports)?;
    if plan.cfg.scatter {
        write_text(
            &plan.dir,
            "paired_scatter.svg",
            &svg::paired_scatter(&out.run.batch_a.samples, &out.run.batch_b.samples, "chain A (gray) and chain B"),
        )?;
    }
    print!("{}", metrics_table(&reports));
    Ok(())
}

pub fn run_sweep(cli: &Cli) -> Result<()> {
    let plan = plan_coupled(cli, true)?;
    let (seed, n) = (plan.seed, plan.cfg.n);
    let grid = plan.cfg.lambda_grid.clone().unwrap_or_default();
    let mut points = Vec::with_capacity(grid.len());
    for &lambda in &grid {
        let coupling = CouplingConfig {
            lambda,
            ..plan.cfg.coupling.clone()
        };
        let out = run_once(&plan, &coupling)?;
        let dist = coupling_distance(&out.run.batch_a.samples, &out.run.batch_b.samples)?;
        points.push(SweepPoint {
            lambda,
            seed,
            coupling_median: dist.median,
            nll_a: out.nll_a,
            nll_b: out.nll_b,
            residual_b: out.residuals.as_ref().map(|(_, rb)| median(rb)),
        });
    }
    let summary = sweep_summary(points)?;

    let mut reports = vec![
        MetricReport::check("distance_non_increasing", summary.distance_non_increasing, n, seed),
        MetricReport::check("own_nll_non_decreasing", summary.nll_non_decreasing, n, seed),
        MetricReport::info(
            "distance_strictly_decreasing",
            if summary.distance_strictly_decreasing { 1.0 } else { 0.0 },
            n,
            seed,
        ),
    ];
    for p in &summary.points {
        reports.push(MetricReport::info(format!("coupling_median@{}", p.lambda), p.coupling_median, n, seed));
        reports.push(MetricReport::info(format!("own_nll@{}", p.lambda), p.own_nll(), n, seed));
    }

    write_text(&plan.dir, "sweep.csv", &sweep_csv(&summary))?;
    write_metrics(&plan.dir, &reports)?;
    let lambdas: Vec<f64> = summary.points.iter().map(|p| p.lambda).collect();
    let medians: Vec<f64> = summary.points.iter().map(|p| p.coupling_median).collect();
    let nll: Vec<f64> = summary.points.iter().map(|p| p.own_nll()).collect();
    write_text(
        &plan.dir,
        "sweep.svg",
        &svg::two_curves(
            &lambdas,
            ("median coupling distance", &medians),
            ("mean own-model NLL", &nll),
            "coupling sweep over lambda",
        ),
    )?;
    print!("{}", metrics_table(&reports));
    Ok(())
}

#[derive(serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleConfig {
    #[serde(default)]
    schedule: ScheduleSpec,
    #[serde(default)]
    out: Option<PathBuf>,
}

fn to_alpha_bar(level: Level, v: f64) -> Result<f64> {
    match level {
        Level::AlphaBar => {
            if v > 0.0 && v <= 1.0 {
                Ok(v)
            } else {
                Err(Error::arg("value", format!("alpha-bar must lie in (0, 1], got {v}")))
            }
        }
        Level::EdmSigma => edm_sigma_to_alpha_bar(v),
        Level::FlowTime => flow_time_to_alpha_bar(v),
    }
}

fn from_alpha_bar(level: Level, ab: f64) -> Result<f64> {
    match level {
        Level::AlphaBar => Ok(ab),
        Level::EdmSigma => alpha_bar_to_edm_sigma(ab),
        Level::FlowTime => alpha_bar_to_flow_time(ab),
    }
}

pub fn run_schedule(cli: &Cli, action: &ScheduleCommand) -> Result<()> {
    match action {
        ScheduleCommand::Build => {
            let cfg: ScheduleConfig = match &cli.config {
                Some(path) => load_config(path)?,
                None => ScheduleConfig {
                    schedule: ScheduleSpec::default(),
                    out: None,
                },
            };
            let schedule = cfg.schedule.build()?;
            let dir = out_dir(cli, &cfg.out)?;
            write_json(&dir, "schedule.json", &schedule)?;
            println!(
                "{} steps, alpha_bar_T = {:e}, checksum {}",
                schedule.num_steps(),
                schedule.alpha_bar(schedule.num_steps()),
                schedule.alpha_bar_checksum()
            );
        }
        ScheduleCommand::Convert { from, to, value } => {
            let ab = to_alpha_bar(*from, *value)?;
            println!("{}", from_alpha_bar(*to, ab)?);
        }
        ScheduleCommand::Align { source, target } => {
            let src: NoiseSchedule = load_config(source)?;
            let tgt: NoiseSchedule = load_config(target)?;
            let alignment = align_schedules(&src, &tgt);
            let dir = out_dir(cli, &None)?;
            write_json(&dir, "alignment.json", &alignment)?;
            println!(
                "aligned {} steps, max log-SNR gap {}",
                alignment.mapping.len(),
                alignment.max_log_snr_gap
            );
        }
    }
    Ok(())
}

/// Loads a GMM by preset name.
pub(crate) fn preset_gmm(name: &str) -> Result<Gmm> {
    super::config::ModelRef::Preset(name.to_string()).resolve("model")
}
