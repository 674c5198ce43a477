use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use coupled_diffusion::coupling::chain_seeds;
use serde_json::Value;
use tempfile::TempDir;

const BIN: &str = env!("CARGO_BIN_EXE_coupled-sampler");

fn run(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(BIN);
    cmd.args(args).env_remove("COUPLED_SAMPLER_PRESETS").env_remove("COUPLED_SAMPLER_GUIDANCE_SCALE_RULE");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

fn run_cmd(sub: &str, config: &Path, out: &Path, seed: Option<u64>) -> Output {
    let mut args = vec![sub.to_string(), "--config".into(), config.display().to_string(), "--out".into(), out.display().to_string()];
    if let Some(s) = seed {
        args.push("--seed".into());
        args.push(s.to_string());
    }
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    run(&refs, &[])
}

fn metrics(dir: &Path) -> Vec<Value> {
    let text = fs::read_to_string(dir.join("metrics.json")).unwrap();
    serde_json::from_str::<Value>(&text).unwrap().as_array().unwrap().clone()
}

fn metric<'a>(all: &'a [Value], name: &str) -> &'a Value {
    all.iter().find(|m| m["name"] == name).unwrap_or_else(|| panic!("metric {name} missing"))
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

// Checks tag balance and the root element; enough to catch truncated or
// malformed output from the hand-written emitter.
fn assert_well_formed_svg(path: &Path) {
    let text = fs::read_to_string(path).unwrap();
    assert!(text.len() < 2 * 1024 * 1024, "{} is {} bytes", path.display(), text.len());
    assert!(text.trim_start().starts_with("<svg") || text.trim_start().starts_with("<?xml"));
    assert!(text.trim_end().ends_with("</svg>"));
    let mut stack: Vec<String> = Vec::new();
    let mut rest = text.as_str();
    while let Some(open) = rest.find('<') {
        let close = rest[open..].find('>').expect("unterminated tag") + open;
        let tag = &rest[open + 1..close];
        rest = &rest[close + 1..];
        if tag.starts_with('?') || tag.starts_with('!') || tag.ends_with('/') {
            continue;
        }
        let name: String = tag.trim_start_matches('/').chars().take_while(|c| !c.is_whitespace()).collect();
        if tag.starts_with('/') {
            assert_eq!(stack.pop().as_deref(), Some(name.as_str()), "mismatched </{name}>");
        } else {
            stack.push(name);
        }
    }
    assert!(stack.is_empty(), "unclosed tags {stack:?}");
}

#[test]
fn sample_standard_normal_passes_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sample.json", r#"{"model": {"preset": "standard-normal"}, "n": 2048}"#);
    let (first, second) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&first, &second] {
        let out = run_cmd("sample", &cfg, dir, Some(7));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    for file in ["samples.csv", "samples.meta.json", "metrics.json", "scatter.svg"] {
        assert_eq!(fs::read(first.join(file)).unwrap(), fs::read(second.join(file)).unwrap(), "{file} differs");
    }
    let all = metrics(&first);
    let ed = metric(&all, "energy_distance");
    assert_eq!(ed["pass"], Value::Bool(true), "{ed}");
    assert!(metric(&all, "nll")["value"].as_f64().unwrap().is_finite());

    let csv = fs::read_to_string(first.join("samples.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("chain_index,dim_0,dim_1"));
    assert_eq!(lines.count(), 2048);
    assert!(!csv.contains('\r'));
    assert_well_formed_svg(&first.join("scatter.svg"));
}

#[test]
fn sample_rejects_coupling_key() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", r#"{"model": {"preset": "standard-normal"}, "lambda": -1.0}"#);
    let out = run_cmd("sample", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lambda"), "{}", stderr(&out));
    assert!(!tmp.path().join("o").join("samples.csv").exists());
}

#[test]
fn malformed_json_reports_position() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", "{\n  \"model\": {\"preset\": \"standard-normal\"},\n  \"n\": ,\n}");
    let out = run_cmd("sample", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));
}

#[test]
fn missing_config_file_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let out = run_cmd("sample", &tmp.path().join("absent.json"), &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_preset_is_a_validation_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"model": {"preset": "no-such-preset"}}"#);
    let out = run_cmd("sample", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn couple_separated_gaussians_beats_reference() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "couple.json",
        r#"{"pair": "separated-gaussians", "coupling": {"lambda": 1.0}, "n": 2048}"#,
    );
    let dir = tmp.path().join("o");
    let out = run_cmd("couple", &cfg, &dir, Some(3));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for file in ["samples_a.csv", "samples_b.csv", "coupling_trace.csv", "metrics.json", "paired_scatter.svg"] {
        assert!(dir.join(file).exists(), "{file} missing");
    }
    let all = metrics(&dir);
    let median = metric(&all, "coupling_median");
    assert!(median["value"].as_f64().unwrap() < 4.247629136971673, "{median}");
    assert_eq!(median["pass"], Value::Bool(true));
    let trace = fs::read_to_string(dir.join("coupling_trace.csv")).unwrap();
    assert!(trace.starts_with("step,t,mean_distance\n"));
    assert_well_formed_svg(&dir.join("paired_scatter.svg"));
}

#[test]
fn couple_scene_reports_residuals_for_both_chains() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "scene.json", r#"{"scene": {"preset": "mv-triangle"}, "n": 512}"#);
    let dir = tmp.path().join("o");
    let out = run_cmd("couple", &cfg, &dir, Some(1));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let all = metrics(&dir);
    for name in ["residual_median_a", "residual_median_b"] {
        assert!(metric(&all, name)["value"].as_f64().unwrap().is_finite());
    }
}

#[test]
fn zero_coupling_matches_two_sample_runs() {
    let tmp = TempDir::new().unwrap();
    let seed = 11;
    let couple = write_config(
        tmp.path(),
        "couple.json",
        r#"{"pair": "separated-gaussians", "coupling": {"lambda": 0.0}, "n": 256, "scatter": false}"#,
    );
    let dir = tmp.path().join("pair");
    let out = run_cmd("couple", &couple, &dir, Some(seed));
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let preset: Value = serde_json::from_str(
        &fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("presets/separated-gaussians.json")).unwrap(),
    )
    .unwrap();
    let (seed_a, seed_b) = chain_seeds(seed);
    for (side, chain_seed) in [("a", seed_a), ("b", seed_b)] {
        let body = serde_json::json!({
            "model": {"inline": preset[format!("model_{side}")]},
            "n": 256,
            "reference_n": 64,
            "permutations": 1,
            "scatter": false,
        });
        let cfg = write_config(tmp.path(), &format!("{side}.json"), &body.to_string());
        let single = tmp.path().join(side);
        let out = run_cmd("sample", &cfg, &single, Some(chain_seed));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        assert_eq!(
            fs::read(single.join("samples.csv")).unwrap(),
            fs::read(dir.join(format!("samples_{side}.csv"))).unwrap(),
            "chain {side}"
        );
    }
}

#[test]
fn couple_dimension_mismatch_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "c.json",
        r#"{"model_a": {"preset": "standard-normal"}, "model_b": {"preset": "aniso-4d"}}"#,
    );
    let out = run_cmd("couple", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn couple_rejects_negative_lambda() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"pair": "separated-gaussians", "coupling": {"lambda": -0.5}}"#);
    let out = run_cmd("couple", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("lambda"), "{}", stderr(&out));
}

#[test]
fn sweep_is_reproducible_and_writes_two_curves() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.json",
        r#"{"pair": "separated-gaussians", "lambda_grid": [0.0, 0.5, 1.0], "n": 256}"#,
    );
    let (first, second) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&first, &second] {
        let out = run_cmd("sweep", &cfg, dir, Some(5));
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    assert_eq!(fs::read(first.join("sweep.csv")).unwrap(), fs::read(second.join("sweep.csv")).unwrap());
    let csv = fs::read_to_string(first.join("sweep.csv")).unwrap();
    assert!(csv.starts_with("lambda,coupling_median,nll_a,nll_b,residual_b\n"));
    assert_eq!(csv.lines().count(), 4);
    assert_well_formed_svg(&first.join("sweep.svg"));
    assert_eq!(fs::read_to_string(first.join("sweep.svg")).unwrap().matches("<polyline").count(), 2);
}

#[test]
fn sweep_single_point_grid_is_rejected() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "s.json", r#"{"pair": "separated-gaussians", "lambda_grid": [1.0]}"#);
    let out = run_cmd("sweep", &cfg, &tmp.path().join("o"), None);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn sweep_separated_gaussians_distance_is_monotone() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "sweep.json",
        r#"{"pair": "separated-gaussians", "lambda_grid": [0.0, 0.5, 1.0, 2.0, 4.0], "n": 1024, "scatter": false}"#,
    );
    let dir = tmp.path().join("o");
    let out = run_cmd("sweep", &cfg, &dir, Some(0));
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let all = metrics(&dir);
    let verdict = metric(&all, "distance_non_increasing");
    assert_eq!(verdict["pass"], Value::Bool(true), "{verdict}");
}

#[test]
fn verify_passes_on_a_clean_build() {
    let out = run(&["verify"], &[]);
    assert_eq!(code(&out), 0, "{}\n{}", String::from_utf8_lossy(&out.stdout), stderr(&out));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("flow"), "{table}");
}

#[test]
fn verify_rejects_invalid_guidance_rule_override() {
    let out = run(&["verify"], &[("COUPLED_SAMPLER_GUIDANCE_SCALE_RULE", "sqrt_beta")]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
}

#[test]
fn preset_directory_override() {
    let tmp = TempDir::new().unwrap();
    let presets = tmp.path().join("presets");
    fs::create_dir(&presets).unwrap();
    fs::write(
        presets.join("narrow.json"),
        r#"{"kind": "gmm", "model": {"weights": [1.0], "means": [[5.0]], "covariance": [[[0.01]]]}}"#,
    )
    .unwrap();
    let cfg = write_config(tmp.path(), "c.json", r#"{"model": {"preset": "narrow"}, "n": 256, "permutations": 10}"#);
    let dir = tmp.path().join("o");
    let args = ["sample", "--config", cfg.to_str().unwrap(), "--out", dir.to_str().unwrap()];

    let out = run(&args, &[("COUPLED_SAMPLER_PRESETS", presets.to_str().unwrap())]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(dir.join("samples.csv")).unwrap();
    assert!(csv.starts_with("chain_index,dim_0\n"));

    let out = run(&args, &[]);
    assert_eq!(code(&out), 2, "built-in presets should not contain `narrow`");
}

#[test]
fn schedule_convert_prints_json() {
    let out = run(&["schedule", "convert", "--from", "edm-sigma", "--to", "alpha-bar", "--value", "1"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let text = v.to_string();
    assert!(text.contains("0.5"), "{text}");
}

#[test]
fn bad_subcommand_exits_two() {
    let out = run(&["frobnicate"], &[]);
    assert_eq!(code(&out), 2);
}
