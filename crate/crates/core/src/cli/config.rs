//! Run configurations and preset resolution.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingConfig;
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_PERMUTATIONS;
use crate::models::{Gmm, MvScene};
use crate::sampler::SamplerConfig;
use crate::schedule::{NoiseSchedule, COSINE_DEFAULT_OFFSET};

pub const PRESETS_ENV: &str = "COUPLED_SAMPLER_PRESETS";

/// Directory holding preset files: `$COUPLED_SAMPLER_PRESETS` if set,
/// otherwise the `presets/` directory shipped with the crate.
pub fn preset_dir() -> PathBuf {
    match std::env::var_os(PRESETS_ENV) {
        Some(dir) if !dir.is_empty() => PathBuf::from(dir),
        _ => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("presets"),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Preset {
    Gmm {
        #[serde(default)]
        description: String,
        model: Gmm,
    },
    Pair {
        #[serde(default)]
        description: String,
        model_a: Gmm,
        model_b: Gmm,
        #[serde(default)]
        reference: Option<PairReference>,
    },
    Scene {
        #[serde(default)]
        description: String,
        scene: MvScene,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairReference {
    /// Median pair distance of independent exact draws from both models.
    pub uncoupled_coupling_median: f64,
    #[serde(default)]
    pub note: String,
}

pub fn load_preset(name: &str) -> Result<Preset> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::config("preset", format!("invalid preset name `{name}`")));
    }
    let path = preset_dir().join(format!("{name}.json"));
    if !path.is_file() {
        return Err(Error::config(
            "preset",
            format!("no preset `{name}` in {}", preset_dir().display()),
        ));
    }
    read_json(&path)
}

/// Parses a JSON file, reporting the file, line and column on failure.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::config(path.display().to_string(), e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::config(path.display().to_string(), e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelRef {
    Preset(String),
    File(PathBuf),
    Inline(Gmm),
}

impl ModelRef {
    pub fn resolve(&self, field: &str) -> Result<Gmm> {
        match self {
            ModelRef::Inline(g) => Ok(g.clone()),
            ModelRef::File(path) => read_json(path),
            ModelRef::Preset(name) => match load_preset(name)? {
                Preset::Gmm { model, .. } => Ok(model),
                _ => Err(Error::config(field, format!("preset `{name}` is not a single model"))),
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SceneRef {
    Preset(String),
    File(PathBuf),
    Inline(MvScene),
}

impl SceneRef {
    pub fn resolve(&self) -> Result<MvScene> {
        match self {
            SceneRef::Inline(s) => Ok(s.clone()),
            SceneRef::File(path) => read_json(path),
            SceneRef::Preset(name) => match load_preset(name)? {
                Preset::Scene { scene, .. } => Ok(scene),
                _ => Err(Error::config("scene", format!("preset `{name}` is not a scene"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleSpec {
    Linear {
        num_steps: usize,
        beta_start: f64,
        beta_end: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<f64>,
    },
    Cosine {
        num_steps: usize,
        #[serde(default = "default_cosine_offset")]
        offset: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<f64>,
    },
    Betas(Vec<f64>),
    File(PathBuf),
}

fn default_cosine_offset() -> f64 {
    COSINE_DEFAULT_OFFSET
}

pub const DEFAULT_NUM_STEPS: usize = 200;

// Cosine has the smallest discretization bias at 200 steps among the
// schedules tried against the analytic presets.
impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec::Cosine {
            num_steps: DEFAULT_NUM_STEPS,
            offset: COSINE_DEFAULT_OFFSET,
            shift: None,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<NoiseSchedule> {
        match self {
            ScheduleSpec::Linear {
                num_steps,
                beta_start,
                beta_end,
                shift,
            } => {
                let s = NoiseSchedule::linear(*num_steps, *beta_start, *beta_end)?;
                apply_shift(s, *shift)
            }
            ScheduleSpec::Cosine {
                num_steps,
                offset,
                shift,
            } => apply_shift(NoiseSchedule::cosine(*num_steps, *offset)?, *shift),
            ScheduleSpec::Betas(b) => NoiseSchedule::from_betas(b.clone()),
            ScheduleSpec::File(path) => read_json(path),
        }
    }
}

fn apply_shift(s: NoiseSchedule, shift: Option<f64>) -> Result<NoiseSchedule> {
    match shift {
        Some(k) => s.shifted(k),
        None => Ok(s),
    }
}

/// The default run schedule.
pub fn default_schedule() -> NoiseSchedule {
    ScheduleSpec::default().build().expect("default schedule is valid")
}

fn default_n() -> usize {
    4096
}

fn default_permutations() -> usize {
    DEFAULT_PERMUTATIONS
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub model: ModelRef,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Size of the exact reference cloud; defaults to `n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_n: Option<usize>,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    #[serde(default = "yes")]
    pub scatter: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoupleConfig {
    /// Name of a `pair` preset supplying both models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pair: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_a: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_b: Option<ModelRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<SceneRef>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub coupling: CouplingConfig,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default = "yes")]
    pub scatter: bool,
    /// Required by `sweep`, rejected by `couple`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_grid: Option<Vec<f64>>,
}

/// The two models of a coupled run, or a multi-view scene.
#[derive(Debug, Clone)]
pub enum CoupledModels {
    Pair {
        model_a: Gmm,
        model_b: Gmm,
        reference: Option<PairReference>,
    },
    Scene(MvScene),
}

impl CoupleConfig {
    pub fn resolve_models(&self) -> Result<CoupledModels> {
        let explicit = self.model_a.is_some() || self.model_b.is_some();
        let chosen = [self.pair.is_some(), explicit, self.scene.is_some()]
            .iter()
            .filter(|b| **b)
            .count();
        if chosen != 1 {
            return Err(Error::config(
                "model_a",
                "give exactly one of `pair`, `model_a` with `model_b`, or `scene`",
            ));
        }
        if let Some(name) = &self.pair {
            return match load_preset(name)? {
                Preset::Pair {
                    model_a,
                    model_b,
                    reference,
                    ..
                } => Ok(CoupledModels::Pair {
                    model_a,
                    model_b,
                    reference,
                }),
                _ => Err(Error::config("pair", format!("preset `{name}` is not a pair"))),
            };
        }
        if let Some(scene) = &self.scene {
            return Ok(CoupledModels::Scene(scene.resolve()?));
        }
        let (Some(a), Some(b)) = (&self.model_a, &self.model_b) else {
            return Err(Error::config("model_b", "`model_a` and `model_b` must be given together"));
        };
        let (model_a, model_b) = (a.resolve("model_a")?, b.resolve("model_b")?);
        if model_a.dim() != model_b.dim() {
            return Err(Error::config(
                "model_b",
                format!("dimension {} differs from model_a's {}", model_b.dim(), model_a.dim()),
            ));
        }
        Ok(CoupledModels::Pair {
            model_a,
            model_b,
            reference: None,
        })
    }
}

/// Parses a config file and rejects unknown keys.
pub fn load_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_presets_load() {
        for name in [
            "standard-normal",
            "two-modes",
            "tri-mixture",
            "aniso-4d",
            "separated-gaussians",
            "bimodal-pair",
            "mv-triangle",
        ] {
            load_preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
        assert!(load_preset("missing").is_err());
        assert!(load_preset("../presets/standard-normal").is_err());
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = serde_json::from_str::<SampleConfig>(r#"{"model": {"preset": "standard-normal"}, "lambda": -1}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("lambda"), "{err}");
    }

    #[test]
    fn default_schedule_reaches_noise() {
        let s = default_schedule();
        assert_eq!(s.num_steps(), 200);
        assert!(s.alpha_bar(200) < 1e-4);
    }

    #[test]
    fn couple_models_need_one_source() {
        let cfg: CoupleConfig = serde_json::from_str(r#"{"pair": "separated-gaussians", "scene": {"preset": "mv-triangle"}}"#).unwrap();
        assert!(cfg.resolve_models().unwrap_err().is_validation());
        let cfg: CoupleConfig = serde_json::from_str(
            r#"{"model_a": {"preset": "standard-normal"}, "model_b": {"preset": "aniso-4d"}}"#,
        )
        .unwrap();
        assert!(cfg.resolve_models().unwrap_err().is_validation());
    }
}
