//! Scenario files: model, grid, task and task parameters in one JSON document.
//!
//! The canonical form is pretty-printed JSON with struct fields in declaration
//! order and `task_params` keys sorted, so `to_json ∘ from_json` is the identity
//! on canonical text.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use soliton_core::{Grid1D, ModelSpec};

use crate::error::{LabError, LabResult};

/// Environment variable overriding `output_dir`.
pub const OUTPUT_ENV: &str = "SOLITON_LAB_OUT";

fn default_nu() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub n: usize,
    pub length: f64,
}

impl GridSpec {
    pub fn build(&self) -> LabResult<Grid1D> {
        Grid1D::new(self.n, self.length).map_err(LabError::core("grid"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Groundstate,
    Branch,
    Spectrum,
    Evolve,
    Track,
    Newton,
    Fgr,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Groundstate => "groundstate",
            Task::Branch => "branch",
            Task::Spectrum => "spectrum",
            Task::Evolve => "evolve",
            Task::Track => "track",
            Task::Newton => "newton",
            Task::Fgr => "fgr",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub model: ModelSpec,
    pub grid: GridSpec,
    pub task: Task,
    #[serde(default)]
    pub task_params: Map<String, Value>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    /// Weight exponent of `‖(1+x²)^{−ν/2}·‖₂`.
    #[serde(default = "default_nu")]
    pub nu: f64,
}

impl Scenario {
    pub fn from_json(text: &str) -> LabResult<Self> {
        serde_json::from_str(text).map_err(|e| LabError::Scenario(format!("invalid scenario JSON: {e}")))
    }

    pub fn from_value(value: Value) -> LabResult<Self> {
        serde_json::from_value(value).map_err(|e| LabError::Scenario(format!("invalid scenario: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> LabResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        Self::from_json(&text)
    }

    /// Canonical text, newline terminated.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("scenario serializes")
    }

    /// `output_dir`, unless overridden by the environment.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.output_dir.clone(),
        }
    }

    /// Task parameters decoded into the task's own schema.
    pub fn params<T: for<'de> Deserialize<'de>>(&self) -> LabResult<T> {
        serde_json::from_value(Value::Object(self.task_params.clone()))
            .map_err(|e| LabError::Scenario(format!("task_params for {}: {e}", self.task.name())))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoParams {}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BranchParams {
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumParams {
    /// Number of smallest eigenvalues of `L₋L₊` to resolve.
    #[serde(default = "default_count")]
    pub count: usize,
}

fn default_count() -> usize {
    4
}

impl Default for SpectrumParams {
    fn default() -> Self {
        Self { count: default_count() }
    }
}

/// Initial datum `e^{ip₀x}(φ + z₀ξ + r)(x − a₀)`, with `r` a seeded random
/// localized perturbation of size `remainder_scale·z₀²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvolveParams {
    pub dt: f64,
    /// Final time; `mode_periods/ε` is used instead when `mode_periods` is set.
    #[serde(default)]
    pub t_end: Option<f64>,
    #[serde(default)]
    pub mode_periods: Option<f64>,
    #[serde(default = "default_stride")]
    pub output_stride: usize,
    #[serde(default)]
    pub absorber: bool,
    #[serde(default)]
    pub z0: f64,
    #[serde(default)]
    pub a0: f64,
    #[serde(default)]
    pub p0: f64,
    #[serde(default)]
    pub remainder_scale: f64,
    #[serde(default)]
    pub checkpoints: Vec<f64>,
    /// Start from this checkpoint instead of the constructed datum.
    #[serde(default)]
    pub initial_checkpoint: Option<PathBuf>,
}

fn default_stride() -> usize {
    100
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcingKind {
    /// `F = (φξ², 0)`
    QuadraticMode,
    /// `F = (0, φξη)`
    CrossMode,
    /// `F = (u, v)` read from a CSV file with columns `x, u, v`.
    File,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FgrParams {
    pub forcing: ForcingKind,
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Apply `P_c` to `F` before evaluating the form.
    #[serde(default = "default_true")]
    pub project: bool,
    /// Threshold order; computed from `ε` and `λ` when absent.
    #[serde(default)]
    pub order: Option<usize>,
}

fn default_true() -> bool {
    true
}
