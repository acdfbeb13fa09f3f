use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use underreport::reconstruction::{ReconstructionRule, DEFAULT_COVERAGE};
use underreport::ModelConfig;

use crate::InputError;

/// Fully resolved settings of one run. Written as `run_config.toml` next to
/// the outputs; passing that file back through `--config` repeats the run.
/// Exactly one command section is present.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub quiet: bool,
    pub model: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reconstruct: Option<ReconstructConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnose: Option<DiagnoseConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<ReportConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub aggregate: Option<AggregateConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    /// JSON with `alpha0`, `alpha1`, `beta` (7 values), `q` and optionally
    /// `sigma`.
    pub params: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub months: u32,
    /// Person-months attached to every simulated record.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub population: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub data: PathBuf,
    pub variants: Vec<String>,
    pub max_iterations: usize,
    pub restarts: usize,
    pub convergence_tol: f64,
    pub gradient_step: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        let d = underreport::FitOptions::default();
        Self {
            data: PathBuf::new(),
            variants: vec!["full".into()],
            max_iterations: d.max_iterations,
            restarts: d.restarts,
            convergence_tol: d.convergence_tol,
            gradient_step: d.gradient_step,
        }
    }
}

/// Where fitted parameters come from: a `fit.json` or a bare parameter file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamSource {
    Fit(PathBuf),
    Params(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructConfig {
    pub data: PathBuf,
    pub source: ParamSource,
    pub rule: ReconstructionRule,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<PathBuf>,
    pub default_coverage: f64,
    pub unit_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnoseConfig {
    pub data: PathBuf,
    pub source: ParamSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_lag: Option<usize>,
    pub dof_adjust: usize,
    pub standardized: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportConfig {
    /// `sex,age_band,registered,estimated`.
    pub counts: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coverage: Option<PathBuf>,
    pub default_coverage: f64,
    pub unit_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregateConfig {
    pub cases: PathBuf,
    pub population: PathBuf,
    /// First study month, `YYYY-MM`.
    pub start: String,
    pub months: u32,
    pub window_months: u32,
}

pub const DEFAULT_UNIT_COST: f64 = 1000.0;
pub const DEFAULT_MONTHS: u32 = 96;

pub fn default_coverage() -> f64 {
    DEFAULT_COVERAGE
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| InputError::new(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text)
            .map_err(|e| InputError::new(format!("invalid config {}: {e}", path.display())).into())
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// A subcommand on the command line replaces any section from the file.
    pub fn clear_commands(&mut self) {
        self.simulate = None;
        self.fit = None;
        self.reconstruct = None;
        self.diagnose = None;
        self.report = None;
        self.aggregate = None;
    }

    pub fn sections(&self) -> usize {
        [
            self.simulate.is_some(),
            self.fit.is_some(),
            self.reconstruct.is_some(),
            self.diagnose.is_some(),
            self.report.is_some(),
            self.aggregate.is_some(),
        ]
        .iter()
        .filter(|b| **b)
        .count()
    }
}
