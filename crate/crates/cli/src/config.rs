//! On-disk problem description and its conversion to library types.

use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::Deserialize;

use tdlab::analytic::{AnalyticSolution, PolicyEvalProblem};
use tdlab::experiment_harness::{ExperimentConfig, InitialStatePolicy};
use tdlab::schedule::{ScheduleKind, StepSchedule};
use tdlab::{FeatureMap, MarkovChain};

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfigFile {
    pub chain: ChainBlock,
    pub rewards: RewardsBlock,
    pub gamma: f64,
    pub features: FeaturesBlock,
    pub schedule: ScheduleBlock,
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: OutputBlock,
    /// State at which the Poisson solutions vanish.
    #[serde(default)]
    pub anchor_state: usize,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainBlock {
    #[serde(rename = "P")]
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardsBlock {
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesBlock {
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKindName {
    Harmonic,
    Polynomial,
    Table,
}

/// `harmonic` needs `d1`; `polynomial` needs `d2` and `d3`; `table` needs
/// `values` and the full envelope. Missing envelope parameters default to
/// the tightest envelope of the analytic form.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleBlock {
    pub kind: ScheduleKindName,
    pub d1: Option<f64>,
    pub d2: Option<f64>,
    pub d3: Option<f64>,
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub valid_from: usize,
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum InitialStateName {
    Stationary,
    Uniform,
    Fixed(usize),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    pub n0: usize,
    pub horizon: usize,
    pub n_trajectories: usize,
    pub master_seed: u64,
    pub epsilon: f64,
    pub delta: f64,
    #[serde(rename = "D_const")]
    pub d_const: Option<f64>,
    #[serde(default = "default_policy")]
    pub initial_state_policy: InitialStateName,
    pub initial_x: Option<Vec<f64>>,
    #[serde(default)]
    pub epsilon_grid: Vec<f64>,
    #[serde(default)]
    pub delta_grid: Vec<f64>,
    pub fit_delta_grid: Option<Vec<f64>>,
    /// Analytic bound on `P(|x_{n0} - x*| > epsilon)` for `bound`; estimated
    /// by simulation when absent.
    pub p_init: Option<f64>,
}

fn default_policy() -> InitialStateName {
    InitialStateName::Stationary
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_formats")]
    pub formats: Vec<Format>,
}

fn default_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_formats() -> Vec<Format> {
    vec![Format::Json, Format::Csv]
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self {
            dir: default_dir(),
            formats: default_formats(),
        }
    }
}

impl ProblemConfigFile {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Validation(msg) => CliError::Validation(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            let inner = e.into_inner();
            CliError::Validation(format!(
                "field `{field}`: {inner} (line {}, column {})",
                inner.line(),
                inner.column()
            ))
        })
    }

    pub fn schedule(&self) -> Result<StepSchedule, CliError> {
        let s = &self.schedule;
        let need = |v: Option<f64>, name: &str| {
            v.ok_or_else(|| CliError::Validation(format!("field `schedule.{name}` is required for this kind")))
        };
        let (kind, d1, d2, d3) = match s.kind {
            ScheduleKindName::Harmonic => {
                let d1 = need(s.d1, "d1")?;
                (ScheduleKind::Harmonic, d1, s.d2.unwrap_or(1.0), s.d3.unwrap_or(d1))
            }
            ScheduleKindName::Polynomial => {
                let d3 = need(s.d3, "d3")?;
                (ScheduleKind::Polynomial, s.d1.unwrap_or(d3), need(s.d2, "d2")?, d3)
            }
            ScheduleKindName::Table => {
                let values = s.values.clone().ok_or_else(|| {
                    CliError::Validation("field `schedule.values` is required for kind `table`".into())
                })?;
                (
                    ScheduleKind::Table { values },
                    need(s.d1, "d1")?,
                    need(s.d2, "d2")?,
                    need(s.d3, "d3")?,
                )
            }
        };
        StepSchedule::new(kind, d1, d2, d3, s.valid_from).map_err(|e| field_error("schedule", e))
    }

    pub fn problem(&self) -> Result<PolicyEvalProblem, CliError> {
        let chain = MarkovChain::from_rows(&self.chain.p).map_err(|e| field_error("chain.P", e))?;
        let features = FeatureMap::from_rows(&self.features.phi).map_err(|e| field_error("features.Phi", e))?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(CliError::Validation(format!(
                "field `gamma`: {} must lie in (0, 1)",
                self.gamma
            )));
        }
        PolicyEvalProblem::new(chain, DVector::from_column_slice(&self.rewards.r), self.gamma, features)
            .map_err(|e| field_error("problem", e))
    }

    pub fn experiment(&self) -> ExperimentConfig {
        let e = &self.experiment;
        let mut cfg = ExperimentConfig::new(e.n0, e.horizon, e.n_trajectories, e.master_seed, e.epsilon, e.delta);
        cfg.d_const = e.d_const;
        cfg.initial_state_policy = match e.initial_state_policy {
            InitialStateName::Stationary => InitialStatePolicy::Stationary,
            InitialStateName::Uniform => InitialStatePolicy::Uniform,
            InitialStateName::Fixed(i) => InitialStatePolicy::Fixed(i),
        };
        cfg.initial_x = e.initial_x.clone();
        cfg.epsilon_grid = e.epsilon_grid.clone();
        cfg.delta_grid = e.delta_grid.clone();
        cfg.fit_delta_grid = e.fit_delta_grid.clone();
        cfg
    }
}

fn field_error(field: &str, e: tdlab::Error) -> CliError {
    let msg = format!("field `{field}`: {e}");
    if e.is_numerical() {
        CliError::Numerical(msg)
    } else {
        CliError::Validation(msg)
    }
}

/// Everything a command needs after load-time validation.
pub struct Loaded {
    pub file: ProblemConfigFile,
    pub problem: PolicyEvalProblem,
    pub schedule: StepSchedule,
    pub solution: AnalyticSolution,
}

impl Loaded {
    pub fn from_file(file: ProblemConfigFile) -> Result<Self, CliError> {
        let problem = file.problem()?;
        let schedule = file.schedule()?;
        if file.anchor_state >= problem.n_states() {
            return Err(CliError::Validation(format!(
                "field `anchor_state`: {} out of range 0..{}",
                file.anchor_state,
                problem.n_states()
            )));
        }
        let solution = AnalyticSolution::compute(&problem, file.anchor_state).map_err(|e| field_error("features.Phi", e))?;
        Ok(Self {
            file,
            problem,
            schedule,
            solution,
        })
    }
}
