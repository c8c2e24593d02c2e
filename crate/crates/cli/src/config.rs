//! Run configuration: a single JSON document drives every subcommand.

use serde::{Deserialize, Serialize};

use ecobounds_core::benchmarking::SubsetStatistic;
use ecobounds_core::estimator::{ModelSpec, ProjectionPopulation, Side};
use ecobounds_core::ingest::IngestSpec;
use ecobounds_core::nuisance::LearnerSpec;
use ecobounds_core::simulation::DgpConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_sides")]
    pub sides: Vec<Side>,
    #[serde(default)]
    pub delta: Option<f64>,
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default = "default_population")]
    pub population: ProjectionPopulation,
}

fn default_sides() -> Vec<Side> {
    vec![Side::Lower, Side::Upper]
}

fn default_degree() -> usize {
    1
}

fn default_population() -> ProjectionPopulation {
    ProjectionPopulation::Target
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            sides: default_sides(),
            delta: None,
            degree: default_degree(),
            population: default_population(),
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, side: Side) -> ModelSpec {
        let mut spec = ModelSpec::new(side)
            .with_degree(self.degree)
            .with_population(self.population);
        if let Some(d) = self.delta {
            spec = spec.with_delta(d);
        }
        spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorChoice {
    Plugin,
    BiasCorrected,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InferenceMethod {
    Sandwich,
    Bootstrap,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceConfig {
    #[serde(default = "default_method")]
    pub method: InferenceMethod,
    #[serde(default = "default_b")]
    pub b: usize,
}

fn default_method() -> InferenceMethod {
    InferenceMethod::Sandwich
}

fn default_b() -> usize {
    200
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            method: default_method(),
            b: default_b(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorGridConfig {
    pub eps_outcome: Vec<f64>,
    pub eps_propensity: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_n_oracle")]
    pub n_oracle: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyConfig {
    pub scales: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeltaSweepConfig {
    pub deltas: Vec<f64>,
    #[serde(default = "default_seeds")]
    pub seeds: usize,
    #[serde(default = "default_true")]
    pub include_true: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub holdout_size: usize,
    #[serde(default = "default_statistic")]
    pub statistic: SubsetStatistic,
}

fn default_statistic() -> SubsetStatistic {
    SubsetStatistic::MeanAbs
}

fn default_seeds() -> usize {
    20
}

fn default_n_oracle() -> usize {
    1_000_000
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub error_grid: Option<ErrorGridConfig>,
    #[serde(default)]
    pub entropy: Option<EntropyConfig>,
    #[serde(default)]
    pub delta_sweep: Option<DeltaSweepConfig>,
    #[serde(default)]
    pub benchmark: Option<BenchmarkConfig>,
}

/// The top-level run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// CSV input path, for commands that ingest real data.
    #[serde(default)]
    pub input: Option<String>,
    /// Column-role map for CSV ingestion.
    #[serde(default)]
    pub roles: Option<IngestSpec>,
    #[serde(default)]
    pub learner: Option<LearnerSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_estimator")]
    pub estimator: EstimatorChoice,
    #[serde(default)]
    pub inference: InferenceConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: String,
    /// Synthetic-process settings for the simulation commands, and the data
    /// source for estimation commands when no CSV input is given.
    #[serde(default)]
    pub dgp: Option<DgpConfig>,
    #[serde(default)]
    pub experiment: ExperimentConfig,
}

fn default_estimator() -> EstimatorChoice {
    EstimatorChoice::Both
}

fn default_out() -> String {
    "out".into()
}

impl RunConfig {
    pub fn learner_spec(&self) -> LearnerSpec {
        self.learner.unwrap_or_default()
    }
}
