use std::path::Path;

use cfgcd_consistency::{DistillConfig, FinetuneConfig, GuidanceMode, GuidedInitConfig};
use cfgcd_schedules::NoiseSchedule;
use cfgcd_teacher::{SolverKind, TeacherConfig};
use cfgcd_toyworld::{EmbedderConfig, WorldConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        Ok(NoiseSchedule::vp_linear(self.steps, self.beta_start, self.beta_end)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub iterations: usize,
    pub lambda_a: f64,
    pub lambda_t: f64,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        let d = FinetuneConfig::default();
        FinetuneSection { iterations: d.distill.iterations, lambda_a: d.lambda_a, lambda_t: d.lambda_t }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Generated and reference rows per condition class.
    pub samples_per_class: usize,
    pub reference_seed: u64,
    /// Metrics are averaged over generations from these seeds.
    pub sample_seeds: Vec<u64>,
    /// Solver, steps and strength used when a teacher is evaluated.
    pub solver: SolverKind,
    pub steps: usize,
    pub w: f64,
    /// Strengths visited by `sweep-w`.
    pub w_list: Vec<f64>,
    pub diversity_seeds: Vec<u64>,
    pub diversity_prompts: usize,
    pub bench_solvers: Vec<SolverKind>,
    pub bench_steps: Vec<usize>,
    /// Prompts written by `sample`.
    pub prompts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples_per_class: 128,
            reference_seed: 999,
            sample_seeds: vec![5],
            solver: SolverKind::Heun,
            steps: 64,
            w: 3.0,
            w_list: vec![3.0, 4.0, 5.0],
            diversity_seeds: vec![0, 1, 2, 3],
            diversity_prompts: 50,
            bench_solvers: vec![SolverKind::DdpmAncestral, SolverKind::Ddim, SolverKind::Heun, SolverKind::Dpmpp2s],
            bench_steps: vec![8, 16],
            prompts: 16,
        }
    }
}

/// Everything a command needs. Every section is optional in the file and
/// falls back to its defaults; unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed of the training or sampling run.
    pub seed: u64,
    /// Seed of the toy world, its dataset and the embedder.
    pub data_seed: u64,
    pub world: WorldConfig,
    pub embedder: EmbedderConfig,
    pub schedule: ScheduleConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub guidance: GuidanceMode,
    pub guided_init: GuidedInitConfig,
    pub finetune: FinetuneSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_seed: 0,
            world: WorldConfig::default(),
            embedder: EmbedderConfig::default(),
            schedule: ScheduleConfig::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            guidance: GuidanceMode::Fixed { w: 3.0 },
            guided_init: GuidedInitConfig::default(),
            finetune: FinetuneSection::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string().replace('\n', " ")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    /// First 16 hex digits of the SHA-256 of the resolved TOML.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            distill: DistillConfig { iterations: self.finetune.iterations, ..self.distill.clone() },
            lambda_a: self.finetune.lambda_a,
            lambda_t: self.finetune.lambda_t,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        self.guidance.validate()?;
        let e = &self.eval;
        if e.samples_per_class <= self.embedder.embed_dim {
            return Err(CliError::Config(format!(
                "eval.samples_per_class must exceed the embedding dimension {}",
                self.embedder.embed_dim
            )));
        }
        if e.sample_seeds.is_empty() || e.steps == 0 || e.prompts == 0 {
            return Err(CliError::Config("eval needs sample seeds, steps and prompts".into()));
        }
        Ok(())
    }
}

/// Parses `--mode` values: `unguided`, `direct`, `fixed` or `variable`.
/// Strength-bearing modes take `w` (default 3).
pub fn parse_mode(name: &str, w: Option<f64>) -> Result<GuidanceMode> {
    let w0 = w.unwrap_or(3.0);
    match name {
        "unguided" => Ok(GuidanceMode::Unguided),
        "direct" => Ok(GuidanceMode::Direct { w: w0 }),
        "fixed" => Ok(GuidanceMode::Fixed { w: w0 }),
        "variable" => Ok(GuidanceMode::variable_default()),
        other => Err(CliError::Usage(format!("unknown mode `{other}` (expected unguided, direct, fixed or variable)"))),
    }
}
