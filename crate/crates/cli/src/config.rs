//! JSON run configuration. Every section is optional; each command checks
//! for the sections it needs. Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use swg_core::bench::BenchConfig;
use swg_core::critic::{CriticConfig, WeightSpec};
use swg_core::denoiser::LrSchedule;
use swg_core::guidance::{ClipBox, GuidanceConfig, Selection};
use swg_core::nn::Architecture;
use swg_core::schedule::{SamplerKind, ScheduleKind};
use swg_core::toy::{Energy, ToyKind};

use crate::fail::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed. `--seed` overrides it, and it replaces the seed of every
    /// section in the resolved config.
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic: Option<CriticConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval: Option<EvalSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Toy actions weighted by `exp(−β ξ(a))`. Give `beta` for a single
    /// fixed β, or `beta_max` for a β-conditioned dataset over `[0, beta_max]`.
    Toy {
        distribution: ToyKind,
        #[serde(default)]
        noise: Option<f64>,
        n: usize,
        energy: Energy,
        #[serde(default)]
        beta: Option<f64>,
        #[serde(default)]
        beta_max: Option<f64>,
    },
    /// Contextual-bandit transitions.
    Bandit { n: usize, noise: f64 },
    /// A directory written by `generate-data`.
    Dir { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub arch: Architecture,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleKind,
    /// Number of diffusion steps `K`.
    #[serde(default = "d_k")]
    pub steps: usize,
}

fn d_schedule() -> ScheduleKind {
    ScheduleKind::Cosine
}
fn d_k() -> usize {
    100
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// Joint action–weight denoiser on an action dataset.
    #[default]
    Denoiser,
    /// Double-Q critic and expectile value on transitions.
    Critic,
    /// State-conditioned denoiser on transitions, weighted by a trained critic.
    Policy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default)]
    pub target: TrainTarget,
    #[serde(default = "d_train_steps")]
    pub steps: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_log")]
    pub log_every: usize,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Policy target only: turns `(Q, V)` into the weight channel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightSpec>,
    /// Policy target only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub critic_checkpoint: Option<PathBuf>,
}

fn d_train_steps() -> usize {
    20_000
}
fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    1e-3
}
fn d_log() -> usize {
    100
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleSection {
    pub n: usize,
    #[serde(default = "d_rho")]
    pub rho: f64,
    /// When set, one run per value replaces the single `rho`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rhos: Option<Vec<f64>>,
    #[serde(default = "d_clamp")]
    pub clamp_eps: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clip: Option<ClipBox>,
    /// β for β-conditioned models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// State for state-conditioned models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resample: Option<ResampleSection>,
    /// Compare against the weighted toy target built from the data section.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceSection>,
}

fn d_rho() -> f64 {
    1.0
}
fn d_clamp() -> f64 {
    1e-6
}

impl SampleSection {
    pub fn rho_values(&self) -> Vec<f64> {
        self.rhos.clone().unwrap_or_else(|| vec![self.rho])
    }

    pub fn guidance(&self, rho: f64) -> GuidanceConfig {
        GuidanceConfig {
            rho,
            clamp_eps: self.clamp_eps,
            sampler: self.sampler,
            clip: self.clip.clone(),
            max_step: self.max_step,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleSection {
    /// Candidates per returned action.
    pub m: usize,
    pub critic_checkpoint: PathBuf,
    pub weight: WeightSpec,
    #[serde(default)]
    pub selection: Selection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceSection {
    /// Fresh data draws the target is importance-resampled from.
    #[serde(default = "d_pool")]
    pub pool: usize,
    /// Permutations for the two-sample test; 0 skips it.
    #[serde(default)]
    pub permutations: usize,
}

fn d_pool() -> usize {
    200_000
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Sample CSV to score against the toy target. Not needed when
    /// `--checkpoint` names a critic.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "d_pool")]
    pub pool: usize,
    #[serde(default)]
    pub permutations: usize,
    /// Critic evaluation: states checked against the Monte-Carlo expectile.
    #[serde(default = "d_states")]
    pub states: usize,
    #[serde(default = "d_draws")]
    pub draws: usize,
    /// Critic evaluation: held-out transitions for the Q error.
    #[serde(default = "d_held")]
    pub held_out: usize,
}

fn d_states() -> usize {
    200
}
fn d_draws() -> usize {
    50_000
}
fn d_held() -> usize {
    2000
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<(Self, Vec<u8>)> {
        let bytes = std::fs::read(path).map_err(|e| CliError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: Self = serde_json::from_slice(&bytes).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        Ok((cfg, bytes))
    }

    /// Applies the seed override and pushes the master seed into every
    /// section that carries its own.
    pub fn resolve(mut self, seed: Option<u64>) -> CliResult<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(c) = &mut self.critic {
            c.seed = self.seed;
            c.validate().map_err(CliError::config)?;
        }
        if let Some(b) = &mut self.bench {
            b.seed = self.seed;
            b.validate().map_err(CliError::config)?;
        }
        if let Some(DataSection::Toy { beta, beta_max, n, .. }) = &self.data {
            match (beta, beta_max) {
                (Some(_), Some(_)) => return Err(CliError::config("data: give either `beta` or `beta_max`, not both")),
                (None, None) => return Err(CliError::config("data: toy data needs `beta` or `beta_max`")),
                _ => {}
            }
            if *n == 0 {
                return Err(CliError::config("data: n must be ≥ 1"));
            }
        }
        if let Some(s) = &self.sample {
            if s.n == 0 {
                return Err(CliError::config("sample: n must be ≥ 1"));
            }
            for rho in s.rho_values() {
                s.guidance(rho).validate().map_err(CliError::config)?;
            }
            if s.rhos.as_ref().is_some_and(|r| r.is_empty()) {
                return Err(CliError::config("sample: rhos must not be empty"));
            }
        }
        Ok(self)
    }

    pub fn need<'a, T>(section: &'a Option<T>, name: &str) -> CliResult<&'a T> {
        section
            .as_ref()
            .ok_or_else(|| CliError::config(format!("this command needs a `{name}` section")))
    }
}
