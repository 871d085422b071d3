//! Run configuration, named presets and the configuration hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dsm::TaskConfig;
use crate::dynamics::RelaxationConfig;
use crate::eqprop::Estimator;
use crate::error::{Result, ThermoError};
use crate::substrate::{
    BaseConfig, Block, BlockPartition, CouplingConfig, PerCoordinate, RandomValues,
    SubstrateConfig, SubstrateSpec, TrainableMask,
};

/// Environment variable that replaces the seed list with `n, n+1, …` (same length).
pub const SEED_ENV: &str = "THERMOPROP_SEED";

/// Reads a configuration file; failures count as configuration errors.
pub fn read_config_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| ThermoError::InvalidConfig(format!("cannot read {}: {e}", path.display())))
}

/// Substrate given inline or as a path to a JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SubstrateSource {
    File { file: PathBuf },
    Inline(SubstrateConfig),
}

impl SubstrateSource {
    pub fn resolve(&self, base_dir: Option<&Path>) -> Result<SubstrateConfig> {
        match self {
            SubstrateSource::Inline(c) => Ok(c.clone()),
            SubstrateSource::File { file } => {
                let path = match base_dir {
                    Some(d) if file.is_relative() => d.join(file),
                    _ => file.clone(),
                };
                let text = read_config_text(&path)?;
                Ok(serde_json::from_str(&text)?)
            }
        }
    }
}

/// Log-spaced grid `min … max` with `points` entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BetaGrid {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl Default for BetaGrid {
    fn default() -> Self {
        BetaGrid {
            min: 1e-3,
            max: 1e-1,
            points: 12,
        }
    }
}

impl BetaGrid {
    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.min > 0.0) || !(self.max >= self.min) || !self.max.is_finite() || self.points == 0 {
            return Err(ThermoError::InvalidConfig(format!(
                "beta grid needs 0 < min <= max and points >= 1, got {self:?}"
            )));
        }
        if self.points == 1 {
            return Ok(vec![self.min]);
        }
        let (lo, hi) = (self.min.ln(), self.max.ln());
        let n = (self.points - 1) as f64;
        Ok((0..self.points)
            .map(|i| match i {
                0 => self.min,
                i if i == self.points - 1 => self.max,
                i => (lo + (hi - lo) * i as f64 / n).exp(),
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E1Config {
    pub beta: f64,
}

impl Default for E1Config {
    fn default() -> Self {
        E1Config { beta: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E2Config {
    #[serde(default)]
    pub betas: BetaGrid,
    #[serde(default = "both_estimators")]
    pub estimators: Vec<Estimator>,
}

impl Default for E2Config {
    fn default() -> Self {
        E2Config {
            betas: BetaGrid::default(),
            estimators: both_estimators(),
        }
    }
}

fn both_estimators() -> Vec<Estimator> {
    vec![Estimator::OneSided, Estimator::Symmetric]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct E3Config {
    #[serde(default)]
    pub betas: BetaGrid,
    /// Stochastic dynamics for the sweep; needs finite `beta_phys` and a readout window.
    pub dynamics: RelaxationConfig,
    /// Seed of the fixed batch whose estimator noise is measured.
    #[serde(default)]
    pub data_seed: u64,
}

impl Default for E3Config {
    fn default() -> Self {
        E3Config {
            betas: BetaGrid::default(),
            dynamics: RelaxationConfig::langevin(2000, 1e10, 20.0, 0),
            data_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub beta: f64,
    #[serde(default = "symmetric")]
    pub estimator: Estimator,
    /// Size of the fixed evaluation batch used for the loss curves.
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn symmetric() -> Estimator {
    Estimator::Symmetric
}

fn default_eval_batch() -> usize {
    32
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 100,
            learning_rate: 1e-2,
            beta: 0.05,
            estimator: Estimator::Symmetric,
            eval_batch: default_eval_batch(),
        }
    }
}

/// Everything an experiment run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub substrate: SubstrateSource,
    /// Dynamics used by the estimators (the oracle always uses exact equilibria).
    pub dynamics: RelaxationConfig,
    pub task: TaskConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub e1: E1Config,
    #[serde(default)]
    pub e2: E2Config,
    #[serde(default)]
    pub e3: E3Config,
    #[serde(default)]
    pub train: TrainConfig,
    /// Output root; not part of the hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config and inlines a file-referenced substrate.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&read_config_text(path)?)?;
        let inline = cfg.substrate.resolve(path.parent())?;
        cfg.substrate = SubstrateSource::Inline(inline);
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(ThermoError::InvalidConfig("seed list is empty".into()));
        }
        self.dynamics.validate()?;
        self.e3.dynamics.validate()?;
        self.task.validate()?;
        self.e2.betas.values()?;
        self.e3.betas.values()?;
        if !(self.e1.beta > 0.0) || !(self.train.beta > 0.0) {
            return Err(ThermoError::InvalidConfig("nudge beta must be positive".into()));
        }
        if !(self.train.learning_rate >= 0.0) || self.train.eval_batch == 0 {
            return Err(ThermoError::InvalidConfig(
                "learning_rate must be >= 0 and eval_batch >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn substrate_config(&self) -> Result<SubstrateConfig> {
        self.substrate.resolve(None)
    }

    pub fn build_substrate(&self) -> Result<SubstrateSpec> {
        self.substrate_config()?.build()
    }

    /// SHA-256 over the compact JSON of the config with `out_dir` removed,
    /// truncated to 16 hex digits.
    pub fn config_hash(&self) -> String {
        let canonical = RunConfig {
            out_dir: None,
            ..self.clone()
        };
        let text = serde_json::to_string(&canonical).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn apply_seed_env(&mut self) -> Result<()> {
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let base: u64 = v.trim().parse().map_err(|_| {
                    ThermoError::InvalidConfig(format!("{SEED_ENV}={v:?} is not an unsigned integer"))
                })?;
                let n = self.seeds.len() as u64;
                self.seeds = (base..base + n).collect();
                Ok(())
            }
            Err(_) => Ok(()),
        }
    }
}

pub const PRESETS: [&str; 4] = ["paper-e1", "paper-exact", "desk-small", "sweep-d8"];

pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "paper-e1" => Ok(paper_e1()),
        "paper-exact" => Ok(paper_exact()),
        "desk-small" => Ok(desk_small()),
        "sweep-d8" => Ok(sweep_d8()),
        _ => Err(ThermoError::InvalidConfig(format!(
            "unknown preset {name:?}; available: {}",
            PRESETS.join(", ")
        ))),
    }
}

/// Quadratic substrate with a seeded bias on hidden and output units and
/// all-pairs couplings shrunk onto the stiffness floor.
fn substrate(
    input: usize,
    hidden: usize,
    output: usize,
    modules: Vec<usize>,
    k: usize,
    gain: f64,
) -> SubstrateConfig {
    let l = modules.len();
    SubstrateConfig {
        partition: BlockPartition {
            input_dim: input,
            hidden_dim: hidden,
            output_dim: output,
            module_sizes: modules,
            sigma_channel: true,
        },
        base: BaseConfig {
            a: PerCoordinate::Uniform(1.0),
            b0: PerCoordinate::Random(RandomValues {
                seed: 1,
                mean: 0.0,
                std: 0.5,
                blocks: Some(vec![Block::Hidden, Block::Output]),
            }),
            kappa: PerCoordinate::Uniform(0.0),
        },
        couplings: CouplingConfig::all_pairs(l, k, 7, gain),
        lambda_floor: 0.1,
        rescale: true,
        trainable: TrainableMask::default(),
    }
}

/// D = 64, k = 16, four modules of 16, K = 300 deterministic steps.
pub fn paper_e1() -> RunConfig {
    RunConfig {
        name: "paper-e1".into(),
        substrate: SubstrateSource::Inline(substrate(17, 31, 16, vec![16; 4], 16, 3.0)),
        dynamics: RelaxationConfig::finite(300),
        task: TaskConfig::new(16, 8, 0),
        seeds: (0..10).collect(),
        e1: E1Config { beta: 0.1 },
        e2: E2Config::default(),
        e3: E3Config::default(),
        train: TrainConfig::default(),
        out_dir: None,
    }
}

/// The paper-e1 substrate relaxed to exact equilibria, 64 seeds per point.
pub fn paper_exact() -> RunConfig {
    RunConfig {
        name: "paper-exact".into(),
        dynamics: RelaxationConfig::exact(),
        task: TaskConfig::new(16, 4, 0),
        seeds: (0..64).collect(),
        e1: E1Config { beta: 1e-3 },
        ..paper_e1()
    }
}

/// D = 16 fast preset with exact equilibria.
pub fn desk_small() -> RunConfig {
    RunConfig {
        name: "desk-small".into(),
        substrate: SubstrateSource::Inline(substrate(5, 7, 4, vec![4; 4], 2, 3.0)),
        dynamics: RelaxationConfig::exact(),
        task: TaskConfig::new(4, 16, 0),
        seeds: (0..10).collect(),
        e1: E1Config { beta: 1e-3 },
        e2: E2Config::default(),
        e3: E3Config::default(),
        train: TrainConfig::default(),
        out_dir: None,
    }
}

/// D = 8 bias/variance sweep under Langevin dynamics.
pub fn sweep_d8() -> RunConfig {
    RunConfig {
        name: "sweep-d8".into(),
        substrate: SubstrateSource::Inline(substrate(3, 3, 2, vec![4, 4], 2, 3.0)),
        dynamics: RelaxationConfig::exact(),
        task: TaskConfig::new(2, 4, 0),
        seeds: (0..64).collect(),
        e1: E1Config { beta: 1e-3 },
        e2: E2Config::default(),
        e3: E3Config::default(),
        train: TrainConfig::default(),
        out_dir: None,
    }
}
