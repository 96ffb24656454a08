//! Run configuration and named profiles.

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::connector::ConnectorConfig;
use crate::error::{Error, Result};
use crate::heads::HeadsConfig;
use crate::memory::MemoryConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub connector: ConnectorConfig,
    pub memory: MemoryConfig,
    pub heads: HeadsConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            connector: ConnectorConfig::default(),
            memory: MemoryConfig::default(),
            heads: HeadsConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.memory.validate()?;
        self.heads.validate()?;
        let d = self.backbone.width;
        for (what, heads) in [("connector", self.connector.heads), ("heads", self.heads.heads)] {
            if heads == 0 || d % heads != 0 {
                return Err(Error::Config(format!("{what}: width {d} not divisible by {heads} heads")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: u64,
    /// Concurrent episode slots B.
    pub batch: usize,
    /// Share of steps in the backbone-training phase.
    pub phase1_fraction: f64,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Truncated backprop horizon; only 1 is supported.
    pub tbptt_horizon: usize,
    /// Reshuffle the episode order every epoch.
    pub shuffle: bool,
    /// Keep the backbone trainable in the memory phase.
    pub trainable_backbone: bool,
    pub checkpoint_every: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 60_000,
            batch: 16,
            phase1_fraction: 0.3,
            lr: 5e-5,
            lr_min: 1e-7,
            weight_decay: 0.01,
            grad_clip: 1.0,
            tbptt_horizon: 1,
            shuffle: true,
            trainable_backbone: false,
            checkpoint_every: 5_000,
            log_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tbptt_horizon != 1 {
            return Err(Error::Config(format!("tbptt_horizon must be 1, got {}", self.tbptt_horizon)));
        }
        if !(self.lr > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr) {
            return Err(Error::Config("learning rates must be positive with lr_min <= lr".into()));
        }
        if !(0.0..=1.0).contains(&self.phase1_fraction) {
            return Err(Error::Config("phase1_fraction must be in [0, 1]".into()));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(Error::Config("batch and steps must be positive".into()));
        }
        if self.weight_decay < 0.0 || self.grad_clip < 0.0 {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn phase1_steps(&self) -> u64 {
        (self.steps as f64 * self.phase1_fraction).round() as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed_base: u64,
    pub ddim_steps: usize,
    /// Actions executed from each predicted chunk before re-predicting.
    pub execute: usize,
    pub perturb: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { trials: 100, seed_base: 1_000_000, ddim_steps: 20, execute: 4, perturb: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub tasks: Vec<String>,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { tasks: crate::envsuite::TaskId::ALL.iter().map(|t| t.name().to_string()).collect(), episodes: 100, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub profile: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub data: DataConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::profile("desk").unwrap()
    }
}

pub const PROFILES: [&str; 3] = ["desk", "paper", "tiny"];

impl Config {
    /// `desk` is the default workstation scale, `paper` keeps the full-scale
    /// hyperparameters, `tiny` is sized for a single CPU core.
    pub fn profile(name: &str) -> Result<Self> {
        let mut c = Config {
            profile: name.to_string(),
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            data: DataConfig::default(),
        };
        match name {
            "desk" => {}
            "paper" => {
                c.model.connector.layers = 12;
                c.model.heads.chunk = 30;
                c.model.memory.n_frame = 64;
                c.model.memory.n_chunk = 64;
                c.train.batch = 64;
                c.train.steps = 150_000;
                c.eval.execute = 15;
            }
            "tiny" => {
                let m = &mut c.model;
                m.backbone.width = 32;
                m.backbone.heads = 2;
                m.backbone.layers = 2;
                m.connector.layers = 2;
                m.connector.heads = 2;
                m.heads.heads = 2;
                m.heads.diffusion_layers = 1;
                m.heads.noise_samples = 4;
                m.memory.n_action = 4;
                m.memory.n_hindsight = 4;
                m.memory.n_frame = 8;
                m.memory.n_chunk = 8;
                c.train.batch = 8;
                c.train.steps = 3_000;
                c.train.lr = 1e-3;
                c.train.lr_min = 1e-5;
                c.train.checkpoint_every = 1_000;
                c.data.episodes = 100;
            }
            other => return Err(Error::Config(format!("unknown profile `{other}` (expected one of {PROFILES:?})"))),
        }
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.execute == 0 || self.eval.execute > self.model.heads.chunk {
            return Err(Error::Config(format!("eval.execute must be in 1..={}", self.model.heads.chunk)));
        }
        if self.eval.trials == 0 {
            return Err(Error::Config("eval.trials must be at least 1".into()));
        }
        for t in &self.data.tasks {
            crate::envsuite::TaskId::parse(t)?;
        }
        Ok(())
    }
}
