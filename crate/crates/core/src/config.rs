//! Pipeline configuration: one TOML file with a flat section per stage.
//! Every field has a default, so an empty file is a valid config.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extrapolate::DiverseHyper;
use crate::harness::MisgenThresholds;
use crate::levelgen::{CoinMode, LevelDistribution, SeedSpace};
use crate::nn::AdamHyper;
use crate::ppo::PpoHyper;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Master seed; every stage derives its own streams from it.
    pub seed: u64,
    pub levels: LevelsConfig,
    pub train: TrainConfig,
    pub explore: ExploreConfig,
    pub collect: CollectConfig,
    pub extrapolate: ExtrapolateConfig,
    pub disambiguate: DisambiguateConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
    pub detect: DetectConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            levels: LevelsConfig::default(),
            train: TrainConfig::default(),
            explore: ExploreConfig::default(),
            collect: CollectConfig::default(),
            extrapolate: ExtrapolateConfig::default(),
            disambiguate: DisambiguateConfig::default(),
            finetune: FinetuneConfig::default(),
            eval: EvalConfig::default(),
            detect: DetectConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LevelsConfig {
    pub width: usize,
    pub height: usize,
    pub obstacle_density: f64,
    pub monster_min: usize,
    pub monster_max: usize,
    pub platform_density: f64,
}

impl Default for LevelsConfig {
    fn default() -> Self {
        let d = LevelDistribution::train();
        Self {
            width: d.width,
            height: d.height,
            obstacle_density: d.obstacle_density,
            monster_min: d.monster_count_range.0,
            monster_max: d.monster_count_range.1,
            platform_density: d.platform_density,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub rollout_steps: usize,
    pub n_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        let h = PpoHyper::default();
        Self {
            hidden: vec![64, 64],
            lr: h.adam.lr,
            gamma: h.gamma,
            lambda: h.lambda,
            clip: h.clip,
            epochs: h.epochs,
            minibatch: h.minibatch,
            rollout_steps: h.rollout_steps,
            n_envs: h.n_envs,
            entropy_coef: h.entropy_coef,
            value_coef: h.value_coef,
            max_grad_norm: h.max_grad_norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub seed_start: u64,
    pub seed_end: u64,
    pub probe_levels: usize,
    pub probe_every: usize,
    pub probe_base: u64,
    pub ppo: PpoConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600_000,
            seed_start: 0,
            seed_end: 100_000,
            probe_levels: 16,
            probe_every: 10,
            probe_base: 500_000,
            ppo: PpoConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExploreConfig {
    pub first_seed: u64,
    pub episodes: usize,
    pub steps_per_episode: u32,
    pub cyclic: bool,
}

impl Default for ExploreConfig {
    fn default() -> Self {
        Self {
            first_seed: 2_000_000,
            episodes: 50,
            steps_per_episode: 50,
            cyclic: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub first_seed: u64,
    pub episodes: usize,
    pub neg_per_pos: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            first_seed: 1_000_000,
            episodes: 200,
            neg_per_pos: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtrapolateConfig {
    pub lambda_mi: f64,
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub min_disagreement: f64,
}

impl Default for ExtrapolateConfig {
    fn default() -> Self {
        let h = DiverseHyper::default();
        Self {
            lambda_mi: h.lambda_mi,
            epochs: h.epochs,
            labeled_batch: h.labeled_batch,
            unlabeled_batch: h.unlabeled_batch,
            hidden: vec![64, 32],
            lr: h.adam.lr,
            holdout_fraction: h.holdout_fraction,
            min_accuracy: h.min_accuracy,
            min_disagreement: h.min_disagreement,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisambiguateConfig {
    pub k: usize,
    /// Pinned choice; when absent the CLI prompts.
    pub bit: Option<u8>,
    /// Pinned manifest timestamp; when absent the wall clock is used.
    pub timestamp: Option<u64>,
}

impl Default for DisambiguateConfig {
    fn default() -> Self {
        Self {
            k: crate::disambiguate::DEFAULT_PANEL_K,
            bit: None,
            timestamp: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub seed_start: u64,
    pub seed_end: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 400_000,
            seed_start: 3_000_000,
            seed_end: 3_100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Shifted-distribution evaluation levels.
    pub n_levels: usize,
    pub seed_base: u64,
    /// Held-out training-distribution evaluation levels.
    pub train_n_levels: usize,
    pub train_seed_base: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_levels: 5_000,
            seed_base: 9_000_000,
            train_n_levels: 1_000,
            train_seed_base: 8_000_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub n_levels: usize,
    pub train_seed_base: u64,
    pub test_seed_base: u64,
    pub hi: f64,
    pub lo: f64,
    pub eps: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let t = MisgenThresholds::default();
        Self {
            n_levels: 1_000,
            train_seed_base: 8_000_000,
            test_seed_base: 9_000_000,
            hi: t.hi,
            lo: t.lo,
            eps: t.eps,
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.to_string()));
        if self.levels.monster_min > self.levels.monster_max {
            return bad("levels.monster_min exceeds levels.monster_max");
        }
        if self.train.seed_start >= self.train.seed_end {
            return bad("train seed range is empty");
        }
        if self.finetune.seed_start >= self.finetune.seed_end {
            return bad("finetune seed range is empty");
        }
        if self.train.ppo.n_envs == 0 || self.train.ppo.rollout_steps < self.train.ppo.n_envs {
            return bad("train.ppo needs n_envs >= 1 and rollout_steps >= n_envs");
        }
        if self.disambiguate.k == 0 {
            return bad("disambiguate.k must be at least 1");
        }
        if matches!(self.disambiguate.bit, Some(b) if b > 1) {
            return bad("disambiguate.bit must be 0 or 1");
        }
        if self.eval.n_levels == 0 || self.eval.train_n_levels == 0 || self.detect.n_levels == 0 {
            return bad("evaluation level counts must be positive");
        }
        Ok(())
    }

    pub fn distribution(&self, mode: CoinMode) -> LevelDistribution {
        let l = &self.levels;
        LevelDistribution {
            mode,
            width: l.width,
            height: l.height,
            obstacle_density: l.obstacle_density,
            monster_count_range: (l.monster_min, l.monster_max),
            platform_density: l.platform_density,
            seed_space: SeedSpace::FULL,
        }
    }

    pub fn train_distribution(&self) -> LevelDistribution {
        self.distribution(CoinMode::TrainRight).with_seed_space(SeedSpace {
            start: self.train.seed_start,
            end: self.train.seed_end,
        })
    }

    pub fn finetune_distribution(&self) -> LevelDistribution {
        self.distribution(CoinMode::TestRandom).with_seed_space(SeedSpace {
            start: self.finetune.seed_start,
            end: self.finetune.seed_end,
        })
    }

    pub fn ppo_hyper(&self, probes: bool) -> PpoHyper {
        let p = &self.train.ppo;
        PpoHyper {
            gamma: p.gamma,
            lambda: p.lambda,
            clip: p.clip,
            epochs: p.epochs,
            minibatch: p.minibatch,
            rollout_steps: p.rollout_steps,
            n_envs: p.n_envs,
            entropy_coef: p.entropy_coef,
            value_coef: p.value_coef,
            max_grad_norm: p.max_grad_norm,
            adam: AdamHyper {
                lr: p.lr,
                ..AdamHyper::default()
            },
            hidden: p.hidden.clone(),
            probe_levels: if probes { self.train.probe_levels } else { 0 },
            probe_every: self.train.probe_every,
        }
    }

    pub fn diverse_hyper(&self) -> DiverseHyper {
        let e = &self.extrapolate;
        DiverseHyper {
            lambda_mi: e.lambda_mi,
            epochs: e.epochs,
            labeled_batch: e.labeled_batch,
            unlabeled_batch: e.unlabeled_batch,
            hidden: e.hidden.clone(),
            adam: AdamHyper {
                lr: e.lr,
                ..AdamHyper::default()
            },
            holdout_fraction: e.holdout_fraction,
            min_accuracy: e.min_accuracy,
            min_disagreement: e.min_disagreement,
            seed: crate::levelgen::mix_seed(self.seed, 0xd1e),
        }
    }

    pub fn thresholds(&self) -> MisgenThresholds {
        MisgenThresholds {
            hi: self.detect.hi,
            lo: self.detect.lo,
            eps: self.detect.eps,
        }
    }
}
