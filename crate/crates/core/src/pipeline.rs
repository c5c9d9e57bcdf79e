//! The end-to-end experiment as library calls: each stage takes the config
//! and the artifacts of earlier stages, and derives its random streams from
//! the master seed.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::config::Config;
use crate::disambiguate::{indicative_frames, select_hypothesis, ChoiceManifest, DisambiguateError, HypothesisChoice};
use crate::episode::Policy;
use crate::extrapolate::{
    collect_labeled, collect_unlabeled, train_diverse_heads, ExtrapolateError, HypothesisPair, LabeledSet,
    UnlabeledSet,
};
use crate::harness::{
    detect_misgeneralisation, evaluate, four_agent_report, BaselinePolicy, EvalReport, FourAgentReport,
    MisgenVerdict,
};
use crate::levelgen::{mix_seed, CoinMode, GenerateError};
use crate::ppo::{train_policy, NetPolicy, PolicyNet, PpoError, RewardSource, TrainSeeds, TrainingLog};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Extrapolate(#[from] ExtrapolateError),
    #[error(transparent)]
    Disambiguate(#[from] DisambiguateError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("gate failed: {0}")]
    Gate(String),
}

const SALT_TRAIN: u64 = 0x7a1;
const SALT_EXPLORE: u64 = 0xe8;
const SALT_COLLECT: u64 = 0xc011;
const SALT_FINETUNE: u64 = 0xf17e;
const SALT_EVAL: u64 = 0xe7a1;

pub fn eval_rng_seed(cfg: &Config) -> u64 {
    mix_seed(cfg.seed, SALT_EVAL)
}

/// Standard agent: PPO on the training distribution with the true reward.
pub fn train_standard(cfg: &Config) -> Result<(PolicyNet, TrainingLog), PipelineError> {
    let seeds = TrainSeeds {
        run: mix_seed(cfg.seed, SALT_TRAIN),
        probe_base: cfg.train.probe_base,
    };
    Ok(train_policy(
        &cfg.train_distribution(),
        RewardSource::EnvTrue,
        None,
        cfg.train.steps,
        &cfg.ppo_hyper(true),
        seeds,
        None,
    )?)
}

/// Unlabeled shifted-distribution observations from the baseline explorer.
pub fn explore(cfg: &Config) -> Result<UnlabeledSet, PipelineError> {
    let e = &cfg.explore;
    Ok(collect_unlabeled(
        &mut BaselinePolicy::new(e.cyclic),
        &cfg.distribution(CoinMode::TestRandom),
        e.first_seed,
        e.episodes,
        e.steps_per_episode,
        mix_seed(cfg.seed, SALT_EXPLORE),
    )?)
}

/// Labeled training-distribution transitions from `policy`.
pub fn collect(cfg: &Config, policy: &PolicyNet) -> Result<LabeledSet, PipelineError> {
    let c = &cfg.collect;
    Ok(collect_labeled(
        &mut NetPolicy::new(policy.clone(), "standard"),
        &cfg.distribution(CoinMode::TrainRight),
        c.first_seed,
        c.episodes,
        c.neg_per_pos,
        mix_seed(cfg.seed, SALT_COLLECT),
    )?)
}

/// Diversified hypothesis pair. The pair is returned even when a gate
/// fails; [`check_pair`] reports that separately.
pub fn extrapolate(cfg: &Config, labeled: &LabeledSet, unlabeled: &UnlabeledSet) -> Result<HypothesisPair, PipelineError> {
    Ok(train_diverse_heads(labeled, unlabeled, &cfg.diverse_hyper())?)
}

/// Fails when either head misses the labeled-holdout accuracy threshold.
pub fn check_pair(pair: &HypothesisPair) -> Result<(), PipelineError> {
    let r = &pair.report;
    if r.accuracy_ok() {
        Ok(())
    } else {
        Err(PipelineError::Gate(format!(
            "labeled holdout accuracy {:?} below {}",
            r.holdout_accuracy, r.min_accuracy
        )))
    }
}

/// Panel plus one-bit choice; `timestamp` is recorded in the manifest.
pub fn disambiguate(
    cfg: &Config,
    pair: &HypothesisPair,
    unlabeled: &UnlabeledSet,
    choice: HypothesisChoice,
    timestamp: u64,
) -> Result<(RewardSource, ChoiceManifest, crate::disambiguate::IndicativePanel), PipelineError> {
    let panel = indicative_frames(pair, unlabeled, cfg.disambiguate.k)?;
    let (source, manifest) = select_hypothesis(&panel, choice, timestamp);
    Ok((source, manifest, panel))
}

/// Continues `init` on the fine-tuning seeds of the shifted distribution
/// with a learned reward. The environment reward is never read.
pub fn finetune(
    cfg: &Config,
    init: &PolicyNet,
    pair: &HypothesisPair,
    source: RewardSource,
) -> Result<(PolicyNet, TrainingLog), PipelineError> {
    let salt = match source {
        RewardSource::EnvTrue => 0,
        RewardSource::Model { head } => 1 + head as u64,
        RewardSource::Prudent => 9,
    };
    let seeds = TrainSeeds {
        run: mix_seed(mix_seed(cfg.seed, SALT_FINETUNE), salt),
        probe_base: 0,
    };
    Ok(train_policy(
        &cfg.finetune_distribution(),
        source,
        Some(pair),
        cfg.finetune.steps,
        &cfg.ppo_hyper(false),
        seeds,
        Some(init.clone()),
    )?)
}

/// Shifted-distribution evaluation on the configured seeds.
pub fn eval_shifted(cfg: &Config, policy: &mut dyn Policy) -> Result<EvalReport, PipelineError> {
    Ok(evaluate(
        policy,
        &cfg.distribution(CoinMode::TestRandom),
        cfg.eval.n_levels,
        cfg.eval.seed_base,
        eval_rng_seed(cfg),
    )?)
}

/// Held-out training-distribution evaluation.
pub fn eval_train(cfg: &Config, policy: &mut dyn Policy) -> Result<EvalReport, PipelineError> {
    Ok(evaluate(
        policy,
        &cfg.distribution(CoinMode::TrainRight),
        cfg.eval.train_n_levels,
        cfg.eval.train_seed_base,
        eval_rng_seed(cfg),
    )?)
}

pub fn detect(cfg: &Config, policy: &mut dyn Policy) -> Result<MisgenVerdict, PipelineError> {
    let d = &cfg.detect;
    Ok(detect_misgeneralisation(
        policy,
        &cfg.distribution(CoinMode::TestRandom),
        d.n_levels,
        (d.train_seed_base, d.test_seed_base),
        eval_rng_seed(cfg),
        cfg.thresholds(),
    )?)
}

/// Everything the full pipeline produces.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub standard: PolicyNet,
    pub standard_log: TrainingLog,
    pub unlabeled: UnlabeledSet,
    pub labeled: LabeledSet,
    pub pair: HypothesisPair,
    pub choice: ChoiceManifest,
    pub ace: PolicyNet,
    pub prudent: PolicyNet,
    pub report: FourAgentReport,
}

/// train, explore, collect, extrapolate, disambiguate with a pinned bit,
/// fine-tune both learned-reward agents, then the four-agent report.
pub fn run_pipeline(cfg: &Config, choice: HypothesisChoice, timestamp: u64) -> Result<PipelineOutcome, PipelineError> {
    let (standard, standard_log) = train_standard(cfg)?;
    let unlabeled = explore(cfg)?;
    let labeled = collect(cfg, &standard)?;
    let pair = extrapolate(cfg, &labeled, &unlabeled)?;
    check_pair(&pair)?;
    let (source, choice, _) = disambiguate(cfg, &pair, &unlabeled, choice, timestamp)?;
    let (ace, _) = finetune(cfg, &standard, &pair, source)?;
    let (prudent, _) = finetune(cfg, &standard, &pair, RewardSource::Prudent)?;
    let mut agents = (
        BaselinePolicy::default(),
        NetPolicy::new(standard.clone(), "standard"),
        NetPolicy::new(prudent.clone(), "prudent"),
        NetPolicy::new(ace.clone(), "ace"),
    );
    let report = four_agent_report(
        [&mut agents.0, &mut agents.1, &mut agents.2, &mut agents.3],
        &cfg.distribution(CoinMode::TestRandom),
        cfg.eval.n_levels,
        cfg.eval.seed_base,
        eval_rng_seed(cfg),
    )?;
    Ok(PipelineOutcome {
        standard,
        standard_log,
        unlabeled,
        labeled,
        pair,
        choice,
        ace,
        prudent,
        report,
    })
}

pub fn save_policy(policy: &PolicyNet, path: &Path, meta: serde_json::Value) -> Result<(), PipelineError> {
    let meta = serde_json::json!({ "kind": "policy", "info": meta });
    Ok(checkpoint::save(&policy.net, path, meta)?)
}

pub fn load_policy(path: &Path) -> Result<PolicyNet, PipelineError> {
    let (net, _) = checkpoint::load::<f32>(path)?;
    Ok(PolicyNet::from_network(net)?)
}

// ---------------------------------------------------------------------------
// Run manifest

pub const RUN_MANIFEST_FORMAT: &str = "coinlab-run/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactHash {
    pub path: String,
    pub sha256: String,
}

impl ArtifactHash {
    pub fn of(path: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String, PipelineError> {
    let bytes = fs::read(path).map_err(|source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// One executed stage: enough to re-run it with identical inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub inputs: Vec<ArtifactHash>,
    pub outputs: Vec<ArtifactHash>,
    pub config: Config,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<ChoiceManifest>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub format: String,
    pub tool_version: String,
    pub stages: Vec<StageRecord>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            format: RUN_MANIFEST_FORMAT.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
        }
    }
}

impl RunManifest {
    pub fn load_or_default(path: &Path) -> Result<Self, PipelineError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let io = |source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = fs::read_to_string(path).map_err(io)?;
        serde_json::from_str(&text).map_err(|e| io(std::io::Error::new(std::io::ErrorKind::InvalidData, e)))
    }

    /// Adds `record`, replacing an earlier record of the same stage that
    /// wrote the same outputs.
    pub fn record(&mut self, record: StageRecord) {
        let paths = |r: &StageRecord| r.outputs.iter().map(|a| a.path.clone()).collect::<Vec<_>>();
        match self
            .stages
            .iter_mut()
            .find(|s| s.stage == record.stage && paths(s) == paths(&record))
        {
            Some(slot) => *slot = record,
            None => self.stages.push(record),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        crate::checkpoint::ensure_parent(path).and_then(|()| fs::write(path, text)).map_err(|source| PipelineError::Io {
            path: path.to_path_buf(),
            source,
        })
    }
}
