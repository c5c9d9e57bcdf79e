//! PPO with a clipped surrogate and generalised advantage estimation.
//!
//! [`train_policy`] runs the whole loop: rollouts over `n_envs` environments
//! stepped in lock-free sequence by one worker, GAE, advantage
//! normalisation, and `epochs` passes of minibatch Adam updates. Rewards come
//! from a [`RewardSource`]; the environment's reward channel is only ever
//! read for [`RewardSource::EnvTrue`], which is refused on the shifted
//! distribution.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{step_with_path, Action, EnvState};
use crate::episode::{simulate_episode, Policy, StepView};
use crate::extrapolate::HypothesisPair;
use crate::level::Level;
use crate::levelgen::{generate_level, mix_seed, CoinMode, GenerateError, LevelDistribution};
use crate::nn::{log_softmax, softmax, Adam, AdamHyper, GradientTape, HeadSpec, Network, NetworkSpec, NnError, Param};
use crate::obs::{encode_into, input_len, render_frame, Observation, DEFAULT_WINDOW};

/// Threshold at which a reward head's probability counts as "reward".
pub const MODEL_REWARD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error("length mismatch: {0}")]
    Shape(String),
    #[error("gamma and lambda must lie in [0, 1] (got {gamma}, {lambda})")]
    Discount { gamma: f64, lambda: f64 },
    #[error("reward source {reward:?} is not allowed on the {mode:?} distribution")]
    IllegalRewardSource { reward: RewardSource, mode: CoinMode },
    #[error("reward source {0:?} needs a hypothesis pair")]
    MissingRewardModel(RewardSource),
    #[error("non-finite PPO loss at iteration {iteration}, epoch {epoch}: {diagnostics}")]
    NonFiniteLoss {
        iteration: usize,
        epoch: usize,
        diagnostics: String,
    },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
}

/// Where the learner's reward comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RewardSource {
    /// The environment's own reward. Training distribution only.
    EnvTrue,
    /// One learned reward head, paid once per episode when its probability
    /// first reaches the threshold.
    Model { head: usize },
    /// The average of both heads' once-per-episode rewards.
    Prudent,
}

impl RewardSource {
    pub fn check_legal(self, mode: CoinMode) -> Result<(), PpoError> {
        if self == RewardSource::EnvTrue && mode == CoinMode::TestRandom {
            return Err(PpoError::IllegalRewardSource { reward: self, mode });
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoHyper {
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub epochs: usize,
    pub minibatch: usize,
    /// Steps collected per iteration, summed over all environments.
    pub rollout_steps: usize,
    pub n_envs: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub max_grad_norm: f64,
    pub adam: AdamHyper,
    pub hidden: Vec<usize>,
    /// Held-out training-distribution levels scored every `probe_every`
    /// iterations (only when the reward source is `EnvTrue`).
    pub probe_levels: usize,
    pub probe_every: usize,
}

impl Default for PpoHyper {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            epochs: 4,
            minibatch: 256,
            rollout_steps: 2048,
            n_envs: 8,
            entropy_coef: 0.01,
            value_coef: 0.5,
            max_grad_norm: 0.5,
            adam: AdamHyper::default(),
            hidden: vec![256, 256],
            probe_levels: 16,
            probe_every: 10,
        }
    }
}

/// Policy-and-value network: trunk plus a 9-logit `policy` head and a
/// scalar `value` head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyNet {
    pub net: Network,
}

pub const POLICY_HEAD: usize = 0;
pub const VALUE_HEAD: usize = 1;

impl PolicyNet {
    pub fn spec(hidden: &[usize]) -> NetworkSpec {
        NetworkSpec {
            input: input_len(DEFAULT_WINDOW),
            hidden: hidden.to_vec(),
            heads: vec![
                HeadSpec {
                    name: "policy".into(),
                    size: Action::COUNT,
                    init_scale: 0.01,
                },
                HeadSpec {
                    name: "value".into(),
                    size: 1,
                    init_scale: 1.0,
                },
            ],
        }
    }

    pub fn new(hidden: &[usize], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            net: Network::new(Self::spec(hidden), &mut rng),
        }
    }

    pub fn from_network(net: Network) -> Result<Self, PpoError> {
        let spec = net.spec();
        if spec.heads.len() != 2
            || spec.heads[POLICY_HEAD].size != Action::COUNT
            || spec.heads[VALUE_HEAD].size != 1
        {
            return Err(PpoError::Shape("network is not a policy/value net".into()));
        }
        Ok(Self { net })
    }

    /// `(action probabilities, value)` for an encoded observation.
    pub fn evaluate(&self, input: &[f32]) -> Result<(Vec<f64>, f64), NnError> {
        let out = self.net.forward(input)?;
        Ok((softmax(&out[POLICY_HEAD]), out[VALUE_HEAD][0]))
    }
}

/// A trained network acting by sampling from its softmax (or argmax when
/// `greedy`).
#[derive(Clone, Debug)]
pub struct NetPolicy {
    pub policy: PolicyNet,
    pub label: String,
    pub greedy: bool,
    buf: Vec<f32>,
}

impl NetPolicy {
    pub fn new(policy: PolicyNet, label: impl Into<String>) -> Self {
        let len = policy.net.input_len();
        Self {
            policy,
            label: label.into(),
            greedy: false,
            buf: vec![0.0; len],
        }
    }
}

pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> Action {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::ALL[i];
        }
    }
    Action::ALL[probs.len() - 1]
}

impl Policy for NetPolicy {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn act(&mut self, view: &StepView<'_>, rng: &mut ChaCha8Rng) -> Action {
        encode_into(view.observation, &mut self.buf);
        let (probs, _) = self
            .policy
            .evaluate(&self.buf)
            .expect("policy input length is fixed by construction");
        if self.greedy {
            let best = (0..probs.len())
                .max_by(|&a, &b| probs[a].total_cmp(&probs[b]))
                .unwrap();
            Action::ALL[best]
        } else {
            sample_action(&probs, rng)
        }
    }
}

/// Generalised advantage estimation.
///
/// `values` carries one extra trailing entry: the bootstrap value of the
/// state reached after the last step. Returns `(advantages, returns)`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    let n = rewards.len();
    if values.len() != n + 1 || dones.len() != n {
        return Err(PpoError::Shape(format!(
            "rewards {n}, values {} (need {}), dones {}",
            values.len(),
            n + 1,
            dones.len()
        )));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(PpoError::Discount { gamma, lambda });
    }
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * values[t + 1] * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// `min(r·A, clip(r, 1±ε)·A)` and its derivative with respect to `r`.
pub fn clipped_surrogate(ratio: f64, advantage: f64, clip: f64) -> (f64, f64) {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    if unclipped <= clipped {
        (unclipped, advantage)
    } else {
        (clipped, 0.0)
    }
}

/// Aligned per-step rollout data.
#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub observations: Vec<Observation>,
    pub actions: Vec<Action>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub dones: Vec<bool>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn check(&self) -> Result<(), PpoError> {
        let n = self.len();
        let lens = [
            self.observations.len(),
            self.log_probs.len(),
            self.rewards.len(),
            self.values.len(),
            self.dones.len(),
            self.advantages.len(),
            self.returns.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(PpoError::Shape(format!("rollout fields {lens:?} vs {n} actions")));
        }
        if self.advantages.iter().any(|a| !a.is_finite()) {
            return Err(PpoError::Shape("non-finite advantage".into()));
        }
        Ok(())
    }

    /// Rescales advantages to mean 0 and standard deviation 1 (std floored
    /// at 1e-8).
    pub fn normalise_advantages(&mut self) {
        let n = self.advantages.len();
        if n == 0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt().max(1e-8);
        for a in &mut self.advantages {
            *a = (*a - mean) / std;
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct LossCoefs {
    pub clip: f64,
    pub value_coef: f64,
    pub entropy_coef: f64,
}

impl From<&PpoHyper> for LossCoefs {
    fn from(h: &PpoHyper) -> Self {
        Self {
            clip: h.clip,
            value_coef: h.value_coef,
            entropy_coef: h.entropy_coef,
        }
    }
}

struct SampleLoss {
    stats: LossStats,
    d_logits: Vec<f64>,
    d_value: f64,
}

fn sample_loss(logits: &[f64], value: f64, action: Action, old_logp: f64, adv: f64, ret: f64, c: LossCoefs) -> SampleLoss {
    let logp = log_softmax(logits);
    let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let a = action.code() as usize;
    let log_ratio = logp[a] - old_logp;
    let ratio = log_ratio.exp();
    let (surrogate, d_surr_d_ratio) = clipped_surrogate(ratio, adv, c.clip);
    let entropy: f64 = -probs.iter().zip(&logp).map(|(p, l)| p * l).sum::<f64>();
    let value_err = value - ret;
    let value_loss = value_err * value_err;
    let total = -surrogate + c.value_coef * value_loss - c.entropy_coef * entropy;

    // d(-surrogate)/d logits = -dS/dr · r · (onehot - π)
    let g = -d_surr_d_ratio * ratio;
    let d_logits = (0..logits.len())
        .map(|k| {
            let onehot = if k == a { 1.0 } else { 0.0 };
            g * (onehot - probs[k]) + c.entropy_coef * probs[k] * (logp[k] + entropy)
        })
        .collect();
    SampleLoss {
        stats: LossStats {
            policy_loss: -surrogate,
            value_loss,
            entropy,
            total,
            approx_kl: ratio - 1.0 - log_ratio,
            clip_fraction: if (ratio - 1.0).abs() > c.clip { 1.0 } else { 0.0 },
        },
        d_logits,
        d_value: 2.0 * c.value_coef * value_err,
    }
}

/// Mean PPO loss over `indices` of a batch, without gradients.
pub fn ppo_loss(policy: &PolicyNet, batch: &RolloutBatch, indices: &[usize], coefs: LossCoefs) -> Result<LossStats, PpoError> {
    ppo_objective(&policy.net, batch, indices, coefs, None)
}

/// Mean PPO loss over `indices`. With a tape, the gradient of that mean is
/// accumulated into it.
pub fn ppo_objective<P: Param>(
    net: &Network<P>,
    batch: &RolloutBatch,
    indices: &[usize],
    coefs: LossCoefs,
    mut tape: Option<&mut GradientTape>,
) -> Result<LossStats, PpoError> {
    let mut buf = vec![0.0; net.input_len()];
    let mut acc = LossStats::default();
    let scale = 1.0 / indices.len().max(1) as f64;
    for &i in indices {
        encode_into(&batch.observations[i], &mut buf);
        let act = net.forward_cached(&buf)?;
        let s = sample_loss(
            &act.outputs[POLICY_HEAD],
            act.outputs[VALUE_HEAD][0],
            batch.actions[i],
            batch.log_probs[i],
            batch.advantages[i],
            batch.returns[i],
            coefs,
        );
        if !s.stats.total.is_finite() {
            return Err(PpoError::NonFiniteLoss {
                iteration: 0,
                epoch: 0,
                diagnostics: format!(
                    "sample {i}: action {:?}, old logp {}, advantage {}, return {}, logits {:?}",
                    batch.actions[i],
                    batch.log_probs[i],
                    batch.advantages[i],
                    batch.returns[i],
                    act.outputs[POLICY_HEAD]
                ),
            });
        }
        if let Some(t) = tape.as_deref_mut() {
            let d_logits: Vec<f64> = s.d_logits.iter().map(|g| g * scale).collect();
            net.backward(&act, &[d_logits, vec![s.d_value * scale]], t)?;
        }
        add_stats(&mut acc, &s.stats);
    }
    Ok(scale_stats(acc, indices.len()))
}

fn add_stats(acc: &mut LossStats, s: &LossStats) {
    acc.policy_loss += s.policy_loss;
    acc.value_loss += s.value_loss;
    acc.entropy += s.entropy;
    acc.total += s.total;
    acc.approx_kl += s.approx_kl;
    acc.clip_fraction += s.clip_fraction;
}

fn scale_stats(s: LossStats, n: usize) -> LossStats {
    let k = 1.0 / n.max(1) as f64;
    LossStats {
        policy_loss: s.policy_loss * k,
        value_loss: s.value_loss * k,
        entropy: s.entropy * k,
        total: s.total * k,
        approx_kl: s.approx_kl * k,
        clip_fraction: s.clip_fraction * k,
    }
}

/// `epochs` passes of shuffled minibatch updates over a rollout batch whose
/// advantages are already normalised. Returns the mean loss statistics.
pub fn ppo_update(
    policy: &mut PolicyNet,
    optimiser: &mut Adam,
    batch: &RolloutBatch,
    hyper: &PpoHyper,
    rng: &mut ChaCha8Rng,
    iteration: usize,
) -> Result<LossStats, PpoError> {
    batch.check()?;
    let coefs = LossCoefs::from(hyper);
    let mut order: Vec<usize> = (0..batch.len()).collect();
    let mut tape = GradientTape::zeros_like(&policy.net);
    let mut acc = LossStats::default();
    let mut count = 0;
    for epoch in 0..hyper.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(hyper.minibatch.max(1)) {
            tape.zero();
            let s = ppo_objective(&policy.net, batch, chunk, coefs, Some(&mut tape)).map_err(|e| match e {
                PpoError::NonFiniteLoss { diagnostics, .. } => PpoError::NonFiniteLoss {
                    iteration,
                    epoch,
                    diagnostics,
                },
                other => other,
            })?;
            let w = chunk.len() as f64;
            add_stats(
                &mut acc,
                &LossStats {
                    policy_loss: s.policy_loss * w,
                    value_loss: s.value_loss * w,
                    entropy: s.entropy * w,
                    total: s.total * w,
                    approx_kl: s.approx_kl * w,
                    clip_fraction: s.clip_fraction * w,
                },
            );
            count += chunk.len();
            if hyper.max_grad_norm > 0.0 {
                tape.clip_global_norm(hyper.max_grad_norm);
            }
            optimiser.update(&mut policy.net, &tape)?;
        }
    }
    Ok(scale_stats(acc, count))
}

/// Internal reward granted by a learned reward model, at most once per
/// episode per head.
#[derive(Clone, Debug, Default)]
struct RewardLatch {
    fired: [bool; 2],
}

impl RewardLatch {
    fn reward(&mut self, source: RewardSource, probs: [f64; 2]) -> f64 {
        let mut fire = |h: usize| {
            if !self.fired[h] && probs[h] >= MODEL_REWARD_THRESHOLD {
                self.fired[h] = true;
                1.0
            } else {
                0.0
            }
        };
        match source {
            RewardSource::EnvTrue => unreachable!("environment reward is not latched"),
            RewardSource::Model { head } => fire(head),
            RewardSource::Prudent => 0.5 * (fire(0) + fire(1)),
        }
    }
}

struct EnvSlot {
    level: Level,
    state: EnvState,
    obs: Observation,
    latch: RewardLatch,
    episode_reward: f64,
}

impl EnvSlot {
    fn reset(level: Level) -> Self {
        let state = EnvState::initial(&level);
        let obs = Observation::initial(render_frame(&state, &level));
        Self {
            level,
            state,
            obs,
            latch: RewardLatch::default(),
            episode_reward: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub episodes: usize,
    pub mean_episode_reward: f64,
    /// Coin rate on the held-out probe levels; `None` when not measured.
    pub probe_coin_rate: Option<f64>,
    pub loss: LossStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub rows: Vec<LogRow>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str = "iteration,env_steps,episodes,mean_episode_reward,probe_coin_rate,policy_loss,value_loss,entropy,total_loss,approx_kl,clip_fraction";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let probe = r.probe_coin_rate.map(|p| format!("{p:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.iteration,
                r.env_steps,
                r.episodes,
                r.mean_episode_reward,
                probe,
                r.loss.policy_loss,
                r.loss.value_loss,
                r.loss.entropy,
                r.loss.total,
                r.loss.approx_kl,
                r.loss.clip_fraction
            );
        }
        out
    }
}

/// Seed bookkeeping for a training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSeeds {
    pub run: u64,
    /// First seed of the held-out probe levels.
    pub probe_base: u64,
}

/// Trains (or continues training) a policy with PPO.
///
/// Levels for each new episode are drawn uniformly from `dist.seed_space`.
/// `init` continues from an existing policy; otherwise a fresh network is
/// built from `hyper.hidden`. Per-step observation reward queries for model
/// sources go through `reward_model`.
pub fn train_policy(
    dist: &LevelDistribution,
    reward_source: RewardSource,
    reward_model: Option<&HypothesisPair>,
    total_steps: usize,
    hyper: &PpoHyper,
    seeds: TrainSeeds,
    init: Option<PolicyNet>,
) -> Result<(PolicyNet, TrainingLog), PpoError> {
    reward_source.check_legal(dist.mode)?;
    if reward_source != RewardSource::EnvTrue && reward_model.is_none() {
        return Err(PpoError::MissingRewardModel(reward_source));
    }
    let mut policy = init.unwrap_or_else(|| PolicyNet::new(&hyper.hidden, mix_seed(seeds.run, 1)));
    let mut log = TrainingLog::default();
    if total_steps == 0 {
        return Ok((policy, log));
    }

    let n_envs = hyper.n_envs.max(1);
    let horizon = (hyper.rollout_steps / n_envs).max(1);
    let per_iter = horizon * n_envs;
    let iterations = total_steps.div_ceil(per_iter);

    let mut rng = ChaCha8Rng::seed_from_u64(seeds.run);
    let mut optimiser = Adam::new(&policy.net, hyper.adam);
    let mut slots: Vec<EnvSlot> = (0..n_envs)
        .map(|_| Ok(EnvSlot::reset(generate_level(dist, dist.seed_space.sample(&mut rng))?)))
        .collect::<Result<_, GenerateError>>()?;
    let mut buf = vec![0.0; policy.net.input_len()];
    let mut path = Vec::with_capacity(8);
    let mut env_steps = 0;

    for iteration in 0..iterations {
        let mut batch = RolloutBatch::default();
        let mut finished = Vec::new();
        for slot in slots.iter_mut() {
            let start = batch.len();
            for _ in 0..horizon {
                encode_into(&slot.obs, &mut buf);
                let (probs, value) = policy.evaluate(&buf)?;
                let action = sample_action(&probs, &mut rng);
                let (next, result) = step_with_path(&slot.state, action, &slot.level, &mut path)
                    .expect("slots are reset on termination");
                let next_obs = Observation {
                    prev: slot.obs.cur.clone(),
                    cur: render_frame(&next, &slot.level),
                    action,
                };
                let reward = match reward_source {
                    RewardSource::EnvTrue => result.reward(),
                    source => {
                        let pair = reward_model.expect("checked above");
                        slot.latch.reward(source, pair.head_probs(&next_obs))
                    }
                };
                slot.episode_reward += reward;
                batch.observations.push(std::mem::replace(&mut slot.obs, next_obs));
                batch.actions.push(action);
                batch.log_probs.push(probs[action.code() as usize].max(1e-300).ln());
                batch.rewards.push(reward);
                batch.values.push(value);
                batch.dones.push(next.terminated);
                slot.state = next;
                if slot.state.terminated {
                    finished.push(slot.episode_reward);
                    let level = generate_level(dist, dist.seed_space.sample(&mut rng))?;
                    *slot = EnvSlot::reset(level);
                }
            }
            encode_into(&slot.obs, &mut buf);
            let (_, bootstrap) = policy.evaluate(&buf)?;
            let mut values = batch.values[start..].to_vec();
            values.push(bootstrap);
            let (adv, ret) = compute_gae(
                &batch.rewards[start..],
                &values,
                &batch.dones[start..],
                hyper.gamma,
                hyper.lambda,
            )?;
            batch.advantages.extend(adv);
            batch.returns.extend(ret);
        }
        env_steps += batch.len();
        batch.normalise_advantages();
        let loss = ppo_update(&mut policy, &mut optimiser, &batch, hyper, &mut rng, iteration)?;

        let last = iteration + 1 == iterations;
        let probe_coin_rate = (reward_source == RewardSource::EnvTrue
            && hyper.probe_levels > 0
            && hyper.probe_every > 0
            && ((iteration + 1) % hyper.probe_every == 0 || last))
            .then(|| probe_coin_rate(&policy, dist, seeds.probe_base, hyper.probe_levels))
            .transpose()?;
        let episodes = finished.len();
        log.rows.push(LogRow {
            iteration,
            env_steps,
            episodes,
            mean_episode_reward: if episodes > 0 {
                finished.iter().sum::<f64>() / episodes as f64
            } else {
                0.0
            },
            probe_coin_rate,
            loss,
        });
    }
    Ok((policy, log))
}

/// Coin rate of `policy` on `n` consecutive training-distribution seeds.
fn probe_coin_rate(policy: &PolicyNet, dist: &LevelDistribution, base: u64, n: usize) -> Result<f64, PpoError> {
    let probe_dist = dist.with_mode(CoinMode::TrainRight);
    let mut actor = NetPolicy::new(policy.clone(), "probe");
    let mut coins = 0.0;
    for i in 0..n as u64 {
        let level = generate_level(&probe_dist.with_seed_space(crate::levelgen::SeedSpace::FULL), base + i)?;
        let tr = simulate_episode(&mut actor, &level, crate::env::MAX_STEPS, mix_seed(base + i, 0x9e0b));
        coins += tr.total_reward();
    }
    Ok(coins / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::Frame;

    #[test]
    fn gae_single_terminal_step() {
        let (a, r) = compute_gae(&[1.0], &[0.0, 5.0], &[true], 0.99, 0.95).unwrap();
        assert_eq!(a, vec![1.0]);
        assert_eq!(r, vec![1.0]);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [0.5, -1.0, 2.0, 0.0];
        let values = [0.1, 0.2, -0.3, 0.4, 0.7];
        let dones = [false, true, false, false];
        let (a, _) = compute_gae(&rewards, &values, &dones, 0.9, 0.0).unwrap();
        for t in 0..4 {
            let live = if dones[t] { 0.0 } else { 1.0 };
            let delta = rewards[t] + 0.9 * values[t + 1] * live - values[t];
            assert_eq!(a[t], delta);
        }
    }

    #[test]
    fn gae_rejects_bad_shapes() {
        assert!(compute_gae(&[1.0], &[0.0], &[true], 0.9, 0.9).is_err());
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[], 0.9, 0.9).is_err());
        assert!(compute_gae(&[1.0], &[0.0, 0.0], &[true], 1.5, 0.9).is_err());
    }

    #[test]
    fn surrogate_clip_kills_gradient() {
        let clip = 0.2;
        let (v, g) = clipped_surrogate(1.0 + 2.0 * clip, 1.0, clip);
        assert_eq!(g, 0.0);
        assert!((v - 1.2).abs() < 1e-12);
        let (_, g) = clipped_surrogate(1.0, 0.7, clip);
        assert_eq!(g, 0.7);
        // pessimistic bound keeps the unclipped term for A < 0, r > 1 + ε
        let (v, g) = clipped_surrogate(1.5, -1.0, clip);
        assert_eq!((v, g), (-1.5, -1.0));
    }

    #[test]
    fn env_true_refused_on_test_distribution() {
        let err = train_policy(
            &LevelDistribution::test(),
            RewardSource::EnvTrue,
            None,
            10,
            &PpoHyper::default(),
            TrainSeeds { run: 0, probe_base: 0 },
            None,
        )
        .unwrap_err();
        assert!(matches!(err, PpoError::IllegalRewardSource { .. }));
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let hyper = PpoHyper {
            hidden: vec![8],
            ..PpoHyper::default()
        };
        let (p, log) = train_policy(
            &LevelDistribution::train(),
            RewardSource::EnvTrue,
            None,
            0,
            &hyper,
            TrainSeeds { run: 5, probe_base: 0 },
            None,
        )
        .unwrap();
        assert_eq!(p, PolicyNet::new(&[8], mix_seed(5, 1)));
        assert!(log.rows.is_empty());
    }

    #[test]
    fn prudent_latch_pays_each_head_once() {
        let mut latch = RewardLatch::default();
        assert_eq!(latch.reward(RewardSource::Prudent, [0.9, 0.1]), 0.5);
        assert_eq!(latch.reward(RewardSource::Prudent, [0.9, 0.1]), 0.0);
        assert_eq!(latch.reward(RewardSource::Prudent, [0.9, 0.8]), 0.5);
        assert_eq!(latch.reward(RewardSource::Prudent, [1.0, 1.0]), 0.0);
        let mut latch = RewardLatch::default();
        assert_eq!(latch.reward(RewardSource::Model { head: 1 }, [0.9, 0.49]), 0.0);
        assert_eq!(latch.reward(RewardSource::Model { head: 1 }, [0.0, 0.5]), 1.0);
        assert_eq!(latch.reward(RewardSource::Model { head: 1 }, [0.0, 0.9]), 0.0);
    }

    #[test]
    fn identical_policy_gives_unit_ratio_and_zero_surrogate() {
        let policy = PolicyNet::new(&[6], 3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = RolloutBatch::default();
        let mut buf = vec![0.0; policy.net.input_len()];
        for i in 0..6u8 {
            let codes: Vec<u8> = (0..225).map(|_| rng.gen_range(0..5)).collect();
            let f = Frame::from_codes(15, codes).unwrap();
            let obs = Observation::initial(f);
            encode_into(&obs, &mut buf);
            let (p, v) = policy.evaluate(&buf).unwrap();
            let a = Action::ALL[i as usize];
            batch.observations.push(obs);
            batch.actions.push(a);
            batch.log_probs.push(p[a.code() as usize].ln());
            batch.values.push(v);
            batch.rewards.push(0.0);
            batch.dones.push(false);
            batch.advantages.push(f64::from(i) - 2.5);
            batch.returns.push(v);
        }
        batch.normalise_advantages();
        let idx: Vec<usize> = (0..6).collect();
        let stats = ppo_loss(&policy, &batch, &idx, LossCoefs { clip: 0.2, value_coef: 0.0, entropy_coef: 0.0 }).unwrap();
        assert!(stats.policy_loss.abs() < 1e-12);
        assert!(stats.approx_kl.abs() < 1e-12);
        assert_eq!(stats.clip_fraction, 0.0);
    }
}
