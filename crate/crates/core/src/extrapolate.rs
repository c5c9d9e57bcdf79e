//! Labeled and unlabeled observation datasets and the diversified pair of
//! reward-hypothesis heads trained on them.
//!
//! Both heads are fit to the labeled training transitions with
//! class-weighted cross-entropy while the mutual information between their
//! predictions on the unlabeled shifted observations is penalised. Where
//! the two candidate features ("right edge reached", "coin collected")
//! coincide in training, the penalty pushes one head onto each.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError};
use crate::env::{step_with_path, Action, Cell, EnvState, TerminationCause};
use crate::episode::{Policy, StepView};
use crate::level::Level;
use crate::levelgen::{generate_level, mix_seed, CoinMode, GenerateError, LevelDistribution};
use crate::nn::{sigmoid, Adam, AdamHyper, GradientTape, HeadSpec, Network, NetworkSpec, NnError, Param};
use crate::obs::{encode_input, input_len, render_frame, Frame, Observation, DEFAULT_WINDOW};

#[derive(Debug, Error)]
pub enum ExtrapolateError {
    #[error("no positives: the policy never collected the coin in {episodes} episodes")]
    NoPositives { episodes: usize },
    #[error("empty {0} set")]
    Empty(&'static str),
    #[error("labeled set needs both classes")]
    OneClass,
    #[error("batch length mismatch ({0} vs {1})")]
    BatchShape(usize, usize),
    #[error("dataset {path} line {line}: {reason}")]
    Dataset {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("reward network is not a two-head classifier")]
    NotAPair,
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Generate(#[from] GenerateError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub t: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledRecord {
    pub provenance: Provenance,
    pub observation: Observation,
    pub label: u8,
}

/// An unlabeled observation. There is deliberately no label or reward field.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledRecord {
    pub provenance: Provenance,
    pub observation: Observation,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSet {
    pub records: Vec<LabeledRecord>,
    pub neg_per_pos: usize,
}

impl LabeledSet {
    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn negatives(&self) -> usize {
        self.records.len() - self.positives()
    }

    pub fn seeds(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.provenance.seed).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnlabeledSet {
    pub records: Vec<UnlabeledRecord>,
}

impl UnlabeledSet {
    pub fn seeds(&self) -> BTreeSet<u64> {
        self.records.iter().map(|r| r.provenance.seed).collect()
    }
}

/// Per-episode policy RNG seed used by both collectors, so provenance
/// `(seed, t)` pins down a replay.
pub fn episode_rng_seed(collection_seed: u64, level_seed: u64) -> u64 {
    mix_seed(collection_seed, level_seed)
}

/// Steps `policy` on `level` and hands every post-step observation to
/// `visit` together with the step's termination cause. Never reads the
/// environment reward.
fn roll(
    policy: &mut dyn Policy,
    level: &Level,
    max_steps: u32,
    rng_seed: u64,
    mut visit: impl FnMut(u32, &Observation, TerminationCause),
) {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut state = EnvState::initial(level);
    let mut obs = Observation::initial(render_frame(&state, level));
    let mut path = Vec::with_capacity(8);
    policy.begin_episode(level, &state);
    while !state.terminated && state.t < max_steps {
        let action = policy.act(
            &StepView {
                level,
                state: &state,
                observation: &obs,
            },
            &mut rng,
        );
        let (next, _) = step_with_path(&state, action, level, &mut path).expect("live state");
        obs = Observation {
            prev: obs.cur,
            cur: render_frame(&next, level),
            action,
        };
        visit(next.t, &obs, next.termination_cause);
        state = next;
    }
}

/// Re-simulates one collection episode up to `provenance.t` and returns the
/// observation stored there.
pub fn replay_observation(
    policy: &mut dyn Policy,
    dist: &LevelDistribution,
    collection_seed: u64,
    provenance: Provenance,
) -> Result<Option<Observation>, ExtrapolateError> {
    let level = generate_level(dist, provenance.seed)?;
    let mut found = None;
    roll(
        policy,
        &level,
        provenance.t,
        episode_rng_seed(collection_seed, provenance.seed),
        |t, obs, _| {
            if t == provenance.t {
                found = Some(obs.clone());
            }
        },
    );
    Ok(found)
}

/// Labeled transitions from training-distribution episodes on seeds
/// `first_seed..first_seed + episodes`.
///
/// Each episode that collects the coin contributes its reward transition as
/// a positive and up to `neg_per_pos` uniformly chosen other steps as
/// negatives. The coin event is detected from the termination cause, so the
/// reward channel itself is not read.
pub fn collect_labeled(
    policy: &mut dyn Policy,
    dist: &LevelDistribution,
    first_seed: u64,
    episodes: usize,
    neg_per_pos: usize,
    collection_seed: u64,
) -> Result<LabeledSet, ExtrapolateError> {
    let dist = dist.with_mode(CoinMode::TrainRight);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(collection_seed, 0x1abe1));
    let mut records = Vec::new();
    for seed in first_seed..first_seed + episodes as u64 {
        let level = generate_level(&dist, seed)?;
        let mut steps: Vec<(u32, Observation)> = Vec::new();
        let mut positive = None;
        roll(
            policy,
            &level,
            crate::env::MAX_STEPS,
            episode_rng_seed(collection_seed, seed),
            |t, obs, cause| {
                if cause == TerminationCause::Coin {
                    positive = Some((t, obs.clone()));
                } else {
                    steps.push((t, obs.clone()));
                }
            },
        );
        let Some((t, obs)) = positive else {
            continue;
        };
        records.push(LabeledRecord {
            provenance: Provenance { seed, t },
            observation: obs,
            label: 1,
        });
        let take = neg_per_pos.min(steps.len());
        let mut picks = index::sample(&mut rng, steps.len(), take).into_vec();
        picks.sort_unstable();
        for i in picks {
            let (t, obs) = steps[i].clone();
            records.push(LabeledRecord {
                provenance: Provenance { seed, t },
                observation: obs,
                label: 0,
            });
        }
    }
    if records.is_empty() {
        return Err(ExtrapolateError::NoPositives { episodes });
    }
    records.shuffle(&mut rng);
    Ok(LabeledSet {
        records,
        neg_per_pos,
    })
}

/// Up to `steps_per_episode` post-step observations from each of `episodes`
/// shifted-distribution levels on seeds `first_seed..`, gathered by
/// `explorer`.
pub fn collect_unlabeled(
    explorer: &mut dyn Policy,
    dist: &LevelDistribution,
    first_seed: u64,
    episodes: usize,
    steps_per_episode: u32,
    collection_seed: u64,
) -> Result<UnlabeledSet, ExtrapolateError> {
    let dist = dist.with_mode(CoinMode::TestRandom);
    let mut records = Vec::new();
    for seed in first_seed..first_seed + episodes as u64 {
        let level = generate_level(&dist, seed)?;
        roll(
            explorer,
            &level,
            steps_per_episode,
            episode_rng_seed(collection_seed, seed),
            |t, obs, _| {
                records.push(UnlabeledRecord {
                    provenance: Provenance { seed, t },
                    observation: obs.clone(),
                })
            },
        );
    }
    Ok(UnlabeledSet { records })
}

// ---------------------------------------------------------------------------
// Mutual information

fn check_batch(p: &[f64], q: &[f64]) -> Result<(), ExtrapolateError> {
    if p.is_empty() {
        return Err(ExtrapolateError::Empty("batch"));
    }
    if p.len() != q.len() {
        return Err(ExtrapolateError::BatchShape(p.len(), q.len()));
    }
    Ok(())
}

/// `joint[a][b] = mean(p_a · q_b)` with `p_1 = p`, `p_0 = 1 - p`.
pub fn joint_table(p: &[f64], q: &[f64]) -> [[f64; 2]; 2] {
    let mut j = [[0.0; 2]; 2];
    for (&pi, &qi) in p.iter().zip(q) {
        let pa = [1.0 - pi, pi];
        let qb = [1.0 - qi, qi];
        for a in 0..2 {
            for b in 0..2 {
                j[a][b] += pa[a] * qb[b];
            }
        }
    }
    let n = p.len() as f64;
    j.iter_mut().flatten().for_each(|v| *v /= n);
    j
}

fn table_mi(j: &[[f64; 2]; 2]) -> f64 {
    let mp = [j[0][0] + j[0][1], j[1][0] + j[1][1]];
    let mq = [j[0][0] + j[1][0], j[0][1] + j[1][1]];
    let mut mi = 0.0;
    for a in 0..2 {
        for b in 0..2 {
            if j[a][b] > 0.0 {
                mi += j[a][b] * (j[a][b] / (mp[a] * mq[b])).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Mutual information (nats) between two batches of Bernoulli predictions.
pub fn mutual_information(p: &[f64], q: &[f64]) -> Result<f64, ExtrapolateError> {
    check_batch(p, q)?;
    Ok(table_mi(&joint_table(p, q)))
}

/// Mutual information and its gradients with respect to every `p_i` and
/// `q_i`.
pub fn mutual_information_grad(p: &[f64], q: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>), ExtrapolateError> {
    check_batch(p, q)?;
    const FLOOR: f64 = 1e-12;
    let j = joint_table(p, q);
    let mp = [j[0][0] + j[0][1], j[1][0] + j[1][1]];
    let mq = [j[0][0] + j[1][0], j[0][1] + j[1][1]];
    let mut l = [[0.0; 2]; 2];
    for a in 0..2 {
        for b in 0..2 {
            l[a][b] = (j[a][b].max(FLOOR) / (mp[a] * mq[b]).max(FLOOR)).ln();
        }
    }
    let n = p.len() as f64;
    let dp = q
        .iter()
        .map(|&qi| ((1.0 - qi) * (l[1][0] - l[0][0]) + qi * (l[1][1] - l[0][1])) / n)
        .collect();
    let dq = p
        .iter()
        .map(|&pi| ((1.0 - pi) * (l[0][1] - l[0][0]) + pi * (l[1][1] - l[1][0])) / n)
        .collect();
    Ok((table_mi(&j), dp, dq))
}

// ---------------------------------------------------------------------------
// Diverse-head training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiverseHyper {
    pub lambda_mi: f64,
    pub epochs: usize,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub hidden: Vec<usize>,
    pub adam: AdamHyper,
    /// Fraction of labeled level seeds held out for the accuracy check.
    pub holdout_fraction: f64,
    pub min_accuracy: f64,
    pub min_disagreement: f64,
    pub seed: u64,
}

impl Default for DiverseHyper {
    fn default() -> Self {
        Self {
            lambda_mi: 10.0,
            epochs: 50,
            labeled_batch: 128,
            unlabeled_batch: 128,
            hidden: vec![256, 128],
            adam: AdamHyper {
                lr: 1e-3,
                ..AdamHyper::default()
            },
            holdout_fraction: 0.2,
            min_accuracy: 0.95,
            min_disagreement: 0.2,
            seed: 0,
        }
    }
}

pub fn pair_spec(input: usize, hidden: &[usize]) -> NetworkSpec {
    let head = |name: &str| HeadSpec {
        name: name.into(),
        size: 1,
        init_scale: 1.0,
    };
    NetworkSpec {
        input,
        hidden: hidden.to_vec(),
        heads: vec![head("h0"), head("h1")],
    }
}

/// Encoded inputs for the diversification loss, independent of what they
/// encode.
#[derive(Clone, Debug, Default)]
pub struct DiverseData {
    pub labeled: Vec<Vec<f32>>,
    pub labels: Vec<u8>,
    pub unlabeled: Vec<Vec<f32>>,
}

/// Class weights `n / (2 · n_class)` for labels 0 and 1.
pub fn class_weights(labels: &[u8]) -> Result<[f64; 2], ExtrapolateError> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(ExtrapolateError::OneClass);
    }
    let n = labels.len() as f64;
    Ok([n / (2.0 * neg as f64), n / (2.0 * pos as f64)])
}

/// Both head probabilities for one input.
pub fn head_probabilities<P: Param>(net: &Network<P>, input: &[f32]) -> Result<[f64; 2], NnError> {
    let out = net.forward(input)?;
    Ok([sigmoid(out[0][0]), sigmoid(out[1][0])])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiverseLoss {
    pub ce: [f64; 2],
    pub mi: f64,
    pub total: f64,
}

/// Weighted cross-entropy of each head on a labeled batch plus
/// `lambda_mi` times the mutual information of the heads on an unlabeled
/// batch. Gradients are accumulated into `tape` when given.
pub fn diverse_loss<P: Param>(
    net: &Network<P>,
    labeled: &[(&[f32], u8)],
    unlabeled: &[&[f32]],
    weights: [f64; 2],
    lambda_mi: f64,
    mut tape: Option<&mut GradientTape>,
) -> Result<DiverseLoss, ExtrapolateError> {
    let mut loss = DiverseLoss::default();
    let nl = labeled.len().max(1) as f64;
    for &(x, y) in labeled {
        let act = net.forward_cached(x)?;
        let w = weights[y as usize];
        let mut grads = Vec::with_capacity(2);
        for h in 0..2 {
            let z = act.outputs[h][0];
            // -[y log σ(z) + (1-y) log(1-σ(z))] in a stable form
            let ce = if y == 1 { softplus(-z) } else { softplus(z) };
            loss.ce[h] += w * ce / nl;
            grads.push(vec![w * (sigmoid(z) - f64::from(y)) / nl]);
        }
        if let Some(tape) = tape.as_deref_mut() {
            net.backward(&act, &grads, tape)?;
        }
    }
    if lambda_mi != 0.0 && unlabeled.len() >= 2 {
        let acts = unlabeled
            .iter()
            .map(|x| net.forward_cached(x))
            .collect::<Result<Vec<_>, _>>()?;
        let p: Vec<f64> = acts.iter().map(|a| sigmoid(a.outputs[0][0])).collect();
        let q: Vec<f64> = acts.iter().map(|a| sigmoid(a.outputs[1][0])).collect();
        let (mi, dp, dq) = mutual_information_grad(&p, &q)?;
        loss.mi = mi;
        if let Some(tape) = tape.as_deref_mut() {
            for (i, act) in acts.iter().enumerate() {
                let g0 = lambda_mi * dp[i] * p[i] * (1.0 - p[i]);
                let g1 = lambda_mi * dq[i] * q[i] * (1.0 - q[i]);
                net.backward(act, &[vec![g0], vec![g1]], tape)?;
            }
        }
    }
    loss.total = loss.ce[0] + loss.ce[1] + lambda_mi * loss.mi;
    Ok(loss)
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Labeled accuracy per head at threshold `tau`.
pub fn accuracy(net: &Network, inputs: &[Vec<f32>], labels: &[u8], tau: f64) -> Result<[f64; 2], NnError> {
    let mut hits = [0usize; 2];
    for (x, &y) in inputs.iter().zip(labels) {
        let p = head_probabilities(net, x)?;
        for h in 0..2 {
            if (p[h] >= tau) == (y == 1) {
                hits[h] += 1;
            }
        }
    }
    let n = inputs.len().max(1) as f64;
    Ok([hits[0] as f64 / n, hits[1] as f64 / n])
}

/// Fraction of inputs on which the thresholded heads disagree.
pub fn disagreement(net: &Network, inputs: &[Vec<f32>], tau: f64) -> Result<f64, NnError> {
    let mut d = 0usize;
    for x in inputs {
        let p = head_probabilities(net, x)?;
        if (p[0] >= tau) != (p[1] >= tau) {
            d += 1;
        }
    }
    Ok(d as f64 / inputs.len().max(1) as f64)
}

/// Trains a two-head network on `data` (already split: `data.labeled` is the
/// training part). Returns the network and the per-epoch mean losses.
pub fn fit_diverse(data: &DiverseData, input: usize, hyper: &DiverseHyper) -> Result<(Network, Vec<DiverseLoss>), ExtrapolateError> {
    if data.labeled.is_empty() {
        return Err(ExtrapolateError::Empty("labeled"));
    }
    if data.unlabeled.is_empty() && hyper.lambda_mi != 0.0 {
        return Err(ExtrapolateError::Empty("unlabeled"));
    }
    let weights = class_weights(&data.labels)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut net: Network = Network::new(pair_spec(input, &hyper.hidden), &mut rng);
    let mut adam = Adam::new(&net, hyper.adam);
    let mut tape = GradientTape::zeros_like(&net);
    let mut order: Vec<usize> = (0..data.labeled.len()).collect();
    let mut u_order: Vec<usize> = (0..data.unlabeled.len()).collect();
    let mut u_cursor = usize::MAX;
    let mut history = Vec::with_capacity(hyper.epochs);
    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch = DiverseLoss::default();
        let mut batches = 0;
        for chunk in order.chunks(hyper.labeled_batch.max(1)) {
            let lab: Vec<(&[f32], u8)> = chunk
                .iter()
                .map(|&i| (data.labeled[i].as_slice(), data.labels[i]))
                .collect();
            let mut unl: Vec<&[f32]> = Vec::with_capacity(hyper.unlabeled_batch);
            if !u_order.is_empty() {
                for _ in 0..hyper.unlabeled_batch.min(u_order.len()) {
                    if u_cursor >= u_order.len() {
                        u_order.shuffle(&mut rng);
                        u_cursor = 0;
                    }
                    unl.push(&data.unlabeled[u_order[u_cursor]]);
                    u_cursor += 1;
                }
            }
            tape.zero();
            let l = diverse_loss(&net, &lab, &unl, weights, hyper.lambda_mi, Some(&mut tape))?;
            adam.update(&mut net, &tape)?;
            epoch.ce[0] += l.ce[0];
            epoch.ce[1] += l.ce[1];
            epoch.mi += l.mi;
            epoch.total += l.total;
            batches += 1;
        }
        let k = 1.0 / f64::from(batches.max(1));
        history.push(DiverseLoss {
            ce: [epoch.ce[0] * k, epoch.ce[1] * k],
            mi: epoch.mi * k,
            total: epoch.total * k,
        });
    }
    Ok((net, history))
}

/// Training statistics stored with a [`HypothesisPair`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairReport {
    pub lambda_mi: f64,
    pub epochs: usize,
    pub seed: u64,
    pub labeled_train: usize,
    pub labeled_holdout: usize,
    pub unlabeled: usize,
    pub holdout_accuracy: [f64; 2],
    pub unlabeled_disagreement: f64,
    pub final_loss: DiverseLoss,
    /// Whether the raw head indices were swapped by order normalisation.
    pub swapped: bool,
    /// `(right-wall probe, coin probe)` scores per normalised head.
    pub probe_scores: [[f64; 2]; 2],
    pub min_accuracy: f64,
    pub min_disagreement: f64,
}

impl PairReport {
    pub fn accuracy_ok(&self) -> bool {
        self.holdout_accuracy.iter().all(|&a| a >= self.min_accuracy)
    }

    pub fn disagreement_ok(&self) -> bool {
        self.unlabeled_disagreement >= self.min_disagreement
    }
}

/// Two reward hypotheses over observations. By convention head 0 is the one
/// that prefers reaching the right wall and head 1 the one that prefers
/// collecting the coin.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesisPair {
    pub net: Network,
    pub tau: [f64; 2],
    pub report: PairReport,
}

impl HypothesisPair {
    pub fn from_network(net: Network, tau: [f64; 2], report: PairReport) -> Result<Self, ExtrapolateError> {
        let spec = net.spec();
        if spec.heads.len() != 2 || spec.heads.iter().any(|h| h.size != 1) {
            return Err(ExtrapolateError::NotAPair);
        }
        Ok(Self { net, tau, report })
    }

    pub fn head_probs(&self, obs: &Observation) -> [f64; 2] {
        head_probabilities(&self.net, &encode_input(obs)).expect("observation width matches the pair")
    }

    /// Sigmoid of head `head`'s logit.
    ///
    /// # Panics
    /// If `head` is not 0 or 1.
    pub fn head_reward(&self, head: usize, obs: &Observation) -> f64 {
        assert!(head < 2, "head index {head} out of range");
        self.head_probs(obs)[head]
    }

    pub fn save(&self, path: &Path) -> Result<(), ExtrapolateError> {
        let meta = serde_json::json!({ "kind": "hypothesis-pair", "tau": self.tau, "report": self.report });
        checkpoint::save(&self.net, path, meta)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ExtrapolateError> {
        let (net, meta) = checkpoint::load::<f32>(path)?;
        let bad = |what: &str| CheckpointError::Invalid(format!("{}: {what}", path.display()));
        let tau: [f64; 2] = serde_json::from_value(meta["tau"].clone()).map_err(|_| bad("missing tau"))?;
        let report: PairReport = serde_json::from_value(meta["report"].clone()).map_err(|_| bad("missing report"))?;
        Self::from_network(net, tau, report)
    }
}

/// Swaps the two heads of a pair network in place.
fn swap_heads(net: &mut Network) {
    let mut tensors = net.tensors_mut();
    let n = tensors.len();
    // last four tensors: h0.weight, h0.bias, h1.weight, h1.bias
    let (h0, h1) = tensors[n - 4..].split_at_mut(2);
    for (x, y) in h0.iter_mut().zip(h1.iter_mut()) {
        x.swap_with_slice(y);
    }
}

/// Deterministic probe observations: `(right-wall probes, coin probes)`.
///
/// Wall probes put the agent against the right border with no coin in
/// view; coin probes show the step onto a coin in open floor far from the
/// right wall.
pub fn order_probes() -> (Vec<Observation>, Vec<Observation>) {
    let width = 48;
    let height = 16;
    let mut walls = Vec::new();
    let mut coins = Vec::new();
    for floor in [1, 3] {
        let mut level = Level::flat(width, height, Cell::new(2, floor), Cell::new(1, floor), 0);
        for y in 1..floor {
            for x in 1..width as i32 - 1 {
                level.set_tile(x, y, crate::level::Tile::Wall);
            }
        }
        for action in [Action::Right, Action::RightJump] {
            let mut state = EnvState::initial(&level);
            state.agent_x = width as i32 - 3;
            let (next, _) = crate::env::step(&state, Action::Right, &level).expect("live");
            let prev = render_frame(&next, &level);
            let (after, _) = crate::env::step(&next, action, &level).expect("live");
            walls.push(Observation {
                prev,
                cur: render_frame(&after, &level),
                action,
            });
        }
        for coin_x in [16, 24] {
            level.coin = Cell::new(coin_x, floor);
            let mut state = EnvState::initial(&level);
            state.agent_x = coin_x - 1;
            let prev = render_frame(&state, &level);
            let (after, _) = crate::env::step(&state, Action::Right, &level).expect("live");
            coins.push(Observation {
                prev,
                cur: render_frame(&after, &level),
                action: Action::Right,
            });
        }
    }
    (walls, coins)
}

fn mean_probs(net: &Network, obs: &[Observation]) -> [f64; 2] {
    let mut s = [0.0; 2];
    for o in obs {
        let p = head_probabilities(net, &encode_input(o)).expect("probe width");
        s[0] += p[0];
        s[1] += p[1];
    }
    [s[0] / obs.len() as f64, s[1] / obs.len() as f64]
}

fn in_holdout(seed: u64, salt: u64, fraction: f64) -> bool {
    let u = (mix_seed(seed, salt) >> 11) as f64 / (1u64 << 53) as f64;
    u < fraction
}

/// Trains the diversified pair on observation datasets, normalises head
/// order with [`order_probes`], and measures holdout accuracy and unlabeled
/// disagreement at `tau = 0.5`.
///
/// The caller decides what to do when [`PairReport::accuracy_ok`] is false;
/// the pair is returned either way so it can be inspected.
pub fn train_diverse_heads(
    labeled: &LabeledSet,
    unlabeled: &UnlabeledSet,
    hyper: &DiverseHyper,
) -> Result<HypothesisPair, ExtrapolateError> {
    if labeled.records.is_empty() {
        return Err(ExtrapolateError::Empty("labeled"));
    }
    if unlabeled.records.is_empty() {
        return Err(ExtrapolateError::Empty("unlabeled"));
    }
    let salt = mix_seed(hyper.seed, 0x401d);
    let mut data = DiverseData::default();
    let mut hold_x = Vec::new();
    let mut hold_y = Vec::new();
    for r in &labeled.records {
        let x = encode_input(&r.observation);
        if in_holdout(r.provenance.seed, salt, hyper.holdout_fraction) {
            hold_x.push(x);
            hold_y.push(r.label);
        } else {
            data.labeled.push(x);
            data.labels.push(r.label);
        }
    }
    if hold_x.is_empty() {
        // tiny sets: fall back to scoring on the training part
        hold_x = data.labeled.clone();
        hold_y = data.labels.clone();
    }
    data.unlabeled = unlabeled.records.iter().map(|r| encode_input(&r.observation)).collect();

    let (mut net, history) = fit_diverse(&data, input_len(DEFAULT_WINDOW), hyper)?;

    let (walls, coins) = order_probes();
    let (w, c) = (mean_probs(&net, &walls), mean_probs(&net, &coins));
    let swapped = (w[1] - c[1]) > (w[0] - c[0]);
    if swapped {
        swap_heads(&mut net);
    }
    let (w, c) = (mean_probs(&net, &walls), mean_probs(&net, &coins));
    let tau = 0.5;
    let report = PairReport {
        lambda_mi: hyper.lambda_mi,
        epochs: hyper.epochs,
        seed: hyper.seed,
        labeled_train: data.labeled.len(),
        labeled_holdout: hold_x.len(),
        unlabeled: data.unlabeled.len(),
        holdout_accuracy: accuracy(&net, &hold_x, &hold_y, tau)?,
        unlabeled_disagreement: disagreement(&net, &data.unlabeled, tau)?,
        final_loss: history.last().copied().unwrap_or_default(),
        swapped,
        probe_scores: [[w[0], c[0]], [w[1], c[1]]],
        min_accuracy: hyper.min_accuracy,
        min_disagreement: hyper.min_disagreement,
    };
    HypothesisPair::from_network(net, [tau; 2], report)
}

// ---------------------------------------------------------------------------
// Synthetic two-feature task

/// A 2-D task with two generative features: in labeled data both equal the
/// label, in unlabeled data they are independent fair coins. Inputs are
/// `(±1 + noise)` per feature.
#[derive(Clone, Debug)]
pub struct SyntheticTask {
    pub data: DiverseData,
    /// Generative feature values `(a, b)` for every unlabeled point.
    pub unlabeled_features: Vec<(u8, u8)>,
}

pub fn synthetic_task(n_labeled: usize, n_unlabeled: usize, noise: f64, seed: u64) -> SyntheticTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = |a: u8, b: u8, rng: &mut ChaCha8Rng| {
        let f = |v: u8, rng: &mut ChaCha8Rng| ((f64::from(v) * 2.0 - 1.0) + noise * (rng.gen::<f64>() * 2.0 - 1.0)) as f32;
        vec![f(a, rng), f(b, rng)]
    };
    let mut data = DiverseData::default();
    for _ in 0..n_labeled {
        let y: u8 = rng.gen_range(0..2);
        let x = point(y, y, &mut rng);
        data.labeled.push(x);
        data.labels.push(y);
    }
    let mut unlabeled_features = Vec::with_capacity(n_unlabeled);
    for _ in 0..n_unlabeled {
        let (a, b) = (rng.gen_range(0..2u8), rng.gen_range(0..2u8));
        let x = point(a, b, &mut rng);
        data.unlabeled.push(x);
        unlabeled_features.push((a, b));
    }
    SyntheticTask {
        data,
        unlabeled_features,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticOutcome {
    /// Agreement of each head with its matched feature on unlabeled points,
    /// under the better of the two head-to-feature matchings.
    pub feature_agreement: [f64; 2],
    pub disagreement: f64,
}

impl SyntheticOutcome {
    pub fn recovered(&self, threshold: f64) -> bool {
        self.feature_agreement.iter().all(|&a| a >= threshold)
    }
}

pub fn score_synthetic(net: &Network, task: &SyntheticTask) -> Result<SyntheticOutcome, NnError> {
    let mut agree = [[0usize; 2]; 2]; // [head][feature]
    let mut disagree = 0usize;
    for (x, &(a, b)) in task.data.unlabeled.iter().zip(&task.unlabeled_features) {
        let p = head_probabilities(net, x)?;
        let pred = [u8::from(p[0] >= 0.5), u8::from(p[1] >= 0.5)];
        for h in 0..2 {
            agree[h][0] += usize::from(pred[h] == a);
            agree[h][1] += usize::from(pred[h] == b);
        }
        disagree += usize::from(pred[0] != pred[1]);
    }
    let n = task.data.unlabeled.len().max(1) as f64;
    let straight = [agree[0][0] as f64 / n, agree[1][1] as f64 / n];
    let crossed = [agree[0][1] as f64 / n, agree[1][0] as f64 / n];
    let feature_agreement = if straight[0].min(straight[1]) >= crossed[0].min(crossed[1]) {
        straight
    } else {
        crossed
    };
    Ok(SyntheticOutcome {
        feature_agreement,
        disagreement: disagree as f64 / n,
    })
}

/// Default hyperparameters for the synthetic task.
pub fn synthetic_hyper(lambda_mi: f64, seed: u64) -> DiverseHyper {
    DiverseHyper {
        lambda_mi,
        epochs: 200,
        labeled_batch: 64,
        unlabeled_batch: 64,
        hidden: vec![16],
        adam: AdamHyper {
            lr: 1e-2,
            ..AdamHyper::default()
        },
        seed,
        ..DiverseHyper::default()
    }
}

pub fn run_synthetic(lambda_mi: f64, seed: u64) -> Result<SyntheticOutcome, ExtrapolateError> {
    let task = synthetic_task(512, 512, 0.5, seed);
    let (net, _) = fit_diverse(&task.data, 2, &synthetic_hyper(lambda_mi, seed))?;
    Ok(score_synthetic(&net, &task)?)
}

// ---------------------------------------------------------------------------
// JSON Lines datasets

/// `"count*code"` runs joined by commas, e.g. `"45*0,15*1"`.
pub fn rle_encode(codes: &[u8]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < codes.len() {
        let c = codes[i];
        let mut j = i;
        while j < codes.len() && codes[j] == c {
            j += 1;
        }
        if !out.is_empty() {
            out.push(',');
        }
        let _ = write!(out, "{}*{}", j - i, c);
        i = j;
    }
    out
}

pub fn rle_decode(text: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    if text.is_empty() {
        return Ok(out);
    }
    for run in text.split(',') {
        let (n, c) = run.split_once('*').ok_or_else(|| format!("bad run {run:?}"))?;
        let n: usize = n.parse().map_err(|_| format!("bad count in {run:?}"))?;
        let c: u8 = c.parse().map_err(|_| format!("bad code in {run:?}"))?;
        out.extend(std::iter::repeat_n(c, n));
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct JsonRecord {
    provenance: Provenance,
    action_code: u8,
    frames: [String; 2],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    label: Option<u8>,
}

impl JsonRecord {
    fn new(provenance: Provenance, obs: &Observation, label: Option<u8>) -> Self {
        Self {
            provenance,
            action_code: obs.action.code(),
            frames: [rle_encode(obs.prev.codes()), rle_encode(obs.cur.codes())],
            label,
        }
    }

    fn observation(&self) -> Result<Observation, String> {
        let frame = |s: &str| -> Result<Frame, String> {
            let codes = rle_decode(s)?;
            let w = (codes.len() as f64).sqrt().round() as usize;
            Frame::from_codes(w, codes).map_err(|e| e.to_string())
        };
        let action = Action::from_code(self.action_code).ok_or_else(|| format!("bad action code {}", self.action_code))?;
        crate::obs::make_observation(frame(&self.frames[0])?, frame(&self.frames[1])?, action).map_err(|e| e.to_string())
    }
}

fn write_lines(path: &Path, lines: impl Iterator<Item = JsonRecord>) -> Result<(), ExtrapolateError> {
    let io = |source| ExtrapolateError::Io {
        path: path.into(),
        source,
    };
    let mut out = std::io::BufWriter::new(crate::checkpoint::ensure_parent(path).and_then(|()| fs::File::create(path)).map_err(io)?);
    for rec in lines {
        let line = serde_json::to_string(&rec).expect("records serialise");
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_lines(path: &Path) -> Result<Vec<JsonRecord>, ExtrapolateError> {
    let io = |source| ExtrapolateError::Io {
        path: path.into(),
        source,
    };
    let file = fs::File::open(path).map_err(io)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ExtrapolateError::Dataset {
            path: path.into(),
            line: i + 1,
            reason: e.to_string(),
        })?);
    }
    Ok(out)
}

fn to_obs(path: &Path, line: usize, rec: &JsonRecord) -> Result<Observation, ExtrapolateError> {
    rec.observation().map_err(|reason| ExtrapolateError::Dataset {
        path: path.into(),
        line,
        reason,
    })
}

impl LabeledSet {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), ExtrapolateError> {
        write_lines(
            path,
            self.records
                .iter()
                .map(|r| JsonRecord::new(r.provenance, &r.observation, Some(r.label))),
        )
    }

    /// Reads a labeled dataset. `neg_per_pos` is not stored per line and is
    /// supplied by the caller.
    pub fn load_jsonl(path: &Path, neg_per_pos: usize) -> Result<Self, ExtrapolateError> {
        let mut records = Vec::new();
        for (i, rec) in read_lines(path)?.iter().enumerate() {
            let label = rec.label.filter(|&l| l <= 1).ok_or_else(|| ExtrapolateError::Dataset {
                path: path.into(),
                line: i + 1,
                reason: "missing or invalid label".into(),
            })?;
            records.push(LabeledRecord {
                provenance: rec.provenance,
                observation: to_obs(path, i + 1, rec)?,
                label,
            });
        }
        Ok(Self {
            records,
            neg_per_pos,
        })
    }
}

impl UnlabeledSet {
    pub fn save_jsonl(&self, path: &Path) -> Result<(), ExtrapolateError> {
        write_lines(
            path,
            self.records
                .iter()
                .map(|r| JsonRecord::new(r.provenance, &r.observation, None)),
        )
    }

    /// Reads an unlabeled dataset; any line carrying a label is rejected.
    pub fn load_jsonl(path: &Path) -> Result<Self, ExtrapolateError> {
        let mut records = Vec::new();
        for (i, rec) in read_lines(path)?.iter().enumerate() {
            if rec.label.is_some() {
                return Err(ExtrapolateError::Dataset {
                    path: path.into(),
                    line: i + 1,
                    reason: "unlabeled record carries a label".into(),
                });
            }
            records.push(UnlabeledRecord {
                provenance: rec.provenance,
                observation: to_obs(path, i + 1, rec)?,
            });
        }
        Ok(Self { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn independent_constant_batches_have_zero_mi() {
        let p = vec![0.5; 16];
        assert_eq!(mutual_information(&p, &p).unwrap(), 0.0);
        let q: Vec<f64> = (0..16).map(|i| 0.1 + 0.05 * i as f64).collect();
        assert!(mutual_information(&q, &[0.3; 16]).unwrap().abs() < 1e-15);
    }

    #[test]
    fn correlated_coins_approach_ln2() {
        let eps = 1e-9;
        let p: Vec<f64> = (0..100).map(|i| if i % 2 == 0 { eps } else { 1.0 - eps }).collect();
        let mi = mutual_information(&p, &p).unwrap();
        assert!((mi - std::f64::consts::LN_2).abs() < 1e-3, "{mi}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        assert!(mutual_information(&[], &[]).is_err());
        assert!(mutual_information(&[0.5], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn mi_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let q: Vec<f64> = (0..12).map(|_| rng.gen_range(0.05..0.95)).collect();
        let (_, dp, dq) = mutual_information_grad(&p, &q).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let mut pp = p.clone();
            pp[i] += h;
            let mut pm = p.clone();
            pm[i] -= h;
            let fd = (mutual_information(&pp, &q).unwrap() - mutual_information(&pm, &q).unwrap()) / (2.0 * h);
            assert!((fd - dp[i]).abs() < 1e-7, "p[{i}]: {fd} vs {}", dp[i]);
            let mut qp = q.clone();
            qp[i] += h;
            let mut qm = q.clone();
            qm[i] -= h;
            let fd = (mutual_information(&p, &qp).unwrap() - mutual_information(&p, &qm).unwrap()) / (2.0 * h);
            assert!((fd - dq[i]).abs() < 1e-7, "q[{i}]: {fd} vs {}", dq[i]);
        }
    }

    #[test]
    fn rle_round_trip() {
        let codes = vec![0, 0, 0, 1, 1, 5, 0];
        assert_eq!(rle_encode(&codes), "3*0,2*1,1*5,1*0");
        assert_eq!(rle_decode(&rle_encode(&codes)).unwrap(), codes);
        assert!(rle_decode("3x0").is_err());
    }

    #[test]
    fn class_weights_balance_classes() {
        let w = class_weights(&[0, 0, 0, 1]).unwrap();
        assert!((w[0] * 3.0 - w[1]).abs() < 1e-12);
        assert!(class_weights(&[0, 0]).is_err());
    }

    #[test]
    fn probes_have_expected_structure() {
        use crate::env::CellClass;
        let (walls, coins) = order_probes();
        for o in &walls {
            assert_eq!(o.cur.count(CellClass::Coin), 0);
            let c = DEFAULT_WINDOW / 2;
            assert_eq!(o.cur.get(c, c + 1), CellClass::Wall);
        }
        for o in &coins {
            assert_eq!(o.prev.count(CellClass::Coin), 1);
            assert_eq!(o.cur.count(CellClass::Coin), 0);
        }
    }

    #[test]
    fn swap_heads_swaps_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net: Network = Network::new(pair_spec(3, &[4]), &mut rng);
        let x = [0.2f32, -0.4, 0.9];
        let before = net.forward(&x).unwrap();
        swap_heads(&mut net);
        let after = net.forward(&x).unwrap();
        assert_eq!(before[0], after[1]);
        assert_eq!(before[1], after[0]);
    }
}
