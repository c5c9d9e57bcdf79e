#![allow(dead_code)]

use coinlab::env::Action;
use coinlab::episode::{simulate_episode, Policy, StepView};
use coinlab::extrapolate::{diverse_loss, pair_spec};
use coinlab::levelgen::{generate_level, LevelDistribution};
use coinlab::nn::{GradientTape, Network};
use coinlab::obs::{encode_input, input_len, Observation, DEFAULT_WINDOW};
use coinlab::ppo::{ppo_objective, LossCoefs, PolicyNet, RolloutBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn name(&self) -> String {
        "random".into()
    }

    fn act(&mut self, _view: &StepView<'_>, rng: &mut ChaCha8Rng) -> Action {
        Action::ALL[rng.gen_range(0..Action::COUNT)]
    }
}

/// Real observations from random play on shifted-distribution levels.
pub fn sample_observations(n: usize, seed: u64) -> Vec<Observation> {
    let dist = LevelDistribution::test();
    let mut out = Vec::with_capacity(n);
    let mut level_seed = seed;
    while out.len() < n {
        let level = generate_level(&dist, level_seed).unwrap();
        let tr = simulate_episode(&mut RandomPolicy, &level, 40, level_seed);
        let mut prev = tr.records[0].frame.clone();
        let mut action = Action::Noop;
        for r in &tr.records {
            out.push(Observation {
                prev: prev.clone(),
                cur: r.frame.clone(),
                action,
            });
            prev = r.frame.clone();
            action = r.action;
            if out.len() == n {
                break;
            }
        }
        level_seed += 1;
    }
    out
}

// Gradient checks

const STEP: f64 = 1e-6;
pub const MAX_REL_ERR: f64 = 1e-4;
pub const CHECKED: usize = 120;

/// Checks `CHECKED` randomly chosen parameters with a non-negligible
/// gradient against central differences; returns the worst relative error.
pub fn check<F>(net: &mut Network<f64>, analytic: &GradientTape, loss: F, seed: u64) -> f64
where
    F: Fn(&Network<f64>) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut candidates: Vec<(usize, usize)> = analytic
        .grads
        .iter()
        .enumerate()
        .flat_map(|(t, g)| g.iter().enumerate().filter(|(_, v)| v.abs() > 1e-7).map(move |(i, _)| (t, i)))
        .collect();
    assert!(candidates.len() >= CHECKED, "only {} parameters carry gradient", candidates.len());
    let mut worst = 0.0f64;
    for _ in 0..CHECKED {
        let (t, i) = candidates.swap_remove(rng.gen_range(0..candidates.len()));
        let original = net.tensors()[t][i];
        net.tensors_mut()[t][i] = original + STEP;
        let up = loss(net);
        net.tensors_mut()[t][i] = original - STEP;
        let down = loss(net);
        net.tensors_mut()[t][i] = original;
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic.grads[t][i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        worst = worst.max(rel);
    }
    worst
}

/// Worst relative error of the PPO objective's gradient on a small policy net.
pub fn policy_gradient_error() -> f64 {
    let mut net: Network<f64> = PolicyNet::new(&[12, 8], 3).net.cast();
    let observations = sample_observations(24, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut batch = RolloutBatch::default();
    for obs in observations {
        let out = net.forward(&encode_input(&obs)).unwrap();
        let logp = coinlab::nn::log_softmax(&out[0]);
        let action = Action::ALL[rng.gen_range(0..Action::COUNT)];
        // ratios spread both inside and outside the clip range
        batch.log_probs.push(logp[action.code() as usize] + rng.gen_range(-0.4..0.4));
        batch.actions.push(action);
        batch.observations.push(obs);
        batch.rewards.push(0.0);
        batch.values.push(0.0);
        batch.dones.push(false);
        batch.advantages.push(rng.gen_range(-2.0..2.0));
        batch.returns.push(rng.gen_range(-1.0..1.0));
    }
    let indices: Vec<usize> = (0..batch.len()).collect();
    let coefs = LossCoefs {
        clip: 0.2,
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    let mut tape = GradientTape::zeros_like(&net);
    ppo_objective(&net, &batch, &indices, coefs, Some(&mut tape)).unwrap();
    let worst = check(
        &mut net,
        &tape,
        |n| ppo_objective(n, &batch, &indices, coefs, None).unwrap().total,
        5,
    );
    worst
}

/// Worst relative error of the diversification loss's gradient on a small pair net.
pub fn pair_gradient_error() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut net: Network<f64> = Network::new(pair_spec(input_len(DEFAULT_WINDOW), &[10, 6]), &mut rng);
    let inputs: Vec<Vec<f32>> = sample_observations(40, 200).iter().map(encode_input).collect();
    let labels: Vec<u8> = (0..20).map(|i| u8::from(i % 3 == 0)).collect();
    let labeled: Vec<(&[f32], u8)> = inputs[..20].iter().map(|x| x.as_slice()).zip(labels).collect();
    let unlabeled: Vec<&[f32]> = inputs[20..].iter().map(|x| x.as_slice()).collect();
    let weights = [0.75, 1.5];
    let mut tape = GradientTape::zeros_like(&net);
    diverse_loss(&net, &labeled, &unlabeled, weights, 10.0, Some(&mut tape)).unwrap();
    let worst = check(
        &mut net,
        &tape,
        |n| diverse_loss(n, &labeled, &unlabeled, weights, 10.0, None).unwrap().total,
        7,
    );
    worst
}

// Advantage estimation

/// Advantages by explicit summation of discounted TD errors, truncated at
/// episode boundaries.
pub fn gae_by_summation(rewards: &[f64], values: &[f64], dones: &[bool], gamma: f64, lambda: f64) -> Vec<f64> {
    let n = rewards.len();
    let delta = |t: usize| {
        let next = if dones[t] { 0.0 } else { values[t + 1] };
        rewards[t] + gamma * next - values[t]
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for k in t..n {
                sum += weight * delta(k);
                if dones[k] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

pub fn random_gae_sequence(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let n = rng.gen_range(1..60);
    let rewards = (0..n).map(|_| if rng.gen_bool(0.2) { rng.gen_range(-1.0..2.0) } else { 0.0 }).collect();
    let values = (0..=n).map(|_| rng.gen_range(-3.0..3.0)).collect();
    let dones = (0..n).map(|_| rng.gen_bool(0.1)).collect();
    (rewards, values, dones)
}

// Mutual information

fn entropy(probs: &[f64]) -> f64 {
    probs.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum()
}

/// `I(A;B) = H(A) + H(B) - H(A,B)` over the batch-averaged joint, summed
/// directly over the four outcomes of each sample.
pub fn mi_by_entropies(p: &[f64], q: &[f64]) -> f64 {
    let n = p.len() as f64;
    let mut joint = [0.0; 4];
    for (&pi, &qi) in p.iter().zip(q) {
        joint[0] += (1.0 - pi) * (1.0 - qi) / n;
        joint[1] += (1.0 - pi) * qi / n;
        joint[2] += pi * (1.0 - qi) / n;
        joint[3] += pi * qi / n;
    }
    let pa = [joint[0] + joint[1], joint[2] + joint[3]];
    let qb = [joint[0] + joint[2], joint[1] + joint[3]];
    (entropy(&pa) + entropy(&qb) - entropy(&joint)).max(0.0)
}

pub fn random_mi_batch(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(1..200);
    let corr = rng.gen_range(0.0..1.0);
    let mut p = Vec::with_capacity(n);
    let mut q = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.gen();
        let b: f64 = if rng.gen_bool(corr) { a } else { rng.gen() };
        p.push(a);
        q.push(b);
    }
    (p, q)
}

