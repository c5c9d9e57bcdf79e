mod common;

use common::{gae_by_summation, random_gae_sequence as random_sequence};

use coinlab::env::Action;
use coinlab::nn::{Adam, AdamHyper, Network};
use coinlab::ppo::{
    compute_gae, ppo_loss, ppo_update, LossCoefs, PolicyNet, PpoHyper, RolloutBatch,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gae_matches_explicit_summation_on_1000_sequences() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let (r, v, d) = random_sequence(&mut rng);
        let gamma = rng.gen_range(0.8..=1.0);
        let lambda = rng.gen_range(0.0..=1.0);
        let (adv, ret) = compute_gae(&r, &v, &d, gamma, lambda).unwrap();
        let oracle = gae_by_summation(&r, &v, &d, gamma, lambda);
        for t in 0..r.len() {
            worst = worst.max((adv[t] - oracle[t]).abs());
            assert!((ret[t] - (oracle[t] + v[t])).abs() <= 1e-9);
        }
    }
    assert!(worst <= 1e-9, "max deviation {worst:e}");
}

#[test]
fn gae_with_zero_lambda_is_the_one_step_td_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(82);
    for _ in 0..1000 {
        let (r, v, d) = random_sequence(&mut rng);
        let gamma = rng.gen_range(0.8..=1.0);
        let (adv, _) = compute_gae(&r, &v, &d, gamma, 0.0).unwrap();
        for t in 0..r.len() {
            let live = if d[t] { 0.0 } else { 1.0 };
            let delta = r[t] + gamma * v[t + 1] * live - v[t];
            assert_eq!(adv[t], delta);
        }
    }
}

#[test]
fn gae_with_unit_discount_and_lambda_is_monte_carlo() {
    let r = [0.0, 0.0, 1.0, 0.0, 2.0];
    let v = [0.3, -0.2, 0.5, 0.1, 0.9, 4.0];
    let d = [false, false, true, false, false];
    let (_, ret) = compute_gae(&r, &v, &d, 1.0, 1.0).unwrap();
    let expected = [1.0, 1.0, 1.0, 6.0, 6.0];
    for (a, b) in ret.iter().zip(expected) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn gae_rejects_misaligned_inputs() {
    assert!(compute_gae(&[1.0], &[0.0], &[false], 0.9, 0.9).is_err());
    assert!(compute_gae(&[1.0], &[0.0, 0.0], &[false], 1.5, 0.9).is_err());
}

proptest! {
    #[test]
    fn gae_returns_equal_advantages_plus_values(seed in any::<u64>(), gamma in 0.0f64..=1.0, lambda in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, v, d) = random_sequence(&mut rng);
        let (adv, ret) = compute_gae(&r, &v, &d, gamma, lambda).unwrap();
        for t in 0..r.len() {
            prop_assert!((ret[t] - adv[t] - v[t]).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_of_terminal_step_ignores_bootstrap(seed in any::<u64>(), boot in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, mut v, mut d) = random_sequence(&mut rng);
        *d.last_mut().unwrap() = true;
        let (a1, _) = compute_gae(&r, &v, &d, 0.99, 0.95).unwrap();
        *v.last_mut().unwrap() = boot;
        let (a2, _) = compute_gae(&r, &v, &d, 0.99, 0.95).unwrap();
        prop_assert_eq!(a1, a2);
    }
}

/// A policy net with no hidden layers and all-zero weights: uniform action
/// probabilities and a value of zero for every input.
fn uniform_policy() -> PolicyNet {
    PolicyNet::from_network(Network::zeros(PolicyNet::spec(&[]))).unwrap()
}

#[test]
fn ppo_loss_matches_hand_computation_on_three_samples() {
    let policy = uniform_policy();
    let obs = common::sample_observations(3, 5);
    let uniform_logp = (1.0f64 / 9.0).ln();
    let batch = RolloutBatch {
        observations: obs,
        actions: vec![Action::Right, Action::Left, Action::Noop],
        // ratios 1, 1.5 and 0.5
        log_probs: vec![uniform_logp, uniform_logp - 1.5f64.ln(), uniform_logp - 0.5f64.ln()],
        rewards: vec![0.0; 3],
        values: vec![0.0; 3],
        dones: vec![false; 3],
        advantages: vec![1.0, 2.0, -1.0],
        returns: vec![1.0, -1.0, 2.0],
    };
    let coefs = LossCoefs {
        clip: 0.2,
        value_coef: 0.5,
        entropy_coef: 0.01,
    };
    let s = ppo_loss(&policy, &batch, &[0, 1, 2], coefs).unwrap();
    // surrogates: 1·1 = 1; min(3, 1.2·2) = 2.4; min(-0.5, 0.8·-1) = -0.8
    let policy_loss = -(1.0 + 2.4 - 0.8) / 3.0;
    let value_loss = (1.0 + 1.0 + 4.0) / 3.0;
    let entropy = 9.0f64.ln();
    let kl = (0.0 + (0.5 - 1.5f64.ln()) + (-0.5 - 0.5f64.ln())) / 3.0;
    let close = |a: f64, b: f64| (a - b).abs() < 1e-9;
    assert!(close(s.policy_loss, policy_loss), "{}", s.policy_loss);
    assert!(close(s.value_loss, value_loss));
    assert!(close(s.entropy, entropy));
    assert!(close(s.total, policy_loss + 0.5 * value_loss - 0.01 * entropy));
    assert!(close(s.approx_kl, kl));
    assert!(close(s.clip_fraction, 2.0 / 3.0));
}

#[test]
fn ppo_learns_a_two_state_bandit() {
    let obs = common::sample_observations(200, 11);
    let states = [obs[0].clone(), obs[150].clone()];
    assert_ne!(states[0], states[1]);
    let best = [Action::Right, Action::Left];
    let hyper = PpoHyper {
        epochs: 4,
        minibatch: 32,
        entropy_coef: 0.0,
        hidden: vec![16],
        adam: AdamHyper {
            lr: 3e-3,
            ..AdamHyper::default()
        },
        ..PpoHyper::default()
    };
    let mut policy = PolicyNet::new(&hyper.hidden, 3);
    let mut adam = Adam::new(&policy.net, hyper.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let probs_of = |policy: &PolicyNet, s: usize| {
        let input = coinlab::obs::encode_input(&states[s]);
        policy.evaluate(&input).unwrap()
    };
    for iteration in 0..60 {
        let mut batch = RolloutBatch::default();
        for i in 0..128 {
            let s = i % 2;
            let (probs, value) = probs_of(&policy, s);
            let a = coinlab::ppo::sample_action(&probs, &mut rng);
            let reward = if a == best[s] { 1.0 } else { 0.0 };
            batch.observations.push(states[s].clone());
            batch.actions.push(a);
            batch.log_probs.push(probs[a.code() as usize].ln());
            batch.rewards.push(reward);
            batch.values.push(value);
            batch.dones.push(true);
            batch.advantages.push(reward - value);
            batch.returns.push(reward);
        }
        batch.normalise_advantages();
        ppo_update(&mut policy, &mut adam, &batch, &hyper, &mut rng, iteration).unwrap();
    }
    for s in 0..2 {
        let (probs, value) = probs_of(&policy, s);
        let p = probs[best[s].code() as usize];
        assert!(p > 0.9, "state {s}: p(best) = {p}");
        assert!((value - p).abs() < 0.2, "state {s}: value {value} vs {p}");
    }
}
