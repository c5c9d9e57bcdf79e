mod common;

use common::{mi_by_entropies, random_mi_batch as random_batch};
use coinlab::extrapolate::{mutual_information, mutual_information_grad, run_synthetic};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn mutual_information_matches_entropy_decomposition_on_1000_batches() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    for _ in 0..1000 {
        let (p, q) = random_batch(&mut rng);
        let got = mutual_information(&p, &q).unwrap();
        let want = mi_by_entropies(&p, &q);
        assert!((got - want).abs() <= 1e-9, "{got} vs {want}");
    }
}

#[test]
fn mutual_information_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    for _ in 0..1000 {
        let (p, q) = random_batch(&mut rng);
        let a = mutual_information(&p, &q).unwrap();
        let b = mutual_information(&q, &p).unwrap();
        assert!((a - b).abs() <= 1e-12);
    }
}

#[test]
fn mutual_information_of_constant_batch_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(63);
    for c in [0.0, 0.3, 0.5, 1.0] {
        let p = vec![c; 64];
        let q: Vec<f64> = (0..64).map(|_| rng.gen()).collect();
        assert!(mutual_information(&p, &q).unwrap().abs() <= 1e-12);
        assert!(mutual_information(&q, &p).unwrap().abs() <= 1e-12);
    }
}

#[test]
fn identical_fair_hard_predictions_carry_ln_2() {
    let p: Vec<f64> = (0..100).map(|i| f64::from(i % 2)).collect();
    let mi = mutual_information(&p, &p).unwrap();
    assert!((mi - 2f64.ln()).abs() <= 1e-3);
}

#[test]
fn mutual_information_rejects_mismatched_batches() {
    assert!(mutual_information(&[0.5], &[0.5, 0.5]).is_err());
    assert!(mutual_information(&[], &[]).is_err());
}

#[test]
fn mutual_information_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    for _ in 0..50 {
        let n = rng.gen_range(2..30);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let q: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..0.95)).collect();
        let (_, dp, dq) = mutual_information_grad(&p, &q).unwrap();
        let h = 1e-6;
        for i in 0..n {
            let mut up = p.clone();
            let mut dn = p.clone();
            up[i] += h;
            dn[i] -= h;
            let num = (mi_by_entropies(&up, &q) - mi_by_entropies(&dn, &q)) / (2.0 * h);
            assert!((num - dp[i]).abs() < 1e-6, "dp[{i}] {} vs {num}", dp[i]);
            let mut up = q.clone();
            let mut dn = q.clone();
            up[i] += h;
            dn[i] -= h;
            let num = (mi_by_entropies(&p, &up) - mi_by_entropies(&p, &dn)) / (2.0 * h);
            assert!((num - dq[i]).abs() < 1e-6, "dq[{i}] {} vs {num}", dq[i]);
        }
    }
}

proptest! {
    #[test]
    fn mutual_information_is_bounded_by_ln_2(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = random_batch(&mut rng);
        let mi = mutual_information(&p, &q).unwrap();
        prop_assert!(mi >= 0.0);
        prop_assert!(mi <= 2f64.ln() + 1e-12);
    }

    #[test]
    fn mutual_information_is_invariant_to_flipping_a_head(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q) = random_batch(&mut rng);
        let flipped: Vec<f64> = p.iter().map(|x| 1.0 - x).collect();
        let a = mutual_information(&p, &q).unwrap();
        let b = mutual_information(&flipped, &q).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn diverse_heads_recover_both_synthetic_features() {
    let out = run_synthetic(10.0, 1).unwrap();
    assert!(out.recovered(0.9), "{out:?}");
}

#[test]
fn synthetic_recovery_fails_without_the_mutual_information_term() {
    let out = run_synthetic(0.0, 1).unwrap();
    assert!(!out.recovered(0.9), "{out:?}");
}
