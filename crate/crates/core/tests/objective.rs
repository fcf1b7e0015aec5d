//! Loss algebra: the asymmetric loss against an independent BCE oracle at
//! zero focusing, and the knowledge-to-context regularizer's range and
//! zero set.

use proptest::prelude::*;
use pvlr_core::objective::{asl_loss, kcr_loss, total_loss, LossConfig};
use pvlr_core::rng::indexed_rng;
use pvlr_core::tensor::Tape;
use rand::Rng;

/// Plain mean binary cross-entropy with the same probability clamp,
/// written independently of the tape implementation.
fn bce_oracle(probs: &[f64], targets: &[f64], eps: f64) -> f64 {
    let mut sum = 0.0;
    for (&p, &y) in probs.iter().zip(targets) {
        sum -= if y == 1.0 { p.max(eps).ln() } else { (1.0 - p).max(eps).ln() };
    }
    sum / probs.len() as f64
}

fn eval_asl(probs: &[f64], targets: &[f64], cfg: &LossConfig) -> f64 {
    let tape = Tape::new();
    let p = tape.leaf(vec![probs.len()], probs.to_vec());
    let loss = asl_loss(&tape, &p, targets, cfg).unwrap();
    tape.scalar_value(&loss)
}

fn eval_kcr(c: usize, d: usize, a: &[f64], b: &[f64]) -> f64 {
    let tape = Tape::new();
    let ta = tape.leaf(vec![c, d], a.to_vec());
    let tb = tape.leaf(vec![c, d], b.to_vec());
    let loss = kcr_loss(&tape, &ta, &tb).unwrap();
    tape.scalar_value(&loss)
}

/// With both focusing exponents at zero the asymmetric loss reduces to
/// mean BCE, checked on 1000 random (p, y) pairs.
#[test]
fn asl_at_zero_focus_equals_bce() {
    let cfg = LossConfig { gamma_pos: 0.0, gamma_neg: 0.0, ..LossConfig::default() };
    for trial in 0..1000u64 {
        let mut rng = test_rng(trial);
        let n = rng.gen_range(1..12);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let targets: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let got = eval_asl(&probs, &targets, &cfg);
        let want = bce_oracle(&probs, &targets, cfg.prob_clip_eps);
        assert!(
            (got - want).abs() <= 1e-12,
            "trial {trial}: asl {got} vs bce {want}"
        );
    }
}

fn test_rng(trial: u64) -> rand_chacha::ChaCha8Rng {
    indexed_rng(trial, "objective", 0)
}

/// Negative-focus downweighting: with gamma_neg > 0 every confident true
/// negative contributes less than under BCE.
#[test]
fn negative_focus_downweights_easy_negatives() {
    let cfg = LossConfig { gamma_pos: 0.0, gamma_neg: 2.0, ..LossConfig::default() };
    let probs = [0.1, 0.2, 0.05];
    let targets = [0.0, 0.0, 0.0];
    let focused = eval_asl(&probs, &targets, &cfg);
    let plain = bce_oracle(&probs, &targets, cfg.prob_clip_eps);
    assert!(focused < plain, "{focused} !< {plain}");
    // and each term is p^2 * (-ln(1-p)) by hand
    let hand: f64 = probs.iter().map(|p| p * p * -(1.0 - p).ln()).sum::<f64>() / 3.0;
    assert!((focused - hand).abs() <= 1e-12);
}

/// KCR is 1 - mean row cosine, so it lives in [0, 2]; parallel rows give
/// exactly (numerically) zero, anti-parallel rows exactly 2.
#[test]
fn kcr_range_and_extremes() {
    for trial in 0..200u64 {
        let mut rng = test_rng(trial + 5000);
        let c = rng.gen_range(1..5);
        let d = rng.gen_range(1..6);
        let a: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-3.0..3.0) + 0.1).collect();
        let b: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-3.0..3.0) + 0.1).collect();
        let v = eval_kcr(c, d, &a, &b);
        assert!((0.0..=2.0).contains(&v), "trial {trial}: kcr {v}");
        // rowwise-parallel copies (positive scaling per row) give ~0
        let mut scaled = a.clone();
        for i in 0..c {
            let s = rng.gen_range(0.5..3.0);
            for t in 0..d {
                scaled[i * d + t] *= s;
            }
        }
        let z = eval_kcr(c, d, &a, &scaled);
        assert!(z.abs() <= 1e-9, "trial {trial}: parallel kcr {z}");
        // anti-parallel rows give ~2
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        let two = eval_kcr(c, d, &a, &neg);
        assert!((two - 2.0).abs() <= 1e-9, "trial {trial}: antiparallel kcr {two}");
    }
}

/// KCR > 0 whenever some row pair is not parallel (the "= 0 iff parallel"
/// direction).
#[test]
fn kcr_positive_when_not_parallel() {
    let a = [1.0, 0.0, 0.0, 1.0];
    let b = [1.0, 0.0, 1.0, 0.0]; // second row orthogonal
    let v = eval_kcr(2, 2, &a, &b);
    assert!((v - 0.5).abs() <= 1e-12, "got {v}"); // (1 - (1+0)/2)
}

/// total_loss with lambda = 0 returns a value bit-identical to the bare
/// classification term, and include_kcr = false drops the term entirely.
#[test]
fn lambda_zero_and_excluded_kcr_match_bare_loss() {
    let tape = Tape::new();
    let probs = tape.leaf(vec![3], vec![0.2, 0.7, 0.9]);
    let targets = [1.0, 0.0, 1.0];
    let mut cfg = LossConfig::default();
    let cls = asl_loss(&tape, &probs, &targets, &cfg).unwrap();
    let a = tape.leaf(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
    let b = tape.leaf(vec![2, 2], vec![2.0, 1.0, 0.0, 1.0]);
    let kcr = kcr_loss(&tape, &a, &b).unwrap();

    cfg.lambda_kcr = 0.0;
    let with_zero = total_loss(&tape, &cls, Some(&kcr), &cfg).unwrap();
    cfg.include_kcr = false;
    cfg.lambda_kcr = 4.0;
    let without = total_loss(&tape, &cls, Some(&kcr), &cfg).unwrap();
    let bare = tape.scalar_value(&cls);
    assert_eq!(tape.scalar_value(&with_zero).to_bits(), bare.to_bits());
    assert_eq!(tape.scalar_value(&without).to_bits(), bare.to_bits());
}

proptest! {
    /// ASL is nonnegative and finite for probabilities away from the clamp.
    #[test]
    fn prop_asl_nonnegative(
        seed in 0u64..1_000_000,
        n in 1usize..10,
        gp in 0.0f64..4.0,
        gn in 0.0f64..4.0,
    ) {
        let mut rng = test_rng(seed);
        let probs: Vec<f64> = (0..n).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
        let targets: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        let cfg = LossConfig { gamma_pos: gp, gamma_neg: gn, ..LossConfig::default() };
        let v = eval_asl(&probs, &targets, &cfg);
        prop_assert!(v.is_finite() && v >= 0.0);
    }

    /// KCR stays in [0, 2] for arbitrary nondegenerate rows.
    #[test]
    fn prop_kcr_in_range(seed in 0u64..1_000_000, c in 1usize..5, d in 1usize..6) {
        let mut rng = test_rng(seed.wrapping_add(99));
        let a: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-3.0..3.0) + 0.25).collect();
        let b: Vec<f64> = (0..c * d).map(|_| rng.gen_range(-3.0..3.0) + 0.25).collect();
        let v = eval_kcr(c, d, &a, &b);
        prop_assert!((0.0..=2.0).contains(&v));
    }
}
