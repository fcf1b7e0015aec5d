//! Metrics against independent brute-force oracles, plus the ranking
//! invariances of average precision.

use proptest::prelude::*;
use pvlr_core::metrics::{
    average_precision, evaluate, mean_average_precision, threshold_prf, topk_prf, ScoreMatrix,
};
use pvlr_core::rng::indexed_rng;
use rand::Rng;

// --------------------------------------------------------------------------
// oracles, written from the definitions without reusing library internals

/// AP as the mean of precision-at-rank over the ranks of the positives;
/// ranks computed by exhaustive counting (how many items beat me, with
/// index tiebreak) instead of sorting.
fn ap_oracle(scores: &[f64], targets: &[f64]) -> Option<f64> {
    let n = scores.len();
    let pos: Vec<usize> = (0..n).filter(|&i| targets[i] == 1.0).collect();
    if pos.is_empty() {
        return None;
    }
    // rank[i] = 1 + number of items strictly ahead of i in the ordering
    // "higher score first, lower index first on ties"
    let rank = |i: usize| -> usize {
        1 + (0..n)
            .filter(|&j| {
                j != i && (scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            })
            .count()
    };
    let mut sum = 0.0;
    for &i in &pos {
        let r = rank(i);
        let hits_at_r = pos.iter().filter(|&&p| rank(p) <= r).count();
        sum += hits_at_r as f64 / r as f64;
    }
    Some(sum / pos.len() as f64)
}

struct OraclePrf {
    cp: f64,
    cr: f64,
    cf1: f64,
    op: f64,
    or_: f64,
    of1: f64,
}

/// Precision/recall/F1 from an explicit prediction mask, counted with
/// straight loops over (sample, class) pairs.
fn prf_oracle(n: usize, c: usize, targets: &[f64], predicted: &[bool]) -> OraclePrf {
    let mut per_class_p = Vec::new();
    let mut per_class_r = Vec::new();
    let (mut tp, mut fp, mut fneg) = (0.0, 0.0, 0.0);
    for j in 0..c {
        let (mut ctp, mut cfp, mut cfn) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let y = targets[i * c + j] == 1.0;
            let p = predicted[i * c + j];
            if p && y {
                ctp += 1.0;
            } else if p {
                cfp += 1.0;
            } else if y {
                cfn += 1.0;
            }
        }
        per_class_p.push(if ctp + cfp > 0.0 { ctp / (ctp + cfp) } else { 0.0 });
        per_class_r.push(if ctp + cfn > 0.0 { ctp / (ctp + cfn) } else { 0.0 });
        tp += ctp;
        fp += cfp;
        fneg += cfn;
    }
    let cp = per_class_p.iter().sum::<f64>() / c as f64;
    let cr = per_class_r.iter().sum::<f64>() / c as f64;
    let op = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let or_ = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = |p: f64, r: f64| if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    OraclePrf { cp, cr, cf1: f1(cp, cr), op, or_, of1: f1(op, or_) }
}

fn random_instance(trial: u64) -> ScoreMatrix {
    let mut rng = indexed_rng(trial, "metrics", 0);
    let n = rng.gen_range(1..=8);
    let c = rng.gen_range(1..=4);
    // coarse score grid to exercise ties
    let scores: Vec<f64> = (0..n * c).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
    let targets: Vec<f64> =
        (0..n * c).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    ScoreMatrix::new(n, c, scores, targets).unwrap()
}

// --------------------------------------------------------------------------

/// mAP, threshold P/R/F1, and top-k P/R/F1 all agree with the brute-force
/// oracles within 1e-12 on 1000 random instances (N <= 8, C <= 4).
#[test]
fn metrics_match_bruteforce_oracles() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    for trial in 0..1000u64 {
        let m = random_instance(trial);

        // mAP over classes with positives
        let mut sum = 0.0;
        let mut used = 0;
        let mut skipped = 0;
        for j in 0..m.c {
            let s: Vec<f64> = (0..m.n).map(|i| m.scores[i * m.c + j]).collect();
            let t: Vec<f64> = (0..m.n).map(|i| m.targets[i * m.c + j]).collect();
            match ap_oracle(&s, &t) {
                Some(ap) => {
                    sum += ap;
                    used += 1;
                }
                None => skipped += 1,
            }
        }
        let want_map = if used > 0 { sum / used as f64 } else { 0.0 };
        let (got_map, got_skipped) = mean_average_precision(&m);
        assert!(close(got_map, want_map), "trial {trial}: mAP {got_map} vs {want_map}");
        assert_eq!(got_skipped, skipped, "trial {trial}: skipped classes");

        // threshold regime
        let threshold = 0.5;
        let mask: Vec<bool> = m.scores.iter().map(|&s| s >= threshold).collect();
        let want = prf_oracle(m.n, m.c, &m.targets, &mask);
        let (cp, cr, cf1, op, or_, of1) = threshold_prf(&m, threshold).unwrap();
        assert!(close(cp, want.cp) && close(cr, want.cr) && close(cf1, want.cf1));
        assert!(close(op, want.op) && close(or_, want.or_) && close(of1, want.of1));

        // top-k regime: take the k best per row by exhaustive rank counting
        let k = (trial as usize % m.c) + 1;
        let mut mask = vec![false; m.n * m.c];
        for i in 0..m.n {
            let row: Vec<f64> = m.scores[i * m.c..(i + 1) * m.c].to_vec();
            for j in 0..m.c {
                let ahead = (0..m.c)
                    .filter(|&t| t != j && (row[t] > row[j] || (row[t] == row[j] && t < j)))
                    .count();
                if ahead < k {
                    mask[i * m.c + j] = true;
                }
            }
        }
        let want = prf_oracle(m.n, m.c, &m.targets, &mask);
        let (cp, cr, cf1, op, or_, of1) = topk_prf(&m, k).unwrap();
        assert!(close(cp, want.cp) && close(cr, want.cr) && close(cf1, want.cf1));
        assert!(close(op, want.op) && close(or_, want.or_) && close(of1, want.of1));

        // the full report is just these pieces assembled
        let report = evaluate(&m, threshold, 3.min(m.c)).unwrap();
        assert!(close(report.map, want_map));
        assert!(close(report.map_top3, want_map));
    }
}

/// AP is invariant under strictly monotone transforms of the scores
/// (exactly, since only the ordering enters).
#[test]
fn ap_monotone_transform_invariance() {
    for trial in 0..500u64 {
        let mut rng = indexed_rng(trial, "ap_mono", 0);
        let n = rng.gen_range(1..=10);
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mut targets: Vec<f64> =
            (0..n).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect();
        targets[rng.gen_range(0..n)] = 1.0; // ensure a positive
        let base = average_precision(&scores, &targets).unwrap();
        for f in [
            |s: f64| 3.0 * s + 1.0,
            |s: f64| s.exp(),
            |s: f64| s.atan(),
            |s: f64| s * s * s + s,
        ] {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let got = average_precision(&mapped, &targets).unwrap();
            assert_eq!(got.to_bits(), base.to_bits(), "trial {trial}");
        }
    }
}

/// Hand cases: perfect ranking gives AP 1; a single positive ranked last
/// among n gives 1/n; all-positive targets give AP 1 regardless of order.
#[test]
fn ap_hand_cases() {
    let ap = |s: &[f64], t: &[f64]| average_precision(s, t).unwrap();
    assert_eq!(ap(&[0.9, 0.8, 0.1], &[1.0, 1.0, 0.0]), 1.0);
    assert_eq!(ap(&[0.9, 0.8, 0.1], &[0.0, 0.0, 1.0]), 1.0 / 3.0);
    assert_eq!(ap(&[0.1, 0.5, 0.9], &[1.0, 1.0, 1.0]), 1.0);
    // positive tied with a negative: lower index wins the tie
    assert_eq!(ap(&[0.5, 0.5], &[1.0, 0.0]), 1.0);
    assert_eq!(ap(&[0.5, 0.5], &[0.0, 1.0]), 0.5);
    assert!(average_precision(&[0.3, 0.4], &[0.0, 0.0]).is_none());
}

/// Score matrices with malformed targets or sizes are rejected.
#[test]
fn score_matrix_validation() {
    assert!(ScoreMatrix::new(2, 2, vec![0.0; 4], vec![0.0, 1.0, 0.5, 0.0]).is_err());
    assert!(ScoreMatrix::new(2, 2, vec![0.0; 3], vec![0.0; 4]).is_err());
    assert!(ScoreMatrix::new(2, 2, vec![0.0; 4], vec![0.0; 4]).is_ok());
}

proptest! {
    /// All reported values stay inside [0, 1].
    #[test]
    fn prop_metrics_in_unit_interval(trial in 0u64..1_000_000, k in 1usize..4) {
        let m = random_instance(trial);
        let report = evaluate(&m, 0.5, k.min(m.c)).unwrap();
        for v in [
            report.map, report.cp, report.cr, report.cf1,
            report.op, report.or_, report.of1,
            report.cp_top3, report.cr_top3, report.cf1_top3,
            report.op_top3, report.or_top3, report.of1_top3,
        ] {
            prop_assert!((0.0..=1.0).contains(&v), "value {v}");
        }
    }
}
