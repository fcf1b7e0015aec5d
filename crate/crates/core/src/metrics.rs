//! Evaluation metrics: mAP plus class-wise and overall precision/recall/F1
//! for the threshold ("ALL") and top-k regimes.
//!
//! Conventions (all documented because variants differ):
//! - AP is the mean of precision at the ranks of positives (no
//!   interpolation); ties in scores break by ascending original index.
//! - CP/CR are unweighted means of per-class precision/recall with empty
//!   denominators contributing 0; CF1 = 2*CP*CR/(CP+CR).
//! - OP/OR pool counts over all (sample, class) pairs.
//! - Classes with zero positives are skipped by mAP and counted.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Scores and binary targets for N samples x C classes, row-major.
#[derive(Clone, Debug)]
pub struct ScoreMatrix {
    pub n: usize,
    pub c: usize,
    pub scores: Vec<f64>,
    pub targets: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(n: usize, c: usize, scores: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if scores.len() != n * c || targets.len() != n * c {
            return Err(Error::Dimension(format!(
                "score matrix: {}x{} vs {} scores / {} targets",
                n,
                c,
                scores.len(),
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::Label(format!("target entry {bad} outside {{0,1}}")));
        }
        Ok(ScoreMatrix { n, c, scores, targets })
    }

    fn column(&self, j: usize) -> (Vec<f64>, Vec<f64>) {
        let s = (0..self.n).map(|i| self.scores[i * self.c + j]).collect();
        let t = (0..self.n).map(|i| self.targets[i * self.c + j]).collect();
        (s, t)
    }
}

/// All reported metrics for one evaluation, values in `[0, 1]`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub map: f64,
    pub cp: f64,
    pub cr: f64,
    pub cf1: f64,
    pub op: f64,
    pub or_: f64,
    pub of1: f64,
    pub map_top3: f64,
    pub cp_top3: f64,
    pub cr_top3: f64,
    pub cf1_top3: f64,
    pub op_top3: f64,
    pub or_top3: f64,
    pub of1_top3: f64,
    pub skipped_classes: usize,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str =
        "map,cp,cr,cf1,op,or,of1,map_top3,cp_top3,cr_top3,cf1_top3,op_top3,or_top3,of1_top3";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.map,
            self.cp,
            self.cr,
            self.cf1,
            self.op,
            self.or_,
            self.of1,
            self.map_top3,
            self.cp_top3,
            self.cr_top3,
            self.cf1_top3,
            self.op_top3,
            self.or_top3,
            self.of1_top3
        )
    }
}

/// Indices sorted by descending score, ties by ascending index.
fn ranked_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b))
    });
    idx
}

/// Average precision for one class; `None` when the class has no positive.
pub fn average_precision(scores: &[f64], targets: &[f64]) -> Option<f64> {
    let positives = targets.iter().filter(|&&t| t == 1.0).count();
    if positives == 0 {
        return None;
    }
    let order = ranked_indices(scores);
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if targets[i] == 1.0 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Some(sum / positives as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn prf_from_predictions(m: &ScoreMatrix, predicted: &[bool]) -> (f64, f64, f64, f64, f64, f64) {
    let (mut cp_sum, mut cr_sum) = (0.0, 0.0);
    let (mut tp_all, mut fp_all, mut fn_all) = (0usize, 0usize, 0usize);
    for j in 0..m.c {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for i in 0..m.n {
            let pos = m.targets[i * m.c + j] == 1.0;
            let pred = predicted[i * m.c + j];
            match (pred, pos) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        cp_sum += if tp + fp > 0 { tp as f64 / (tp + fp) as f64 } else { 0.0 };
        cr_sum += if tp + fneg > 0 { tp as f64 / (tp + fneg) as f64 } else { 0.0 };
        tp_all += tp;
        fp_all += fp;
        fn_all += fneg;
    }
    let cp = cp_sum / m.c as f64;
    let cr = cr_sum / m.c as f64;
    let op = if tp_all + fp_all > 0 { tp_all as f64 / (tp_all + fp_all) as f64 } else { 0.0 };
    let or_ = if tp_all + fn_all > 0 { tp_all as f64 / (tp_all + fn_all) as f64 } else { 0.0 };
    (cp, cr, f1(cp, cr), op, or_, f1(op, or_))
}

/// Threshold regime: predicted positive iff `score >= threshold`.
pub fn threshold_prf(m: &ScoreMatrix, threshold: f64) -> Result<(f64, f64, f64, f64, f64, f64)> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0,1)")));
    }
    let predicted: Vec<bool> = m.scores.iter().map(|&s| s >= threshold).collect();
    Ok(prf_from_predictions(m, &predicted))
}

/// Top-k regime: per sample, exactly the k best-scored classes are
/// predicted positive (ties by ascending class index).
pub fn topk_prf(m: &ScoreMatrix, k: usize) -> Result<(f64, f64, f64, f64, f64, f64)> {
    if k == 0 || k > m.c {
        return Err(Error::Config(format!("top-k {} outside 1..={}", k, m.c)));
    }
    let mut predicted = vec![false; m.n * m.c];
    for i in 0..m.n {
        let row = &m.scores[i * m.c..(i + 1) * m.c];
        for &j in ranked_indices(row).iter().take(k) {
            predicted[i * m.c + j] = true;
        }
    }
    Ok(prf_from_predictions(m, &predicted))
}

/// mAP over classes with at least one positive; also returns the skipped
/// class count.
pub fn mean_average_precision(m: &ScoreMatrix) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for j in 0..m.c {
        let (s, t) = m.column(j);
        match average_precision(&s, &t) {
            Some(ap) => {
                sum += ap;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    let map = if used > 0 { sum / used as f64 } else { 0.0 };
    (map, skipped)
}

/// Full report for the ALL (threshold) and top-k regimes.
pub fn evaluate(m: &ScoreMatrix, threshold: f64, k: usize) -> Result<MetricsReport> {
    let (map, skipped) = mean_average_precision(m);
    let (cp, cr, cf1, op, or_, of1) = threshold_prf(m, threshold)?;
    let k = k.min(m.c);
    let (cp3, cr3, cf13, op3, or3, of13) = topk_prf(m, k)?;
    Ok(MetricsReport {
        map,
        cp,
        cr,
        cf1,
        op,
        or_,
        of1,
        // ranking-based, so identical in both regimes
        map_top3: map,
        cp_top3: cp3,
        cr_top3: cr3,
        cf1_top3: cf13,
        op_top3: op3,
        or_top3: or3,
        of1_top3: of13,
        skipped_classes: skipped,
    })
}

/// Reads a score or target matrix from CSV: header row of class names, one
/// row per sample.
pub fn matrix_from_csv(text: &str) -> Result<(Vec<String>, usize, Vec<f64>)> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format { offset: 0, msg: "empty CSV".into() })?;
    let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
    let c = names.len();
    let mut values = Vec::new();
    let mut n = 0usize;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != c {
            return Err(Error::Format {
                offset: 0,
                msg: format!("row {} has {} fields, expected {}", lineno + 2, row.len(), c),
            });
        }
        for field in row {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                offset: 0,
                msg: format!("row {}: bad float {field:?}", lineno + 2),
            })?;
            values.push(v);
        }
        n += 1;
    }
    Ok((names, n, values))
}
