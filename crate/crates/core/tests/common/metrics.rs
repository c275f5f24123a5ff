//! Brute-force metric oracles shared by the eval and acceptance targets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sissa_core::eval::*;

/// Brute-force one-vs-rest counts straight from the label vectors.
pub fn oracle_counts(truth: &[usize], pred: &[usize], c: usize) -> (u64, u64, u64, u64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&t, &p) in truth.iter().zip(pred) {
        match (t == c, p == c) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    (tp, fp, fn_, tn)
}

pub fn div(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Probability that a positive outscores a negative, ties counting half.
pub fn pairwise_auc(truth: &[usize], scores: &[f64], c: usize) -> f64 {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &ti) in truth.iter().enumerate() {
        if ti != c {
            continue;
        }
        for (j, &tj) in truth.iter().enumerate() {
            if tj == c {
                continue;
            }
            pairs += 1;
            twice += if scores[i] > scores[j] { 2 } else { u128::from(scores[i] == scores[j]) };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

pub struct Instance {
    pub truth: Vec<usize>,
    pub pred: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
}

pub fn instance(rng: &mut ChaCha8Rng) -> Instance {
    let n = rng.gen_range(20..300);
    let skill = rng.gen::<f64>();
    // coarse levels force ties in the scores
    let levels = *[4.0, 20.0, 1e6].get(rng.gen_range(0..3)).unwrap();
    let truth: Vec<usize> = (0..n).map(|_| rng.gen_range(0..7)).collect();
    let pred = truth.iter().map(|&t| if rng.gen::<f64>() < skill { t } else { rng.gen_range(0..7) }).collect();
    let probs = truth
        .iter()
        .map(|&t| {
            let raw: Vec<f64> = (0..7).map(|c| ((rng.gen::<f64>() + skill * f64::from(c == t as u8)) * levels).round()).collect();
            let s: f64 = raw.iter().sum::<f64>().max(1.0);
            raw.iter().map(|r| r / s).collect()
        })
        .collect();
    Instance { truth, pred, probs }
}

/// Checks confusion, per-class metrics, grouping and AUC of `count` random
/// instances against the oracles; panics on the first disagreement.
pub fn check_random_instances(seed: u64, count: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..count {
        let inst = instance(&mut rng);
        let cm = confusion(&inst.truth, &inst.pred, 7).unwrap();
        for t in 0..7 {
            for p in 0..7 {
                let n = inst.truth.iter().zip(&inst.pred).filter(|&(&a, &b)| a == t && b == p).count() as u64;
                assert_eq!(cm.counts[t][p], n);
            }
        }
        let rep = metrics(&cm, &class_names());
        for c in 0..7 {
            let (tp, fp, fn_, tn) = oracle_counts(&inst.truth, &inst.pred, c);
            let (p, r) = (div(tp, tp + fp), div(tp, tp + fn_));
            let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
            let m = rep.per_class[c];
            assert_eq!((m.precision, m.recall, m.f1, m.support), (p, r, f1, tp + fn_));
            assert_eq!(m.accuracy, div(tp + tn, inst.truth.len() as u64));
        }
        // grouping two ways: collapse the matrix, or relabel and recount
        let g = |v: &[usize]| v.iter().map(|&c| ATTACK_GROUPING[c]).collect::<Vec<_>>();
        let recount = metrics(&confusion(&g(&inst.truth), &g(&inst.pred), 3).unwrap(), &group_names());
        assert_eq!(grouped_metrics(&cm), recount);
        for c in 0..7 {
            let scores: Vec<f64> = inst.probs.iter().map(|p| p[c]).collect();
            match roc_auc(&inst.truth, &inst.probs, c) {
                Ok(roc) => assert_eq!(roc.auc, pairwise_auc(&inst.truth, &scores, c)),
                Err(EvalError::DegenerateClass(k)) => assert_eq!(k, c),
                Err(e) => panic!("{e}"),
            }
        }
    }
}

pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// A 515-per-class validation matrix consistent with every published
/// seven-class and grouped row of the best model.
pub fn published_confusion() -> ConfusionMatrix {
    let diag = [512, 514, 515, 513, 514, 515, 511];
    let mut counts = vec![vec![0u64; 7]; 7];
    for (c, &d) in diag.iter().enumerate() {
        counts[c][c] = d;
    }
    counts[0][6] = 3;
    counts[6][0] = 4;
    counts[3][1] = 2;
    counts[1][4] = 1;
    counts[4][6] = 1;
    ConfusionMatrix { counts }
}
