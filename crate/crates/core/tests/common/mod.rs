//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

pub mod gradcheck;

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tkknn::strategies::{PoolPrediction, ScoredCandidate};

/// Supervised contrastive loss written as the textbook double sum, one
/// anchor at a time, with no normalization tricks or log-sum-exp shift.
pub fn naive_supcon(anchors: &Array2<f64>, labels: &[usize], tau: f64) -> f64 {
    let n = anchors.nrows();
    let unit: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let row = anchors.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter().map(|v| v / norm).collect()
        })
        .collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    let mut anchors_used = 0;
    for i in 0..n {
        let pos: Vec<usize> = (0..n).filter(|&p| p != i && labels[p] == labels[i]).collect();
        if pos.is_empty() {
            continue;
        }
        anchors_used += 1;
        let mut denom = 0.0;
        for a in 0..n {
            if a != i {
                denom += (dot(&unit[i], &unit[a]) / tau).exp();
            }
        }
        let mut term = 0.0;
        for &p in &pos {
            term += ((dot(&unit[i], &unit[p]) / tau).exp() / denom).ln();
        }
        total += -term / pos.len() as f64;
    }
    if anchors_used == 0 {
        0.0
    } else {
        total / anchors_used as f64
    }
}

/// Sorting key used by every brute-force selection oracle: score
/// descending, id ascending. Written with partial_cmp on purpose.
fn by_score_then_id(a: &(u64, usize, f64), b: &(u64, usize, f64)) -> std::cmp::Ordering {
    b.2.partial_cmp(&a.2).unwrap().then(a.0.cmp(&b.0))
}

/// Ids chosen by balanced top-k, computed class by class.
pub fn brute_balanced(cands: &[ScoredCandidate], k: usize) -> Vec<u64> {
    let mut per_class: BTreeMap<usize, Vec<(u64, usize, f64)>> = BTreeMap::new();
    for c in cands {
        per_class
            .entry(c.predicted_class)
            .or_default()
            .push((c.id, c.predicted_class, c.score));
    }
    let mut chosen = Vec::new();
    for (_, mut list) in per_class {
        list.sort_by(by_score_then_id);
        chosen.extend(list.iter().take(k).map(|t| t.0));
    }
    chosen.sort_unstable();
    chosen
}

pub fn brute_unbalanced(cands: &[ScoredCandidate], k: usize, num_classes: usize) -> Vec<u64> {
    let mut list: Vec<(u64, usize, f64)> = cands
        .iter()
        .map(|c| (c.id, c.predicted_class, c.score))
        .collect();
    list.sort_by(by_score_then_id);
    let mut chosen: Vec<u64> = list.iter().take(k * num_classes).map(|t| t.0).collect();
    chosen.sort_unstable();
    chosen
}

pub fn brute_threshold(preds: &[PoolPrediction], tau: f64) -> Vec<u64> {
    let mut out = Vec::new();
    for p in preds {
        if !(p.confidence < tau) {
            out.push(p.id);
        }
    }
    out.sort_unstable();
    out
}

/// Random candidates with a small score alphabet, so ties are common.
pub fn random_candidates(rng: &mut ChaCha8Rng, max_n: usize, num_classes: usize) -> Vec<ScoredCandidate> {
    let n = rng.gen_range(0..=max_n);
    let mut ids: Vec<u64> = (0..n as u64 * 3).collect();
    rand::seq::SliceRandom::shuffle(ids.as_mut_slice(), rng);
    (0..n)
        .map(|i| {
            let score = if rng.gen_bool(0.3) {
                rng.gen_range(0..5) as f64 / 4.0
            } else {
                rng.gen::<f64>()
            };
            ScoredCandidate {
                id: ids[i],
                predicted_class: rng.gen_range(0..num_classes),
                model_prob: score,
                best_sim: None,
                score,
            }
        })
        .collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// Central-difference gradient of `f` at `x`.
pub fn numeric_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut grad = Array2::zeros(x.dim());
    let mut probe = x.clone();
    for idx in ndarray::indices(x.dim()) {
        let orig = probe[idx];
        probe[idx] = orig + h;
        let up = f(&probe);
        probe[idx] = orig - h;
        let down = f(&probe);
        probe[idx] = orig;
        grad[idx] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest elementwise relative error. Entries where both gradients are
/// below `floor` in magnitude are compared against `floor` instead.
pub fn max_rel_error<'a>(
    analytic: impl IntoIterator<Item = &'a f64>,
    numeric: impl IntoIterator<Item = &'a f64>,
    floor: f64,
) -> f64 {
    analytic
        .into_iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
