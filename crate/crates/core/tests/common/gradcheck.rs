//! Finite-difference checks. Each function returns the worst relative error
//! seen over its batches.

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tkknn::losses::{
    ce_loss, combined_loss, koleo_loss, supcon_loss, LossSpec, MultiViewBatch, SupConForm,
};
use tkknn::model::{softmax_rows, DropoutMasks, Model, ModelConfig};

use super::{max_rel_error, numeric_grad, random_matrix};

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
/// KoLeo is not differentiable where two neighbors are equally near.
const MIN_MARGIN: f64 = 1e-3;

/// Gap between the nearest and second-nearest distance, minimized over
/// points.
pub fn nn_margin(points: ArrayView2<f64>) -> f64 {
    let n = points.nrows();
    let mut margin = f64::INFINITY;
    for i in 0..n {
        let mut d: Vec<f64> = (0..n)
            .filter(|&j| j != i)
            .map(|j| {
                let diff = &points.row(i) - &points.row(j);
                diff.dot(&diff).sqrt()
            })
            .collect();
        d.sort_by(f64::total_cmp);
        if d.len() >= 2 {
            margin = margin.min(d[1] - d[0]);
        }
    }
    margin
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..classes)).collect()
}

pub fn ce(batches: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..batches {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.gen_range(1..8);
        let logits = random_matrix(&mut rng, b, 5) * 3.0;
        let labels = random_labels(&mut rng, b, 5);
        let analytic = ce_loss(softmax_rows(&logits).view(), &labels).unwrap().grad;
        let numeric = numeric_grad(&logits, H, |l| {
            ce_loss(softmax_rows(l).view(), &labels).unwrap().value
        });
        worst = worst.max(max_rel_error(&analytic, &numeric, FLOOR));
    }
    worst
}

fn supcon_batch(seed: u64) -> MultiViewBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let b = rng.gen_range(2..7);
    let first = random_matrix(&mut rng, b, 4);
    let second = &first + &(random_matrix(&mut rng, b, 4) * 0.3);
    let labels = random_labels(&mut rng, b, 3);
    MultiViewBatch::from_views(first.view(), second.view(), &labels).unwrap()
}

/// The literal form gets strictly positive anchors so every similarity is
/// positive.
pub fn supcon(batches: u64, form: SupConForm) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..batches {
        let mut batch = supcon_batch(seed);
        if form == SupConForm::Literal {
            batch.anchors = batch.anchors.mapv(f64::abs) + 0.2;
        }
        let analytic = supcon_loss(&batch, 0.07, form).unwrap().grad;
        let numeric = numeric_grad(&batch.anchors, H, |a| {
            let probe = MultiViewBatch {
                anchors: a.clone(),
                ..batch.clone()
            };
            supcon_loss(&probe, 0.07, form).unwrap().value
        });
        worst = worst.max(max_rel_error(&analytic, &numeric, FLOOR));
    }
    worst
}

pub fn koleo(batches: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut seed = 200;
    while checked < batches {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = rng.gen_range(2..9);
        let points = random_matrix(&mut rng, n, 3);
        if nn_margin(points.view()) < MIN_MARGIN {
            continue;
        }
        let analytic = koleo_loss(points.view()).grad;
        let numeric = numeric_grad(&points, H, |p| koleo_loss(p.view()).value);
        worst = worst.max(max_rel_error(&analytic, &numeric, FLOOR));
        checked += 1;
    }
    worst
}

/// The full objective with respect to logits and both views' projections.
pub fn combined(batches: u64) -> f64 {
    let spec = LossSpec::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut seed = 300;
    while checked < batches {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = rng.gen_range(2..7);
        let logits = random_matrix(&mut rng, b, 4) * 2.0;
        let labels = random_labels(&mut rng, b, 4);
        let anchors = random_matrix(&mut rng, 2 * b, 5);
        if nn_margin(anchors.slice(s![..b, ..])) < MIN_MARGIN {
            continue;
        }
        let views = MultiViewBatch::from_views(
            anchors.slice(s![..b, ..]),
            anchors.slice(s![b.., ..]),
            &labels,
        )
        .unwrap();
        let total = |l: &Array2<f64>, a: &Array2<f64>| {
            let v = MultiViewBatch {
                anchors: a.clone(),
                ..views.clone()
            };
            combined_loss(&spec, softmax_rows(l).view(), &labels, &v)
                .unwrap()
                .breakdown
                .total
        };
        let out = combined_loss(&spec, softmax_rows(&logits).view(), &labels, &views).unwrap();
        let num_logits = numeric_grad(&logits, H, |l| total(l, &anchors));
        let num_anchors = numeric_grad(&anchors, H, |a| total(&logits, a));
        worst = worst
            .max(max_rel_error(&out.logits, &num_logits, FLOOR))
            .max(max_rel_error(&out.anchors, &num_anchors, FLOOR));
        checked += 1;
    }
    worst
}

/// Backprop through the whole network under the full objective, with the
/// dropout masks held fixed.
pub fn model(batches: u64) -> f64 {
    let spec = LossSpec::default();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let mut seed = 400;
    while checked < batches {
        seed += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let config = ModelConfig {
            hidden_dim: 6,
            proj_dim: 4,
            hidden_layers: if seed % 2 == 0 { 1 } else { 2 },
            ..ModelConfig::new(5, 3)
        };
        let model = Model::new(config, &mut rng).unwrap();
        let b = 5;
        let x = random_matrix(&mut rng, b, 5);
        let labels = random_labels(&mut rng, b, 3);
        let masks = DropoutMasks::sample(b, &config, &mut rng);
        let z = model.encode(x.view()).unwrap();
        let p1 = (&z * &masks.view1).dot(&model.params.proj.weight) + &model.params.proj.bias;
        if nn_margin(p1.view()) < MIN_MARGIN {
            continue;
        }
        let (_, grads) = model.loss_and_grad(x.view(), &labels, &spec, &masks).unwrap();
        let analytic: Vec<f64> = grads.tensors().concat();

        let mut probe = model.clone();
        let mut numeric = Vec::with_capacity(analytic.len());
        for t in 0..probe.params.tensors().len() {
            for i in 0..probe.params.tensors()[t].len() {
                let orig = probe.params.tensors()[t][i];
                probe.params.tensors_mut()[t][i] = orig + H;
                let up = probe.loss(x.view(), &labels, &spec, &masks).unwrap();
                probe.params.tensors_mut()[t][i] = orig - H;
                let down = probe.loss(x.view(), &labels, &spec, &masks).unwrap();
                probe.params.tensors_mut()[t][i] = orig;
                numeric.push((up - down) / (2.0 * H));
            }
        }
        worst = worst.max(max_rel_error(&analytic, &numeric, FLOOR));
        checked += 1;
    }
    worst
}
