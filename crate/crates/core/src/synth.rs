//! Gaussian-blob benchmark with easy and hard classes.
//!
//! Easy classes are tight, isolated blobs. Hard classes are wider and come
//! in pairs whose centers are pulled toward each other, so a confident
//! classifier favours the easy ones.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Example};
use crate::engine::{evaluate, features, train_to_convergence, RunConfig};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    /// Distance of every class center from the origin.
    pub radius: f64,
    /// Noise scale of easy classes.
    pub noise: f64,
    /// The last `hard_classes` classes are hard.
    pub hard_classes: usize,
    pub hard_noise: f64,
    /// How far consecutive hard-class pairs are pulled toward their midpoint:
    /// 0 leaves centers alone, 1 makes them identical.
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 8,
            dim: 16,
            per_class: 120,
            radius: 1.0,
            noise: 0.15,
            hard_classes: 4,
            hard_noise: 0.18,
            overlap: 0.7,
            seed: 0,
        }
    }
}

impl SynthSpec {
    /// Same geometry for every class: no hard classes, no overlap.
    pub fn symmetric() -> Self {
        SynthSpec {
            hard_classes: 0,
            overlap: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.dim < 2 || self.per_class < 4 {
            return Err(Error::Config("need num_classes >= 2, dim >= 2, per_class >= 4".into()));
        }
        if !(self.noise > 0.0 && self.hard_noise > 0.0) {
            return Err(Error::Config("noise scales must be > 0".into()));
        }
        if self.hard_classes > self.num_classes {
            return Err(Error::Config("more hard classes than classes".into()));
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return Err(Error::Config("overlap must be in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn is_hard(&self, class: usize) -> bool {
        class >= self.num_classes - self.hard_classes
    }

    pub fn noise_of(&self, class: usize) -> f64 {
        if self.is_hard(class) {
            self.hard_noise
        } else {
            self.noise
        }
    }

    /// Class centers after applying the overlap pull.
    pub fn centers(&self) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        let mut centers = Array2::zeros((self.num_classes, self.dim));
        for mut row in centers.rows_mut() {
            loop {
                row.mapv_inplace(|_| -> f64 { StandardNormal.sample(&mut rng) });
                let n = row.dot(&row).sqrt();
                if n > 1e-9 {
                    row *= self.radius / n;
                    break;
                }
            }
        }
        let first_hard = self.num_classes - self.hard_classes;
        for a in (first_hard..self.num_classes.saturating_sub(1)).step_by(2) {
            let b = a + 1;
            let mid = (&centers.row(a) + &centers.row(b)) / 2.0;
            for c in [a, b] {
                let pulled = &mid + &((&centers.row(c) - &mid) * (1.0 - self.overlap));
                centers.row_mut(c).assign(&pulled);
            }
        }
        centers
    }
}

/// Draws `per_class` points per class and splits each class 70/15/15 into
/// train/val/test. Features are rounded to `f32` so that a dataset written
/// to disk and read back is identical.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let centers = spec.centers();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(2);
    let n_train = (spec.per_class as f64 * 0.70).round() as usize;
    let n_val = (spec.per_class as f64 * 0.15).round() as usize;

    let mut dataset = Dataset {
        num_classes: spec.num_classes,
        class_names: (0..spec.num_classes)
            .map(|c| {
                if spec.is_hard(c) {
                    format!("hard_{c}")
                } else {
                    format!("easy_{c}")
                }
            })
            .collect(),
        ..Default::default()
    };
    for c in 0..spec.num_classes {
        let sigma = spec.noise_of(c);
        let mut members: Vec<Example> = (0..spec.per_class)
            .map(|i| {
                let id = (c * spec.per_class + i) as u64;
                let features = centers
                    .row(c)
                    .iter()
                    .map(|&m| {
                        let noise: f64 = StandardNormal.sample(&mut rng);
                        (m + sigma * noise) as f32 as f64
                    })
                    .collect();
                Example::new(id, features, Some(c))
                    .with_text(format!("synthetic utterance {i} of {}", dataset.class_names[c]))
            })
            .collect();
        members.shuffle(&mut rng);
        let test = members.split_off(n_train + n_val);
        let val = members.split_off(n_train);
        dataset.labeled.extend(members);
        dataset.validation.extend(val);
        dataset.test.extend(test);
    }
    for split in [&mut dataset.labeled, &mut dataset.validation, &mut dataset.test] {
        split.sort_by_key(|e| e.id);
    }
    Ok(dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DifficultyReport {
    pub per_class: Vec<f64>,
    pub overall: f64,
}

impl DifficultyReport {
    /// Mean easy-class accuracy minus mean hard-class accuracy. `None` if
    /// either group is empty.
    pub fn gap(&self, spec: &SynthSpec) -> Option<f64> {
        let mean = |hard: bool| {
            let v: Vec<f64> = (0..self.per_class.len())
                .filter(|&c| spec.is_hard(c) == hard)
                .map(|c| self.per_class[c])
                .collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        Some(mean(false)? - mean(true)?)
    }

    pub fn spread(&self) -> f64 {
        let max = self.per_class.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.per_class.iter().cloned().fold(f64::INFINITY, f64::min);
        if self.per_class.is_empty() {
            0.0
        } else {
            max - min
        }
    }
}

/// Per-class test accuracy of a model trained on every training label.
pub fn difficulty_report(dataset: &Dataset, config: &RunConfig, seed: u64) -> Result<DifficultyReport> {
    let c = dataset.num_classes;
    let mut pool = dataset.labeled.clone();
    for ex in &dataset.unlabeled {
        if let Some(label) = ex.true_label() {
            let mut ex = ex.clone();
            ex.label = Some(label);
            pool.push(ex);
        }
    }
    if pool.is_empty() || dataset.test.is_empty() {
        return Ok(DifficultyReport {
            per_class: vec![0.0; c],
            overall: 0.0,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config.model_config(dataset.dim(), c), &mut rng)?;
    train_to_convergence(&mut model, &pool, &dataset.validation, config, &mut rng)?;

    let x = features(&dataset.test);
    let preds = model.predict(x.view())?;
    let mut hits = vec![0usize; c];
    let mut totals = vec![0usize; c];
    for (ex, p) in dataset.test.iter().zip(&preds) {
        let y = ex.label.expect("test examples are labeled");
        totals[y] += 1;
        if p.class == y {
            hits[y] += 1;
        }
    }
    let y: Vec<usize> = dataset.test.iter().map(|e| e.label.unwrap()).collect();
    let (overall, _) = evaluate(&model, &x, &y)?;
    Ok(DifficultyReport {
        per_class: hits
            .iter()
            .zip(&totals)
            .map(|(&h, &t)| if t == 0 { 0.0 } else { h as f64 / t as f64 })
            .collect(),
        overall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generate_is_deterministic_and_split() {
        let spec = SynthSpec::default();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labeled.len(), 8 * 84);
        assert_eq!(a.validation.len(), 8 * 18);
        assert_eq!(a.test.len(), 8 * 18);
        a.validate().unwrap();
        let other = generate(&SynthSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.labeled[0].features, other.labeled[0].features);
    }

    #[test]
    fn class_counts_before_split() {
        let spec = SynthSpec::default();
        let ds = generate(&spec).unwrap();
        let mut counts = vec![0; spec.num_classes];
        for ex in ds.labeled.iter().chain(&ds.validation).chain(&ds.test) {
            counts[ex.label.unwrap()] += 1;
        }
        assert!(counts.iter().all(|&n| n == spec.per_class));
    }

    #[test]
    fn full_overlap_makes_identical_centers() {
        let spec = SynthSpec {
            num_classes: 2,
            hard_classes: 2,
            overlap: 1.0,
            ..Default::default()
        };
        let c = spec.centers();
        for (a, b) in c.row(0).iter().zip(c.row(1).iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_specs() {
        assert!(generate(&SynthSpec {
            num_classes: 1,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SynthSpec {
            noise: 0.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn report_on_empty_dataset() {
        let ds = Dataset {
            num_classes: 3,
            class_names: vec!["a".into(), "b".into(), "c".into()],
            ..Default::default()
        };
        let r = difficulty_report(&ds, &RunConfig::default(), 0).unwrap();
        assert_eq!(r.per_class, vec![0.0; 3]);
        assert_eq!(r.spread(), 0.0);
    }
}
