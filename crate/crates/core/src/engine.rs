//! The self-training loop.
//!
//! Each cycle trains on the current labeled pool, evaluates, predicts the
//! unlabeled pool, selects pseudo-labels with the configured strategy and
//! moves them into the labeled pool for good. Once the cycle budget is spent
//! or the unlabeled pool is empty, one last training pass on the final pool
//! closes the run, so a run of `cycles` cycles yields up to `cycles + 1`
//! trace points.

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{subsample_labels, Dataset, Example, SplitManifest, SplitSpec};
use crate::error::{Error, Result};
use crate::losses::{ce_loss, LossSpec, SupConForm};
use crate::model::{AdamWConfig, Model, ModelConfig, OptimState};
use crate::report::{self, Summary};
use crate::strategies::{
    oracle_upper_bound, score_candidates, select_all_pl, select_flex, select_threshold,
    select_topk_balanced, select_topk_unbalanced, AnchorIndex, FlexState, PoolPrediction,
    SelectionResult, Strategy,
};

/// Which labeled examples serve as KNN anchors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorSource {
    /// Gold labels plus every accepted pseudo-label.
    Accumulated,
    /// Only the original gold labels.
    Gold,
}

/// Every knob of a run. Serialized as a flat JSON object; unknown keys are
/// rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub strategy: Strategy,
    pub k: usize,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub cycles: usize,
    pub seeds: usize,
    pub base_seed: u64,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub reinit_per_cycle: bool,
    pub relabel: bool,
    pub knn_anchors: AnchorSource,
    pub label_fraction: f64,
    pub stratified: bool,
    pub use_ce: bool,
    pub use_scl: bool,
    pub use_koleo: bool,
    pub tau_scl: f64,
    pub supcon_form: SupConForm,
    pub lr: f64,
    pub weight_decay: f64,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub proj_dim: usize,
    pub head_dropout: f64,
    pub aug_dropout: f64,
    pub data: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let loss = LossSpec::default();
        RunConfig {
            strategy: Strategy::TK_KNN,
            k: 6,
            beta: 0.75,
            gamma: loss.gamma,
            tau: 0.95,
            cycles: 30,
            seeds: 5,
            base_seed: 0,
            patience: 10,
            batch_size: 256,
            max_epochs: 200,
            reinit_per_cycle: false,
            relabel: false,
            knn_anchors: AnchorSource::Accumulated,
            label_fraction: 0.01,
            stratified: true,
            use_ce: loss.use_ce,
            use_scl: loss.use_scl,
            use_koleo: loss.use_koleo,
            tau_scl: loss.tau_scl,
            supcon_form: loss.supcon_form,
            lr: 1e-3,
            weight_decay: 0.01,
            hidden_dim: 64,
            hidden_layers: 1,
            proj_dim: 32,
            head_dropout: 0.1,
            aug_dropout: 0.2,
            data: None,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.cycles < 1 {
            return fail("cycles must be >= 1".into());
        }
        if self.k < 1 {
            return fail("k must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return fail(format!("beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return fail(format!("tau must be in (0, 1], got {}", self.tau));
        }
        if self.seeds < 1 {
            return fail("seeds must be >= 1".into());
        }
        if self.batch_size < 1 || self.max_epochs < 1 {
            return fail("batch_size and max_epochs must be >= 1".into());
        }
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return fail(format!("label_fraction must be in (0, 1], got {}", self.label_fraction));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return fail("lr must be > 0 and weight_decay >= 0".into());
        }
        self.loss_spec().validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn loss_spec(&self) -> LossSpec {
        LossSpec {
            use_ce: self.use_ce,
            use_scl: self.use_scl,
            use_koleo: self.use_koleo,
            gamma: self.gamma,
            tau_scl: self.tau_scl,
            supcon_form: self.supcon_form,
        }
    }

    pub fn model_config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: self.hidden_dim,
            hidden_layers: self.hidden_layers,
            num_classes,
            proj_dim: self.proj_dim,
            head_dropout: self.head_dropout,
            aug_dropout: self.aug_dropout,
        }
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn seed_values(&self) -> Vec<u64> {
        (0..self.seeds as u64).map(|i| self.base_seed + i).collect()
    }
}

/// One line of a trace file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CycleTrace {
    pub strategy: String,
    pub seed: u64,
    pub cycle: usize,
    /// Labeled pool size this cycle trained on.
    pub labeled_size: usize,
    pub unlabeled_size: usize,
    /// Pseudo-labels accepted this cycle, per pseudo-label class.
    pub new_per_class: Vec<usize>,
    pub new_selected: usize,
    /// Fraction of this cycle's pseudo-labels that match the hidden truth.
    pub pseudo_label_accuracy: Option<f64>,
    /// Same, over every pseudo-label in the pool after this cycle.
    pub pool_pseudo_label_accuracy: Option<f64>,
    pub val_accuracy: f64,
    pub test_accuracy: f64,
    pub epochs: usize,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOutcome {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

pub(crate) fn features(examples: &[Example]) -> Array2<f64> {
    let dim = examples.first().map_or(0, Example::dim);
    let mut m = Array2::zeros((examples.len(), dim));
    for (mut row, ex) in m.rows_mut().into_iter().zip(examples) {
        row.assign(&ndarray::ArrayView1::from(&ex.features));
    }
    m
}

fn labels_of(examples: &[Example]) -> Result<Vec<usize>> {
    examples
        .iter()
        .map(|e| {
            e.label
                .ok_or_else(|| Error::InvalidInput(format!("example {} has no label", e.id)))
        })
        .collect()
}

/// Accuracy and mean cross-entropy in eval mode.
pub fn evaluate(model: &Model, x: &Array2<f64>, y: &[usize]) -> Result<(f64, f64)> {
    if y.is_empty() {
        return Ok((0.0, 0.0));
    }
    let preds = model.predict(x.view())?;
    let classes: Vec<usize> = preds.iter().map(|p| p.class).collect();
    let acc = report::accuracy(&classes, y)?;
    let probs = model.forward(x.view(), crate::model::Mode::Eval)?.probs;
    let loss = ce_loss(probs.view(), y)?.value;
    Ok((acc, loss))
}

/// Trains until validation accuracy stops improving for `patience`
/// consecutive epochs (or `max_epochs`), then restores the best epoch's
/// weights, which may be the weights it started with. Equal accuracy with
/// lower validation loss counts as an improvement. Without a validation set the training pool is used.
pub fn train_to_convergence(
    model: &mut Model,
    pool: &[Example],
    validation: &[Example],
    config: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<TrainOutcome> {
    if pool.is_empty() {
        return Err(Error::InvalidInput("cannot train on an empty labeled pool".into()));
    }
    let x = features(pool);
    let y = labels_of(pool)?;
    let (vx, vy) = if validation.is_empty() {
        (x.clone(), y.clone())
    } else {
        (features(validation), labels_of(validation)?)
    };
    let spec = config.loss_spec();
    let mut optim = OptimState::new(config.adam(), &model.params);
    let mut order: Vec<usize> = (0..pool.len()).collect();

    // The incoming weights are epoch 0, so a cycle never ends worse on
    // validation than it started.
    let mut best = evaluate(model, &vx, &vy)?;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since = 0;
    let mut epochs = 0;
    for epoch in 1..=config.max_epochs {
        epochs = epoch;
        order.shuffle(rng);
        for chunk in order.chunks(config.batch_size) {
            let xb = x.select(Axis(0), chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            model.train_step(xb.view(), &yb, &spec, &mut optim, rng)?;
        }
        let (acc, loss) = evaluate(model, &vx, &vy)?;
        if acc > best.0 || (acc == best.0 && loss < best.1) {
            best = (acc, loss);
            best_params = model.params.clone();
            best_epoch = epoch;
            since = 0;
        } else {
            since += 1;
        }
        if since >= config.patience {
            break;
        }
    }
    model.params = best_params;
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_val_accuracy: best.0,
    })
}

/// Mutable state of one seed's self-training run.
pub struct RunState {
    pub config: RunConfig,
    pub seed: u64,
    pub model: Model,
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub cycle: usize,
    pub finished: bool,
    gold: BTreeSet<u64>,
    flex: FlexState,
    rng: ChaCha8Rng,
}

impl RunState {
    /// `split` is a dataset whose unlabeled pool carries hidden labels (see
    /// [`subsample_labels`]).
    pub fn new(split: &Dataset, config: &RunConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if split.labeled.is_empty() {
            return Err(Error::InvalidInput("labeled pool is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(config.model_config(split.dim(), split.num_classes), &mut rng)?;
        Ok(RunState {
            config: config.clone(),
            seed,
            model,
            gold: split.labeled.iter().map(|e| e.id).collect(),
            labeled: split.labeled.clone(),
            unlabeled: split.unlabeled.clone(),
            validation: split.validation.clone(),
            test: split.test.clone(),
            num_classes: split.num_classes,
            cycle: 0,
            finished: false,
            flex: FlexState::new(config.tau, split.num_classes),
            rng,
        })
    }

    pub fn is_gold(&self, id: u64) -> bool {
        self.gold.contains(&id)
    }

    fn predict_pool(&self, examples: &[Example]) -> Result<Vec<PoolPrediction>> {
        if examples.is_empty() {
            return Ok(Vec::new());
        }
        let preds = self.model.predict(features(examples).view())?;
        Ok(examples
            .iter()
            .zip(preds)
            .map(|(ex, p)| PoolPrediction {
                id: ex.id,
                class: p.class,
                confidence: p.confidence,
                z: p.z,
            })
            .collect())
    }

    fn anchors(&self) -> Result<AnchorIndex> {
        let members: Vec<Example> = self
            .labeled
            .iter()
            .filter(|e| self.config.knn_anchors == AnchorSource::Accumulated || self.is_gold(e.id))
            .cloned()
            .collect();
        let preds = self.predict_pool(&members)?;
        Ok(AnchorIndex::build(
            members
                .iter()
                .zip(&preds)
                .map(|(e, p)| (e.label.expect("labeled pool"), p.z.as_slice())),
        ))
    }

    fn select(&mut self, predictions: &[PoolPrediction]) -> Result<SelectionResult> {
        let c = self.num_classes;
        let k = self.config.k;
        let mut result = match self.config.strategy {
            Strategy::Supervised => SelectionResult::default(),
            Strategy::Pl => select_all_pl(predictions),
            Strategy::PlT => select_threshold(predictions, self.config.tau)?,
            Strategy::PlFlex => select_flex(predictions, &mut self.flex)?,
            Strategy::TopK {
                balanced,
                knn,
                oracle,
            } => {
                let (scored, warnings) = if knn {
                    score_candidates(predictions, &self.anchors()?, Some(self.config.beta))?
                } else {
                    score_candidates(predictions, &AnchorIndex::default(), None)?
                };
                let mut sel = if balanced {
                    select_topk_balanced(&scored, k)?
                } else {
                    select_topk_unbalanced(&scored, k, c)?
                };
                sel.warnings = warnings;
                if oracle {
                    sel = oracle_upper_bound(&sel, &self.hidden_truth())?;
                }
                sel
            }
        };
        result.strategy = self.config.strategy.name().to_string();
        result.cycle = self.cycle;
        Ok(result)
    }

    /// True labels of the unlabeled pool and of pseudo-labeled pool members.
    pub fn hidden_truth(&self) -> HashMap<u64, usize> {
        self.unlabeled
            .iter()
            .chain(self.labeled.iter())
            .filter_map(|e| e.hidden_label().map(|l| (e.id, l)))
            .collect()
    }

    fn pool_pseudo_accuracy(&self) -> Option<f64> {
        let pseudo: Vec<&Example> = self.labeled.iter().filter(|e| !self.is_gold(e.id)).collect();
        if pseudo.is_empty() {
            return None;
        }
        let correct = pseudo
            .iter()
            .filter(|e| e.label.is_some() && e.label == e.hidden_label())
            .count();
        Some(correct as f64 / pseudo.len() as f64)
    }

    fn relabel_pool(&mut self) -> Result<()> {
        let pseudo: Vec<Example> = self
            .labeled
            .iter()
            .filter(|e| !self.is_gold(e.id))
            .cloned()
            .collect();
        let preds: HashMap<u64, usize> = self
            .predict_pool(&pseudo)?
            .into_iter()
            .map(|p| (p.id, p.class))
            .collect();
        for ex in self.labeled.iter_mut() {
            if let Some(&c) = preds.get(&ex.id) {
                ex.label = Some(c);
            }
        }
        Ok(())
    }

    /// Train, evaluate, and (unless the run is over) select and absorb
    /// pseudo-labels.
    pub fn run_cycle(&mut self) -> Result<(CycleTrace, Option<SelectionResult>)> {
        if self.finished {
            return Err(Error::InvalidInput("run already finished".into()));
        }
        if self.config.reinit_per_cycle && self.cycle > 0 {
            self.model = Model::new(self.model.config, &mut self.rng)?;
        }
        let labeled_size = self.labeled.len();
        let outcome = train_to_convergence(
            &mut self.model,
            &self.labeled,
            &self.validation,
            &self.config,
            &mut self.rng,
        )?;
        let (val_accuracy, _) =
            evaluate(&self.model, &features(&self.validation), &labels_of(&self.validation)?)?;
        let (test_accuracy, _) =
            evaluate(&self.model, &features(&self.test), &labels_of(&self.test)?)?;

        let mut trace = CycleTrace {
            strategy: self.config.strategy.name().to_string(),
            seed: self.seed,
            cycle: self.cycle,
            labeled_size,
            unlabeled_size: self.unlabeled.len(),
            new_per_class: vec![0; self.num_classes],
            val_accuracy,
            test_accuracy,
            epochs: outcome.epochs,
            ..Default::default()
        };

        let selecting = self.cycle < self.config.cycles
            && !self.unlabeled.is_empty()
            && self.config.strategy != Strategy::Supervised;
        let selection = if selecting {
            if self.config.relabel {
                self.relabel_pool()?;
            }
            let predictions = self.predict_pool(&self.unlabeled)?;
            let selection = self.select(&predictions)?;
            self.absorb(&selection, &mut trace);
            Some(selection)
        } else {
            if self.unlabeled.is_empty() && self.cycle < self.config.cycles {
                trace.warnings.push("unlabeled pool exhausted".into());
            }
            self.finished = true;
            None
        };
        trace.pool_pseudo_label_accuracy = self.pool_pseudo_accuracy();
        if let Some(sel) = &selection {
            trace.warnings.extend(sel.warnings.iter().cloned());
        }
        self.cycle += 1;
        Ok((trace, selection))
    }

    fn absorb(&mut self, selection: &SelectionResult, trace: &mut CycleTrace) {
        let chosen: HashMap<u64, usize> = selection
            .selected
            .iter()
            .map(|s| (s.id, s.pseudo_label))
            .collect();
        let mut correct = 0;
        let mut remaining = Vec::with_capacity(self.unlabeled.len());
        for mut ex in std::mem::take(&mut self.unlabeled) {
            match chosen.get(&ex.id) {
                Some(&label) => {
                    if ex.hidden_label() == Some(label) {
                        correct += 1;
                    }
                    trace.new_per_class[label] += 1;
                    ex.label = Some(label);
                    self.labeled.push(ex);
                }
                None => remaining.push(ex),
            }
        }
        self.unlabeled = remaining;
        trace.new_selected = chosen.len();
        if !chosen.is_empty() {
            trace.pseudo_label_accuracy = Some(correct as f64 / chosen.len() as f64);
        }
    }
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub manifest: SplitManifest,
    pub traces: Vec<CycleTrace>,
    pub selections: Vec<SelectionResult>,
    pub truth: HashMap<u64, usize>,
}

impl SeedRun {
    pub fn final_accuracy(&self) -> f64 {
        self.traces.last().map_or(0.0, |t| t.test_accuracy)
    }
}

pub fn run_seed(dataset: &Dataset, config: &RunConfig, seed: u64) -> Result<SeedRun> {
    let spec = SplitSpec {
        label_fraction: config.label_fraction,
        seed,
        stratified: config.stratified,
    };
    let split = subsample_labels(dataset, &spec)?;
    let manifest = SplitManifest::from_dataset(&split, &spec);
    let mut state = RunState::new(&split, config, seed)?;
    let truth = state.hidden_truth();
    let mut traces = Vec::new();
    let mut selections = Vec::new();
    while !state.finished {
        let (trace, selection) = state.run_cycle()?;
        log::info!(
            "{} seed {} cycle {}: pool {} (+{}), val {:.4}, test {:.4}, epochs {}",
            trace.strategy,
            seed,
            trace.cycle,
            trace.labeled_size,
            trace.new_selected,
            trace.val_accuracy,
            trace.test_accuracy,
            trace.epochs
        );
        traces.push(trace);
        selections.extend(selection);
    }
    Ok(SeedRun {
        seed,
        manifest,
        traces,
        selections,
        truth,
    })
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: RunConfig,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
}

/// Runs every seed independently (in parallel on the current rayon pool)
/// and summarizes final test accuracy.
pub fn run_experiment(dataset: &Dataset, config: &RunConfig) -> Result<ExperimentResult> {
    config.validate()?;
    dataset.validate()?;
    let runs: Vec<SeedRun> = config
        .seed_values()
        .into_par_iter()
        .map(|seed| run_seed(dataset, config, seed))
        .collect::<Result<_>>()?;
    let traces: Vec<Vec<CycleTrace>> = runs.iter().map(|r| r.traces.clone()).collect();
    Ok(ExperimentResult {
        config: config.clone(),
        summary: report::summarize(&traces),
        runs,
    })
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut out, &item)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_traces(path: &Path) -> Result<Vec<CycleTrace>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Writes `config.json`, `summary.json`, `convergence.csv`, and per seed
/// `traces/<strategy>_seed<N>.jsonl`, `selections/<strategy>_seed<N>.jsonl`
/// and `splits/<strategy>_seed<N>.json` under `out`.
pub fn write_outputs(result: &ExperimentResult, out: &Path) -> Result<()> {
    let name = result.config.strategy.name();
    for sub in ["traces", "selections", "splits"] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let config_path = out.join("config.json");
    std::fs::write(&config_path, result.config.to_json()?).map_err(|e| Error::io(&config_path, e))?;
    for run in &result.runs {
        let stem = format!("{name}_seed{}", run.seed);
        write_jsonl(&out.join("traces").join(format!("{stem}.jsonl")), &run.traces)?;
        write_jsonl(
            &out.join("selections").join(format!("{stem}.jsonl")),
            run.selections.iter().flat_map(|s| s.audit_records(&run.truth)),
        )?;
        run.manifest.write(&out.join("splits").join(format!("{stem}.json")))?;
    }
    let summary_path = out.join("summary.json");
    std::fs::write(&summary_path, result.summary.to_json()?)
        .map_err(|e| Error::io(&summary_path, e))?;
    let traces: Vec<Vec<CycleTrace>> = result.runs.iter().map(|r| r.traces.clone()).collect();
    let csv_path = out.join("convergence.csv");
    let file = File::create(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    report::emit_convergence(&traces, file)
}
