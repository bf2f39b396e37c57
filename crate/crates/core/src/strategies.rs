//! Pseudo-label selection: plain PL, fixed threshold, per-class curriculum
//! thresholds, and top-k ranking (balanced or not, with or without KNN
//! alignment), plus the ground-truth upper bound.
//!
//! Every ranking uses the same total order: higher score first, then lower id.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Model output for one unlabeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolPrediction {
    pub id: u64,
    pub class: usize,
    pub confidence: f64,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredCandidate {
    pub id: u64,
    pub predicted_class: usize,
    pub model_prob: f64,
    /// Best cosine similarity to an anchor of the predicted class, when KNN
    /// alignment is on.
    pub best_sim: Option<f64>,
    pub score: f64,
}

impl ScoredCandidate {
    pub fn from_confidence(id: u64, predicted_class: usize, model_prob: f64) -> Self {
        ScoredCandidate {
            id,
            predicted_class,
            model_prob,
            best_sim: None,
            score: model_prob,
        }
    }
}

/// Higher score first, then lower id.
pub fn rank_order(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    b.score.total_cmp(&a.score).then(a.id.cmp(&b.id))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Selected {
    pub id: u64,
    pub pseudo_label: usize,
    pub score: f64,
    pub p: f64,
    pub sim: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionResult {
    pub selected: Vec<Selected>,
    pub per_class_counts: BTreeMap<usize, usize>,
    pub strategy: String,
    pub cycle: usize,
    pub warnings: Vec<String>,
}

impl SelectionResult {
    fn from_selected(selected: Vec<Selected>, strategy: &str) -> Self {
        let mut per_class_counts = BTreeMap::new();
        for s in &selected {
            *per_class_counts.entry(s.pseudo_label).or_insert(0) += 1;
        }
        SelectionResult {
            selected,
            per_class_counts,
            strategy: strategy.to_string(),
            cycle: 0,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.selected.iter().map(|s| s.id).collect()
    }

    pub fn count(&self, class: usize) -> usize {
        self.per_class_counts.get(&class).copied().unwrap_or(0)
    }

    /// One audit record per selected example.
    pub fn audit_records(&self, truth: &HashMap<u64, usize>) -> Vec<SelectionRecord> {
        self.selected
            .iter()
            .map(|s| SelectionRecord {
                cycle: self.cycle,
                id: s.id,
                pseudo_label: s.pseudo_label,
                score: s.score,
                p: s.p,
                sim: s.sim,
                true_label: truth.get(&s.id).copied(),
            })
            .collect()
    }
}

/// Line format of per-cycle selection audit files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub cycle: usize,
    pub id: u64,
    pub pseudo_label: usize,
    pub score: f64,
    pub p: f64,
    pub sim: Option<f64>,
    pub true_label: Option<usize>,
}

pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("{} vs {}", a.len(), b.len())));
    }
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateInput("cosine similarity of a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Maximum cosine similarity between `u` and any anchor; `0` when there are
/// no anchors.
pub fn knn_best_sim(u: &[f64], anchors: &[Vec<f64>]) -> Result<f64> {
    if anchors.is_empty() {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for a in anchors {
        best = best.max(cosine_sim(u, a)?);
    }
    Ok(best)
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0).then(|| v.iter().map(|x| x / n).collect())
}

/// Unit-normalized latents of the labeled pool, grouped by (pseudo-)label.
#[derive(Debug, Clone, Default)]
pub struct AnchorIndex {
    by_class: BTreeMap<usize, Vec<Vec<f64>>>,
    dim: usize,
}

impl AnchorIndex {
    /// Zero-norm latents carry no direction and are skipped.
    pub fn build<'a>(items: impl IntoIterator<Item = (usize, &'a [f64])>) -> Self {
        let mut index = AnchorIndex::default();
        for (class, z) in items {
            index.dim = z.len();
            if let Some(u) = unit(z) {
                index.by_class.entry(class).or_default().push(u);
            }
        }
        index
    }

    pub fn anchors(&self, class: usize) -> &[Vec<f64>] {
        self.by_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn best_sim(&self, u: &[f64], class: usize) -> f64 {
        let Some(u) = unit(u) else { return 0.0 };
        let anchors = self.anchors(class);
        if anchors.is_empty() {
            return 0.0;
        }
        anchors
            .iter()
            .map(|a| a.iter().zip(&u).map(|(x, y)| x * y).sum::<f64>())
            .fold(f64::NEG_INFINITY, f64::max)
            .clamp(-1.0, 1.0)
    }
}

/// Scores every prediction. With `beta = Some(β)` the score is
/// `(1-β)·p + β·sim`, otherwise the bare confidence `p`.
pub fn score_candidates(
    predictions: &[PoolPrediction],
    anchors: &AnchorIndex,
    beta: Option<f64>,
) -> Result<(Vec<ScoredCandidate>, Vec<String>)> {
    let mut warnings = Vec::new();
    let Some(beta) = beta else {
        let out = predictions
            .iter()
            .map(|p| ScoredCandidate::from_confidence(p.id, p.class, p.confidence))
            .collect();
        return Ok((out, warnings));
    };
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::InvalidInput(format!("beta must be in [0, 1], got {beta}")));
    }
    let mut empty: Vec<usize> = predictions
        .iter()
        .map(|p| p.class)
        .filter(|&c| anchors.anchors(c).is_empty())
        .collect();
    empty.sort_unstable();
    empty.dedup();
    for c in empty {
        warnings.push(format!("class {c} has no anchors; using neutral similarity 0"));
    }
    let out = predictions
        .iter()
        .map(|p| {
            let sim = anchors.best_sim(&p.z, p.class);
            ScoredCandidate {
                id: p.id,
                predicted_class: p.class,
                model_prob: p.confidence,
                best_sim: Some(sim),
                score: (1.0 - beta) * p.confidence + beta * sim,
            }
        })
        .collect();
    Ok((out, warnings))
}

fn to_selected(c: &ScoredCandidate) -> Selected {
    Selected {
        id: c.id,
        pseudo_label: c.predicted_class,
        score: c.score,
        p: c.model_prob,
        sim: c.best_sim,
    }
}

fn ranked(candidates: &[ScoredCandidate]) -> Vec<ScoredCandidate> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank_order);
    sorted
}

/// The `min(k, available_c)` best candidates of every predicted class.
pub fn select_topk_balanced(candidates: &[ScoredCandidate], k: usize) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let mut taken: BTreeMap<usize, usize> = BTreeMap::new();
    let mut selected = Vec::new();
    for c in ranked(candidates) {
        let n = taken.entry(c.predicted_class).or_insert(0);
        if *n < k {
            *n += 1;
            selected.push(to_selected(&c));
        }
    }
    Ok(SelectionResult::from_selected(selected, "top-k"))
}

/// The best `k·C` candidates overall, regardless of class.
pub fn select_topk_unbalanced(
    candidates: &[ScoredCandidate],
    k: usize,
    num_classes: usize,
) -> Result<SelectionResult> {
    if k == 0 {
        return Err(Error::InvalidInput("k must be >= 1".into()));
    }
    let selected = ranked(candidates)
        .iter()
        .take(k * num_classes)
        .map(to_selected)
        .collect();
    Ok(SelectionResult::from_selected(selected, "top-k-unbalanced"))
}

fn confident(p: &PoolPrediction) -> Selected {
    Selected {
        id: p.id,
        pseudo_label: p.class,
        score: p.confidence,
        p: p.confidence,
        sim: None,
    }
}

/// Every prediction with confidence `>= tau`.
pub fn select_threshold(predictions: &[PoolPrediction], tau: f64) -> Result<SelectionResult> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidInput(format!("tau must be in (0, 1], got {tau}")));
    }
    let selected = predictions
        .iter()
        .filter(|p| p.confidence >= tau)
        .map(confident)
        .collect();
    Ok(SelectionResult::from_selected(selected, "pl-t"))
}

/// Per-class curriculum thresholds derived from how many confident
/// predictions each class currently receives.
#[derive(Debug, Clone, PartialEq)]
pub struct FlexState {
    pub tau: f64,
    /// Learning status: confident predictions per class.
    pub sigma: Vec<usize>,
    pub thresholds: Vec<f64>,
}

impl FlexState {
    pub fn new(tau: f64, num_classes: usize) -> Self {
        FlexState {
            tau,
            sigma: vec![0; num_classes],
            thresholds: vec![tau; num_classes],
        }
    }

    /// `τ_c = τ · σ(c) / max σ`, or `τ` for every class while `max σ = 0`.
    pub fn update(&mut self, predictions: &[PoolPrediction]) -> Result<()> {
        let c = self.sigma.len();
        self.sigma = vec![0; c];
        for p in predictions {
            if p.class >= c {
                return Err(Error::Index { index: p.class, bound: c });
            }
            if p.confidence >= self.tau {
                self.sigma[p.class] += 1;
            }
        }
        let max = self.sigma.iter().copied().max().unwrap_or(0);
        self.thresholds = if max == 0 {
            vec![self.tau; c]
        } else {
            self.sigma
                .iter()
                .map(|&s| self.tau * s as f64 / max as f64)
                .collect()
        };
        Ok(())
    }
}

pub fn select_flex(predictions: &[PoolPrediction], state: &mut FlexState) -> Result<SelectionResult> {
    if !(state.tau > 0.0 && state.tau <= 1.0) {
        return Err(Error::InvalidInput(format!("tau must be in (0, 1], got {}", state.tau)));
    }
    state.update(predictions)?;
    let selected = predictions
        .iter()
        .filter(|p| p.confidence >= state.thresholds[p.class])
        .map(confident)
        .collect();
    Ok(SelectionResult::from_selected(selected, "pl-flex"))
}

/// Every prediction, labeled with its argmax.
pub fn select_all_pl(predictions: &[PoolPrediction]) -> SelectionResult {
    SelectionResult::from_selected(predictions.iter().map(confident).collect(), "pl")
}

/// Replaces each pseudo-label with the true label of the same example.
pub fn oracle_upper_bound(
    selection: &SelectionResult,
    truth: &HashMap<u64, usize>,
) -> Result<SelectionResult> {
    let mut selected = Vec::with_capacity(selection.len());
    for s in &selection.selected {
        let label = *truth.get(&s.id).ok_or_else(|| {
            Error::InvalidInput(format!("no ground truth for example {}", s.id))
        })?;
        selected.push(Selected {
            pseudo_label: label,
            ..*s
        });
    }
    let mut out = SelectionResult::from_selected(selected, "upper-bound");
    out.cycle = selection.cycle;
    out.warnings = selection.warnings.clone();
    Ok(out)
}

/// Named self-training strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Strategy {
    Supervised,
    Pl,
    PlT,
    PlFlex,
    TopK { balanced: bool, knn: bool, oracle: bool },
}

impl Strategy {
    pub const TK_KNN: Strategy = Strategy::TopK {
        balanced: true,
        knn: true,
        oracle: false,
    };
    pub const UPPER_BOUND: Strategy = Strategy::TopK {
        balanced: true,
        knn: true,
        oracle: true,
    };

    pub fn name(&self) -> &'static str {
        match *self {
            Strategy::Supervised => "supervised",
            Strategy::Pl => "pl",
            Strategy::PlT => "pl-t",
            Strategy::PlFlex => "pl-flex",
            Strategy::TopK { oracle: true, .. } => "upper-bound",
            Strategy::TopK { balanced: true, knn: true, .. } => "tk-knn",
            Strategy::TopK { balanced: false, knn: true, .. } => "tk-knn-unbalanced",
            Strategy::TopK { balanced: true, knn: false, .. } => "top-k",
            Strategy::TopK { balanced: false, knn: false, .. } => "top-k-unbalanced",
        }
    }

    pub const ALL: [Strategy; 9] = [
        Strategy::Supervised,
        Strategy::Pl,
        Strategy::PlT,
        Strategy::PlFlex,
        Strategy::TK_KNN,
        Strategy::TopK { balanced: false, knn: true, oracle: false },
        Strategy::UPPER_BOUND,
        Strategy::TopK { balanced: true, knn: false, oracle: false },
        Strategy::TopK { balanced: false, knn: false, oracle: false },
    ];

    pub fn uses_threshold(&self) -> bool {
        matches!(self, Strategy::PlT | Strategy::PlFlex)
    }

    pub fn uses_knn(&self) -> bool {
        matches!(self, Strategy::TopK { knn: true, .. })
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Strategy::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown strategy {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

impl TryFrom<String> for Strategy {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Strategy> for String {
    fn from(s: Strategy) -> String {
        s.name().to_string()
    }
}
