//! Accuracy, Student-t confidence intervals, convergence CSVs and ablation
//! tables.
//!
//! Convergence CSV columns: `cycle,strategy,mean_test_accuracy,seeds,carried_forward`.
//! `carried_forward` is `true` when at least one seed had stopped early and
//! its last value was repeated for that cycle.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::engine::CycleTrace;
use crate::error::{Error, Result};

pub fn accuracy(predictions: &[usize], truth: &[usize]) -> Result<f64> {
    if predictions.len() != truth.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Two-sided 97.5% Student-t quantile.
pub fn t_quantile_975(dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    /// `None` with fewer than two values.
    pub half_width: Option<f64>,
}

impl MeanCi {
    pub fn display(&self, scale: f64) -> String {
        match self.half_width {
            Some(h) => format!("{:.2} ± {:.2}", self.mean * scale, h * scale),
            None => format!("{:.2}", self.mean * scale),
        }
    }
}

/// Mean and 95% half-width `t_{0.975,n-1} · s / √n`.
pub fn ci95(values: &[f64]) -> MeanCi {
    let n = values.len();
    if n == 0 {
        return MeanCi {
            mean: f64::NAN,
            half_width: None,
        };
    }
    // sorted summation so the result does not depend on input order
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return MeanCi {
            mean,
            half_width: None,
        };
    }
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = if var == 0.0 {
        0.0
    } else {
        t_quantile_975((n - 1) as f64) * (var / n as f64).sqrt()
    };
    MeanCi {
        mean,
        half_width: Some(half),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub mean: f64,
    pub ci_half_width: Option<f64>,
    pub per_seed: Vec<f64>,
    pub seeds: Vec<u64>,
    /// Mean test accuracy per cycle, carrying finished seeds forward.
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub strategies: BTreeMap<String, StrategySummary>,
}

impl Summary {
    pub fn get(&self, strategy: &str) -> Option<&StrategySummary> {
        self.strategies.get(strategy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Traces of one seed's run, in cycle order.
pub type SeedTraces = Vec<CycleTrace>;

fn group(traces: &[SeedTraces]) -> BTreeMap<String, Vec<&SeedTraces>> {
    let mut out: BTreeMap<String, Vec<&SeedTraces>> = BTreeMap::new();
    for run in traces.iter().filter(|r| !r.is_empty()) {
        out.entry(run[0].strategy.clone()).or_default().push(run);
    }
    out
}

/// Per-cycle mean test accuracy with finished runs carried forward, plus a
/// flag per cycle telling whether anything was carried.
fn curve(runs: &[&SeedTraces]) -> (Vec<f64>, Vec<bool>) {
    let len = runs.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut means = Vec::with_capacity(len);
    let mut carried = Vec::with_capacity(len);
    for cycle in 0..len {
        let mut sum = 0.0;
        let mut any_carried = false;
        for run in runs {
            let idx = cycle.min(run.len() - 1);
            any_carried |= idx != cycle;
            sum += run[idx].test_accuracy;
        }
        means.push(sum / runs.len() as f64);
        carried.push(any_carried);
    }
    (means, carried)
}

pub fn summarize(traces: &[SeedTraces]) -> Summary {
    let mut summary = Summary::default();
    for (name, runs) in group(traces) {
        let per_seed: Vec<f64> = runs.iter().map(|r| r.last().unwrap().test_accuracy).collect();
        let ci = ci95(&per_seed);
        summary.strategies.insert(
            name,
            StrategySummary {
                mean: ci.mean,
                ci_half_width: ci.half_width,
                per_seed,
                seeds: runs.iter().map(|r| r[0].seed).collect(),
                curve: curve(&runs).0,
            },
        );
    }
    summary
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub cycle: usize,
    pub strategy: String,
    pub mean_test_accuracy: f64,
    pub seeds: usize,
    pub carried_forward: bool,
}

pub fn convergence_rows(traces: &[SeedTraces]) -> Vec<ConvergenceRow> {
    let groups = group(traces);
    let len = groups
        .values()
        .flat_map(|runs| runs.iter().map(|r| r.len()))
        .max()
        .unwrap_or(0);
    let mut rows = Vec::new();
    for (name, runs) in &groups {
        let (means, carried) = curve(runs);
        for cycle in 0..len {
            // strategies that finished before the longest one are extended too
            let idx = cycle.min(means.len() - 1);
            rows.push(ConvergenceRow {
                cycle,
                strategy: name.clone(),
                mean_test_accuracy: means[idx],
                seeds: runs.len(),
                carried_forward: carried[idx] || idx != cycle,
            });
        }
    }
    rows.sort_by(|a, b| a.cycle.cmp(&b.cycle).then_with(|| a.strategy.cmp(&b.strategy)));
    rows
}

pub fn emit_convergence<W: Write>(traces: &[SeedTraces], out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    for row in convergence_rows(traces) {
        writer.serialize(row)?;
    }
    writer.flush().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

pub fn read_convergence<R: std::io::Read>(input: R) -> Result<Vec<ConvergenceRow>> {
    let mut reader = csv::Reader::from_reader(input);
    reader
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    /// e.g. `B + KNN (CE+CON+DER)`
    pub variant: String,
    pub label_fraction: f64,
    pub result: MeanCi,
}

/// Renders a Markdown table: one row per variant (first-seen order), one
/// column per label fraction (ascending), cells `mean ± half-width` in
/// percent.
pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut variants: Vec<&str> = Vec::new();
    let mut fractions: Vec<f64> = Vec::new();
    for c in cells {
        if !variants.contains(&c.variant.as_str()) {
            variants.push(&c.variant);
        }
        if !fractions.contains(&c.label_fraction) {
            fractions.push(c.label_fraction);
        }
    }
    fractions.sort_by(f64::total_cmp);

    let mut out = String::from("| Variant |");
    for f in &fractions {
        out.push_str(&format!(" {}% |", f * 100.0));
    }
    out.push_str("\n|---|");
    for _ in &fractions {
        out.push_str("---|");
    }
    out.push('\n');
    for v in variants {
        out.push_str(&format!("| {v} |"));
        for f in &fractions {
            let cell = cells
                .iter()
                .find(|c| c.variant == v && c.label_fraction == *f)
                .map(|c| c.result.display(100.0))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {cell} |"));
        }
        out.push('\n');
    }
    out
}

/// Variant label for ablation rows: `B`/`U` for balanced or not, `+ KNN`
/// when similarity ranking is on, and the loss terms in parentheses.
pub fn variant_label(balanced: bool, knn: bool, losses: &str) -> String {
    let mut s = String::from(if balanced { "B" } else { "U" });
    if knn {
        s.push_str(" + KNN");
    }
    format!("{s} ({losses})")
}
