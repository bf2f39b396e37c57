//! Cross-entropy, supervised contrastive, and KoLeo losses with analytic
//! gradients, plus their weighted combination.

use ndarray::{s, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Clamp applied to nearest-neighbor distances before the log.
pub const KOLEO_EPS: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Array2<f64>,
    pub warning: Option<String>,
}

impl LossOutput {
    fn zero(shape: (usize, usize), warning: impl Into<String>) -> Self {
        let warning = warning.into();
        log::debug!("{warning}");
        LossOutput {
            value: 0.0,
            grad: Array2::zeros(shape),
            warning: Some(warning),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SupConForm {
    /// `-log[exp(s_ip/τ) / Σ_a exp(s_ia/τ)]`
    #[default]
    Exponentiated,
    /// `-log[(s_ip/τ) / Σ_a (s_ia/τ)]`, only defined while every ratio is positive.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub use_ce: bool,
    pub use_scl: bool,
    pub use_koleo: bool,
    pub gamma: f64,
    pub tau_scl: f64,
    pub supcon_form: SupConForm,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec {
            use_ce: true,
            use_scl: true,
            use_koleo: true,
            gamma: 0.1,
            tau_scl: 0.07,
            supcon_form: SupConForm::Exponentiated,
        }
    }
}

impl LossSpec {
    pub fn ce_only() -> Self {
        LossSpec {
            use_scl: false,
            use_koleo: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.use_ce || self.use_scl || self.use_koleo) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::Config(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if !(self.tau_scl > 0.0 && self.tau_scl.is_finite()) {
            return Err(Error::Config(format!("tau_scl must be > 0, got {}", self.tau_scl)));
        }
        Ok(())
    }

    /// Short name in the CE / CON / DER vocabulary used by ablation tables.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.use_ce {
            parts.push("CE");
        }
        if self.use_scl {
            parts.push("CON");
        }
        if self.use_koleo {
            parts.push("DER");
        }
        parts.join("+")
    }
}

/// Projection vectors for two augmented views of each source example.
///
/// Rows `0..B` hold the first view and rows `B..2B` the second, so row `i`
/// and row `i + B` come from the same example.
#[derive(Debug, Clone)]
pub struct MultiViewBatch {
    pub anchors: Array2<f64>,
    pub labels: Vec<usize>,
    pub source: Vec<usize>,
}

impl MultiViewBatch {
    pub fn from_views(first: ArrayView2<f64>, second: ArrayView2<f64>, labels: &[usize]) -> Result<Self> {
        if first.dim() != second.dim() || first.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "views {:?} / {:?} with {} labels",
                first.dim(),
                second.dim(),
                labels.len()
            )));
        }
        let anchors = ndarray::concatenate(Axis(0), &[first, second])
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let b = labels.len();
        Ok(MultiViewBatch {
            anchors,
            labels: labels.iter().chain(labels.iter()).copied().collect(),
            source: (0..2 * b).map(|i| i % b).collect(),
        })
    }

    /// A batch whose rows are independent anchors (no view pairing).
    pub fn single_view(anchors: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if anchors.nrows() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} anchors with {} labels",
                anchors.nrows(),
                labels.len()
            )));
        }
        let source = (0..labels.len()).collect();
        Ok(MultiViewBatch {
            anchors,
            labels,
            source,
        })
    }

    pub fn views(&self) -> usize {
        self.anchors.nrows()
    }
}

/// Mean cross-entropy of `probs` against `labels`; the gradient is with
/// respect to the logits that produced `probs`.
pub fn ce_loss(probs: ArrayView2<f64>, labels: &[usize]) -> Result<LossOutput> {
    let (b, c) = probs.dim();
    if b != labels.len() {
        return Err(Error::Dimension(format!("{b} rows with {} labels", labels.len())));
    }
    if b == 0 {
        return Err(Error::DegenerateInput("empty batch".into()));
    }
    let mut grad = probs.to_owned();
    let mut value = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Index { index: y, bound: c });
        }
        value -= probs[[i, y]].max(f64::MIN_POSITIVE).ln();
        grad[[i, y]] -= 1.0;
    }
    let scale = 1.0 / b as f64;
    grad *= scale;
    Ok(LossOutput {
        value: value * scale,
        grad,
        warning: None,
    })
}

fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = x.to_owned();
    let mut norms = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let n = row.dot(&row).sqrt().max(1e-12);
        row /= n;
        norms.push(n);
    }
    (out, norms)
}

/// Supervised contrastive loss over cosine similarities of L2-normalized
/// anchors. Anchors without positives are skipped; the result is the mean over
/// the remaining anchors. The gradient is with respect to the raw anchors.
pub fn supcon_loss(batch: &MultiViewBatch, tau: f64, form: SupConForm) -> Result<LossOutput> {
    let n = batch.views();
    if batch.labels.len() != n {
        return Err(Error::Dimension(format!("{n} anchors with {} labels", batch.labels.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be > 0, got {tau}")));
    }
    if n < 2 {
        return Ok(LossOutput::zero(batch.anchors.dim(), "supcon: fewer than two anchors"));
    }
    let (unit, norms) = normalize_rows(batch.anchors.view());
    let sim = unit.dot(&unit.t());
    let labels = &batch.labels;

    let positives: Vec<usize> = (0..n)
        .map(|i| (0..n).filter(|&j| j != i && labels[j] == labels[i]).count())
        .collect();
    let contributing = positives.iter().filter(|&&p| p > 0).count();
    if contributing == 0 {
        return Ok(LossOutput::zero(batch.anchors.dim(), "supcon: no anchor has a positive"));
    }
    let scale = 1.0 / contributing as f64;

    // coeff[i][j] = dL/d sim[i][j] contributed by anchor i's term
    let mut coeff = Array2::<f64>::zeros((n, n));
    let mut value = 0.0;
    for i in 0..n {
        let n_pos = positives[i];
        if n_pos == 0 {
            continue;
        }
        let inv_pos = 1.0 / n_pos as f64;
        let row = sim.row(i);
        match form {
            SupConForm::Exponentiated => {
                let max = (0..n)
                    .filter(|&a| a != i)
                    .map(|a| row[a] / tau)
                    .fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = (0..n)
                    .filter(|&a| a != i)
                    .map(|a| (row[a] / tau - max).exp())
                    .sum();
                let log_denom = max + denom.ln();
                for a in (0..n).filter(|&a| a != i) {
                    let q = (row[a] / tau - max).exp() / denom;
                    let is_pos = labels[a] == labels[i];
                    if is_pos {
                        value -= inv_pos * (row[a] / tau - log_denom) * scale;
                    }
                    let target = if is_pos { inv_pos } else { 0.0 };
                    coeff[[i, a]] = scale * (q - target) / tau;
                }
            }
            SupConForm::Literal => {
                // τ cancels between numerator and denominator
                let denom: f64 = (0..n).filter(|&a| a != i).map(|a| row[a]).sum();
                if !(denom > 0.0) {
                    return Err(Error::DegenerateInput(format!(
                        "literal supcon: non-positive denominator for anchor {i}"
                    )));
                }
                for a in (0..n).filter(|&a| a != i) {
                    let is_pos = labels[a] == labels[i];
                    let mut g = 1.0 / denom;
                    if is_pos {
                        if !(row[a] > 0.0) {
                            return Err(Error::DegenerateInput(format!(
                                "literal supcon: non-positive similarity between {i} and {a}"
                            )));
                        }
                        value -= inv_pos * (row[a].ln() - denom.ln()) * scale;
                        g -= inv_pos / row[a];
                    }
                    coeff[[i, a]] = scale * g;
                }
            }
        }
    }

    let sym = &coeff + &coeff.t();
    let grad_unit = sym.dot(&unit);
    let mut grad = Array2::zeros(batch.anchors.dim());
    for i in 0..n {
        let u = unit.row(i);
        let gu = grad_unit.row(i);
        let radial = u.dot(&gu);
        let mut out = grad.row_mut(i);
        out.assign(&((&gu - &(&u * radial)) / norms[i]));
    }
    Ok(LossOutput {
        value,
        grad,
        warning: None,
    })
}

/// Kozachenko-Leonenko entropy penalty `-(1/N) Σ log(min_j ‖x_i - x_j‖)`.
/// Each point's gradient flows only through its current nearest neighbor.
pub fn koleo_loss(points: ArrayView2<f64>) -> LossOutput {
    let (n, d) = points.dim();
    if n < 2 {
        return LossOutput::zero((n, d), "koleo: fewer than two points");
    }
    let mut grad = Array2::zeros((n, d));
    let mut value = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let xi = points.row(i);
        let mut best = (f64::INFINITY, usize::MAX);
        for j in (0..n).filter(|&j| j != i) {
            let diff = &xi - &points.row(j);
            let d2 = diff.dot(&diff);
            if d2 < best.0 {
                best = (d2, j);
            }
        }
        let (d2, j) = best;
        let dist = d2.sqrt();
        value -= dist.max(KOLEO_EPS).ln() * inv_n;
        if dist > KOLEO_EPS {
            // d(-log dist)/dx_i = -(x_i - x_j) / dist²
            let diff = (&xi - &points.row(j)) * (inv_n / d2);
            {
                let mut gi = grad.row_mut(i);
                gi -= &diff;
            }
            let mut gj = grad.row_mut(j);
            gj += &diff;
        }
    }
    LossOutput {
        value,
        grad,
        warning: None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub scl: f64,
    pub koleo: f64,
}

#[derive(Debug, Clone)]
pub struct CombinedGradients {
    pub breakdown: LossBreakdown,
    /// Gradient with respect to the classification logits (`B x C`).
    pub logits: Array2<f64>,
    /// Gradient with respect to the two-view projections (`2B x p`).
    pub anchors: Array2<f64>,
}

/// `CE + SCL + γ·KoLeo` over whichever terms `spec` enables. KoLeo is taken
/// over the first view's projections, so its gradient lands in rows `0..B`
/// of the anchor gradient.
pub fn combined_loss(
    spec: &LossSpec,
    probs: ArrayView2<f64>,
    labels: &[usize],
    views: &MultiViewBatch,
) -> Result<CombinedGradients> {
    spec.validate()?;
    let b = labels.len();
    let mut breakdown = LossBreakdown::default();
    let mut logits = Array2::zeros(probs.dim());
    let mut anchors = Array2::zeros(views.anchors.dim());

    if spec.use_ce {
        let ce = ce_loss(probs, labels)?;
        breakdown.ce = ce.value;
        logits += &ce.grad;
    }
    if spec.use_scl {
        let scl = supcon_loss(views, spec.tau_scl, spec.supcon_form)?;
        breakdown.scl = scl.value;
        anchors += &scl.grad;
    }
    if spec.use_koleo && spec.gamma > 0.0 {
        if views.views() < b {
            return Err(Error::Dimension("koleo needs the first view of every example".into()));
        }
        let ko = koleo_loss(views.anchors.slice(s![..b, ..]));
        breakdown.koleo = ko.value;
        let mut first = anchors.slice_mut(s![..b, ..]);
        first.scaled_add(spec.gamma, &ko.grad);
    }
    breakdown.total = breakdown.ce + breakdown.scl + spec.gamma * breakdown.koleo;
    Ok(CombinedGradients {
        breakdown,
        logits,
        anchors,
    })
}
