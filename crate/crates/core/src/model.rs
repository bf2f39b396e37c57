//! MLP encoder with a classification head and a projection head, trained
//! with hand-derived gradients and AdamW.
//!
//! ```text
//! x ─ trunk (tanh MLP) ─ z ─┬─ dropout ─ linear ─ softmax   (class probs)
//!                           └─ dropout(0.2) ─ linear        (projection, two views)
//! ```

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{combined_loss, LossBreakdown, LossSpec, MultiViewBatch};

/// Elementwise mean of the rows of a `T x d` token matrix.
pub fn mean_pool(tokens: &Array2<f64>) -> Result<Array1<f64>> {
    tokens
        .mean_axis(Axis(0))
        .ok_or_else(|| Error::DegenerateInput("mean_pool over zero tokens".into()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub hidden_layers: usize,
    pub num_classes: usize,
    pub proj_dim: usize,
    pub head_dropout: f64,
    pub aug_dropout: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dim: 64,
            hidden_layers: 1,
            num_classes,
            proj_dim: 32,
            head_dropout: 0.1,
            aug_dropout: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.proj_dim == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(1..=2).contains(&self.hidden_layers) {
            return Err(Error::Config("hidden_layers must be 1 or 2".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        for rate in [self.head_dropout, self.aug_dropout] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("dropout rate {rate} not in [0, 1)")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Array2::zeros((input, output)),
            bias: Array1::zeros(output),
        }
    }

    fn glorot(input: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        Dense {
            weight: Array2::from_shape_simple_fn((input, output), || rng.gen_range(-limit..limit)),
            bias: Array1::zeros(output),
        }
    }

    fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

/// All trainable tensors. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub trunk: Vec<Dense>,
    pub head: Dense,
    pub proj: Dense,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let mut trunk = vec![Dense::zeros(config.input_dim, config.hidden_dim)];
        for _ in 1..config.hidden_layers {
            trunk.push(Dense::zeros(config.hidden_dim, config.hidden_dim));
        }
        ModelParams {
            trunk,
            head: Dense::zeros(config.hidden_dim, config.num_classes),
            proj: Dense::zeros(config.hidden_dim, config.proj_dim),
        }
    }

    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut trunk = vec![Dense::glorot(config.input_dim, config.hidden_dim, rng)];
        for _ in 1..config.hidden_layers {
            trunk.push(Dense::glorot(config.hidden_dim, config.hidden_dim, rng));
        }
        ModelParams {
            trunk,
            head: Dense::glorot(config.hidden_dim, config.num_classes, rng),
            proj: Dense::glorot(config.hidden_dim, config.proj_dim, rng),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.trunk.iter().chain([&self.head, &self.proj])
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.trunk.iter_mut().chain([&mut self.head, &mut self.proj])
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        self.layers()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Pre-scaled inverted-dropout masks (entries are `0` or `1/(1-rate)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub head: Array2<f64>,
    pub view1: Array2<f64>,
    pub view2: Array2<f64>,
}

impl DropoutMasks {
    pub fn identity(batch: usize, hidden: usize) -> Self {
        let ones = Array2::ones((batch, hidden));
        DropoutMasks {
            head: ones.clone(),
            view1: ones.clone(),
            view2: ones,
        }
    }

    pub fn sample(batch: usize, config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let mut mask = |rate: f64| {
            let keep = 1.0 / (1.0 - rate);
            Array2::from_shape_simple_fn((batch, config.hidden_dim), || {
                if rng.gen::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            })
        };
        let head = mask(config.head_dropout);
        let view1 = mask(config.aug_dropout);
        let view2 = mask(config.aug_dropout);
        DropoutMasks { head, view1, view2 }
    }
}

pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub z: Array2<f64>,
    pub logits: Array2<f64>,
    pub probs: Array2<f64>,
    pub proj: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub confidence: f64,
    pub probs: Vec<f64>,
    pub z: Vec<f64>,
}

pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in values.iter().enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

struct Cache {
    /// trunk inputs: `x`, then each hidden activation
    inputs: Vec<Array2<f64>>,
    z: Array2<f64>,
    head_in: Array2<f64>,
    probs: Array2<f64>,
    view1: Array2<f64>,
    view2: Array2<f64>,
    proj: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            params: ModelParams::init(&config, rng),
            config,
        })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Model {
            params: ModelParams::zeros(&config),
            config,
        })
    }

    fn check_input(&self, x: ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.config.input_dim {
            return Err(Error::Dimension(format!(
                "input has {} features, model expects {}",
                x.ncols(),
                self.config.input_dim
            )));
        }
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::InvalidInput("NaN in features".into()));
        }
        Ok(())
    }

    pub fn encode(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut h = x.to_owned();
        for layer in &self.params.trunk {
            h = layer.apply(h.view()).mapv_into(f64::tanh);
        }
        Ok(h)
    }

    /// Eval mode is deterministic and never touches an rng. Train mode draws
    /// fresh head and augmentation dropout masks; `proj` is the first view.
    pub fn forward(&self, x: ArrayView2<f64>, mode: Mode<'_>) -> Result<ForwardOutput> {
        let z = self.encode(x)?;
        let (head_in, proj_in) = match mode {
            Mode::Eval => (z.clone(), z.clone()),
            Mode::Train(rng) => {
                let masks = DropoutMasks::sample(z.nrows(), &self.config, rng);
                (&z * &masks.head, &z * &masks.view1)
            }
        };
        let logits = self.params.head.apply(head_in.view());
        let probs = softmax_rows(&logits);
        let proj = self.params.proj.apply(proj_in.view());
        Ok(ForwardOutput {
            z,
            logits,
            probs,
            proj,
        })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        let out = self.forward(x, Mode::Eval)?;
        Ok(out
            .probs
            .rows()
            .into_iter()
            .zip(out.z.rows())
            .map(|(p, z)| {
                let probs = p.to_vec();
                let (class, confidence) = argmax(&probs);
                Prediction {
                    class,
                    confidence,
                    probs,
                    z: z.to_vec(),
                }
            })
            .collect())
    }

    fn forward_cached(&self, x: ArrayView2<f64>, masks: &DropoutMasks, need_proj: bool) -> Cache {
        let mut inputs = vec![x.to_owned()];
        for (i, layer) in self.params.trunk.iter().enumerate() {
            let h = layer.apply(inputs[i].view()).mapv_into(f64::tanh);
            inputs.push(h);
        }
        let z = inputs.pop().unwrap();
        let head_in = &z * &masks.head;
        let probs = softmax_rows(&self.params.head.apply(head_in.view()));
        let (view1, view2, proj) = if need_proj {
            let v1 = &z * &masks.view1;
            let v2 = &z * &masks.view2;
            let p1 = self.params.proj.apply(v1.view());
            let p2 = self.params.proj.apply(v2.view());
            let proj = ndarray::concatenate(Axis(0), &[p1.view(), p2.view()]).unwrap();
            (v1, v2, proj)
        } else {
            (Array2::zeros((0, 0)), Array2::zeros((0, 0)), Array2::zeros((0, 0)))
        };
        Cache {
            inputs,
            z,
            head_in,
            probs,
            view1,
            view2,
            proj,
        }
    }

    /// Loss and parameter gradients for one batch under fixed dropout masks.
    pub fn loss_and_grad(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        spec: &LossSpec,
        masks: &DropoutMasks,
    ) -> Result<(LossBreakdown, ModelParams)> {
        self.check_input(x)?;
        let b = x.nrows();
        if b == 0 {
            return Err(Error::DegenerateInput("empty batch".into()));
        }
        if labels.len() != b || masks.head.dim() != (b, self.config.hidden_dim) {
            return Err(Error::Dimension(format!(
                "batch of {b} with {} labels and masks {:?}",
                labels.len(),
                masks.head.dim()
            )));
        }
        let need_proj = spec.use_scl || (spec.use_koleo && spec.gamma > 0.0);
        let cache = self.forward_cached(x, masks, need_proj);
        let views = if need_proj {
            MultiViewBatch {
                anchors: cache.proj.clone(),
                labels: labels.iter().chain(labels.iter()).copied().collect(),
                source: (0..2 * b).map(|i| i % b).collect(),
            }
        } else {
            MultiViewBatch {
                anchors: Array2::zeros((0, self.config.proj_dim)),
                labels: Vec::new(),
                source: Vec::new(),
            }
        };
        let loss = combined_loss(spec, cache.probs.view(), labels, &views)?;

        let mut grads = ModelParams::zeros(&self.config);
        // classification head
        grads.head.weight = cache.head_in.t().dot(&loss.logits);
        grads.head.bias = loss.logits.sum_axis(Axis(0));
        let mut dz = loss.logits.dot(&self.params.head.weight.t()) * &masks.head;

        if need_proj {
            let d1 = loss.anchors.slice(s![..b, ..]);
            let d2 = loss.anchors.slice(s![b.., ..]);
            grads.proj.weight = cache.view1.t().dot(&d1) + cache.view2.t().dot(&d2);
            grads.proj.bias = loss.anchors.sum_axis(Axis(0));
            let wt = self.params.proj.weight.t();
            dz = dz + d1.dot(&wt) * &masks.view1 + d2.dot(&wt) * &masks.view2;
        }

        let mut upstream = dz;
        let mut out = &cache.z;
        for l in (0..self.params.trunk.len()).rev() {
            let da = upstream * &out.mapv(|h| 1.0 - h * h);
            let input = &cache.inputs[l];
            grads.trunk[l].weight = input.t().dot(&da);
            grads.trunk[l].bias = da.sum_axis(Axis(0));
            upstream = da.dot(&self.params.trunk[l].weight.t());
            out = input;
        }
        Ok((loss.breakdown, grads))
    }

    pub fn loss(
        &self,
        x: ArrayView2<f64>,
        labels: &[usize],
        spec: &LossSpec,
        masks: &DropoutMasks,
    ) -> Result<f64> {
        self.loss_and_grad(x, labels, spec, masks).map(|(l, _)| l.total)
    }

    /// One optimizer step on a batch with freshly sampled dropout masks.
    pub fn train_step(
        &mut self,
        x: ArrayView2<f64>,
        labels: &[usize],
        spec: &LossSpec,
        optim: &mut OptimState,
        rng: &mut ChaCha8Rng,
    ) -> Result<LossBreakdown> {
        let masks = DropoutMasks::sample(x.nrows(), &self.config, rng);
        let (loss, grads) = self.loss_and_grad(x, labels, spec, &masks)?;
        optim.step(&mut self.params, &grads)?;
        Ok(loss)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(config: AdamWConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptimState {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Bias-corrected Adam update with decoupled weight decay:
    /// `w ← w - lr·(m̂ / (√v̂ + ε) + wd·w)`.
    /// A non-finite gradient aborts the step and leaves everything untouched.
    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) -> Result<()> {
        let g_tensors = grads.tensors();
        if g_tensors.len() != self.m.len()
            || g_tensors.iter().zip(&self.m).any(|(g, m)| g.len() != m.len())
        {
            return Err(Error::Dimension("gradient shapes do not match optimizer state".into()));
        }
        if g_tensors.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((w, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(g_tensors)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for i in 0..w.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * w[i]);
            }
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"TKCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optim: OptimState,
    pub rng: ChaCha8Rng,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or(
            Error::Length {
                expected: (self.pos + n) as u64,
                found: self.bytes.len() as u64,
            },
        )?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn tensor(&mut self, into: &mut [f64]) -> Result<()> {
        let len = self.u64()? as usize;
        if len != into.len() {
            return Err(Error::Format(format!("tensor of {len} values, expected {}", into.len())));
        }
        for v in into.iter_mut() {
            *v = self.f64()?;
        }
        Ok(())
    }
}

fn put_tensor(out: &mut Vec<u8>, values: &[f64]) {
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let config = serde_json::to_vec(&self.model.config).expect("config serializes");
        out.extend_from_slice(&(config.len() as u64).to_le_bytes());
        out.extend_from_slice(&config);
        for t in self.model.params.tensors() {
            put_tensor(&mut out, t);
        }
        let o = &self.optim;
        out.extend_from_slice(&o.step.to_le_bytes());
        for v in [
            o.config.lr,
            o.config.weight_decay,
            o.config.beta1,
            o.config.beta2,
            o.config.eps,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for t in o.m.iter().chain(o.v.iter()) {
            put_tensor(&mut out, t);
        }
        out.extend_from_slice(&self.rng.get_seed());
        out.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4).ok() != Some(CHECKPOINT_MAGIC.as_slice()) {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let config_len = r.u64()? as usize;
        let config: ModelConfig = serde_json::from_slice(r.take(config_len)?)?;
        let mut model = Model::zeros(config)?;
        for t in model.params.tensors_mut() {
            r.tensor(t)?;
        }
        let step = r.u64()?;
        let adam = AdamWConfig {
            lr: r.f64()?,
            weight_decay: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
        };
        let mut optim = OptimState::new(adam, &model.params);
        optim.step = step;
        for t in optim.m.iter_mut().chain(optim.v.iter_mut()) {
            r.tensor(t)?;
        }
        let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let stream = r.u64()?;
        let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(Error::Length {
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Checkpoint { model, optim, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_config() -> ModelConfig {
        ModelConfig {
            hidden_dim: 6,
            proj_dim: 4,
            ..ModelConfig::new(3, 3)
        }
    }

    #[test]
    fn mean_pool_cases() {
        assert_eq!(mean_pool(&array![[1.0, 3.0], [3.0, 5.0]]).unwrap(), array![2.0, 4.0]);
        assert_eq!(mean_pool(&array![[7.0, 7.0]]).unwrap(), array![7.0, 7.0]);
        assert_eq!(mean_pool(&array![[2.5], [-2.5]]).unwrap(), array![0.0]);
        assert!(mean_pool(&Array2::zeros((0, 3))).is_err());
    }

    #[test]
    fn zero_weights_give_uniform() {
        let model = Model::zeros(ModelConfig::new(5, 151)).unwrap();
        let x = array![[0.3, -1.0, 2.0, 0.0, 9.0]];
        let out = model.forward(x.view(), Mode::Eval).unwrap();
        for &p in out.probs.iter() {
            assert_abs_diff_eq!(p, 1.0 / 151.0, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(1.0 / 151.0, 0.006623, epsilon = 1e-6);
    }

    #[test]
    fn eval_is_deterministic_and_normalized() {
        let model = Model::new(small_config(), &mut rng(1)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [100.0, -50.0, 3.0]];
        let a = model.forward(x.view(), Mode::Eval).unwrap();
        let b = model.forward(x.view(), Mode::Eval).unwrap();
        assert_eq!(a.probs, b.probs);
        assert_eq!(a.z, b.z);
        for row in a.probs.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn train_mode_uses_seeded_dropout() {
        let model = Model::new(small_config(), &mut rng(1)).unwrap();
        let x = array![[0.1, 0.2, 0.3]];
        let a = model.forward(x.view(), Mode::Train(&mut rng(9))).unwrap();
        let b = model.forward(x.view(), Mode::Train(&mut rng(9))).unwrap();
        assert_eq!(a.probs, b.probs);
    }

    #[test]
    fn nan_input_rejected() {
        let model = Model::zeros(small_config()).unwrap();
        let x = array![[0.1, f64::NAN, 0.3]];
        assert!(matches!(model.forward(x.view(), Mode::Eval), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn argmax_ties_to_lowest() {
        assert_eq!(argmax(&[0.2, 0.5, 0.3]), (1, 0.5));
        assert_eq!(argmax(&[0.5, 0.5]), (0, 0.5));
    }

    #[test]
    fn batch_prediction_matches_single() {
        let model = Model::new(small_config(), &mut rng(2)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [1.0, -1.0, 0.5], [0.0, 0.0, 2.0]];
        let batch = model.predict(x.view()).unwrap();
        for (i, p) in batch.iter().enumerate() {
            let single = model.predict(x.slice(s![i..i + 1, ..])).unwrap();
            assert_eq!(&single[0], p);
        }
    }

    #[test]
    fn adamw_single_step() {
        let config = ModelConfig {
            input_dim: 1,
            hidden_dim: 1,
            hidden_layers: 1,
            num_classes: 2,
            proj_dim: 1,
            head_dropout: 0.0,
            aug_dropout: 0.0,
        };
        let mut params = ModelParams::zeros(&config);
        params.trunk[0].weight[[0, 0]] = 1.0;
        let mut grads = ModelParams::zeros(&config);
        grads.trunk[0].weight[[0, 0]] = 1.0;
        let mut optim = OptimState::new(
            AdamWConfig {
                lr: 0.1,
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        optim.step(&mut params, &grads).unwrap();
        assert_abs_diff_eq!(params.trunk[0].weight[[0, 0]], 0.9, epsilon = 1e-8);
    }

    #[test]
    fn adamw_zero_grad_fixed_point_and_decay() {
        let config = small_config();
        let start = ModelParams::init(&config, &mut rng(3));
        let zero = ModelParams::zeros(&config);

        let mut params = start.clone();
        let mut optim = OptimState::new(
            AdamWConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
            &params,
        );
        optim.step(&mut params, &zero).unwrap();
        assert_eq!(params, start);

        let mut params = start.clone();
        let adam = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..Default::default()
        };
        let mut optim = OptimState::new(adam, &params);
        optim.step(&mut params, &zero).unwrap();
        for (after, before) in params.tensors().iter().zip(start.tensors()) {
            for (a, b) in after.iter().zip(before) {
                assert_abs_diff_eq!(*a, b * (1.0 - 0.05), epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn adamw_rejects_non_finite() {
        let config = small_config();
        let mut params = ModelParams::init(&config, &mut rng(3));
        let before = params.clone();
        let mut grads = ModelParams::zeros(&config);
        grads.head.bias[0] = f64::INFINITY;
        let mut optim = OptimState::new(AdamWConfig::default(), &params);
        assert!(matches!(optim.step(&mut params, &grads), Err(Error::NonFinite(_))));
        assert_eq!(params, before);
        assert_eq!(optim.step, 0);
    }

    #[test]
    fn saturated_head_has_no_ce_signal() {
        let config = small_config();
        let mut model = Model::zeros(config).unwrap();
        model.params.head.bias[1] = 60.0;
        let x = array![[0.1, 0.2, 0.3], [0.5, 0.1, -0.3]];
        let masks = DropoutMasks::identity(2, config.hidden_dim);
        let (_, grads) = model.loss_and_grad(x.view(), &[1, 1], &LossSpec::ce_only(), &masks).unwrap();
        assert!(grads.norm() < 1e-6);
    }

    #[test]
    fn duplicated_batch_has_same_mean_gradient() {
        let config = small_config();
        let model = Model::new(config, &mut rng(4)).unwrap();
        let x = array![[0.1, 0.2, 0.3], [0.5, 0.1, -0.3], [1.0, 0.0, 0.0]];
        let labels = [0, 2, 1];
        let spec = LossSpec::ce_only();
        let (_, g1) = model
            .loss_and_grad(x.view(), &labels, &spec, &DropoutMasks::identity(3, 6))
            .unwrap();
        let x2 = ndarray::concatenate(Axis(0), &[x.view(), x.view()]).unwrap();
        let labels2: Vec<usize> = labels.iter().chain(labels.iter()).copied().collect();
        let (_, g2) = model
            .loss_and_grad(x2.view(), &labels2, &spec, &DropoutMasks::identity(6, 6))
            .unwrap();
        for (a, b) in g1.tensors().iter().zip(g2.tensors()) {
            for (u, v) in a.iter().zip(b) {
                assert_abs_diff_eq!(u, v, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn checkpoint_resumes_bit_identically() {
        let config = small_config();
        let mut r = rng(5);
        let mut model = Model::new(config, &mut r).unwrap();
        let mut optim = OptimState::new(AdamWConfig::default(), &model.params);
        let x = array![[0.1, 0.2, 0.3], [0.5, 0.1, -0.3], [1.0, 0.0, 0.0], [0.0, 1.0, 1.0]];
        let labels = [0, 2, 1, 0];
        let spec = LossSpec::default();
        for _ in 0..3 {
            model.train_step(x.view(), &labels, &spec, &mut optim, &mut r).unwrap();
        }
        let bytes = Checkpoint {
            model: model.clone(),
            optim: optim.clone(),
            rng: r.clone(),
        }
        .encode();
        let mut restored = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(restored.model, model);
        for _ in 0..3 {
            model.train_step(x.view(), &labels, &spec, &mut optim, &mut r).unwrap();
            restored
                .model
                .train_step(x.view(), &labels, &spec, &mut restored.optim, &mut restored.rng)
                .unwrap();
        }
        assert_eq!(restored.model, model);
        assert_eq!(restored.optim, optim);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
