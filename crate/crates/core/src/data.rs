//! Datasets of `(features, optional label)` examples and their on-disk formats.
//!
//! A dataset directory holds `train.jsonl`, `val.jsonl` and `test.jsonl`, each
//! paired with a `.tknn` embedding file whose row `i` is the feature vector of
//! line `i`. An optional `classes.json` lists class names.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 4] = b"TKNN";
pub const EMBEDDING_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const HEADER_LEN: u64 = 4 + 4 + 8 + 4 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub text: String,
    pub features: Vec<f64>,
    pub label: Option<usize>,
    /// True label of an example whose label was withheld by [`subsample_labels`].
    /// Only the upper-bound oracle and diagnostics may read it.
    pub(crate) hidden_label: Option<usize>,
}

impl Example {
    pub fn new(id: u64, features: Vec<f64>, label: Option<usize>) -> Self {
        Example {
            id,
            text: String::new(),
            features,
            label,
            hidden_label: None,
        }
    }

    /// Builds an example from a `T x d` token matrix by mean pooling its rows.
    pub fn from_tokens(id: u64, tokens: &Array2<f64>, label: Option<usize>) -> Result<Self> {
        let pooled = crate::model::mean_pool(tokens)?;
        Ok(Example::new(id, pooled.to_vec(), label))
    }

    pub fn with_text(mut self, text: impl Into<String>) -> Self {
        self.text = text.into();
        self
    }

    /// The withheld ground truth, if any. Diagnostic use only.
    pub fn hidden_label(&self) -> Option<usize> {
        self.hidden_label
    }

    /// Gold label if visible, otherwise the withheld one.
    pub fn true_label(&self) -> Option<usize> {
        self.label.or(self.hidden_label)
    }

    pub fn dim(&self) -> usize {
        self.features.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub labeled: Vec<Example>,
    pub unlabeled: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub warnings: Vec<String>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.splits()
            .flat_map(|s| s.iter())
            .map(Example::dim)
            .next()
            .unwrap_or(0)
    }

    fn splits(&self) -> impl Iterator<Item = &Vec<Example>> {
        [&self.labeled, &self.unlabeled, &self.validation, &self.test].into_iter()
    }

    /// Checks label ranges, constant feature dimension, and id disjointness.
    pub fn validate(&self) -> Result<()> {
        if self.class_names.len() != self.num_classes {
            return Err(Error::InvalidInput(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        let dim = self.dim();
        let mut seen = BTreeSet::new();
        for ex in self.splits().flat_map(|s| s.iter()) {
            if ex.dim() != dim {
                return Err(Error::Dimension(format!(
                    "example {} has dimension {}, expected {dim}",
                    ex.id,
                    ex.dim()
                )));
            }
            if let Some(label) = ex.true_label() {
                if label >= self.num_classes {
                    return Err(Error::Index {
                        index: label,
                        bound: self.num_classes,
                    });
                }
            }
            if !seen.insert(ex.id) {
                return Err(Error::InvalidInput(format!("duplicate id {}", ex.id)));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub label_fraction: f64,
    pub seed: u64,
    pub stratified: bool,
}

impl SplitSpec {
    pub fn new(label_fraction: f64, seed: u64) -> Self {
        SplitSpec {
            label_fraction,
            seed,
            stratified: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub label_fraction: f64,
    pub labeled_ids: Vec<u64>,
    pub unlabeled_ids: Vec<u64>,
}

impl SplitManifest {
    pub fn from_dataset(dataset: &Dataset, spec: &SplitSpec) -> Self {
        SplitManifest {
            seed: spec.seed,
            label_fraction: spec.label_fraction,
            labeled_ids: dataset.labeled.iter().map(|e| e.id).collect(),
            unlabeled_ids: dataset.unlabeled.iter().map(|e| e.id).collect(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut out, self)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Deserialize)]
struct JsonlRecord {
    id: u64,
    #[serde(default)]
    text: String,
    label: Option<usize>,
}

#[derive(Serialize)]
struct JsonlRecordRef<'a> {
    id: u64,
    text: &'a str,
    label: Option<usize>,
}

/// Reads a JSON-lines dataset file. Features come from `embeddings` by line
/// order; without it every example has an empty feature vector.
pub fn load_jsonl(path: &Path, embeddings: Option<&Path>) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut examples = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        for key in ["id", "text", "label"] {
            if value.get(key).is_none() {
                return Err(parse_err(format!("missing key \"{key}\"")));
            }
        }
        let record: JsonlRecord =
            serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))?;
        examples.push(Example {
            id: record.id,
            text: record.text,
            features: Vec::new(),
            label: record.label,
            hidden_label: None,
        });
    }

    if let Some(emb_path) = embeddings {
        let matrix = read_embeddings(emb_path)?;
        if matrix.nrows() != examples.len() {
            return Err(Error::Dimension(format!(
                "{} has {} rows but {} has {} examples",
                emb_path.display(),
                matrix.nrows(),
                path.display(),
                examples.len()
            )));
        }
        for (ex, row) in examples.iter_mut().zip(matrix.rows()) {
            ex.features = row.iter().map(|&v| v as f64).collect();
        }
    }
    Ok(examples)
}

/// Writes examples as JSON lines. Withheld labels are written as `null`.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for ex in examples {
        let record = JsonlRecordRef {
            id: ex.id,
            text: &ex.text,
            label: ex.label,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Array2<f32>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes)
}

pub fn decode_embeddings(bytes: &[u8]) -> Result<Array2<f32>> {
    if bytes.len() < 4 || &bytes[..4] != EMBEDDING_MAGIC {
        return Err(Error::Format("bad magic, expected \"TKNN\"".into()));
    }
    if (bytes.len() as u64) < HEADER_LEN {
        return Err(Error::Length {
            expected: HEADER_LEN,
            found: bytes.len() as u64,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != EMBEDDING_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let dtype = bytes[20];
    if dtype != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype {dtype}")));
    }
    let expected = rows
        .checked_mul(dim as u64)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    if bytes.len() as u64 != expected {
        return Err(Error::Length {
            expected,
            found: bytes.len() as u64,
        });
    }
    let data: Vec<f32> = bytes[HEADER_LEN as usize..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows as usize, dim as usize), data)
        .map_err(|e| Error::Dimension(e.to_string()))
}

pub fn encode_embeddings(matrix: &Array2<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + matrix.len() * 4);
    out.extend_from_slice(EMBEDDING_MAGIC);
    out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
    out.extend_from_slice(&(matrix.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(matrix.ncols() as u32).to_le_bytes());
    out.push(DTYPE_F32);
    // row-major regardless of the array's memory layout
    for v in matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn write_embeddings(matrix: &Array2<f32>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_embeddings(matrix)).map_err(|e| Error::io(path, e))
}

fn features_matrix(examples: &[Example], dim: usize) -> Result<Array2<f32>> {
    let mut data = Vec::with_capacity(examples.len() * dim);
    for ex in examples {
        if ex.dim() != dim {
            return Err(Error::Dimension(format!(
                "example {} has dimension {}, expected {dim}",
                ex.id,
                ex.dim()
            )));
        }
        data.extend(ex.features.iter().map(|&v| v as f32));
    }
    Array2::from_shape_vec((examples.len(), dim), data).map_err(|e| Error::Dimension(e.to_string()))
}

/// Writes a dataset directory: `{train,val,test}.jsonl`, matching `.tknn`
/// embedding files, and `classes.json`. Train holds labeled then unlabeled
/// examples.
pub fn write_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let dim = dataset.dim();
    let train: Vec<Example> = dataset
        .labeled
        .iter()
        .chain(dataset.unlabeled.iter())
        .cloned()
        .collect();
    for (name, split) in [
        ("train", &train),
        ("val", &dataset.validation),
        ("test", &dataset.test),
    ] {
        write_jsonl(&dir.join(format!("{name}.jsonl")), split)?;
        write_embeddings(
            &features_matrix(split, dim)?,
            &dir.join(format!("{name}.tknn")),
        )?;
    }
    let classes = dir.join("classes.json");
    let body = serde_json::to_string_pretty(&dataset.class_names)?;
    std::fs::write(&classes, body + "\n").map_err(|e| Error::io(&classes, e))
}

/// Loads a dataset directory written by [`write_dir`] or an external exporter.
/// A missing `val.jsonl` is replaced by a seeded stratified 10% holdout of
/// the labeled training examples.
pub fn load_dir(dir: &Path) -> Result<Dataset> {
    let split = |name: &str| -> Result<Option<Vec<Example>>> {
        let jsonl = dir.join(format!("{name}.jsonl"));
        if !jsonl.exists() {
            return Ok(None);
        }
        let emb = dir.join(format!("{name}.tknn"));
        let emb = emb.exists().then_some(emb);
        load_jsonl(&jsonl, emb.as_deref()).map(Some)
    };
    let train = split("train")?.ok_or_else(|| {
        Error::InvalidInput(format!("{} has no train.jsonl", dir.display()))
    })?;
    let test = split("test")?.unwrap_or_default();
    let mut warnings = Vec::new();
    let (train, validation) = match split("val")? {
        Some(val) => (train, val),
        None => {
            warnings.push("no val.jsonl; carved a 10% stratified holdout from train".into());
            carve_validation(train, 0.1, 0)
        }
    };

    let classes_path = dir.join("classes.json");
    let max_label = train
        .iter()
        .chain(validation.iter())
        .chain(test.iter())
        .filter_map(|e| e.label)
        .max();
    let class_names: Vec<String> = if classes_path.exists() {
        let body =
            std::fs::read_to_string(&classes_path).map_err(|e| Error::io(&classes_path, e))?;
        serde_json::from_str(&body)?
    } else {
        (0..max_label.map_or(0, |m| m + 1))
            .map(|c| format!("class_{c}"))
            .collect()
    };

    let (labeled, unlabeled) = train.into_iter().partition(|e| e.label.is_some());
    let dataset = Dataset {
        labeled,
        unlabeled,
        validation,
        test,
        num_classes: class_names.len(),
        class_names,
        warnings,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Splits off a stratified, seeded holdout of `fraction` of each class.
pub fn carve_validation(
    examples: Vec<Example>,
    fraction: f64,
    seed: u64,
) -> (Vec<Example>, Vec<Example>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_class: BTreeMap<Option<usize>, Vec<Example>> = BTreeMap::new();
    for ex in examples {
        by_class.entry(ex.label).or_default().push(ex);
    }
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (label, mut members) in by_class {
        members.sort_by_key(|e| e.id);
        if label.is_none() {
            train.extend(members);
            continue;
        }
        members.shuffle(&mut rng);
        let take = (fraction * members.len() as f64).round() as usize;
        let rest = members.split_off(take);
        val.extend(members);
        train.extend(rest);
    }
    train.sort_by_key(|e| e.id);
    val.sort_by_key(|e| e.id);
    (train, val)
}

fn labeled_target(fraction: f64, n: usize) -> usize {
    // guard against 8/672 * 672 = 8.000000000000002
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Withholds labels from all but `⌈label_fraction · N⌉` labeled examples.
///
/// With `stratified`, each class gets its proportional share (at least one
/// when the budget allows) and leftover slots go to classes in seeded shuffle
/// order. Withheld examples move to the unlabeled pool and keep their true
/// label as a hidden label.
pub fn subsample_labels(dataset: &Dataset, spec: &SplitSpec) -> Result<Dataset> {
    if !(spec.label_fraction > 0.0 && spec.label_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "label_fraction must be in (0, 1], got {}",
            spec.label_fraction
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut pool = dataset.labeled.clone();
    pool.sort_by_key(|e| e.id);
    let n = pool.len();
    let target = labeled_target(spec.label_fraction, n);
    let mut warnings = dataset.warnings.clone();

    let keep: BTreeSet<u64> = if spec.stratified {
        let mut by_class: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
        for ex in &pool {
            by_class.entry(ex.label.unwrap()).or_default().push(ex.id);
        }
        let classes: Vec<usize> = by_class.keys().copied().collect();
        for ids in by_class.values_mut() {
            ids.shuffle(&mut rng);
        }
        let min_one = target >= classes.len();
        if !min_one && !classes.is_empty() {
            warnings.push(format!(
                "label budget {target} is below the {} classes present; some classes get no label",
                classes.len()
            ));
        }
        let mut quota: BTreeMap<usize, usize> = by_class
            .iter()
            .map(|(&c, ids)| {
                let share = (spec.label_fraction * ids.len() as f64 + 1e-9).floor() as usize;
                let share = if min_one { share.max(1) } else { share };
                (c, share.min(ids.len()))
            })
            .collect();

        let mut order = classes.clone();
        order.shuffle(&mut rng);
        let mut total: usize = quota.values().sum();
        while total < target {
            let before = total;
            for c in &order {
                if total == target {
                    break;
                }
                let q = quota.get_mut(c).unwrap();
                if *q < by_class[c].len() {
                    *q += 1;
                    total += 1;
                }
            }
            if total == before {
                break;
            }
        }
        while total > target {
            let before = total;
            for c in &order {
                if total == target {
                    break;
                }
                let floor = if min_one { 1 } else { 0 };
                let q = quota.get_mut(c).unwrap();
                if *q > floor {
                    *q -= 1;
                    total -= 1;
                }
            }
            if total == before {
                break;
            }
        }
        by_class
            .iter()
            .flat_map(|(c, ids)| ids[..quota[c]].iter().copied())
            .collect()
    } else {
        let mut ids: Vec<u64> = pool.iter().map(|e| e.id).collect();
        ids.shuffle(&mut rng);
        ids.truncate(target);
        ids.into_iter().collect()
    };

    let mut labeled = Vec::with_capacity(keep.len());
    let mut unlabeled = dataset.unlabeled.clone();
    for mut ex in pool {
        if keep.contains(&ex.id) {
            labeled.push(ex);
        } else {
            ex.hidden_label = ex.label.take();
            unlabeled.push(ex);
        }
    }
    unlabeled.sort_by_key(|e| e.id);

    for w in warnings.iter().skip(dataset.warnings.len()) {
        log::warn!("{w}");
    }
    Ok(Dataset {
        labeled,
        unlabeled,
        validation: dataset.validation.clone(),
        test: dataset.test.clone(),
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        warnings,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DatasetStats {
    pub intents: usize,
    pub train: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    /// Train examples per class, counting withheld labels.
    pub class_counts: Vec<usize>,
}

pub fn dataset_stats(dataset: &Dataset) -> DatasetStats {
    let mut class_counts = vec![0; dataset.num_classes];
    for ex in dataset.labeled.iter().chain(dataset.unlabeled.iter()) {
        if let Some(c) = ex.true_label() {
            if c < class_counts.len() {
                class_counts[c] += 1;
            }
        }
    }
    DatasetStats {
        intents: dataset.num_classes,
        train: dataset.labeled.len() + dataset.unlabeled.len(),
        labeled: dataset.labeled.len(),
        unlabeled: dataset.unlabeled.len(),
        val: dataset.validation.len(),
        test: dataset.test.len(),
        class_counts,
    }
}

impl std::fmt::Display for DatasetStats {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "intents\ttrain\tlabeled\tunlabeled\tval\ttest")?;
        writeln!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.intents, self.train, self.labeled, self.unlabeled, self.val, self.test
        )?;
        for (c, n) in self.class_counts.iter().enumerate() {
            writeln!(f, "class {c}\t{n}")?;
        }
        Ok(())
    }
}
