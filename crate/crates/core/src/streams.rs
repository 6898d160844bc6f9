//! Domain-incremental task streams.
//!
//! A stream is an ordered list of tasks, each with a training split and an
//! evaluation split of precomputed feature vectors. Streams come either from
//! the synthetic covariate-shift generator below or from `.glrf` feature files
//! written by an external extractor.

use std::collections::BTreeSet;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{write_atomic, ByteReader, ByteWriter};
use crate::tensor::{DenseMatrix, Rng};

pub const FEATURE_MAGIC: &[u8; 4] = b"GLRF";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 4 + 4 * 4;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("invalid synthetic stream spec: {0}")]
    InvalidSpec(String),
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("refusing to write an empty batch")]
    EmptyBatch,
    #[error("malformed feature file {path}: {reason}")]
    MalformedFeatureFile { path: String, reason: String },
    #[error("inconsistent stream: {0}")]
    InconsistentStream(String),
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

pub type Result<T> = std::result::Result<T, StreamError>;

/// Feature rows with one class label each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledFeatureBatch {
    features: DenseMatrix,
    labels: Vec<u32>,
}

impl LabeledFeatureBatch {
    pub fn new(features: DenseMatrix, labels: Vec<u32>) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(StreamError::InvalidBatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if !features.is_finite() {
            return Err(StreamError::InvalidBatch("non-finite feature value".into()));
        }
        Ok(Self { features, labels })
    }

    pub fn empty(dim: usize) -> Self {
        Self {
            features: DenseMatrix::zeros(0, dim),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &Self) -> Result<Self> {
        let features = self
            .features
            .vstack(&other.features)
            .map_err(|e| StreamError::InvalidBatch(e.to_string()))?;
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Ok(Self { features, labels })
    }

    pub fn classes_present(&self) -> BTreeSet<u32> {
        self.labels.iter().copied().collect()
    }

    pub fn class_indices(&self, class: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }

    /// Bytes needed to hold these rows as f32 features plus u32 labels.
    pub fn storage_bytes(&self) -> u64 {
        self.len() as u64 * (4 * self.dim() as u64 + 4)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub domain_id: u32,
    pub train: LabeledFeatureBatch,
    pub eval: LabeledFeatureBatch,
    pub tags: Vec<String>,
}

/// Ordered tasks sharing one feature dimension and one label alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream {
    tasks: Vec<TaskDataset>,
    num_classes: u32,
    dim: usize,
}

impl TaskStream {
    pub fn new(tasks: Vec<TaskDataset>, num_classes: u32) -> Result<Self> {
        let first = tasks
            .first()
            .ok_or_else(|| StreamError::InconsistentStream("stream has no tasks".into()))?;
        let dim = first.train.dim();
        if num_classes == 0 {
            return Err(StreamError::InconsistentStream("zero classes".into()));
        }
        for (t, task) in tasks.iter().enumerate() {
            if task.eval.is_empty() {
                return Err(StreamError::InconsistentStream(format!(
                    "task {t} has an empty evaluation set"
                )));
            }
            for (split, b) in [("train", &task.train), ("eval", &task.eval)] {
                if b.dim() != dim {
                    return Err(StreamError::InconsistentStream(format!(
                        "task {t} {split} has dimension {}, expected {dim}",
                        b.dim()
                    )));
                }
                if let Some(&bad) = b.labels().iter().find(|&&l| l >= num_classes) {
                    return Err(StreamError::InconsistentStream(format!(
                        "task {t} {split} has label {bad} with {num_classes} classes"
                    )));
                }
            }
        }
        Ok(Self {
            tasks,
            num_classes,
            dim,
        })
    }

    pub fn tasks(&self) -> &[TaskDataset] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn num_classes(&self) -> u32 {
        self.num_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Total bytes of training features and labels at f32/u32 storage width.
    pub fn train_storage_bytes(&self) -> u64 {
        self.tasks.iter().map(|t| t.train.storage_bytes()).sum()
    }
}

fn default_planes() -> Vec<[usize; 2]> {
    vec![[0, 1]]
}

/// Per-class Gaussian clouds moved by a per-domain affine map
/// (rotate, then scale, then translate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticShiftSpec {
    pub num_domains: usize,
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub eval_per_class: usize,
    /// `classes × dim`
    pub base_means: Vec<Vec<f64>>,
    pub within_class_sd: f64,
    /// Coordinate pairs rotated by each domain's angle, applied in order.
    #[serde(default = "default_planes")]
    pub rotation_planes: Vec<[usize; 2]>,
    /// One angle per domain, in degrees.
    pub rotations_deg: Vec<f64>,
    /// `num_domains × dim`
    pub translations: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub seed: u64,
}

impl SyntheticShiftSpec {
    /// Two classes at `±separation` along coordinate 0, rotated in the (0, 1)
    /// plane by the given angles and pushed along coordinates 2 and 3 by
    /// `translation_step · t` for domain `t`.
    pub fn rotating_two_class(
        dim: usize,
        rotations_deg: &[f64],
        translation_step: f64,
        train_per_class: usize,
        eval_per_class: usize,
        seed: u64,
    ) -> Self {
        let separation = 3.0;
        let mut c0 = vec![0.0; dim];
        let mut c1 = vec![0.0; dim];
        c0[0] = separation;
        c1[0] = -separation;
        let translations = (0..rotations_deg.len())
            .map(|t| {
                let mut b = vec![0.0; dim];
                if dim > 3 {
                    b[2] = translation_step * t as f64;
                    b[3] = -translation_step * t as f64;
                }
                b
            })
            .collect();
        Self {
            num_domains: rotations_deg.len(),
            classes: 2,
            dim,
            train_per_class,
            eval_per_class,
            base_means: vec![c0, c1],
            within_class_sd: 1.0,
            rotation_planes: default_planes(),
            rotations_deg: rotations_deg.to_vec(),
            translations,
            scales: vec![1.0; rotations_deg.len()],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StreamError::InvalidSpec(m));
        if self.num_domains < 1 {
            return bad("num_domains must be >= 1".into());
        }
        if self.classes < 2 {
            return bad("classes must be >= 2".into());
        }
        if self.dim < 2 {
            return bad("dim must be >= 2".into());
        }
        if self.train_per_class < 1 || self.eval_per_class < 1 {
            return bad("per-class sample counts must be >= 1".into());
        }
        if !(self.within_class_sd >= 0.0) || !self.within_class_sd.is_finite() {
            return bad("within_class_sd must be finite and >= 0".into());
        }
        if self.base_means.len() != self.classes
            || self.base_means.iter().any(|m| m.len() != self.dim)
        {
            return bad(format!("base_means must be {}x{}", self.classes, self.dim));
        }
        if self.rotations_deg.len() != self.num_domains
            || self.translations.len() != self.num_domains
            || self.scales.len() != self.num_domains
        {
            return bad("rotations_deg, translations and scales need one entry per domain".into());
        }
        if self.translations.iter().any(|b| b.len() != self.dim) {
            return bad(format!("each translation must have {} entries", self.dim));
        }
        if self.scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return bad("scales must be positive".into());
        }
        for &[p, q] in &self.rotation_planes {
            if p == q || p >= self.dim || q >= self.dim {
                return bad(format!("invalid rotation plane ({p}, {q})"));
            }
        }
        let finite = self
            .base_means
            .iter()
            .chain(&self.translations)
            .flatten()
            .chain(&self.rotations_deg)
            .all(|v| v.is_finite());
        if !finite {
            return bad("non-finite value in spec".into());
        }
        Ok(())
    }

    /// Applies domain `t`'s affine map to `x` in place.
    pub fn transform(&self, t: usize, x: &mut [f64]) {
        let (sin, cos) = self.rotations_deg[t].to_radians().sin_cos();
        for &[p, q] in &self.rotation_planes {
            let (a, b) = (x[p], x[q]);
            x[p] = cos * a - sin * b;
            x[q] = sin * a + cos * b;
        }
        let s = self.scales[t];
        for (v, b) in x.iter_mut().zip(&self.translations[t]) {
            *v = s * *v + b;
        }
    }

    /// Mean of class `c` in domain `t`.
    pub fn class_mean(&self, c: usize, t: usize) -> Vec<f64> {
        let mut m = self.base_means[c].clone();
        self.transform(t, &mut m);
        m
    }

    /// Symmetric KL divergence between class `c`'s Gaussians in domains `a` and `b`.
    pub fn class_symmetric_kl(&self, c: usize, a: usize, b: usize) -> f64 {
        let d = self.dim as f64;
        let va = (self.scales[a] * self.within_class_sd).powi(2);
        let vb = (self.scales[b] * self.within_class_sd).powi(2);
        let (ma, mb) = (self.class_mean(c, a), self.class_mean(c, b));
        let dist: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
        let kl_ab = 0.5 * (d * va / vb + dist / vb - d + d * (vb / va).ln());
        let kl_ba = 0.5 * (d * vb / va + dist / va - d + d * (va / vb).ln());
        kl_ab + kl_ba
    }

    fn draw_split(&self, t: usize, per_class: usize, rng: &mut Rng) -> LabeledFeatureBatch {
        let n = per_class * self.classes;
        let mut features = DenseMatrix::zeros(n, self.dim);
        let mut labels = Vec::with_capacity(n);
        let mut i = 0;
        for (c, base) in self.base_means.iter().enumerate() {
            for _ in 0..per_class {
                let row = features.row_mut(i);
                for (v, m) in row.iter_mut().zip(base) {
                    *v = m + self.within_class_sd * rng.normal();
                }
                self.transform(t, row);
                // stored at f32 precision so file round-trips are lossless
                row.iter_mut().for_each(|v| *v = *v as f32 as f64);
                labels.push(c as u32);
                i += 1;
            }
        }
        LabeledFeatureBatch { features, labels }
    }
}

/// Generates the stream described by `spec`. Pure in `spec`: train and eval
/// splits of domain `t` use `split(2t)` and `split(2t + 1)` of the seed stream.
pub fn generate_stream(spec: &SyntheticShiftSpec) -> Result<TaskStream> {
    spec.validate()?;
    let root = Rng::new(spec.seed);
    let tasks = (0..spec.num_domains)
        .map(|t| {
            let train = spec.draw_split(t, spec.train_per_class, &mut root.split(2 * t as u64));
            let eval = spec.draw_split(t, spec.eval_per_class, &mut root.split(2 * t as u64 + 1));
            TaskDataset {
                domain_id: t as u32,
                train,
                eval,
                tags: vec![format!(
                    "rotation={}deg scale={}",
                    spec.rotations_deg[t], spec.scales[t]
                )],
            }
        })
        .collect();
    TaskStream::new(tasks, spec.classes as u32)
}

/// `.glrf` bytes for one batch. Features are narrowed to f32.
pub fn encode_feature_file(batch: &LabeledFeatureBatch, num_classes: u32) -> Result<Vec<u8>> {
    if batch.is_empty() {
        return Err(StreamError::EmptyBatch);
    }
    if let Some(&bad) = batch.labels().iter().find(|&&l| l >= num_classes) {
        return Err(StreamError::InvalidBatch(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    let mut w = ByteWriter::new();
    w.bytes(FEATURE_MAGIC);
    w.u32(FEATURE_VERSION);
    w.u32(batch.len() as u32);
    w.u32(batch.dim() as u32);
    w.u32(num_classes);
    w.f32s(batch.features().as_slice().iter().map(|&v| v as f32));
    for &l in batch.labels() {
        w.u32(l);
    }
    Ok(w.into_inner())
}

/// Parses `.glrf` bytes into a batch (features widened to f64) and the class count.
pub fn decode_feature_file(bytes: &[u8], origin: &str) -> Result<(LabeledFeatureBatch, u32)> {
    let malformed = |reason: String| StreamError::MalformedFeatureFile {
        path: origin.to_string(),
        reason,
    };
    if bytes.len() < FEATURE_HEADER_LEN {
        return Err(malformed("truncated header".into()));
    }
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4).unwrap();
    if magic != FEATURE_MAGIC {
        return Err(malformed(format!("bad magic {magic:?}")));
    }
    let version = r.u32().unwrap();
    if version != FEATURE_VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let n = r.u32().unwrap() as usize;
    let d = r.u32().unwrap() as usize;
    let num_classes = r.u32().unwrap();
    let expected = n
        .checked_mul(d)
        .and_then(|nd| nd.checked_add(n))
        .and_then(|v| v.checked_mul(4));
    match expected {
        Some(len) if len == r.remaining() => {}
        _ => {
            return Err(malformed(format!(
                "header says n={n}, d={d} but {} payload bytes follow",
                r.remaining()
            )))
        }
    }
    if n == 0 || d == 0 || num_classes == 0 {
        return Err(malformed(format!("n={n}, d={d}, classes={num_classes}")));
    }
    let features: Vec<f64> = r.f32s(n * d).unwrap().into_iter().map(f64::from).collect();
    let labels = r.u32s(n).unwrap();
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(malformed(format!("label {bad} with {num_classes} classes")));
    }
    let features = DenseMatrix::from_vec(n, d, features).expect("length checked");
    let batch = LabeledFeatureBatch::new(features, labels).map_err(|e| malformed(e.to_string()))?;
    Ok((batch, num_classes))
}

pub fn write_feature_file(path: &Path, batch: &LabeledFeatureBatch, num_classes: u32) -> Result<()> {
    let bytes = encode_feature_file(batch, num_classes)?;
    write_atomic(path, &bytes).map_err(|source| StreamError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_feature_file(path: &Path) -> Result<(LabeledFeatureBatch, u32)> {
    let bytes = std::fs::read(path).map_err(|source| StreamError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_feature_file(&bytes, &path.display().to_string())
}

/// Conventional `(train, eval)` file names for a stream of `t` tasks under `dir`.
pub fn stream_file_names(dir: &Path, t: usize) -> Vec<(PathBuf, PathBuf)> {
    (0..t)
        .map(|i| {
            (
                dir.join(format!("domain_{i:02}_train.glrf")),
                dir.join(format!("domain_{i:02}_eval.glrf")),
            )
        })
        .collect()
}

/// Writes every task as a `(train, eval)` file pair. All files are encoded
/// before any is written.
pub fn save_stream(stream: &TaskStream, paths: &[(PathBuf, PathBuf)]) -> Result<()> {
    if paths.len() != stream.len() {
        return Err(StreamError::InconsistentStream(format!(
            "{} path pairs for {} tasks",
            paths.len(),
            stream.len()
        )));
    }
    let mut encoded = Vec::with_capacity(2 * paths.len());
    for (task, (train_path, eval_path)) in stream.tasks().iter().zip(paths) {
        encoded.push((train_path, encode_feature_file(&task.train, stream.num_classes())?));
        encoded.push((eval_path, encode_feature_file(&task.eval, stream.num_classes())?));
    }
    for (path, bytes) in encoded {
        write_atomic(path, &bytes).map_err(|source| StreamError::Io {
            path: path.display().to_string(),
            source,
        })?;
    }
    Ok(())
}

/// Loads one task per `(train, eval)` pair; `domain_id` is the pair's position.
pub fn load_stream<P: AsRef<Path>>(paths: &[(P, P)]) -> Result<TaskStream> {
    let mut tasks = Vec::with_capacity(paths.len());
    let mut shape: Option<(usize, u32)> = None;
    for (t, (train_path, eval_path)) in paths.iter().enumerate() {
        let (train, c_train) = read_feature_file(train_path.as_ref())?;
        let (eval, c_eval) = read_feature_file(eval_path.as_ref())?;
        for (b, c, p) in [(&train, c_train, train_path), (&eval, c_eval, eval_path)] {
            match shape {
                None => shape = Some((b.dim(), c)),
                Some((d, classes)) if d != b.dim() || classes != c => {
                    return Err(StreamError::InconsistentStream(format!(
                        "{} has d={} and {} classes, expected d={d} and {classes} classes",
                        p.as_ref().display(),
                        b.dim(),
                        c
                    )));
                }
                Some(_) => {}
            }
        }
        tasks.push(TaskDataset {
            domain_id: t as u32,
            train,
            eval,
            tags: vec![train_path.as_ref().display().to_string()],
        });
    }
    let (_, classes) =
        shape.ok_or_else(|| StreamError::InconsistentStream("no feature files given".into()))?;
    TaskStream::new(tasks, classes)
}
