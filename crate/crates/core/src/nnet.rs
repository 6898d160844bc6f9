//! Trainable classifier head: a ReLU MLP with softmax cross-entropy, exact
//! backpropagation and AdamW.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter};
use crate::tensor::{gemm, DenseMatrix, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLRM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const DEFAULT_HIDDEN: [usize; 5] = [512, 256, 128, 64, 32];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnetError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: u32, classes: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("parameters became non-finite after update {step}")]
    NonFiniteParameters { step: u64 },
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

pub type Result<T> = std::result::Result<T, NnetError>;

/// Affine layer `y = x·Wᵀ + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weight: DenseMatrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![0.0; self.bias.len()],
        }
    }

    fn same_shape(&self, other: &Layer) -> bool {
        self.weight.rows() == other.weight.rows()
            && self.weight.cols() == other.weight.cols()
            && self.bias.len() == other.bias.len()
    }
}

/// Gradients, laid out exactly like [`MlpHead`] parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Layer>);

#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Inputs to every layer plus the final logits, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn logits(&self) -> &DenseMatrix {
        self.activations.last().expect("at least input and logits")
    }
}

/// `[d_in, hidden.., classes]`
pub fn layer_dims(d_in: usize, hidden: &[usize], classes: usize) -> Vec<usize> {
    let mut dims = Vec::with_capacity(hidden.len() + 2);
    dims.push(d_in);
    dims.extend_from_slice(hidden);
    dims.push(classes);
    dims
}

impl MlpHead {
    /// Kaiming-uniform weights (`±√(6/fan_in)`) and zero biases.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(NnetError::InvalidArchitecture(format!(
                "need at least input and output sizes, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(NnetError::InvalidArchitecture(format!(
                "layer sizes must be >= 1, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| (2.0 * rng.uniform() - 1.0) * bound)
                    .collect();
                Layer {
                    weight: DenseMatrix::from_vec(fan_out, fan_in, data).expect("sized"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| NnetError::InvalidArchitecture("no layers".into()))?;
        let mut dims = vec![first.weight.cols()];
        for (i, l) in layers.iter().enumerate() {
            if l.weight.cols() != *dims.last().unwrap() || l.bias.len() != l.weight.rows() {
                return Err(NnetError::InvalidArchitecture(format!(
                    "layer {i} has weight {}x{} and bias {}",
                    l.weight.rows(),
                    l.weight.cols(),
                    l.bias.len()
                )));
            }
            dims.push(l.weight.rows());
        }
        if dims.contains(&0) {
            return Err(NnetError::InvalidArchitecture(format!("zero-width layer in {dims:?}")));
        }
        Ok(Self { dims, layers })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.as_slice().len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        let mut cache = self.forward_cached(batch)?;
        Ok(cache.activations.pop().expect("logits"))
    }

    pub fn forward_cached(&self, batch: &DenseMatrix) -> Result<ForwardCache> {
        if batch.cols() != self.input_dim() {
            return Err(NnetError::DimensionMismatch(format!(
                "batch has {} columns, head expects {}",
                batch.cols(),
                self.input_dim()
            )));
        }
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(batch.clone());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = affine(activations.last().unwrap(), layer);
            if i < last {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            activations.push(z);
        }
        Ok(ForwardCache { activations })
    }

    /// Mean softmax cross-entropy over the rows and its exact gradient.
    pub fn loss_and_grad(&self, batch: &DenseMatrix, labels: &[u32]) -> Result<(f64, Gradients)> {
        if labels.len() != batch.rows() {
            return Err(NnetError::DimensionMismatch(format!(
                "{} rows but {} labels",
                batch.rows(),
                labels.len()
            )));
        }
        let classes = self.num_classes();
        if let Some(&label) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(NnetError::LabelOutOfRange { label, classes });
        }
        let cache = self.forward_cached(batch)?;
        let n = batch.rows();
        let logits = cache.logits();

        let mut delta = DenseMatrix::zeros(n, classes);
        let mut loss = 0.0;
        for i in 0..n {
            let z = logits.row(i);
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = z.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            let y = labels[i] as usize;
            loss += lse - z[y];
            let row = delta.row_mut(i);
            for (c, d) in row.iter_mut().enumerate() {
                *d = (z[c] - lse).exp();
            }
            row[y] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        loss *= inv_n;
        delta.as_mut_slice().iter_mut().for_each(|v| *v *= inv_n);

        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[l];
            let (out_dim, in_dim) = (layer.weight.rows(), layer.weight.cols());
            let mut dw = DenseMatrix::zeros(out_dim, in_dim);
            gemm(
                out_dim,
                n,
                in_dim,
                (delta.as_slice(), 1, out_dim),
                (input.as_slice(), in_dim, 1),
                dw.as_mut_slice(),
                0.0,
            );
            let mut db = vec![0.0; out_dim];
            for r in delta.row_iter() {
                for (s, v) in db.iter_mut().zip(r) {
                    *s += v;
                }
            }
            grads.push(Layer {
                weight: dw,
                bias: db,
            });
            if l > 0 {
                let mut prev = delta.matmul(&layer.weight).expect("shapes agree");
                for (g, a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if *a <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = prev;
            }
        }
        grads.reverse();
        Ok((loss, Gradients(grads)))
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, batch: &DenseMatrix) -> Result<Vec<u32>> {
        Ok(argmax_rows(&self.forward(batch)?))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.u32(self.layers.len() as u32);
        for &d in &self.dims {
            w.u32(d as u32);
        }
        for l in &self.layers {
            w.f64s(l.weight.as_slice());
            w.f64s(&l.bias);
        }
        w.into_inner()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| NnetError::MalformedCheckpoint(m.to_string());
        let mut r = ByteReader::new(bytes);
        if r.take(4).ok_or_else(|| bad("truncated"))? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.u32().ok_or_else(|| bad("truncated"))?;
        if version != CHECKPOINT_VERSION {
            return Err(bad("unsupported version"));
        }
        let count = r.u32().ok_or_else(|| bad("truncated"))? as usize;
        if count == 0 || count > r.remaining() / 4 {
            return Err(bad("implausible layer count"));
        }
        let dims: Vec<usize> = r
            .u32s(count + 1)
            .ok_or_else(|| bad("truncated"))?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        let mut layers = Vec::with_capacity(count);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let size = fan_in.checked_mul(fan_out).ok_or_else(|| bad("overflow"))?;
            let weight = r.f64s(size).ok_or_else(|| bad("truncated"))?;
            let bias = r.f64s(fan_out).ok_or_else(|| bad("truncated"))?;
            layers.push(Layer {
                weight: DenseMatrix::from_vec(fan_out, fan_in, weight).expect("sized"),
                bias,
            });
        }
        if r.remaining() != 0 {
            return Err(bad("trailing bytes"));
        }
        Self::from_layers(layers)
    }
}

fn affine(x: &DenseMatrix, layer: &Layer) -> DenseMatrix {
    let (n, in_dim) = (x.rows(), x.cols());
    let out_dim = layer.weight.rows();
    let mut z = DenseMatrix::zeros(n, out_dim);
    for i in 0..n {
        z.row_mut(i).copy_from_slice(&layer.bias);
    }
    gemm(
        n,
        in_dim,
        out_dim,
        (x.as_slice(), in_dim, 1),
        (layer.weight.as_slice(), 1, in_dim),
        z.as_mut_slice(),
        1.0,
    );
    z
}

pub fn argmax_rows(logits: &DenseMatrix) -> Vec<u32> {
    logits
        .row_iter()
        .map(|r| {
            let mut best = 0;
            for (c, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = c;
                }
            }
            best as u32
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay on weights; biases are never decayed.
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err("lr must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err("betas must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            return Err("eps must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err("weight_decay must be >= 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    step: u64,
    first: Vec<Layer>,
    second: Vec<Layer>,
}

impl AdamWState {
    pub fn new(model: &MlpHead, config: AdamWConfig) -> Self {
        let zeros: Vec<Layer> = model.layers.iter().map(Layer::zeros_like).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One AdamW update with bias-corrected moments:
    /// `p ← p·(1 − lr·λ) − lr·m̂/(√v̂ + ε)`, with `λ = 0` for biases.
    pub fn step(&mut self, model: &mut MlpHead, grads: &Gradients) -> Result<()> {
        let shapes_ok = grads.0.len() == model.layers.len()
            && self.first.len() == model.layers.len()
            && grads
                .0
                .iter()
                .zip(&model.layers)
                .zip(&self.first)
                .all(|((g, p), m)| g.same_shape(p) && m.same_shape(p));
        if !shapes_ok {
            return Err(NnetError::ShapeMismatch(
                "gradients, moments and parameters differ in shape".into(),
            ));
        }
        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let decay = 1.0 - c.lr * c.weight_decay;
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], decay: f64| {
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] = p[i] * decay - c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        };
        for (((p, g), m), v) in model
            .layers
            .iter_mut()
            .zip(&grads.0)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            update(
                p.weight.as_mut_slice(),
                g.weight.as_slice(),
                m.weight.as_mut_slice(),
                v.weight.as_mut_slice(),
                decay,
            );
            update(&mut p.bias, &g.bias, &mut m.bias, &mut v.bias, 1.0);
        }
        if !model.is_finite() {
            return Err(NnetError::NonFiniteParameters { step: self.step });
        }
        Ok(())
    }
}
