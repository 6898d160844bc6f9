//! Reference methods sharing the GLRCL head, optimizer and evaluation loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replay::{
    evaluate, init_head, run_strategy, session_rng, train_session, ContinualStrategy, ReplaySource,
    RunOutcome, TrainConfig,
};
use crate::streams::{LabeledFeatureBatch, TaskStream};
use crate::tensor::{DenseMatrix, Rng};

/// Fixed-capacity reservoir of raw labeled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    dim: usize,
    seen: u64,
    rows: Vec<Vec<f64>>,
    labels: Vec<u32>,
    domains: Vec<u32>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, dim: usize) -> Self {
        Self {
            capacity,
            dim,
            seen: 0,
            rows: Vec::with_capacity(capacity),
            labels: Vec::with_capacity(capacity),
            domains: Vec::with_capacity(capacity),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn seen(&self) -> u64 {
        self.seen
    }

    /// Domain id of every stored row.
    pub fn domains(&self) -> &[u32] {
        &self.domains
    }

    /// Reservoir sampling: every row observed so far is retained with
    /// probability `capacity / seen`.
    pub fn observe(&mut self, row: &[f64], label: u32, domain: u32, rng: &mut Rng) {
        debug_assert_eq!(row.len(), self.dim);
        self.seen += 1;
        if self.rows.len() < self.capacity {
            self.rows.push(row.to_vec());
            self.labels.push(label);
            self.domains.push(domain);
            return;
        }
        if self.capacity == 0 {
            return;
        }
        let j = rng.below(self.seen as usize);
        if j < self.capacity {
            self.rows[j] = row.to_vec();
            self.labels[j] = label;
            self.domains[j] = domain;
        }
    }

    pub fn observe_batch(&mut self, batch: &LabeledFeatureBatch, domain: u32, rng: &mut Rng) {
        for (i, row) in batch.features().row_iter().enumerate() {
            self.observe(row, batch.labels()[i], domain, rng);
        }
    }

    pub fn storage_bytes(&self) -> u64 {
        self.rows.len() as u64 * (4 * self.dim as u64 + 4)
    }
}

impl ReplaySource for ReplayBuffer {
    fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Uniform draw with replacement.
    fn draw(&self, n: usize, rng: &mut Rng) -> Result<LabeledFeatureBatch> {
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.below(self.rows.len());
            data.extend_from_slice(&self.rows[j]);
            labels.push(self.labels[j]);
        }
        Ok(LabeledFeatureBatch::new(DenseMatrix::from_vec(n, self.dim, data)?, labels)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodKind {
    Glrcl {},
    Naive {},
    Joint {},
    Cumulative {},
    BufferReplay { capacity: usize },
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Glrcl {} => "glrcl",
            MethodKind::Naive {} => "naive",
            MethodKind::Joint {} => "joint",
            MethodKind::Cumulative {} => "cumulative",
            MethodKind::BufferReplay { .. } => "buffer_replay",
        }
    }
}

/// What a method keeps around after training, and whether any of it is raw data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetentionReport {
    pub method: String,
    pub retained_raw_samples: u64,
    pub retained_raw_bytes: u64,
    pub retained_generator_bytes: u64,
    pub stores_raw_data: bool,
}

struct Naive;

impl ContinualStrategy for Naive {
    fn session_data(&mut self, stream: &TaskStream, t: usize) -> Result<LabeledFeatureBatch> {
        Ok(stream.tasks()[t].train.clone())
    }

    fn replay_source(&self) -> Option<&dyn ReplaySource> {
        None
    }

    fn end_session(&mut self, _stream: &TaskStream, _t: usize, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }
}

struct Cumulative {
    seen: Option<LabeledFeatureBatch>,
}

impl ContinualStrategy for Cumulative {
    fn session_data(&mut self, stream: &TaskStream, t: usize) -> Result<LabeledFeatureBatch> {
        let current = &stream.tasks()[t].train;
        let all = match &self.seen {
            Some(prev) => prev.concat(current)?,
            None => current.clone(),
        };
        self.seen = Some(all.clone());
        Ok(all)
    }

    fn replay_source(&self) -> Option<&dyn ReplaySource> {
        None
    }

    fn end_session(&mut self, _stream: &TaskStream, _t: usize, _rng: &mut Rng) -> Result<()> {
        Ok(())
    }
}

struct BufferReplay {
    buffer: ReplayBuffer,
}

impl ContinualStrategy for BufferReplay {
    fn session_data(&mut self, stream: &TaskStream, t: usize) -> Result<LabeledFeatureBatch> {
        Ok(stream.tasks()[t].train.clone())
    }

    fn replay_source(&self) -> Option<&dyn ReplaySource> {
        Some(&self.buffer)
    }

    fn end_session(&mut self, stream: &TaskStream, t: usize, rng: &mut Rng) -> Result<()> {
        let task = &stream.tasks()[t];
        self.buffer.observe_batch(&task.train, task.domain_id, rng);
        Ok(())
    }
}

/// Sequential fine-tuning without replay.
pub fn run_naive(stream: &TaskStream, cfg: &TrainConfig, root: &Rng) -> Result<RunOutcome> {
    run_strategy(stream, cfg, root, &mut Naive)
}

/// Sequential training where session `t` sees the union of all training sets up to `t`.
pub fn run_cumulative(stream: &TaskStream, cfg: &TrainConfig, root: &Rng) -> Result<RunOutcome> {
    run_strategy(stream, cfg, root, &mut Cumulative { seen: None })
}

pub struct BufferReplayOutcome {
    pub run: RunOutcome,
    pub buffer: ReplayBuffer,
}

/// Reservoir buffer of raw rows, replayed at the same ratio as GLRCL.
pub fn run_buffer_replay(
    stream: &TaskStream,
    cfg: &TrainConfig,
    capacity: usize,
    root: &Rng,
) -> Result<BufferReplayOutcome> {
    let mut strategy = BufferReplay {
        buffer: ReplayBuffer::new(capacity, stream.dim()),
    };
    let run = run_strategy(stream, cfg, root, &mut strategy)?;
    Ok(BufferReplayOutcome {
        run,
        buffer: strategy.buffer,
    })
}

pub struct JointOutcome {
    /// Accuracy on each task after one training phase over all tasks.
    pub accuracies: Vec<f64>,
    pub model: crate::nnet::MlpHead,
    pub optimizer_steps: usize,
}

/// Upper bound: one training phase over the union of all training sets.
/// With a single task this is identical to [`run_naive`].
pub fn run_joint(stream: &TaskStream, cfg: &TrainConfig, root: &Rng) -> Result<JointOutcome> {
    cfg.validate()?;
    let (mut model, mut opt) = init_head(stream, cfg, root)?;
    let mut all = LabeledFeatureBatch::empty(stream.dim());
    for task in stream.tasks() {
        all = all.concat(&task.train)?;
    }
    if all.is_empty() {
        return Err(Error::InvalidConfig("stream has no training rows".into()));
    }
    let mut rng = session_rng(root, 0);
    let stats = train_session(
        &mut model,
        &mut opt,
        &all,
        &crate::replay::GeneratorPool::new(stream.dim()),
        &cfg.replay,
        &mut rng,
    )?;
    Ok(JointOutcome {
        accuracies: evaluate(&model, stream)?,
        model,
        optimizer_steps: stats.optimizer_steps,
    })
}
