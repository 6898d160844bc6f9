//! Config-driven experiment runner behind the `glrcl` binary.
//!
//! A run is fully described by an [`ExperimentConfig`]. The resolved config
//! (defaults filled in, paths made absolute) is embedded in `run_report.json`,
//! and passing that report back to [`load_config`] reproduces the run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{run_buffer_replay, run_cumulative, run_joint, run_naive, MethodKind, RetentionReport};
use crate::codec::write_atomic;
use crate::gmm::{EmConfig, GmmGenerator};
use crate::metrics::{AccuracyMatrix, MetricsSummary, ILM_DEFINITION};
use crate::nnet::{AdamWConfig, DEFAULT_HIDDEN};
use crate::replay::{run_glrcl, GeneratorPool, ReplayConfig, SessionTiming, TrainConfig};
use crate::streams::{generate_stream, load_stream, save_stream, stream_file_names, SyntheticShiftSpec, TaskStream};
use crate::tensor::Rng;

pub const MATRIX_FILE: &str = "accuracy_matrix.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const TIMELINE_FILE: &str = "timeline.csv";
pub const POOL_FILE: &str = "pool.gmmpool";
pub const MODEL_FILE: &str = "model.mlp";
pub const REPORT_FILE: &str = "run_report.json";

/// Failure classes of the command-line tool, mapped to exit codes 1 and 2.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn config(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilePair {
    pub train: PathBuf,
    pub eval: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum StreamSource {
    Synthetic(SyntheticShiftSpec),
    Files(Vec<FilePair>),
}

/// Training hyperparameters as they appear in the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub replay_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let opt = AdamWConfig::default();
        let replay = ReplayConfig::default();
        Self {
            hidden: DEFAULT_HIDDEN.to_vec(),
            lr: opt.lr,
            weight_decay: opt.weight_decay,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            replay_ratio: replay.replay_ratio,
            epochs: replay.epochs,
            batch_size: replay.batch_size,
            shuffle: replay.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub method: MethodKind,
    pub stream: StreamSource,
    #[serde(default)]
    pub gmm: EmConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            hidden: t.hidden.clone(),
            optimizer: AdamWConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
            },
            replay: ReplayConfig {
                replay_ratio: t.replay_ratio,
                epochs: t.epochs,
                batch_size: t.batch_size,
                shuffle: t.shuffle,
            },
            gmm: self.gmm.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train_config().validate().map_err(config)?;
        match &self.stream {
            StreamSource::Synthetic(spec) => spec.validate().map_err(config)?,
            StreamSource::Files(pairs) if pairs.is_empty() => {
                return Err(CliError::Config("stream file list is empty".into()))
            }
            StreamSource::Files(_) => {}
        }
        if let MethodKind::BufferReplay { capacity: 0 } = self.method {
            return Err(CliError::Config("buffer_replay capacity must be >= 1".into()));
        }
        Ok(())
    }

    /// Makes relative paths absolute against `base`.
    fn resolve_paths(&mut self, base: &Path) {
        let abs = |p: &PathBuf| if p.is_absolute() { p.clone() } else { base.join(p) };
        if let StreamSource::Files(pairs) = &mut self.stream {
            for pair in pairs {
                pair.train = abs(&pair.train);
                pair.eval = abs(&pair.eval);
            }
        }
        if let Some(out) = &self.output_dir {
            self.output_dir = Some(abs(out));
        }
    }
}

/// Parses an experiment config, or the `config` member of a `run_report.json`.
/// Relative paths are resolved against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", path.display())))?;
    if let Some(inner) = value.get_mut("config").filter(|_| value_is_report(&text)) {
        value = inner.take();
    }
    let mut cfg: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let base = path
        .canonicalize()
        .ok()
        .and_then(|p| p.parent().map(Path::to_path_buf))
        .unwrap_or_default();
    cfg.resolve_paths(&base);
    cfg.validate()?;
    Ok(cfg)
}

fn value_is_report(text: &str) -> bool {
    serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(text)
        .map(|m| m.contains_key("config") && !m.contains_key("seed"))
        .unwrap_or(false)
}

/// `domain_00_train.glrf`, `domain_00_eval.glrf`, ... found consecutively under `dir`.
pub fn discover_stream_files(dir: &Path) -> Result<Vec<FilePair>, CliError> {
    let mut pairs = Vec::new();
    loop {
        let (train, eval) = stream_file_names(dir, pairs.len() + 1).pop().expect("non-empty");
        if !train.exists() || !eval.exists() {
            break;
        }
        pairs.push(FilePair { train, eval });
    }
    if pairs.is_empty() {
        return Err(CliError::Config(format!("no domain_00_train.glrf/domain_00_eval.glrf under {}", dir.display())));
    }
    Ok(pairs)
}

pub fn build_stream(source: &StreamSource) -> Result<TaskStream, CliError> {
    match source {
        StreamSource::Synthetic(spec) => generate_stream(spec).map_err(config),
        StreamSource::Files(pairs) => {
            let paths: Vec<(&Path, &Path)> = pairs.iter().map(|p| (p.train.as_path(), p.eval.as_path())).collect();
            load_stream(&paths).map_err(runtime)
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StreamSummary {
    pub tasks: usize,
    pub dim: usize,
    pub num_classes: u32,
    pub train_rows: Vec<usize>,
    pub raw_train_bytes: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorSummary {
    pub domain: u32,
    pub class: u32,
    pub k: usize,
    pub kind: String,
    pub fitted_on: u64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub method: String,
    pub stream: StreamSummary,
    pub retention: RetentionReport,
    pub generators: Vec<GeneratorSummary>,
    pub timings: Vec<SessionTiming>,
    pub total_secs: f64,
}

/// Everything a run produces, before anything touches the disk.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub matrix_csv: String,
    pub metrics_json: String,
    pub timeline_csv: String,
    pub model: Vec<u8>,
    pub pool: Option<Vec<u8>>,
    pub report: RunReport,
}

impl RunArtifacts {
    /// Writes every artifact into `dir` with temp-file-then-rename.
    pub fn write_to(&self, dir: &Path) -> Result<(), CliError> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
        let report = serde_json::to_string_pretty(&self.report).map_err(runtime)? + "\n";
        let mut files: Vec<(&str, &[u8])> = vec![
            (MATRIX_FILE, self.matrix_csv.as_bytes()),
            (METRICS_FILE, self.metrics_json.as_bytes()),
            (TIMELINE_FILE, self.timeline_csv.as_bytes()),
            (MODEL_FILE, &self.model),
        ];
        if let Some(pool) = &self.pool {
            files.push((POOL_FILE, pool));
        }
        files.push((REPORT_FILE, report.as_bytes()));
        for (name, bytes) in files {
            let path = dir.join(name);
            write_atomic(&path, bytes).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn timeline_csv(means: &[f64]) -> String {
    means.iter().enumerate().fold(String::new(), |mut s, (t, m)| {
        let _ = writeln!(s, "{t},{m}");
        s
    })
}

/// Runs the configured method and renders its artifacts.
pub fn execute(cfg: &ExperimentConfig) -> Result<RunArtifacts, CliError> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let stream = build_stream(&cfg.stream)?;
    let train = cfg.train_config();
    let root = Rng::new(cfg.seed);
    let raw_bytes = stream.train_storage_bytes();
    let method = cfg.method.name().to_string();
    let stream_summary = StreamSummary {
        tasks: stream.len(),
        dim: stream.dim(),
        num_classes: stream.num_classes(),
        train_rows: stream.tasks().iter().map(|t| t.train.len()).collect(),
        raw_train_bytes: raw_bytes,
    };
    let retention = |samples: u64, bytes: u64, gen_bytes: u64| RetentionReport {
        method: method.clone(),
        retained_raw_samples: samples,
        retained_raw_bytes: bytes,
        retained_generator_bytes: gen_bytes,
        stores_raw_data: samples > 0,
    };

    let (matrix, model, pool, retention, timings): (Option<AccuracyMatrix>, _, Option<GeneratorPool>, _, _) =
        match cfg.method {
            MethodKind::Glrcl {} => {
                let out = run_glrcl(&stream, &train, &root).map_err(runtime)?;
                let pool_bytes = out.pool.to_bytes().len() as u64;
                (Some(out.run.matrix), out.run.model, Some(out.pool), retention(0, 0, pool_bytes), out.run.timings)
            }
            MethodKind::Naive {} => {
                let out = run_naive(&stream, &train, &root).map_err(runtime)?;
                (Some(out.matrix), out.model, None, retention(0, 0, 0), out.timings)
            }
            MethodKind::Cumulative {} => {
                let out = run_cumulative(&stream, &train, &root).map_err(runtime)?;
                let rows: u64 = stream.tasks().iter().map(|t| t.train.len() as u64).sum();
                (Some(out.matrix), out.model, None, retention(rows, raw_bytes, 0), out.timings)
            }
            MethodKind::BufferReplay { capacity } => {
                let out = run_buffer_replay(&stream, &train, capacity, &root).map_err(runtime)?;
                let r = retention(out.buffer.len() as u64, out.buffer.storage_bytes(), 0);
                (Some(out.run.matrix), out.run.model, None, r, out.run.timings)
            }
            MethodKind::Joint {} => {
                let out = run_joint(&stream, &train, &root).map_err(runtime)?;
                let rows: u64 = stream.tasks().iter().map(|t| t.train.len() as u64).sum();
                let mean = out.accuracies.iter().sum::<f64>() / out.accuracies.len() as f64;
                let line: Vec<String> = out.accuracies.iter().map(f64::to_string).collect();
                let metrics = JointMetrics {
                    avg_accuracy: mean,
                    bwt: None,
                    ilm: None,
                    ilm_definition: ILM_DEFINITION,
                    method: method.clone(),
                    seed: cfg.seed,
                    tasks: stream.len(),
                };
                let report = RunReport {
                    config: cfg.clone(),
                    method: method.clone(),
                    stream: stream_summary,
                    retention: retention(rows, raw_bytes, 0),
                    generators: Vec::new(),
                    timings: Vec::new(),
                    total_secs: started.elapsed().as_secs_f64(),
                };
                return Ok(RunArtifacts {
                    matrix_csv: line.join(",") + "\n",
                    metrics_json: serde_json::to_string_pretty(&metrics).map_err(runtime)? + "\n",
                    timeline_csv: timeline_csv(&[mean]),
                    model: out.model.to_bytes(),
                    pool: None,
                    report,
                });
            }
        };
    let matrix = matrix.expect("sequential methods fill a matrix");
    let summary = MetricsSummary::from_matrix(&matrix, &method, cfg.seed).map_err(runtime)?;
    let generators = pool
        .as_ref()
        .map(|p| {
            p.iter()
                .map(|((domain, class), g)| GeneratorSummary {
                    domain,
                    class,
                    k: g.k(),
                    kind: format!("{:?}", g.kind()).to_lowercase(),
                    fitted_on: g.fitted_on(),
                })
                .collect()
        })
        .unwrap_or_default();
    Ok(RunArtifacts {
        matrix_csv: matrix.to_csv(),
        metrics_json: serde_json::to_string_pretty(&summary).map_err(runtime)? + "\n",
        timeline_csv: timeline_csv(&matrix.timeline()),
        model: model.to_bytes(),
        pool: pool.map(|p| p.to_bytes()),
        report: RunReport {
            config: cfg.clone(),
            method,
            stream: stream_summary,
            retention,
            generators,
            timings,
            total_secs: started.elapsed().as_secs_f64(),
        },
    })
}

#[derive(Debug, Serialize)]
struct JointMetrics {
    avg_accuracy: f64,
    bwt: Option<f64>,
    ilm: Option<f64>,
    ilm_definition: &'static str,
    method: String,
    seed: u64,
    #[serde(rename = "T")]
    tasks: usize,
}

/// `run`: executes a config and writes artifacts to `out` (or the configured output directory).
pub fn cmd_run(config_path: &Path, out: Option<&Path>, stream_files: Option<&Path>) -> Result<PathBuf, CliError> {
    let mut cfg = load_config(config_path)?;
    if let Some(dir) = stream_files {
        let dir = dir.canonicalize().map_err(|e| config(format!("{}: {e}", dir.display())))?;
        cfg.stream = StreamSource::Files(discover_stream_files(&dir)?);
    }
    let out_dir = match out {
        Some(p) => std::path::absolute(p).map_err(|e| config(format!("{}: {e}", p.display())))?,
        None => cfg
            .output_dir
            .clone()
            .ok_or_else(|| CliError::Config("no output_dir in config and no --out given".into()))?,
    };
    cfg.output_dir = Some(out_dir.clone());
    let artifacts = execute(&cfg)?;
    artifacts.write_to(&out_dir)?;
    Ok(out_dir)
}

/// `gen-stream`: materializes a synthetic spec as `.glrf` pairs. Returns the written paths.
pub fn cmd_gen_stream(spec_path: &Path, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let text = fs::read_to_string(spec_path).map_err(|e| config(format!("{}: {e}", spec_path.display())))?;
    let spec: SyntheticShiftSpec =
        serde_json::from_str(&text).map_err(|e| config(format!("{}: {e}", spec_path.display())))?;
    let stream = generate_stream(&spec).map_err(config)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    let names = stream_file_names(out, stream.len());
    save_stream(&stream, &names).map_err(runtime)?;
    Ok(names.into_iter().flat_map(|(a, b)| [a, b]).collect())
}

fn describe_generator(s: &mut String, g: &GmmGenerator) {
    let weights: Vec<String> = g.weights().iter().map(|w| format!("{w:.6}")).collect();
    let _ = writeln!(
        s,
        "  kind={:?} k={} d={} fitted_on={} params={}",
        g.kind(),
        g.k(),
        g.dim(),
        g.fitted_on(),
        g.param_count()
    );
    let _ = writeln!(s, "  weights=[{}] weight_sum={:.6}", weights.join(", "), g.weights().iter().sum::<f64>());
}

/// `inspect`: human-readable summary of a single generator or a pool file.
pub fn cmd_inspect(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| config(format!("{}: {e}", path.display())))?;
    let mut s = String::new();
    if bytes.starts_with(b"GLRG") {
        let g = GmmGenerator::from_bytes(&bytes).map_err(config)?;
        let _ = writeln!(s, "generator {}", path.display());
        describe_generator(&mut s, &g);
    } else {
        let pool = GeneratorPool::from_bytes(&bytes).map_err(config)?;
        let _ = writeln!(s, "pool {} entries={} d={}", path.display(), pool.len(), pool.feature_dim());
        for ((domain, class), g) in pool.iter() {
            let _ = writeln!(s, "entry domain={domain} class={class}");
            describe_generator(&mut s, g);
        }
    }
    Ok(s)
}

#[derive(Debug, Serialize)]
pub struct MatrixMetrics {
    pub avg_accuracy: f64,
    pub bwt: Option<f64>,
    pub ilm: f64,
    pub ilm_definition: &'static str,
    #[serde(rename = "T")]
    pub tasks: usize,
    pub timeline: Vec<f64>,
}

/// `metrics`: recomputes the scalar metrics from an accuracy matrix CSV.
pub fn cmd_metrics(matrix_path: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(matrix_path).map_err(|e| config(format!("{}: {e}", matrix_path.display())))?;
    let m = AccuracyMatrix::from_csv(&text).map_err(config)?;
    let out = MatrixMetrics {
        avg_accuracy: m.avg_accuracy().map_err(config)?,
        bwt: m.bwt().ok(),
        ilm: m.ilm().map_err(config)?,
        ilm_definition: ILM_DEFINITION,
        tasks: m.tasks(),
        timeline: m.timeline(),
    };
    Ok(serde_json::to_string_pretty(&out).map_err(runtime)? + "\n")
}
