//! Gaussian mixture generators: EM fitting, BIC model selection, sampling and
//! the binary generator/pool record format.
//!
//! Each generator models the features of one class in one domain. Fitting runs
//! EM from a seeded k-means++ style initialization; model order is picked by
//! sweeping `k = 1..=min(k_max, N)` and keeping the lowest BIC.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{ByteReader, ByteWriter};
use crate::tensor::{cholesky, log_det_chol, DenseMatrix, Rng, TensorError};

pub const GENERATOR_MAGIC: &[u8; 4] = b"GLRG";
pub const GENERATOR_VERSION: u32 = 1;

/// Components whose total responsibility falls below this fraction of N are re-seeded.
const EMPTY_COMPONENT_FRACTION: f64 = 1e-8;
/// Full covariances up to this dimension are accumulated directly rather than through GEMM.
const SMALL_DIM: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GmmError {
    #[error("too few samples: {n} rows for {k} components")]
    TooFewSamples { n: usize, k: usize },
    #[error("data has zero total variance")]
    DegenerateData,
    #[error("features contain NaN or infinite values")]
    NonFiniteInput,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid EM configuration: {0}")]
    InvalidConfig(String),
    #[error("invalid generator: {0}")]
    InvalidGenerator(String),
    #[error("malformed generator record: {0}")]
    MalformedGenerator(String),
    #[error(transparent)]
    Numerical(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GmmError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    Full,
    Diagonal,
}

impl CovarianceKind {
    fn code(self) -> u8 {
        match self {
            CovarianceKind::Full => 0,
            CovarianceKind::Diagonal => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariancePolicy {
    Full,
    Diagonal,
    /// Full when `N ≥ 10·d(d+1)/2`, otherwise diagonal.
    Auto,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub reg_eps_scale: f64,
    pub k_max: usize,
    pub covariance_kind_policy: CovariancePolicy,
    pub restarts: usize,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            max_iter: 200,
            rel_tol: 1e-6,
            reg_eps_scale: 1e-6,
            k_max: 10,
            covariance_kind_policy: CovariancePolicy::Auto,
            restarts: 1,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iter < 1 {
            return Err(GmmError::InvalidConfig("max_iter must be >= 1".into()));
        }
        if !(self.rel_tol > 0.0) {
            return Err(GmmError::InvalidConfig("rel_tol must be > 0".into()));
        }
        if !(self.reg_eps_scale > 0.0) || !self.reg_eps_scale.is_finite() {
            return Err(GmmError::InvalidConfig("reg_eps_scale must be > 0".into()));
        }
        if self.k_max < 1 {
            return Err(GmmError::InvalidConfig("k_max must be >= 1".into()));
        }
        if self.restarts < 1 {
            return Err(GmmError::InvalidConfig("restarts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolve_kind(&self, n: usize, d: usize) -> CovarianceKind {
        match self.covariance_kind_policy {
            CovariancePolicy::Full => CovarianceKind::Full,
            CovariancePolicy::Diagonal => CovarianceKind::Diagonal,
            CovariancePolicy::Auto => {
                if n >= 10 * d * (d + 1) / 2 {
                    CovarianceKind::Full
                } else {
                    CovarianceKind::Diagonal
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FitReport {
    pub final_log_likelihood: f64,
    pub iterations_used: usize,
    pub bic: f64,
    pub converged: bool,
    /// Log-likelihood of the parameters at the start of every iteration, plus the final one.
    pub log_likelihood_trace: Vec<f64>,
    pub reseeded_components: usize,
}

/// One class-and-domain mixture: weights, means and Cholesky factors of the
/// component covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmGenerator {
    kind: CovarianceKind,
    weights: Vec<f64>,
    means: DenseMatrix,
    cov_chols: Vec<DenseMatrix>,
    fitted_on: u64,
}

impl GmmGenerator {
    /// Assembles a generator, normalizing `weights` to sum to one.
    pub fn new(
        kind: CovarianceKind,
        weights: Vec<f64>,
        means: DenseMatrix,
        cov_chols: Vec<DenseMatrix>,
        fitted_on: u64,
    ) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(GmmError::InvalidGenerator(
                "weights must have a positive finite sum".into(),
            ));
        }
        let g = Self {
            kind,
            weights: weights.iter().map(|w| w / total).collect(),
            means,
            cov_chols,
            fitted_on,
        };
        g.validate().map_err(GmmError::InvalidGenerator)?;
        Ok(g)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        let k = self.weights.len();
        if k == 0 {
            return Err("k must be >= 1".into());
        }
        let d = self.means.cols();
        if d == 0 {
            return Err("dimension must be >= 1".into());
        }
        if self.means.rows() != k || self.cov_chols.len() != k {
            return Err(format!(
                "{k} weights but {} means and {} covariance factors",
                self.means.rows(),
                self.cov_chols.len()
            ));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err("weights must be positive and finite".into());
        }
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(format!("weights sum to {sum}"));
        }
        if !self.means.is_finite() {
            return Err("means must be finite".into());
        }
        for (c, l) in self.cov_chols.iter().enumerate() {
            if l.rows() != d || l.cols() != d {
                return Err(format!("covariance factor {c} is {}x{}", l.rows(), l.cols()));
            }
            for i in 0..d {
                let diag = l[(i, i)];
                if !(diag > 0.0) || !diag.is_finite() {
                    return Err(format!("covariance factor {c} has diagonal {diag} at {i}"));
                }
                for j in 0..d {
                    let v = l[(i, j)];
                    if j > i && v != 0.0 {
                        return Err(format!("covariance factor {c} is not lower-triangular"));
                    }
                    if j < i && (self.kind == CovarianceKind::Diagonal && v != 0.0 || !v.is_finite()) {
                        return Err(format!(
                            "covariance factor {c} has invalid off-diagonal entry {v}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn kind(&self) -> CovarianceKind {
        self.kind
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &DenseMatrix {
        &self.means
    }

    pub fn cov_chols(&self) -> &[DenseMatrix] {
        &self.cov_chols
    }

    pub fn fitted_on(&self) -> u64 {
        self.fitted_on
    }

    /// Free parameters counted by BIC.
    pub fn param_count(&self) -> usize {
        param_count(self.kind, self.k(), self.dim())
    }

    /// Covariance of component `c`, reconstructed as `L·Lᵀ`.
    pub fn covariance(&self, c: usize) -> DenseMatrix {
        let l = &self.cov_chols[c];
        l.matmul_transpose(l).expect("square factor")
    }

    fn components(&self) -> Vec<Component<'_>> {
        (0..self.k())
            .map(|c| Component::new(self.kind, self.means.row(c), &self.cov_chols[c]))
            .collect()
    }

    fn check_dim(&self, features: &DenseMatrix) -> Result<()> {
        if features.cols() != self.dim() {
            return Err(GmmError::DimensionMismatch(format!(
                "features have {} columns, generator has dimension {}",
                features.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// `Σ_n ln Σ_k w_k N(f_n | μ_k, Σ_k)`, with weights renormalized and a
    /// log-sum-exp over components.
    pub fn log_likelihood(&self, features: &DenseMatrix) -> Result<f64> {
        self.check_dim(features)?;
        let total: f64 = self.weights.iter().sum();
        let log_w: Vec<f64> = self.weights.iter().map(|w| (w / total).ln()).collect();
        let comps = self.components();
        let mut scratch = vec![0.0; self.dim()];
        let mut terms = vec![0.0; self.k()];
        let mut ll = 0.0;
        for x in features.row_iter() {
            for (c, comp) in comps.iter().enumerate() {
                terms[c] = log_w[c] + comp.logpdf(x, &mut scratch);
            }
            ll += log_sum_exp(&terms);
        }
        Ok(ll)
    }

    /// `p·ln N − 2·ln L̂` evaluated on `features`.
    pub fn bic(&self, features: &DenseMatrix) -> Result<f64> {
        let ll = self.log_likelihood(features)?;
        Ok(bic_value(ll, self.param_count(), features.rows()))
    }

    pub fn sample(&self, n: usize, rng: &mut Rng) -> DenseMatrix {
        self.sample_with_components(n, rng).0
    }

    /// Like [`GmmGenerator::sample`], also returning the component each row came from.
    pub fn sample_with_components(&self, n: usize, rng: &mut Rng) -> (DenseMatrix, Vec<usize>) {
        let d = self.dim();
        let mut out = DenseMatrix::zeros(n, d);
        let mut picks = Vec::with_capacity(n);
        let mut z = vec![0.0; d];
        let mut lz = vec![0.0; d];
        for i in 0..n {
            let c = self.draw_component(rng.uniform());
            picks.push(c);
            z.iter_mut().for_each(|v| *v = rng.normal());
            let l = &self.cov_chols[c];
            match self.kind {
                CovarianceKind::Diagonal => {
                    for j in 0..d {
                        lz[j] = l[(j, j)] * z[j];
                    }
                }
                CovarianceKind::Full => l.lower_mul_vec(&z, &mut lz),
            }
            for ((o, m), v) in out.row_mut(i).iter_mut().zip(self.means.row(c)).zip(&lz) {
                *o = m + v;
            }
        }
        (out, picks)
    }

    fn draw_component(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (c, w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                return c;
            }
        }
        self.k() - 1
    }

    /// Serialized size in bytes of this generator's record.
    pub fn encoded_len(&self) -> usize {
        let (k, d) = (self.k(), self.dim());
        4 + 4 + 1 + 4 + 4 + 8 + 8 * (k + k * d + k * d * d)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        self.write_record(&mut w);
        w.into_inner()
    }

    pub(crate) fn write_record(&self, w: &mut ByteWriter) {
        w.bytes(GENERATOR_MAGIC);
        w.u32(GENERATOR_VERSION);
        w.u8(self.kind.code());
        w.u32(self.k() as u32);
        w.u32(self.dim() as u32);
        w.u64(self.fitted_on);
        w.f64s(&self.weights);
        w.f64s(self.means.as_slice());
        for l in &self.cov_chols {
            w.f64s(l.as_slice());
        }
    }

    /// Parses a standalone generator file; trailing bytes are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let g = Self::read_record(&mut r)?;
        if r.remaining() != 0 {
            return Err(GmmError::MalformedGenerator(format!(
                "{} trailing bytes",
                r.remaining()
            )));
        }
        Ok(g)
    }

    pub(crate) fn read_record(r: &mut ByteReader<'_>) -> Result<Self> {
        let truncated = || GmmError::MalformedGenerator("truncated record".into());
        let magic = r.take(4).ok_or_else(truncated)?;
        if magic != GENERATOR_MAGIC {
            return Err(GmmError::MalformedGenerator(format!("bad magic {magic:?}")));
        }
        let version = r.u32().ok_or_else(truncated)?;
        if version != GENERATOR_VERSION {
            return Err(GmmError::MalformedGenerator(format!(
                "unsupported version {version}"
            )));
        }
        let kind = match r.u8().ok_or_else(truncated)? {
            0 => CovarianceKind::Full,
            1 => CovarianceKind::Diagonal,
            other => {
                return Err(GmmError::MalformedGenerator(format!(
                    "unknown covariance kind {other}"
                )))
            }
        };
        let k = r.u32().ok_or_else(truncated)? as usize;
        let d = r.u32().ok_or_else(truncated)? as usize;
        let fitted_on = r.u64().ok_or_else(truncated)?;
        if k == 0 || d == 0 {
            return Err(GmmError::MalformedGenerator(format!("k={k}, d={d}")));
        }
        // reject absurd headers before allocating
        let needed = k
            .checked_mul(d)
            .and_then(|kd| kd.checked_mul(d + 1))
            .and_then(|v| v.checked_add(k))
            .and_then(|v| v.checked_mul(8));
        if needed.is_none_or(|n| n > r.remaining()) {
            return Err(truncated());
        }
        let weights = r.f64s(k).ok_or_else(truncated)?;
        let means = DenseMatrix::from_vec(k, d, r.f64s(k * d).ok_or_else(truncated)?)
            .map_err(|e| GmmError::MalformedGenerator(e.to_string()))?;
        let mut cov_chols = Vec::with_capacity(k);
        for _ in 0..k {
            let l = DenseMatrix::from_vec(d, d, r.f64s(d * d).ok_or_else(truncated)?)
                .map_err(|e| GmmError::MalformedGenerator(e.to_string()))?;
            cov_chols.push(l);
        }
        let g = Self {
            kind,
            weights,
            means,
            cov_chols,
            fitted_on,
        };
        g.validate().map_err(GmmError::MalformedGenerator)?;
        Ok(g)
    }
}

pub fn param_count(kind: CovarianceKind, k: usize, d: usize) -> usize {
    let cov = match kind {
        CovarianceKind::Full => k * d * (d + 1) / 2,
        CovarianceKind::Diagonal => k * d,
    };
    (k - 1) + k * d + cov
}

pub fn bic_value(log_likelihood: f64, params: usize, n: usize) -> f64 {
    params as f64 * (n as f64).ln() - 2.0 * log_likelihood
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// A component view with the normalizing constant and reciprocal factor
/// diagonal precomputed.
struct Component<'a> {
    kind: CovarianceKind,
    mean: &'a [f64],
    chol: &'a DenseMatrix,
    inv_diag: Vec<f64>,
    log_norm: f64,
}

impl<'a> Component<'a> {
    fn new(kind: CovarianceKind, mean: &'a [f64], chol: &'a DenseMatrix) -> Self {
        let d = mean.len();
        Self {
            kind,
            mean,
            chol,
            inv_diag: (0..d).map(|i| 1.0 / chol[(i, i)]).collect(),
            log_norm: -0.5 * d as f64 * (2.0 * PI).ln() - log_det_chol(chol),
        }
    }

    fn logpdf(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.mean.len();
        let mut maha = 0.0;
        match self.kind {
            CovarianceKind::Diagonal => {
                for i in 0..d {
                    let z = (x[i] - self.mean[i]) * self.inv_diag[i];
                    maha += z * z;
                }
            }
            CovarianceKind::Full => {
                // forward substitution L·z = x − μ
                let l = self.chol.as_slice();
                for i in 0..d {
                    let mut s = x[i] - self.mean[i];
                    for (a, b) in l[i * d..i * d + i].iter().zip(&scratch[..i]) {
                        s -= a * b;
                    }
                    let z = s * self.inv_diag[i];
                    scratch[i] = z;
                    maha += z * z;
                }
            }
        }
        self.log_norm - 0.5 * maha
    }
}

/// Turns log-joint terms into responsibilities in place and returns their log-sum-exp.
fn normalize_log_terms(row: &mut [f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    row.iter_mut().for_each(|v| *v *= inv);
    m + sum.ln()
}

struct GlobalStats {
    mean: Vec<f64>,
    /// d×d for full, 1×d (variances) for diagonal.
    cov: DenseMatrix,
    trace: f64,
}

fn global_stats(x: &DenseMatrix, kind: CovarianceKind) -> GlobalStats {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in x.row_iter() {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = x.clone();
    for i in 0..n {
        for (v, m) in centered.row_mut(i).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = match kind {
        CovarianceKind::Full => {
            let mut c = centered.transpose_matmul(&centered).expect("shapes agree");
            c.as_mut_slice().iter_mut().for_each(|v| *v /= n as f64);
            symmetrize(&mut c);
            c
        }
        CovarianceKind::Diagonal => {
            let mut var = vec![0.0; d];
            for r in centered.row_iter() {
                for (s, v) in var.iter_mut().zip(r) {
                    *s += v * v;
                }
            }
            var.iter_mut().for_each(|s| *s /= n as f64);
            DenseMatrix::from_vec(1, d, var).expect("1xd")
        }
    };
    let trace = match kind {
        CovarianceKind::Full => (0..d).map(|i| cov[(i, i)]).sum(),
        CovarianceKind::Diagonal => cov.as_slice().iter().sum(),
    };
    GlobalStats { mean, cov, trace }
}

fn symmetrize(c: &mut DenseMatrix) {
    let d = c.rows();
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
}

/// Cholesky factor of `cov + reg·I`; `cov` is d×d (full) or 1×d variances (diagonal).
fn regularized_factor(kind: CovarianceKind, cov: &DenseMatrix, reg: f64) -> Result<DenseMatrix> {
    match kind {
        CovarianceKind::Full => {
            let mut c = cov.clone();
            for i in 0..c.rows() {
                c[(i, i)] += reg;
            }
            Ok(cholesky(&c)?)
        }
        CovarianceKind::Diagonal => {
            let d = cov.cols();
            let mut l = DenseMatrix::zeros(d, d);
            for i in 0..d {
                let v = cov[(0, i)] + reg;
                if !(v > 0.0) || !v.is_finite() {
                    return Err(TensorError::NotPositiveDefinite { row: i, pivot: v }.into());
                }
                l[(i, i)] = v.sqrt();
            }
            Ok(l)
        }
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k distinct row indices: the first uniform, the rest drawn with probability
/// proportional to squared distance from the nearest chosen row.
fn seed_rows(x: &DenseMatrix, k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = x.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.below(n));
    let mut nearest: Vec<f64> = x
        .row_iter()
        .map(|r| squared_distance(r, x.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 && total.is_finite() {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, w) in nearest.iter().enumerate() {
                acc += w;
                if *w > 0.0 && target < acc {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave target ≥ acc; fall back to the last positive entry
            pick.unwrap_or_else(|| nearest.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !chosen.contains(i)).collect();
            free[rng.below(free.len())]
        };
        chosen.push(next);
        let row = x.row(next);
        for (i, r) in x.row_iter().enumerate() {
            nearest[i] = nearest[i].min(squared_distance(r, row));
        }
    }
    chosen
}

struct EmRun {
    generator: GmmGenerator,
    report: FitReport,
}

/// Fits a k-component mixture by EM.
///
/// Every M-step adds `reg_eps_scale · trace(Σ̂)/d · I` to each covariance,
/// where `Σ̂` is the global (1/N) sample covariance of `features`.
pub fn fit_em(
    features: &DenseMatrix,
    k: usize,
    cfg: &EmConfig,
    rng: &mut Rng,
) -> Result<(GmmGenerator, FitReport)> {
    cfg.validate()?;
    let (n, d) = (features.rows(), features.cols());
    if k == 0 {
        return Err(GmmError::InvalidConfig("k must be >= 1".into()));
    }
    if n < k {
        return Err(GmmError::TooFewSamples { n, k });
    }
    if d == 0 {
        return Err(GmmError::DimensionMismatch("features have zero columns".into()));
    }
    if !features.is_finite() {
        return Err(GmmError::NonFiniteInput);
    }
    let kind = cfg.resolve_kind(n, d);
    let stats = global_stats(features, kind);
    let scale: f64 = stats.mean.iter().map(|m| m * m).sum();
    if !(stats.trace > 1e-20 * (1.0 + scale)) {
        return Err(GmmError::DegenerateData);
    }
    let reg = cfg.reg_eps_scale * stats.trace / d as f64;

    let mut best: Option<EmRun> = None;
    for restart in 0..cfg.restarts {
        let mut run_rng = rng.split(restart as u64);
        let run = em_single(features, k, kind, &stats, reg, cfg, &mut run_rng)?;
        let better = best
            .as_ref()
            .is_none_or(|b| run.report.final_log_likelihood > b.report.final_log_likelihood);
        if better {
            best = Some(run);
        }
    }
    let best = best.expect("restarts >= 1");
    Ok((best.generator, best.report))
}

fn em_single(
    x: &DenseMatrix,
    k: usize,
    kind: CovarianceKind,
    stats: &GlobalStats,
    reg: f64,
    cfg: &EmConfig,
    rng: &mut Rng,
) -> Result<EmRun> {
    let (n, d) = (x.rows(), x.cols());
    let global_factor = regularized_factor(kind, &stats.cov, reg)?;

    let mut means = x.select_rows(&seed_rows(x, k, rng));
    let mut weights = vec![1.0 / k as f64; k];
    let mut chols = vec![global_factor.clone(); k];

    let mut resp = DenseMatrix::zeros(n, k);
    let mut point_ll = vec![0.0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    let mut reseeded_total = 0;
    let mut just_reseeded = false;
    let mut scratch = vec![0.0; d];
    let mut work = Vec::new();

    loop {
        // E-step
        let comps: Vec<Component<'_>> = (0..k)
            .map(|c| Component::new(kind, means.row(c), &chols[c]))
            .collect();
        let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
        let mut ll = 0.0;
        for (i, xi) in x.row_iter().enumerate() {
            let row = resp.row_mut(i);
            for (c, comp) in comps.iter().enumerate() {
                row[c] = log_w[c] + comp.logpdf(xi, &mut scratch);
            }
            let lse = normalize_log_terms(row);
            point_ll[i] = lse;
            ll += lse;
        }
        if !ll.is_finite() {
            return Err(TensorError::NotPositiveDefinite {
                row: 0,
                pivot: f64::NAN,
            }
            .into());
        }
        if let Some(&prev) = trace.last() {
            let prev: f64 = prev;
            if !just_reseeded && ll - prev < cfg.rel_tol * prev.abs() {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations == cfg.max_iter {
            break;
        }

        // M-step
        let mut nk = vec![0.0; k];
        for r in resp.row_iter() {
            for (s, v) in nk.iter_mut().zip(r) {
                *s += v;
            }
        }
        let threshold = EMPTY_COMPONENT_FRACTION * n as f64;
        let empty: Vec<usize> = (0..k).filter(|&c| nk[c] < threshold).collect();
        for c in 0..k {
            if nk[c] < threshold {
                continue;
            }
            let mean = means.row_mut(c);
            mean.iter_mut().for_each(|m| *m = 0.0);
            let r = resp.as_slice();
            for (i, xi) in x.row_iter().enumerate() {
                let w = r[i * k + c];
                for (m, v) in mean.iter_mut().zip(xi) {
                    *m += w * v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= nk[c]);
            let cov = weighted_covariance(x, &resp, c, means.row(c), nk[c], kind, &mut work);
            chols[c] = regularized_factor(kind, &cov, reg)?;
            weights[c] = nk[c] / n as f64;
        }
        just_reseeded = !empty.is_empty();
        if just_reseeded {
            reseed_components(x, &empty, &point_ll, &mut means, &mut weights);
            for &c in &empty {
                chols[c] = global_factor.clone();
            }
            reseeded_total += empty.len();
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        iterations += 1;
    }

    let final_ll = *trace.last().expect("at least one E-step");
    let generator = GmmGenerator {
        kind,
        weights,
        means,
        cov_chols: chols,
        fitted_on: n as u64,
    };
    let bic = bic_value(final_ll, generator.param_count(), n);
    Ok(EmRun {
        generator,
        report: FitReport {
            final_log_likelihood: final_ll,
            iterations_used: iterations,
            bic,
            converged,
            log_likelihood_trace: trace,
            reseeded_components: reseeded_total,
        },
    })
}

/// Responsibility-weighted covariance of component `c` around `mean`;
/// d×d for full, 1×d variances for diagonal. `work` is scratch space.
fn weighted_covariance(
    x: &DenseMatrix,
    resp: &DenseMatrix,
    c: usize,
    mean: &[f64],
    nk: f64,
    kind: CovarianceKind,
    work: &mut Vec<f64>,
) -> DenseMatrix {
    let (n, d, k) = (x.rows(), x.cols(), resp.cols());
    let r = resp.as_slice();
    match kind {
        CovarianceKind::Full if d <= SMALL_DIM => {
            let mut cov = DenseMatrix::zeros(d, d);
            let acc = cov.as_mut_slice();
            let mut diff = [0.0; SMALL_DIM];
            for (i, xi) in x.row_iter().enumerate() {
                let w = r[i * k + c];
                for j in 0..d {
                    diff[j] = xi[j] - mean[j];
                }
                for a in 0..d {
                    let wa = w * diff[a];
                    for b in 0..=a {
                        acc[a * d + b] += wa * diff[b];
                    }
                }
            }
            for a in 0..d {
                for b in 0..=a {
                    acc[a * d + b] /= nk;
                    acc[b * d + a] = acc[a * d + b];
                }
            }
            cov
        }
        CovarianceKind::Full => {
            work.clear();
            work.reserve(n * d);
            for (i, xi) in x.row_iter().enumerate() {
                let s = r[i * k + c].sqrt();
                work.extend(xi.iter().zip(mean).map(|(v, m)| s * (v - m)));
            }
            let y = DenseMatrix::from_vec(n, d, std::mem::take(work)).expect("n×d");
            let mut cov = y.transpose_matmul(&y).expect("shapes agree");
            *work = y.into_vec();
            cov.as_mut_slice().iter_mut().for_each(|v| *v /= nk);
            symmetrize(&mut cov);
            cov
        }
        CovarianceKind::Diagonal => {
            let mut var = vec![0.0; d];
            for (i, xi) in x.row_iter().enumerate() {
                let w = r[i * k + c];
                for ((s, v), m) in var.iter_mut().zip(xi).zip(mean) {
                    *s += w * (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= nk);
            DenseMatrix::from_vec(1, d, var).expect("1xd")
        }
    }
}

/// Moves each empty component onto the not-yet-used point with the lowest
/// mixture likelihood and gives it weight 1/N before renormalization.
fn reseed_components(
    x: &DenseMatrix,
    empty: &[usize],
    point_ll: &[f64],
    means: &mut DenseMatrix,
    weights: &mut [f64],
) {
    let n = x.rows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
    for (&c, &i) in empty.iter().zip(order.iter()) {
        means.row_mut(c).copy_from_slice(x.row(i));
        weights[c] = 1.0 / n as f64;
    }
}

/// One-component diagonal generator for data without spread: per-coordinate
/// variance floored at `reg_eps_scale · max(1, ‖mean‖²/d)`.
pub fn degenerate_generator(features: &DenseMatrix, cfg: &EmConfig) -> Result<GmmGenerator> {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 || d == 0 {
        return Err(GmmError::TooFewSamples { n, k: 1 });
    }
    let stats = global_stats(features, CovarianceKind::Diagonal);
    let scale: f64 = stats.mean.iter().map(|m| m * m).sum::<f64>() / d as f64;
    let floor = cfg.reg_eps_scale * scale.max(1.0);
    let mut l = DenseMatrix::zeros(d, d);
    for i in 0..d {
        l[(i, i)] = stats.cov[(0, i)].max(floor).sqrt();
    }
    let means = DenseMatrix::from_vec(1, d, stats.mean).expect("1xd");
    GmmGenerator::new(CovarianceKind::Diagonal, vec![1.0], means, vec![l], n as u64)
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub k: usize,
    pub outcome: Result<(GmmGenerator, FitReport)>,
}

/// Fits every candidate `k = 1..=min(k_max, N)`, each on `rng.split(k)`.
pub fn bic_sweep(features: &DenseMatrix, cfg: &EmConfig, rng: &mut Rng) -> Vec<Candidate> {
    let k_hi = cfg.k_max.min(features.rows());
    (1..=k_hi)
        .map(|k| Candidate {
            k,
            outcome: fit_em(features, k, cfg, &mut rng.split(k as u64)),
        })
        .collect()
}

/// Picks the mixture order with minimum BIC; ties go to the smaller k.
///
/// Data with zero spread yields [`degenerate_generator`] instead of an error.
pub fn select_k(
    features: &DenseMatrix,
    cfg: &EmConfig,
    rng: &mut Rng,
) -> Result<(GmmGenerator, FitReport)> {
    cfg.validate()?;
    if features.rows() == 0 {
        return Err(GmmError::TooFewSamples { n: 0, k: 1 });
    }
    let mut best: Option<(GmmGenerator, FitReport)> = None;
    let mut first_err = None;
    for cand in bic_sweep(features, cfg, rng) {
        match cand.outcome {
            Ok((g, rep)) => {
                if best.as_ref().is_none_or(|(_, b)| rep.bic < b.bic) {
                    best = Some((g, rep));
                }
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    match (best, first_err) {
        (Some(b), _) => Ok(b),
        (None, Some(GmmError::DegenerateData)) => {
            let g = degenerate_generator(features, cfg)?;
            let ll = g.log_likelihood(features)?;
            let bic = bic_value(ll, g.param_count(), features.rows());
            Ok((
                g,
                FitReport {
                    final_log_likelihood: ll,
                    iterations_used: 0,
                    bic,
                    converged: true,
                    log_likelihood_trace: vec![ll],
                    reseeded_components: 0,
                },
            ))
        }
        (None, Some(e)) => Err(e),
        (None, None) => unreachable!("at least one candidate is fitted"),
    }
}
