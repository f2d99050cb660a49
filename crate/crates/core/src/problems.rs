//! Objective suites: `n` local functions, their gradients, the global
//! constants `L`, `mu`, `kappa = L / mu`, and a reference optimum `x*` of the
//! average `f = (1/n) sum_i f_i`.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Gradient tolerance of the centralized reference solve.
pub const REFERENCE_GRAD_TOL: f64 = 1e-12;
/// Iteration cap of the centralized reference solve.
pub const REFERENCE_MAX_ITERS: usize = 10_000_000;

/// Relative spread of the per-node curvature perturbations in generated
/// quadratics. Keeps `max_i lambda_max(Q_i)` within 8% of `lambda_max` of the
/// global Hessian, so `L / mu` and the global condition number agree.
const QUADRATIC_SPREAD: f64 = 0.04;

#[derive(Debug, Error)]
pub enum ProblemError {
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),
    #[error("global Hessian is singular")]
    SingularHessian,
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("{samples} samples cannot be split across {nodes} nodes")]
    TooFewSamples { samples: usize, nodes: usize },
    #[error("node {0} has no samples")]
    EmptyShard(usize),
    #[error("reference solve stopped after {iters} iterations with ||grad f|| = {grad_norm:e}")]
    NotConverged { iters: usize, grad_norm: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One node's differentiable local function.
pub trait LocalObjective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes `grad f_i(x)` into `out`.
    fn gradient(&self, x: &[f64], out: &mut [f64]);

    /// `(Q, b)` when the function is `x^T Q x / 2 + b^T x`.
    fn as_quadratic(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        None
    }
}

/// `f_i(x) = x^T Q x / 2 + b^T x`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    q: DMatrix<f64>,
    b: DVector<f64>,
}

impl Quadratic {
    pub fn new(q: DMatrix<f64>, b: DVector<f64>) -> Result<Self, ProblemError> {
        if q.nrows() != q.ncols() || q.nrows() != b.len() {
            return Err(ProblemError::InvalidSpec(format!(
                "Q is {}x{} but b has length {}",
                q.nrows(),
                q.ncols(),
                b.len()
            )));
        }
        Ok(Quadratic { q, b })
    }
}

impl LocalObjective for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let mut v = 0.0;
        for j in 0..d {
            let qx: f64 = (0..d).map(|k| self.q[(j, k)] * x[k]).sum();
            v += 0.5 * x[j] * qx + self.b[j] * x[j];
        }
        v
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (j, o) in out.iter_mut().enumerate().take(d) {
            // Q is symmetric, so column j doubles as row j.
            let col = self.q.column(j);
            *o = col.iter().zip(x).map(|(q, x)| q * x).sum::<f64>() + self.b[j];
        }
    }

    fn as_quadratic(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        Some((&self.q, &self.b))
    }
}

/// `f_i(x) = (1/n_i) sum_s log(1 + exp(-y_s a_s^T x)) + (1/n_i) ||x||^2`
/// with labels `y_s` in `{-1, +1}`.
#[derive(Debug, Clone)]
pub struct LogisticLocal {
    /// Samples stored column-wise: column `s` is `a_s`.
    samples: DMatrix<f64>,
    labels: Vec<f64>,
}

impl LogisticLocal {
    pub fn new(samples: DMatrix<f64>, labels: Vec<f64>) -> Result<Self, ProblemError> {
        if samples.ncols() != labels.len() {
            return Err(ProblemError::InvalidSpec("sample/label count mismatch".into()));
        }
        if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
            return Err(ProblemError::InvalidSpec("labels must be -1 or +1".into()));
        }
        Ok(LogisticLocal { samples, labels })
    }

    pub fn sample_count(&self) -> usize {
        self.labels.len()
    }

    /// `lambda_max(A^T A) / (4 n_i) + 2 / n_i`.
    pub fn lipschitz(&self) -> f64 {
        let m = self.sample_count() as f64;
        let gram = &self.samples * self.samples.transpose();
        let top = gram.symmetric_eigenvalues().iter().cloned().fold(0.0, f64::max);
        top / (4.0 * m) + 2.0 / m
    }
}

/// `log(1 + exp(t))` without overflow.
fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

impl LocalObjective for LogisticLocal {
    fn dim(&self) -> usize {
        self.samples.nrows()
    }

    fn value(&self, x: &[f64]) -> f64 {
        let m = self.sample_count() as f64;
        let xv = DVector::from_column_slice(x);
        let margins = self.samples.tr_mul(&xv);
        let loss: f64 = margins.iter().zip(&self.labels).map(|(t, y)| softplus(-y * t)).sum();
        (loss + xv.norm_squared()) / m
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) {
        let m = self.sample_count() as f64;
        let xv = DVector::from_column_slice(x);
        let margins = self.samples.tr_mul(&xv);
        // d/dt log(1 + exp(-y t)) = -y sigmoid(-y t)
        let weights = DVector::from_iterator(
            self.labels.len(),
            margins.iter().zip(&self.labels).map(|(t, y)| -y * sigmoid(-y * t)),
        );
        let g = &self.samples * weights;
        for (j, o) in out.iter_mut().enumerate() {
            *o = (g[j] + 2.0 * x[j]) / m;
        }
    }
}

/// `n` local functions sharing a dimension, with global constants and a
/// reference optimum.
#[derive(Debug, Clone)]
pub struct ObjectiveSuite {
    locals: Vec<Arc<dyn LocalObjective>>,
    d: usize,
    l: f64,
    mu: f64,
    x_star: Vec<f64>,
}

impl ObjectiveSuite {
    /// Assembles a suite from parts. `l` must bound every local gradient's
    /// Lipschitz constant and `mu` the strong convexity of the average.
    pub fn new(locals: Vec<Arc<dyn LocalObjective>>, l: f64, mu: f64, x_star: Vec<f64>) -> Result<Self, ProblemError> {
        let d = locals
            .first()
            .map(|f| f.dim())
            .ok_or_else(|| ProblemError::InvalidSpec("suite needs at least one node".into()))?;
        if locals.iter().any(|f| f.dim() != d) || x_star.len() != d {
            return Err(ProblemError::InvalidSpec("dimension mismatch".into()));
        }
        if !(mu > 0.0 && l >= mu && l.is_finite()) {
            return Err(ProblemError::InvalidSpec(format!("need 0 < mu <= L, got mu={mu}, L={l}")));
        }
        Ok(ObjectiveSuite { locals, d, l, mu, x_star })
    }

    pub fn n(&self) -> usize {
        self.locals.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn l(&self) -> f64 {
        self.l
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn local(&self, i: usize) -> &dyn LocalObjective {
        self.locals[i].as_ref()
    }

    /// `f(x) = (1/n) sum_i f_i(x)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        self.locals.iter().map(|f| f.value(x)).sum::<f64>() / self.n() as f64
    }

    /// `grad f(x)` of the global average.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let mut buf = vec![0.0; self.d];
        for f in &self.locals {
            f.gradient(x, &mut buf);
            for (o, g) in out.iter_mut().zip(&buf) {
                *o += g;
            }
        }
        let inv = 1.0 / self.n() as f64;
        out.iter_mut().for_each(|o| *o *= inv);
    }

    pub fn gradient_norm(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.d];
        self.gradient(x, &mut g);
        g.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Stacked local gradients: column `i` of `out` (d x n) receives
    /// `grad f_i(x_i)` where `x_i` is column `i` of `x`.
    pub fn stacked_gradient(&self, x: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        let d = self.d;
        let xs = x.as_slice();
        let os = out.as_mut_slice();
        for (i, f) in self.locals.iter().enumerate() {
            f.gradient(&xs[i * d..(i + 1) * d], &mut os[i * d..(i + 1) * d]);
        }
    }

    fn quadratic_parts(&self) -> Option<Vec<(&DMatrix<f64>, &DVector<f64>)>> {
        self.locals.iter().map(|f| f.as_quadratic()).collect()
    }
}

/// Parameters of a generated quadratic suite. Generation is a pure function
/// of these four fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadraticSpec {
    pub n: usize,
    pub d: usize,
    pub kappa_target: f64,
    pub seed: u64,
}

/// Builds a quadratic suite from explicit `Q_i`, `b_i`. `L` is the largest
/// local curvature, `mu` the smallest curvature of the average Hessian and
/// `x*` the solution of the normal equations.
pub fn quadratic_suite(qs: Vec<DMatrix<f64>>, bs: Vec<DVector<f64>>) -> Result<ObjectiveSuite, ProblemError> {
    if qs.is_empty() || qs.len() != bs.len() {
        return Err(ProblemError::InvalidSpec("need one b_i per Q_i".into()));
    }
    let mut l: f64 = 0.0;
    let mut locals: Vec<Arc<dyn LocalObjective>> = Vec::with_capacity(qs.len());
    for (q, b) in qs.into_iter().zip(bs) {
        let eig = q.clone().symmetric_eigenvalues();
        let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
        if lo < 0.0 {
            return Err(ProblemError::InvalidSpec("Q_i must be positive semidefinite".into()));
        }
        l = l.max(eig.iter().cloned().fold(0.0, f64::max));
        locals.push(Arc::new(Quadratic::new(q, b)?));
    }
    let parts: Vec<_> = locals.iter().map(|f| f.as_quadratic().unwrap()).collect();
    let (h, _) = average_quadratic(&parts);
    let mu = h.symmetric_eigenvalues().iter().cloned().fold(f64::INFINITY, f64::min);
    if mu <= 0.0 {
        return Err(ProblemError::SingularHessian);
    }
    let x_star = solve_quadratic(&parts)?;
    ObjectiveSuite::new(locals, l, mu, x_star)
}

fn average_quadratic(parts: &[(&DMatrix<f64>, &DVector<f64>)]) -> (DMatrix<f64>, DVector<f64>) {
    let d = parts[0].1.len();
    let inv = 1.0 / parts.len() as f64;
    let mut h = DMatrix::zeros(d, d);
    let mut b = DVector::zeros(d);
    for (q, bi) in parts {
        h += *q;
        b += *bi;
    }
    (h * inv, b * inv)
}

fn solve_quadratic(parts: &[(&DMatrix<f64>, &DVector<f64>)]) -> Result<Vec<f64>, ProblemError> {
    let (h, b) = average_quadratic(parts);
    let chol = h.clone().cholesky().ok_or(ProblemError::SingularHessian)?;
    let rhs = -b;
    let mut x = chol.solve(&rhs);
    // One round of iterative refinement recovers the last bits.
    let residual = &rhs - &h * &x;
    x += chol.solve(&residual);
    Ok(x.iter().cloned().collect())
}

fn random_orthogonal(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let (mut q, r) = qr.unpack();
    // Sign fix makes the distribution Haar.
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Generates a strongly convex quadratic suite whose average Hessian has
/// condition number `kappa_target`.
///
/// The average Hessian is `G = V D V^T` with `V` random orthogonal and `D`
/// log-uniform on `[1, kappa_target]` (both endpoints pinned). Node `i`
/// receives `Q_i = G^{1/2} (I + P_i) G^{1/2}` where `P_i = U_i S_i U_i^T` has a
/// random orthogonal `U_i`, a uniform spectrum `S_i` in `[-0.04, 0.04]` and the
/// node average of `P_i` removed, so the `Q_i` are positive definite and
/// average exactly to `G`. Linear terms `b_i` are standard normal.
pub fn generate_quadratic(spec: &QuadraticSpec) -> Result<ObjectiveSuite, ProblemError> {
    let QuadraticSpec { n, d, kappa_target, seed } = *spec;
    if n == 0 || d == 0 {
        return Err(ProblemError::InvalidSpec("n and d must be positive".into()));
    }
    if !kappa_target.is_finite() || kappa_target < 1.0 {
        return Err(ProblemError::InvalidSpec(format!("kappa_target must be >= 1, got {kappa_target}")));
    }
    if d == 1 && kappa_target > 1.1 {
        return Err(ProblemError::InvalidSpec("a one-dimensional quadratic has kappa = 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let log_k = kappa_target.ln();
    let mut spectrum: Vec<f64> = (0..d)
        .map(|j| match j {
            0 => 0.0,
            _ if j == d - 1 => log_k,
            _ => rng.random::<f64>() * log_k,
        })
        .map(f64::exp)
        .collect();
    spectrum.sort_by(f64::total_cmp);
    let v = random_orthogonal(d, &mut rng);
    let sqrt_g = &v * DMatrix::from_diagonal(&DVector::from_iterator(d, spectrum.iter().map(|s| s.sqrt()))) * v.transpose();

    let mut perturbations: Vec<DMatrix<f64>> = (0..n)
        .map(|_| {
            let u = random_orthogonal(d, &mut rng);
            let s = DVector::from_fn(d, |_, _| QUADRATIC_SPREAD * (2.0 * rng.random::<f64>() - 1.0));
            &u * DMatrix::from_diagonal(&s) * u.transpose()
        })
        .collect();
    let mean = perturbations.iter().fold(DMatrix::zeros(d, d), |acc, p| acc + p) / n as f64;
    for p in &mut perturbations {
        *p -= &mean;
    }

    let qs: Vec<DMatrix<f64>> = perturbations
        .iter()
        .map(|p| {
            let q = &sqrt_g * (DMatrix::identity(d, d) + p) * &sqrt_g;
            (&q + q.transpose()) * 0.5
        })
        .collect();
    let bs: Vec<DVector<f64>> = (0..n)
        .map(|_| DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal)))
        .collect();
    quadratic_suite(qs, bs)
}

/// Logistic-regression data split across nodes.
#[derive(Debug, Clone)]
pub struct LogRegDataset {
    shards: Vec<LogisticLocal>,
    d: usize,
}

impl LogRegDataset {
    pub fn n_nodes(&self) -> usize {
        self.shards.len()
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(|s| s.sample_count()).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.shard_sizes().iter().sum()
    }

    pub fn shard(&self, i: usize) -> &LogisticLocal {
        &self.shards[i]
    }

    /// Splits raw samples (features, label in `{-1, +1}`) into `n_nodes`
    /// contiguous shards; the first `len % n_nodes` shards get one extra.
    pub fn from_samples(samples: Vec<(Vec<f64>, f64)>, d: usize, n_nodes: usize) -> Result<Self, ProblemError> {
        if n_nodes == 0 || samples.len() < n_nodes {
            return Err(ProblemError::TooFewSamples {
                samples: samples.len(),
                nodes: n_nodes,
            });
        }
        let sizes = shard_sizes(samples.len(), n_nodes);
        let mut it = samples.into_iter();
        let mut shards = Vec::with_capacity(n_nodes);
        for size in sizes {
            let chunk: Vec<_> = it.by_ref().take(size).collect();
            let mut a = DMatrix::zeros(d, size);
            let mut labels = Vec::with_capacity(size);
            for (s, (feat, y)) in chunk.into_iter().enumerate() {
                for (j, v) in feat.into_iter().enumerate() {
                    a[(j, s)] = v;
                }
                labels.push(y);
            }
            shards.push(LogisticLocal::new(a, labels)?);
        }
        Ok(LogRegDataset { shards, d })
    }
}

fn shard_sizes(total: usize, nodes: usize) -> Vec<usize> {
    let base = total / nodes;
    let extra = total % nodes;
    (0..nodes).map(|i| base + usize::from(i < extra)).collect()
}

/// Options for LIBSVM ingestion.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    /// Min-max scale each feature to `[0, 1]`.
    pub normalize: bool,
    /// Shuffle samples with this seed before sharding.
    pub shuffle_seed: Option<u64>,
}

pub fn load_libsvm(path: impl AsRef<Path>, n_nodes: usize, options: LoadOptions) -> Result<LogRegDataset, ProblemError> {
    parse_libsvm(File::open(path)?, n_nodes, options)
}

/// Parses LIBSVM sparse text (`label idx:val ...`, 1-based indices). The
/// dimension is the largest feature index. The two distinct label values are
/// mapped to `-1` (smaller) and `+1` (larger), so `{0, 1}`, `{-1, 1}` and
/// `{1, 2}` encodings all work.
pub fn parse_libsvm<R: Read>(reader: R, n_nodes: usize, options: LoadOptions) -> Result<LogRegDataset, ProblemError> {
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut d = 0;
    for (lineno, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        let line_no = lineno + 1;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let label: f64 = tokens
            .next()
            .and_then(|t| t.parse().ok())
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| ProblemError::Parse {
                line: line_no,
                msg: "missing or invalid label".into(),
            })?;
        let mut feats = Vec::new();
        for tok in tokens {
            let (idx, val) = tok.split_once(':').ok_or_else(|| ProblemError::Parse {
                line: line_no,
                msg: format!("expected idx:val, got '{tok}'"),
            })?;
            let idx: usize = idx.parse().ok().filter(|&i| i >= 1).ok_or_else(|| ProblemError::Parse {
                line: line_no,
                msg: format!("bad feature index '{idx}'"),
            })?;
            let val: f64 = val
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| ProblemError::Parse {
                    line: line_no,
                    msg: format!("bad feature value '{val}'"),
                })?;
            d = d.max(idx);
            feats.push((idx - 1, val));
        }
        rows.push((feats, label));
    }

    let mut distinct: Vec<f64> = rows.iter().map(|r| r.1).collect();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let sign = |y: f64| -> Result<f64, ProblemError> {
        match distinct.as_slice() {
            [only] => Ok(if *only > 0.0 { 1.0 } else { -1.0 }),
            [lo, _] => Ok(if y == *lo { -1.0 } else { 1.0 }),
            _ => Err(ProblemError::InvalidSpec(format!(
                "binary classification needs two label values, found {}",
                distinct.len()
            ))),
        }
    };

    let mut samples = Vec::with_capacity(rows.len());
    for (feats, label) in rows {
        let mut dense = vec![0.0; d];
        for (j, v) in feats {
            dense[j] = v;
        }
        samples.push((dense, sign(label)?));
    }

    if options.normalize && !samples.is_empty() {
        for j in 0..d {
            let (lo, hi) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (x, _)| (lo.min(x[j]), hi.max(x[j])));
            let span = hi - lo;
            for (x, _) in &mut samples {
                x[j] = if span > 0.0 { (x[j] - lo) / span } else { 0.0 };
            }
        }
    }
    if let Some(seed) = options.shuffle_seed {
        samples.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    LogRegDataset::from_samples(samples, d, n_nodes)
}

/// Regularized logistic-regression suite over the dataset's shards, with the
/// reference optimum computed by centralized gradient descent.
pub fn logreg_suite(ds: &LogRegDataset) -> Result<ObjectiveSuite, ProblemError> {
    let n = ds.n_nodes();
    let mut l: f64 = 0.0;
    let mut inv_sum = 0.0;
    for (i, shard) in ds.shards.iter().enumerate() {
        if shard.sample_count() == 0 {
            return Err(ProblemError::EmptyShard(i));
        }
        l = l.max(shard.lipschitz());
        inv_sum += 1.0 / shard.sample_count() as f64;
    }
    let mu = 2.0 * inv_sum / n as f64;
    let locals: Vec<Arc<dyn LocalObjective>> = ds.shards.iter().map(|s| Arc::new(s.clone()) as Arc<dyn LocalObjective>).collect();
    let provisional = ObjectiveSuite::new(locals, l, mu, vec![0.0; ds.d])?;
    let x_star = compute_reference_optimum(&provisional)?;
    Ok(ObjectiveSuite { x_star, ..provisional })
}

/// Minimizer of the suite's average function. Quadratic suites are solved
/// directly; anything else runs gradient descent with step `1/L` from the
/// origin until `||grad f|| <= 1e-12`.
pub fn compute_reference_optimum(suite: &ObjectiveSuite) -> Result<Vec<f64>, ProblemError> {
    if let Some(parts) = suite.quadratic_parts() {
        return solve_quadratic(&parts);
    }
    gradient_descent(suite, REFERENCE_GRAD_TOL, REFERENCE_MAX_ITERS)
}

fn gradient_descent(suite: &ObjectiveSuite, tol: f64, max_iters: usize) -> Result<Vec<f64>, ProblemError> {
    let step = 1.0 / suite.l();
    let mut x = vec![0.0; suite.d()];
    let mut g = vec![0.0; suite.d()];
    for _ in 0..max_iters {
        suite.gradient(&x, &mut g);
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= tol {
            return Ok(x);
        }
        for (xj, gj) in x.iter_mut().zip(&g) {
            *xj -= step * gj;
        }
    }
    suite.gradient(&x, &mut g);
    let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if grad_norm <= tol {
        Ok(x)
    } else {
        Err(ProblemError::NotConverged {
            iters: max_iters,
            grad_norm,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn mat(rows: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, data.len() / rows, data)
    }

    #[test]
    fn scalar_quadratic() {
        let s = quadratic_suite(vec![mat(1, &[2.0])], vec![DVector::from_vec(vec![-4.0])]).unwrap();
        assert_eq!(s.x_star(), &[2.0]);
        assert_eq!((s.l(), s.mu()), (2.0, 2.0));
        assert_eq!(compute_reference_optimum(&s).unwrap(), vec![2.0]);
    }

    #[test]
    fn two_node_quadratic() {
        let b = DVector::from_vec(vec![-2.0, 0.0]);
        let s = quadratic_suite(
            vec![mat(2, &[1.0, 0.0, 0.0, 1.0]), mat(2, &[3.0, 0.0, 0.0, 1.0])],
            vec![b.clone(), b],
        )
        .unwrap();
        assert_abs_diff_eq!(s.x_star()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.x_star()[1], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.mu(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.l(), 3.0, epsilon = 1e-15);
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        let q = Quadratic::new(mat(2, &[2.0, 1.0, 1.0, 3.0]), DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let mut g = [0.0; 2];
        q.gradient(&[1.0, 2.0], &mut g);
        assert_eq!(g, [2.0 + 2.0 + 1.0, 1.0 + 6.0 - 1.0]);
    }

    #[test]
    fn generator_validates_spec() {
        let bad = |n, d, k| {
            generate_quadratic(&QuadraticSpec {
                n,
                d,
                kappa_target: k,
                seed: 1,
            })
            .is_err()
        };
        assert!(bad(0, 3, 10.0));
        assert!(bad(2, 3, 0.5));
        assert!(bad(2, 1, 100.0));
        assert!(!bad(2, 1, 1.0));
    }

    #[test]
    fn large_generator_hits_kappa() {
        let s = generate_quadratic(&QuadraticSpec {
            n: 16,
            d: 10,
            kappa_target: 1e4,
            seed: 7,
        })
        .unwrap();
        assert!((9e3..=1.1e4).contains(&s.kappa()), "kappa = {}", s.kappa());
        assert!(s.gradient_norm(s.x_star()) <= 1e-12);
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = QuadraticSpec {
            n: 4,
            d: 3,
            kappa_target: 50.0,
            seed: 99,
        };
        let a = generate_quadratic(&spec).unwrap();
        let b = generate_quadratic(&spec).unwrap();
        assert_eq!(a.x_star(), b.x_star());
        assert_eq!(a.l(), b.l());
    }

    #[test]
    fn logistic_gradient_at_origin() {
        let f = LogisticLocal::new(mat(2, &[1.0, 0.0]), vec![1.0]).unwrap();
        let mut g = [0.0; 2];
        f.gradient(&[0.0, 0.0], &mut g);
        assert_abs_diff_eq!(g[0], -0.5, epsilon = 1e-16);
        assert_eq!(g[1], 0.0);
        assert_abs_diff_eq!(f.value(&[0.0, 0.0]), std::f64::consts::LN_2, epsilon = 1e-16);
    }

    #[test]
    fn shard_remainder_rule() {
        assert_eq!(shard_sizes(4, 2), vec![2, 2]);
        assert_eq!(shard_sizes(5, 2), vec![3, 2]);
        let sizes = shard_sizes(8124, 16);
        assert_eq!(sizes[11..13], [508, 507]);
        assert_eq!(sizes.iter().sum::<usize>(), 8124);
    }

    #[test]
    fn libsvm_parse_and_split() {
        let text = "0 1:1 3:2\n1 2:0.5\n# comment\n\n1 1:-1\n0 3:4\n1 2:1\n";
        let ds = parse_libsvm(text.as_bytes(), 2, LoadOptions::default()).unwrap();
        assert_eq!(ds.d(), 3);
        assert_eq!(ds.shard_sizes(), vec![3, 2]);
        assert_eq!(ds.shard(0).labels, vec![-1.0, 1.0, 1.0]);
        assert_eq!(ds.shard(0).samples[(2, 0)], 2.0);
    }

    #[test]
    fn libsvm_errors_report_line() {
        let err = parse_libsvm("1 1:2\n0 x:1\n".as_bytes(), 1, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, ProblemError::Parse { line: 2, .. }), "{err}");
        let err = parse_libsvm("1 1:2\n".as_bytes(), 2, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, ProblemError::TooFewSamples { .. }));
        let err = parse_libsvm("1 1:2\n0 1:1\n3 1:0\n".as_bytes(), 1, LoadOptions::default()).unwrap_err();
        assert!(matches!(err, ProblemError::InvalidSpec(_)));
    }

    #[test]
    fn libsvm_normalize_and_shuffle() {
        let text = "1 1:2 2:5\n2 1:4 2:5\n1 1:6 2:5\n";
        let opts = LoadOptions {
            normalize: true,
            shuffle_seed: None,
        };
        let ds = parse_libsvm(text.as_bytes(), 1, opts).unwrap();
        let a = &ds.shard(0).samples;
        assert_eq!((a[(0, 0)], a[(0, 1)], a[(0, 2)]), (0.0, 0.5, 1.0));
        assert_eq!(a[(1, 1)], 0.0);
        assert_eq!(ds.shard(0).labels, vec![-1.0, 1.0, -1.0]);

        let shuffled = LoadOptions {
            normalize: false,
            shuffle_seed: Some(3),
        };
        let x = parse_libsvm(text.as_bytes(), 1, shuffled).unwrap();
        let y = parse_libsvm(text.as_bytes(), 1, shuffled).unwrap();
        assert_eq!(x.shard(0).samples, y.shard(0).samples);
    }

    #[test]
    fn symmetric_logistic_optimum_is_origin() {
        let text = "1 1:1 2:2\n1 1:-1 2:-2\n0 1:-3 2:1\n0 1:3 2:-1\n";
        let ds = parse_libsvm(text.as_bytes(), 2, LoadOptions::default()).unwrap();
        let s = logreg_suite(&ds).unwrap();
        assert!(s.x_star().iter().all(|v| v.abs() < 1e-12), "{:?}", s.x_star());
    }

    #[test]
    fn logistic_constants() {
        let text = "1 1:1\n0 1:2\n1 1:3\n";
        let ds = parse_libsvm(text.as_bytes(), 2, LoadOptions::default()).unwrap();
        let s = logreg_suite(&ds).unwrap();
        // shards of 2 and 1 samples
        assert_abs_diff_eq!(s.mu(), (2.0 / 2.0) * (0.5 + 1.0), epsilon = 1e-15);
        let l0 = (1.0 + 4.0) / 8.0 + 1.0;
        let l1 = 9.0 / 4.0 + 2.0;
        assert_abs_diff_eq!(s.l(), f64::max(l0, l1), epsilon = 1e-12);
        assert!(s.gradient_norm(s.x_star()) <= REFERENCE_GRAD_TOL);
    }

    #[test]
    fn reference_solve_reports_cap() {
        let text = "1 1:1\n0 1:2\n";
        let ds = parse_libsvm(text.as_bytes(), 1, LoadOptions::default()).unwrap();
        let locals: Vec<Arc<dyn LocalObjective>> = vec![Arc::new(ds.shard(0).clone())];
        let s = ObjectiveSuite::new(locals, 10.0, 1.0, vec![0.0]).unwrap();
        let err = gradient_descent(&s, 1e-12, 3).unwrap_err();
        assert!(matches!(err, ProblemError::NotConverged { iters: 3, .. }));
    }
}
