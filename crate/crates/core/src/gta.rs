//! The gradient-tracking iteration.
//!
//! Stacked vectors in `R^{nd}` are held as `d x n` matrices whose column `i`
//! is node `i`'s local copy. Applying `Z = W (x) I_d` to a stacked vector is
//! then a right multiplication by `W` (symmetric), so no `nd x nd` Kronecker
//! product is ever formed.

use std::io::{self, Write};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::fmt::g17;
use crate::problems::ObjectiveSuite;
use crate::topology::CommunicationStrategy;

/// Optimization error above which a run is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GtaError {
    #[error("initial point has length {got}, expected n*d = {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("strategy has {strategy} nodes but the suite has {suite}")]
    NodeMismatch { strategy: usize, suite: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("diverged at outer iteration {k}: optimization error {opt_err:e}")]
    Diverged { k: usize, opt_err: f64 },
}

/// Step size, inner steps and stopping rule for one run.
#[derive(Debug, Clone)]
pub struct GtaConfig {
    pub strategy: CommunicationStrategy,
    pub alpha: f64,
    pub n_g: u32,
    pub max_outer_iters: usize,
    /// Stop once the optimization error falls to this level.
    pub stop_tol: Option<f64>,
}

impl GtaConfig {
    pub fn new(strategy: CommunicationStrategy, alpha: f64, n_g: u32, max_outer_iters: usize) -> Self {
        GtaConfig {
            strategy,
            alpha,
            n_g,
            max_outer_iters,
            stop_tol: None,
        }
    }

    fn validate(&self, suite: &ObjectiveSuite) -> Result<(), GtaError> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(GtaError::InvalidConfig(format!("step size must be positive, got {}", self.alpha)));
        }
        if self.n_g == 0 {
            return Err(GtaError::InvalidConfig("n_g must be at least 1".into()));
        }
        if self.strategy.n() != suite.n() {
            return Err(GtaError::NodeMismatch {
                strategy: self.strategy.n(),
                suite: suite.n(),
            });
        }
        Ok(())
    }
}

/// Local copies `x`, trackers `y` and the cached local gradients at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct GtaState {
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    /// `grad f_i(x_i)` stacked like `x`.
    pub grad: DMatrix<f64>,
    /// Outer iteration counter.
    pub k: usize,
    /// Inner step index, starting at 1.
    pub j: u32,
}

/// `(||xbar - x*||, ||x - xbar||, ||y - ybar||)` at an outer boundary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ErrorVector {
    pub opt_err: f64,
    pub x_consensus: f64,
    pub y_consensus: f64,
}

impl ErrorVector {
    pub fn as_array(&self) -> [f64; 3] {
        [self.opt_err, self.x_consensus, self.y_consensus]
    }

    pub fn norm(&self) -> f64 {
        self.as_array().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn node_mean(m: &DMatrix<f64>) -> DVector<f64> {
    m.column_mean()
}

fn consensus_norm(m: &DMatrix<f64>) -> f64 {
    let mean = node_mean(m);
    m.column_iter().map(|c| (c - &mean).norm_squared()).sum::<f64>().sqrt()
}

/// Sets `y_0 = grad f(x_0)`. `x0` is the stacked vector of length `n*d`,
/// node blocks in order.
pub fn initialize(suite: &ObjectiveSuite, x0: &[f64]) -> Result<GtaState, GtaError> {
    let (n, d) = (suite.n(), suite.d());
    if x0.len() != n * d {
        return Err(GtaError::DimensionMismatch {
            expected: n * d,
            got: x0.len(),
        });
    }
    let x = DMatrix::from_column_slice(d, n, x0);
    let mut grad = DMatrix::zeros(d, n);
    suite.stacked_gradient(&x, &mut grad);
    Ok(GtaState {
        y: grad.clone(),
        x,
        grad,
        k: 0,
        j: 1,
    })
}

/// Local step: `x <- x - alpha y`, `y <- y + grad f(x_new) - grad f(x_old)`.
pub fn inner_step(state: &mut GtaState, suite: &ObjectiveSuite, alpha: f64) {
    state.x.zip_apply(&state.y, |x, y| *x -= alpha * y);
    let old = state.grad.clone();
    suite.stacked_gradient(&state.x, &mut state.grad);
    state.y += &state.grad - old;
    state.j += 1;
}

/// `out <- src * W` (or a copy when the slot holds the identity).
fn mix_into(out: &mut DMatrix<f64>, src: &DMatrix<f64>, strategy: &CommunicationStrategy, slot: usize, scale: f64, beta: f64) {
    if strategy.is_identity_slot(slot) {
        if beta == 0.0 {
            out.copy_from(src);
            if scale != 1.0 {
                *out *= scale;
            }
        } else {
            out.zip_apply(src, |o, v| *o = beta * *o + scale * v);
        }
    } else {
        out.gemm(scale, src, strategy.powered(slot), beta);
    }
}

/// Communication step:
/// `x <- Z1 x - alpha Z2 y`, `y <- Z3 y + Z4 (grad f(x_new) - grad f(x_old))`,
/// with every `Z_i` raised to the `n_c`-th power.
pub fn outer_step(state: &mut GtaState, suite: &ObjectiveSuite, cfg: &GtaConfig) {
    let s = &cfg.strategy;
    let (d, n) = state.x.shape();
    let mut x_new = DMatrix::zeros(d, n);
    mix_into(&mut x_new, &state.x, s, 0, 1.0, 0.0);
    mix_into(&mut x_new, &state.y, s, 1, -cfg.alpha, 1.0);

    let mut grad_new = DMatrix::zeros(d, n);
    suite.stacked_gradient(&x_new, &mut grad_new);
    let diff = &grad_new - &state.grad;

    let mut y_new = DMatrix::zeros(d, n);
    mix_into(&mut y_new, &state.y, s, 2, 1.0, 0.0);
    mix_into(&mut y_new, &diff, s, 3, 1.0, 1.0);

    state.x = x_new;
    state.y = y_new;
    state.grad = grad_new;
    state.k += 1;
    state.j = 1;
}

/// `n_g - 1` local steps followed by one communication step.
pub fn outer_iteration(state: &mut GtaState, suite: &ObjectiveSuite, cfg: &GtaConfig) {
    for _ in 1..cfg.n_g {
        inner_step(state, suite, cfg.alpha);
    }
    outer_step(state, suite, cfg);
}

pub fn error_vector(state: &GtaState, suite: &ObjectiveSuite) -> ErrorVector {
    let xbar = node_mean(&state.x);
    let x_star = DVector::from_column_slice(suite.x_star());
    ErrorVector {
        opt_err: (xbar - x_star).norm(),
        x_consensus: consensus_norm(&state.x),
        y_consensus: consensus_norm(&state.y),
    }
}

/// `||ybar - (1/n) sum_i grad f_i(x_i)||`; zero in exact arithmetic.
pub fn tracking_residual(state: &GtaState) -> f64 {
    (node_mean(&state.y) - node_mean(&state.grad)).norm()
}

/// Error vectors at each outer boundary plus bookkeeping counters.
#[derive(Debug, Clone)]
pub struct RunTrace {
    /// `errors[k]` is recorded at outer iteration `k`, starting from `k = 0`.
    pub errors: Vec<ErrorVector>,
    pub alpha: f64,
    pub n: usize,
    pub n_c: u32,
    pub n_g: u32,
    /// Slots whose matrix is not the identity.
    pub communicating_slots: usize,
    pub elapsed: Duration,
}

impl RunTrace {
    pub fn iterations(&self) -> usize {
        self.errors.len().saturating_sub(1)
    }

    /// Communication rounds after `k` outer iterations.
    pub fn comms_cumulative(&self, k: usize) -> u64 {
        k as u64 * self.n_c as u64
    }

    /// Vector exchanges after `k` outer iterations (rounds times active slots).
    pub fn vector_comms_cumulative(&self, k: usize) -> u64 {
        self.comms_cumulative(k) * self.communicating_slots as u64
    }

    /// Local gradient evaluations after `k` outer iterations, summed over
    /// nodes. The initialization's evaluation is not counted.
    pub fn grads_cumulative(&self, k: usize) -> u64 {
        k as u64 * self.n_g as u64 * self.n as u64
    }

    pub fn final_error(&self) -> ErrorVector {
        *self.errors.last().expect("a trace holds at least the initial error")
    }

    /// Geometric mean of `||r_{k+1}|| / ||r_k||` over the last 20% of the
    /// iterations whose error is still above `1e-9 ||r_0||`. `None` when
    /// fewer than two such iterations exist.
    pub fn measured_contraction(&self) -> Option<f64> {
        let r0 = self.errors.first()?.norm();
        let floor = 1e-9 * r0;
        let usable = self.errors.iter().take_while(|e| e.norm() >= floor && e.norm() > 0.0).count();
        if usable < 3 {
            return None;
        }
        let steps = usable - 1;
        let window = (steps / 5).max(1);
        let end = usable - 1;
        let start = end - window;
        let ratio = self.errors[end].norm() / self.errors[start].norm();
        Some(ratio.powf(1.0 / window as f64))
    }

    /// CSV with columns `k, comms_cumulative, grads_cumulative, opt_err,
    /// x_consensus_err, y_consensus_err`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "k,comms_cumulative,grads_cumulative,opt_err,x_consensus_err,y_consensus_err")?;
        for (k, e) in self.errors.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                k,
                self.comms_cumulative(k),
                self.grads_cumulative(k),
                g17(e.opt_err),
                g17(e.x_consensus),
                g17(e.y_consensus)
            )?;
        }
        Ok(())
    }
}

/// Runs the iteration from `x0`, recording the error vector at every outer
/// boundary.
pub fn run(suite: &ObjectiveSuite, cfg: &GtaConfig, x0: &[f64]) -> Result<RunTrace, GtaError> {
    run_observed(suite, cfg, x0, |_, _| {})
}

/// Like [`run`], calling `observe` with the state and its error vector at
/// every outer boundary, including `k = 0`.
pub fn run_observed<F>(suite: &ObjectiveSuite, cfg: &GtaConfig, x0: &[f64], mut observe: F) -> Result<RunTrace, GtaError>
where
    F: FnMut(&GtaState, &ErrorVector),
{
    cfg.validate(suite)?;
    let started = Instant::now();
    let mut state = initialize(suite, x0)?;
    let mut errors = Vec::with_capacity(cfg.max_outer_iters + 1);
    loop {
        let e = error_vector(&state, suite);
        if !e.opt_err.is_finite() || e.opt_err > DIVERGENCE_THRESHOLD {
            return Err(GtaError::Diverged {
                k: state.k,
                opt_err: e.opt_err,
            });
        }
        observe(&state, &e);
        errors.push(e);
        let done = state.k >= cfg.max_outer_iters || cfg.stop_tol.is_some_and(|tol| e.opt_err <= tol);
        if done {
            break;
        }
        outer_iteration(&mut state, suite, cfg);
    }
    Ok(RunTrace {
        errors,
        alpha: cfg.alpha,
        n: suite.n(),
        n_c: cfg.strategy.n_c(),
        n_g: cfg.n_g,
        communicating_slots: cfg.strategy.communicating_slots(),
        elapsed: started.elapsed(),
    })
}
