//! Convergence theory: the `3 x 3` error-recursion matrices, their spectral
//! radii, step-size bounds and rate bounds.
//!
//! All functions take a [`SpectralParams`] record and are pure. `b_i` below
//! stands for `beta_i^{n_c}`.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::Serialize;
use thiserror::Error;

use crate::topology::{CommunicationStrategy, Method};

/// Convergence tolerance of the power iteration.
pub const POWER_TOL: f64 = 1e-12;
/// Iteration cap of the power iteration.
pub const POWER_MAX_ITERS: usize = 100_000;
/// Disagreement between power iteration and the cubic formula beyond which
/// the cubic result is used.
pub const CUBIC_AUTHORITY_TOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TheoryError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("step size {alpha:e} exceeds the admissible limit {limit:e}")]
    StepTooLarge { alpha: f64, limit: f64 },
    #[error("beta_{slot} = 1: communication matrix W_{slot} must describe a connected network")]
    Disconnected { slot: usize },
    #[error("beta = 0 (W = 11^T/n): use the fully connected analysis")]
    FullyConnected,
    #[error("{0} is not covered by this analysis")]
    UnsupportedMethod(Method),
    #[error("matrix must be square and entrywise nonnegative")]
    NotNonnegative,
    #[error("power iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("bound overflowed for n_g = {0}")]
    Overflow(u32),
}

/// How `||Z_1^{n_c} - I||_2` enters the matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Z1Policy {
    /// The constant 2 used by the specialized corollaries.
    Bound,
    /// `max_i |1 - lambda_i(W_1)^{n_c}|`.
    Exact,
}

impl FromStr for Z1Policy {
    type Err = TheoryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "bound" => Ok(Z1Policy::Bound),
            "exact" => Ok(Z1Policy::Exact),
            other => Err(TheoryError::InvalidParams(format!(
                "z1 policy must be bound or exact, got '{other}'"
            ))),
        }
    }
}

/// Inputs shared by every theory construction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SpectralParams {
    /// Base `beta_i` of the four communication matrices.
    pub betas: [f64; 4],
    pub n_c: u32,
    pub n_g: u32,
    pub alpha: f64,
    pub l: f64,
    pub mu: f64,
    pub n: usize,
    /// Value used for `||Z_1^{n_c} - I||_2`.
    pub z1_dev: f64,
}

impl SpectralParams {
    /// Parameters of a named method built on a mixing matrix with `beta`,
    /// with `||Z_1^{n_c} - I||_2` bounded by 2.
    #[allow(clippy::too_many_arguments)]
    pub fn for_method(method: Method, beta: f64, n_c: u32, n_g: u32, alpha: f64, l: f64, mu: f64, n: usize) -> Result<Self, TheoryError> {
        let betas = match method {
            Method::Gta1 => [beta, 1.0, beta, 1.0],
            Method::Gta2 => [beta, beta, beta, 1.0],
            Method::Gta3 => [beta; 4],
            Method::Custom => return Err(TheoryError::UnsupportedMethod(method)),
        };
        let p = SpectralParams {
            betas,
            n_c,
            n_g,
            alpha,
            l,
            mu,
            n,
            z1_dev: 2.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn from_strategy(strategy: &CommunicationStrategy, n_g: u32, alpha: f64, l: f64, mu: f64, z1: Z1Policy) -> Self {
        let z1_dev = match z1 {
            Z1Policy::Bound => 2.0,
            Z1Policy::Exact => strategy.z1_deviation(),
        };
        SpectralParams {
            betas: strategy.betas(),
            n_c: strategy.n_c(),
            n_g,
            alpha,
            l,
            mu,
            n: strategy.n(),
            z1_dev,
        }
    }

    pub fn kappa(&self) -> f64 {
        self.l / self.mu
    }

    /// `beta_i^{n_c}`.
    pub fn powered(&self) -> [f64; 4] {
        self.betas.map(|b| b.powi(self.n_c as i32))
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        SpectralParams { alpha, ..self }
    }

    pub fn with_n_c(self, n_c: u32) -> Self {
        SpectralParams { n_c, ..self }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |msg: String| Err(TheoryError::InvalidParams(msg));
        if !(self.mu > 0.0 && self.l >= self.mu && self.l.is_finite()) {
            return bad(format!("need 0 < mu <= L, got mu={}, L={}", self.mu, self.l));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return bad(format!("step size must be positive, got {}", self.alpha));
        }
        if self.betas.iter().any(|b| !(0.0..=1.0).contains(b)) {
            return bad(format!("betas must lie in [0, 1], got {:?}", self.betas));
        }
        if self.n == 0 || self.n_c == 0 || self.n_g == 0 {
            return bad("n, n_c and n_g must be positive".into());
        }
        if !(self.z1_dev >= 0.0 && self.z1_dev.is_finite()) {
            return bad(format!("z1_dev must be nonnegative, got {}", self.z1_dev));
        }
        Ok(())
    }

    fn require_connected(&self) -> Result<(), TheoryError> {
        for slot in [0, 2] {
            if self.betas[slot] >= 1.0 {
                return Err(TheoryError::Disconnected { slot: slot + 1 });
            }
        }
        Ok(())
    }
}

/// Which construction a [`TheoryMatrix`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MatrixLabel {
    AGeneral,
    A1,
    A2,
    A3,
    AMulti,
    E,
    BGeneral,
    B1,
    B2,
    B3,
    ReducedGta2,
    ReducedGta3,
}

impl fmt::Display for MatrixLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A small nonnegative matrix from the error recursion `r_{k+1} <= M r_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoryMatrix {
    pub m: DMatrix<f64>,
    pub label: MatrixLabel,
}

impl TheoryMatrix {
    pub fn spectral_radius(&self) -> Result<f64, TheoryError> {
        spectral_radius(&self.m)
    }

    /// `M r`.
    pub fn apply(&self, r: &[f64]) -> Vec<f64> {
        (0..self.m.nrows())
            .map(|i| (0..self.m.ncols()).map(|j| self.m[(i, j)] * r[j]).sum())
            .collect()
    }
}

fn check_alpha(alpha: f64, limit: f64) -> Result<(), TheoryError> {
    if alpha > limit {
        Err(TheoryError::StepTooLarge { alpha, limit })
    } else {
        Ok(())
    }
}

/// `A(n_c)` for a single computation step; requires `alpha <= 1/L`.
pub fn build_a(p: &SpectralParams) -> Result<TheoryMatrix, TheoryError> {
    p.validate()?;
    check_alpha(p.alpha, 1.0 / p.l)?;
    let [b1, b2, b3, b4] = p.powered();
    let (a, l, mu) = (p.alpha, p.l, p.mu);
    let sn = (p.n as f64).sqrt();
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(3, 3, &[
        1.0 - a * mu,         a * l / sn,                    0.0,
        0.0,                  b1,                            a * b2,
        sn * a * b4 * l * l,  b4 * l * (p.z1_dev + a * l),   b3 + a * b4 * l,
    ]);
    Ok(TheoryMatrix {
        m,
        label: MatrixLabel::AGeneral,
    })
}

fn specialized_label(method: Method, single: bool) -> Result<MatrixLabel, TheoryError> {
    Ok(match (method, single) {
        (Method::Gta1, true) => MatrixLabel::A1,
        (Method::Gta2, true) => MatrixLabel::A2,
        (Method::Gta3, true) => MatrixLabel::A3,
        (Method::Gta1, false) => MatrixLabel::B1,
        (Method::Gta2, false) => MatrixLabel::B2,
        (Method::Gta3, false) => MatrixLabel::B3,
        (Method::Custom, _) => return Err(TheoryError::UnsupportedMethod(method)),
    })
}

fn check_beta(beta: f64) -> Result<(), TheoryError> {
    if (0.0..1.0).contains(&beta) {
        Ok(())
    } else {
        Err(TheoryError::InvalidParams(format!("beta must lie in [0, 1), got {beta}")))
    }
}

/// `A_1`, `A_2` or `A_3` for a mixing matrix with `beta`, taking `n_c`,
/// `alpha`, `L`, `mu` and `n` from `p` and bounding `||Z_1^{n_c} - I||` by 2.
pub fn build_specialized_a(method: Method, beta: f64, p: &SpectralParams) -> Result<TheoryMatrix, TheoryError> {
    check_beta(beta)?;
    let label = specialized_label(method, true)?;
    let q = SpectralParams::for_method(method, beta, p.n_c, 1, p.alpha, p.l, p.mu, p.n)?;
    Ok(TheoryMatrix { label, ..build_a(&q)? })
}

/// `B_1`, `B_2` or `B_3` for a mixing matrix with `beta`, with `n_g` from `p`.
pub fn build_specialized_b(method: Method, beta: f64, p: &SpectralParams) -> Result<TheoryMatrix, TheoryError> {
    check_beta(beta)?;
    let label = specialized_label(method, false)?;
    let q = SpectralParams::for_method(method, beta, p.n_c, p.n_g, p.alpha, p.l, p.mu, p.n)?;
    Ok(TheoryMatrix {
        label,
        ..build_e_and_b(&q)?.b
    })
}

/// `delta_1 = 2 b_2 + b_1 (n_g - 2)`.
pub fn delta1(p: &SpectralParams) -> f64 {
    let [b1, b2, _, _] = p.powered();
    2.0 * b2 + b1 * (p.n_g as f64 - 2.0)
}

/// `delta_2 = 2 (b_4 ||Z_1^{n_c} - I|| + b_4 / n_g + b_3)`.
pub fn delta2(p: &SpectralParams) -> f64 {
    let [_, _, b3, b4] = p.powered();
    2.0 * (b4 * p.z1_dev + b4 / p.n_g as f64 + b3)
}

/// The multi-step matrices `A(n_c, n_g)`, `E(n_c, n_g)` and
/// `B = A + alpha L (n_g - 1) E`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStepMatrices {
    pub a: TheoryMatrix,
    pub e: TheoryMatrix,
    pub b: TheoryMatrix,
}

/// Requires `alpha <= 1/(n_g L)`. For `n_g = 1` both `A` and `B` equal
/// [`build_a`]'s output exactly.
pub fn build_e_and_b(p: &SpectralParams) -> Result<MultiStepMatrices, TheoryError> {
    p.validate()?;
    check_alpha(p.alpha, 1.0 / (p.n_g as f64 * p.l))?;
    let [b1, b2, b3, b4] = p.powered();
    let (a, l, mu) = (p.alpha, p.l, p.mu);
    let ng = p.n_g as f64;
    let sn = (p.n as f64).sqrt();
    let (d1, d2) = (delta1(p), delta2(p));

    #[rustfmt::skip]
    let e = DMatrix::from_row_slice(3, 3, &[
        a * l * ng,       a * l * ng / sn,  a * ng / sn,
        sn * a * l * d1,  a * l * d1,       a * d1,
        sn * l * d2,      l * d2,           d2,
    ]);
    let e = TheoryMatrix {
        m: e,
        label: MatrixLabel::E,
    };

    if p.n_g == 1 {
        let a1 = build_a(p)?;
        let a_multi = TheoryMatrix {
            label: MatrixLabel::AMulti,
            ..a1.clone()
        };
        return Ok(MultiStepMatrices {
            a: a_multi,
            e,
            b: TheoryMatrix {
                label: MatrixLabel::BGeneral,
                ..a1
            },
        });
    }

    let contraction = (1.0 - a * mu).powi(p.n_g as i32);
    #[rustfmt::skip]
    let am = DMatrix::from_row_slice(3, 3, &[
        contraction,          p.kappa() / sn * (1.0 - contraction),  0.0,
        0.0,                  b1,                                    a * ((ng - 1.0) * b1 + b2),
        sn * a * b4 * l * l,  b4 * l * (p.z1_dev + a * l),           b3 + a * b4 * l,
    ]);
    let b = &am + &e.m * (a * l * (ng - 1.0));
    Ok(MultiStepMatrices {
        a: TheoryMatrix {
            m: am,
            label: MatrixLabel::AMulti,
        },
        e,
        b: TheoryMatrix {
            m: b,
            label: MatrixLabel::BGeneral,
        },
    })
}

/// Whether the nonzero pattern of a square matrix is strongly connected.
pub fn is_irreducible(m: &DMatrix<f64>) -> bool {
    let n = m.nrows();
    if n <= 1 {
        return true;
    }
    let reaches_all = |forward: bool| {
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..n {
                let w = if forward { m[(i, j)] } else { m[(j, i)] };
                if w != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    };
    reaches_all(true) && reaches_all(false)
}

/// Spectral radius of a nonnegative square matrix.
///
/// Sizes 1 and 2 are solved in closed form. Larger matrices use power
/// iteration on `M + I` (the shift removes periodicity without changing the
/// Perron vector). For `3 x 3` input the result is cross-checked against the
/// roots of the characteristic cubic, which win on disagreement.
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64, TheoryError> {
    let n = m.nrows();
    if n == 0 || m.ncols() != n || m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(TheoryError::NotNonnegative);
    }
    match n {
        1 => Ok(m[(0, 0)]),
        2 => {
            let half_tr = 0.5 * (m[(0, 0)] + m[(1, 1)]);
            let half_diff = 0.5 * (m[(0, 0)] - m[(1, 1)]);
            // Discriminant is nonnegative for nonnegative input.
            Ok(half_tr + (half_diff * half_diff + m[(0, 1)] * m[(1, 0)]).sqrt())
        }
        3 => {
            let cubic = cubic_spectral_radius(m);
            match power_iteration(m) {
                Ok(rho) if (rho - cubic).abs() <= CUBIC_AUTHORITY_TOL => Ok(rho),
                _ => Ok(cubic),
            }
        }
        _ => power_iteration(m),
    }
}

fn power_iteration(m: &DMatrix<f64>) -> Result<f64, TheoryError> {
    let n = m.nrows();
    let shifted = m + DMatrix::identity(n, n);
    let mut v = vec![1.0 / n as f64; n];
    let mut prev = f64::NAN;
    let mut prev_delta = f64::NAN;
    for _ in 0..POWER_MAX_ITERS {
        let w: Vec<f64> = (0..n).map(|i| (0..n).map(|j| shifted[(i, j)] * v[j]).sum()).collect();
        // v sums to one, so the 1-norm of w estimates the shifted Perron root.
        let estimate: f64 = w.iter().sum();
        if estimate == 0.0 {
            return Ok(0.0);
        }
        // Collatz-Wielandt bracket, valid while the iterate is positive.
        if v.iter().all(|x| *x > 0.0) {
            let (lo, hi) = v
                .iter()
                .zip(&w)
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), (vi, wi)| (lo.min(wi / vi), hi.max(wi / vi)));
            if hi - lo <= POWER_TOL * hi {
                return Ok(0.5 * (lo + hi) - 1.0);
            }
        }
        // Otherwise estimate the remaining error from the geometric decay of
        // successive changes, and finish with an Aitken extrapolation.
        let delta = estimate - prev;
        let ratio = delta / prev_delta;
        if delta == 0.0 {
            return Ok(estimate - 1.0);
        }
        if ratio.abs() < 1.0 && delta.abs() / (1.0 - ratio.abs()) <= POWER_TOL * estimate {
            let accelerated = if ratio > 0.0 {
                estimate + delta * ratio / (1.0 - ratio)
            } else {
                estimate
            };
            return Ok(accelerated - 1.0);
        }
        prev_delta = delta;
        prev = estimate;
        v = w.into_iter().map(|x| x / estimate).collect();
    }
    Err(TheoryError::NoConvergence(POWER_MAX_ITERS))
}

/// Coefficients `(c2, c1, c0)` of `det(lambda I - M) = lambda^3 - c2 lambda^2 + c1 lambda - c0`.
fn char_poly3(m: &DMatrix<f64>) -> (f64, f64, f64) {
    let a = |i: usize, j: usize| m[(i, j)];
    let c2 = a(0, 0) + a(1, 1) + a(2, 2);
    let c1 = a(0, 0) * a(1, 1) - a(0, 1) * a(1, 0) + a(0, 0) * a(2, 2) - a(0, 2) * a(2, 0) + a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1);
    let c0 = a(0, 0) * (a(1, 1) * a(2, 2) - a(1, 2) * a(2, 1)) - a(0, 1) * (a(1, 0) * a(2, 2) - a(1, 2) * a(2, 0))
        + a(0, 2) * (a(1, 0) * a(2, 1) - a(1, 1) * a(2, 0));
    (c2, c1, c0)
}

/// Largest root modulus of the characteristic cubic of a `3 x 3` matrix.
fn cubic_spectral_radius(m: &DMatrix<f64>) -> f64 {
    let (c2, c1, c0) = char_poly3(m);
    let poly = |x: f64| ((x - c2) * x + c1) * x - c0;
    let dpoly = |x: f64| (3.0 * x - 2.0 * c2) * x + c1;

    let shift = c2 / 3.0;
    let p = c1 - c2 * c2 / 3.0;
    let q = -2.0 * c2 * c2 * c2 / 27.0 + c2 * c1 / 3.0 - c0;
    let disc = q * q / 4.0 + p * p * p / 27.0;
    let t = if disc < 0.0 {
        let r = 2.0 * (-p / 3.0).sqrt();
        let arg = (3.0 * q / (p * r)).clamp(-1.0, 1.0);
        r * (arg.acos() / 3.0).cos()
    } else {
        let s = disc.sqrt();
        (-q / 2.0 + s).cbrt() + (-q / 2.0 - s).cbrt()
    };
    let mut root = t + shift;
    for _ in 0..8 {
        let d = dpoly(root);
        if d == 0.0 {
            break;
        }
        let step = poly(root) / d;
        root -= step;
        if step.abs() <= f64::EPSILON * root.abs() {
            break;
        }
    }
    // Deflate: (x - root)(x^2 + a x + b).
    let a = root - c2;
    let b = c1 + root * a;
    let qd = a * a - 4.0 * b;
    let other = if qd < 0.0 {
        b.max(0.0).sqrt()
    } else {
        let s = qd.sqrt();
        ((-a + s) / 2.0).abs().max(((-a - s) / 2.0).abs())
    };
    root.abs().max(other)
}

/// Step-size bound for one computation step:
/// `min{1/L, (1 - b_3)/(L b_4), root term}`. Requires `beta_1, beta_3 < 1`.
pub fn step_bound_general(p: &SpectralParams) -> Result<f64, TheoryError> {
    p.validate()?;
    p.require_connected()?;
    Ok(general_terms(p).into_iter().fold(f64::INFINITY, f64::min))
}

/// The three terms of [`step_bound_general`].
pub fn general_terms(p: &SpectralParams) -> [f64; 3] {
    let [b1, b2, b3, b4] = p.powered();
    let (l, mu, kappa) = (p.l, p.mu, p.kappa());
    if b4 == 0.0 {
        return [1.0 / l, f64::INFINITY, f64::INFINITY];
    }
    let second = (1.0 - b3) / (l * b4);
    // (c/(2 b2 K)) (sqrt(1 + z) - 1) rewritten as 2D / (c K (1 + sqrt(1 + z)))
    // so that b2 -> 0 stays finite.
    let c = 1.0 - b1 + 2.0 * b2;
    let big_k = kappa * (l + mu);
    let d = (1.0 - b1) * (1.0 - b3) * (kappa + 1.0) / b4;
    let z = 4.0 * d * b2 / (c * c);
    let third = 2.0 * d / (c * big_k * (1.0 + (1.0 + z).sqrt()));
    [1.0 / l, second, third]
}

/// `sqrt(1 + x) - 1` without cancellation for small `x`.
fn sqrt1pm1(x: f64) -> f64 {
    x / ((1.0 + x).sqrt() + 1.0)
}

/// Method-specific step-size bound for one computation step, taking `n_c`,
/// `L` and `mu` from `p`.
pub fn step_bound_method(method: Method, beta: f64, p: &SpectralParams) -> Result<f64, TheoryError> {
    if beta == 0.0 {
        return Err(TheoryError::FullyConnected);
    }
    check_beta(beta)?;
    let b = beta.powi(p.n_c as i32);
    let (l, mu, kappa) = (p.l, p.mu, p.kappa());
    let k = kappa * (l + mu);
    Ok(match method {
        Method::Gta1 => {
            let ratio = (1.0 - b) / (3.0 - b);
            let root = (3.0 - b) / (2.0 * k) * sqrt1pm1(4.0 * (kappa + 1.0) * ratio * ratio);
            ((1.0 - b) / l).min(root)
        }
        Method::Gta2 => {
            let ratio = (1.0 - b) / (1.0 + b);
            // The b in the prefactor cancels against the one under the root.
            let x = 4.0 * (kappa + 1.0) * ratio * ratio;
            let root = (1.0 + b) / (2.0 * k) * x / ((1.0 + x * b).sqrt() + 1.0);
            ((1.0 - b) / l).min(root)
        }
        Method::Gta3 => {
            let ratio = (1.0 - b) / (1.0 + b);
            let root = (1.0 + b) / (2.0 * k * b) * sqrt1pm1(4.0 * (kappa + 1.0) * ratio * ratio);
            (1.0 / l).min((1.0 - b) / (l * b)).min(root)
        }
        Method::Custom => return Err(TheoryError::UnsupportedMethod(method)),
    })
}

/// The coefficients `(b_1, b_2, b_3)` of the quadratic in the multi-step
/// bound, named `c1, c2, c3` here to avoid clashing with `beta_i^{n_c}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MultiStepCoefficients {
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
}

pub fn multi_step_coefficients(p: &SpectralParams) -> MultiStepCoefficients {
    let [b1, b2, b3, b4] = p.powered();
    let (l, mu) = (p.l, p.mu);
    let ng = p.n_g as f64;
    let m1 = ng - 1.0;
    let (d1, d2) = (delta1(p), delta2(p));
    // Shared brackets.
    let tracking = m1 * (b1 + d1) + b2;
    let y_gain = b4 + m1 * d2;

    let s1 = mu * l * l * ng / 2.0 * tracking * y_gain;
    let s2 = l.powi(3) * ng * m1 * (d1 * (1.0 - b3) / 4.0 + y_gain * (1.0 - b1) / 4.0);
    let s3 = l * l * m1 * m1 * (l * d1 * (3.0 * b4 + m1 * d2) + d1 * (1.0 - b3) / 4.0);
    // Printed as (L n_g + (n_g - 1)); see the crate docs on this factor.
    let s4 = l * l * y_gain * (l * ng + m1) * tracking;

    MultiStepCoefficients {
        c1: s1 + s2 + s3 + s4,
        c2: mu * ng * b4 * l * tracking,
        c3: mu * ng / 2.0 * ((1.0 - b1) / 4.0) * ((1.0 - b3) / 4.0),
    }
}

/// The five terms of [`step_bound_multi`]; vacuous terms are `+inf`.
pub fn multi_terms(p: &SpectralParams) -> [f64; 5] {
    let [b1, _, b3, b4] = p.powered();
    let (l, mu) = (p.l, p.mu);
    let ng = p.n_g as f64;
    let m1 = ng - 1.0;
    let (d1, d2) = (delta1(p), delta2(p));
    let t1 = 1.0 / (ng * l);
    let t2 = if p.n_g == 1 {
        f64::INFINITY
    } else {
        mu / ((2.0 * l * l + mu * mu) * m1)
    };
    let t3 = if p.n_g == 1 || d1 == 0.0 {
        f64::INFINITY
    } else {
        (3.0 * (1.0 - b1) / (d1 * m1)).sqrt() / (2.0 * l)
    };
    let t4_den = 4.0 * l * (b4 + d2 * m1);
    let t4 = if t4_den == 0.0 { f64::INFINITY } else { 3.0 * (1.0 - b3) / t4_den };
    let MultiStepCoefficients { c1, c2, c3 } = multi_step_coefficients(p);
    // (-c2 + sqrt(c2^2 + 4 c1 c3)) / (2 c1) without cancellation.
    let t5 = 2.0 * c3 / (c2 + (c2 * c2 + 4.0 * c1 * c3).sqrt());
    [t1, t2, t3, t4, t5]
}

/// Step-size bound for `n_g >= 1` computation steps. Requires
/// `beta_1, beta_3 < 1`.
pub fn step_bound_multi(p: &SpectralParams) -> Result<f64, TheoryError> {
    p.validate()?;
    p.require_connected()?;
    let terms = multi_terms(p);
    if terms.iter().any(|t| t.is_nan()) || !multi_step_coefficients(p).c1.is_finite() {
        return Err(TheoryError::Overflow(p.n_g));
    }
    Ok(terms.into_iter().fold(f64::INFINITY, f64::min))
}

/// `lambda_hat` of the rate bound.
pub fn lambda_hat(p: &SpectralParams) -> f64 {
    let [b1, b2, b3, b4] = p.powered();
    let la = p.l * p.alpha;
    let diff = b1 - b3 - la * b4;
    (b1 + b3 + la * b4 + (diff * diff + 4.0 * b2 * b4 * la * la + 8.0 * la * b2 * b4).sqrt()) / 2.0
}

/// `lambda_u = max{1 - alpha mu / 2, lambda_hat + sqrt(2 alpha L kappa b_2 b_4)}`,
/// an upper bound on `rho(A(n_c))` for `alpha <= 1/L`.
pub fn rate_bound_lambda_u(p: &SpectralParams) -> Result<f64, TheoryError> {
    p.validate()?;
    check_alpha(p.alpha, 1.0 / p.l)?;
    let [_, b2, _, b4] = p.powered();
    let radical = (2.0 * p.alpha * p.l * p.kappa() * b2 * b4).sqrt();
    Ok((1.0 - p.alpha * p.mu / 2.0).max(lambda_hat(p) + radical))
}

/// Per-method rate bound: `exact` evaluates the closed form of
/// `lambda_hat + sqrt(...)` for the method, `simplified` the looser
/// `2.5 + sqrt(2 kappa ...)` form. Both include the `1 - alpha mu / 2` floor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MethodRateBound {
    pub exact: f64,
    pub simplified: f64,
}

pub fn method_rate_bound(method: Method, beta: f64, p: &SpectralParams) -> Result<MethodRateBound, TheoryError> {
    check_beta(beta)?;
    check_alpha(p.alpha, 1.0 / p.l)?;
    let b = beta.powi(p.n_c as i32);
    let la = p.l * p.alpha;
    let sla = la.sqrt();
    let kappa = p.kappa();
    let (exact, simplified) = match method {
        Method::Gta1 => (
            b + sla / 2.0 * (sla + 2.0 * (2.0 * kappa).sqrt() + (8.0 + 5.0 * la).sqrt()),
            b + sla * (2.5 + (2.0 * kappa).sqrt()),
        ),
        Method::Gta2 => (
            b + sla / 2.0 * (sla + 2.0 * (2.0 * kappa * b).sqrt() + (8.0 * b + 4.0 * la * b + la).sqrt()),
            b + sla * (2.5 + (2.0 * kappa * b).sqrt()),
        ),
        Method::Gta3 => (
            b * (1.0 + sla / 2.0 * (sla + 2.0 * (2.0 * kappa).sqrt() + (8.0 + 5.0 * la).sqrt())),
            b * (1.0 + sla * (2.5 + (2.0 * kappa).sqrt())),
        ),
        Method::Custom => return Err(TheoryError::UnsupportedMethod(method)),
    };
    let floor = 1.0 - p.alpha * p.mu / 2.0;
    Ok(MethodRateBound {
        exact: floor.max(exact),
        simplified: floor.max(simplified),
    })
}

/// Result of the fully connected analysis.
#[derive(Debug, Clone, PartialEq)]
pub enum FullyConnectedRate {
    /// Contraction factor of the optimization error.
    Scalar(f64),
    /// Recursion on `(||xbar - x*||, ||y - ybar||)`.
    Matrix(TheoryMatrix),
}

impl FullyConnectedRate {
    pub fn rate(&self) -> Result<f64, TheoryError> {
        match self {
            FullyConnectedRate::Scalar(r) => Ok(*r),
            FullyConnectedRate::Matrix(m) => m.spectral_radius(),
        }
    }
}

/// The step-size limit of the fully connected analysis (strict for
/// `n_g > 1`).
pub fn fully_connected_step_limit(p: &SpectralParams) -> f64 {
    let (l, mu) = (p.l, p.mu);
    if p.n_g == 1 {
        1.0 / l
    } else {
        let ng = p.n_g as f64;
        (mu / ((2.0 * l * l + mu * mu) * (ng - 1.0))).min(1.0 / (l * ng))
    }
}

/// Rates for GTA-2 and GTA-3 over `W = 11^T/n` (`beta = 0`).
pub fn fully_connected_rates(method: Method, p: &SpectralParams) -> Result<FullyConnectedRate, TheoryError> {
    p.validate()?;
    let limit = fully_connected_step_limit(p);
    let admissible = if p.n_g == 1 { p.alpha <= limit } else { p.alpha < limit };
    if !admissible {
        return Err(TheoryError::StepTooLarge { alpha: p.alpha, limit });
    }
    let (a, l, mu) = (p.alpha, p.l, p.mu);
    let ng = p.n_g as f64;
    let scalar = (1.0 - a * mu).powi(p.n_g as i32) + a * a * l * l * ng * (ng - 1.0);
    match method {
        Method::Gta3 => Ok(FullyConnectedRate::Scalar(scalar)),
        Method::Gta2 if p.n_g == 1 => Ok(FullyConnectedRate::Scalar(1.0 - a * mu)),
        Method::Gta2 => {
            let sn = (p.n as f64).sqrt();
            let dt = 1.0 + 2.0 * (ng - 1.0) * (2.0 + 1.0 / ng);
            #[rustfmt::skip]
            let m = DMatrix::from_row_slice(2, 2, &[
                scalar,              a * a * l * ng * (ng - 1.0) / sn,
                sn * a * l * l * dt, a * l * dt,
            ]);
            Ok(FullyConnectedRate::Matrix(TheoryMatrix {
                m,
                label: MatrixLabel::ReducedGta2,
            }))
        }
        other => Err(TheoryError::UnsupportedMethod(other)),
    }
}

/// One point of a monotonicity/ordering sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridPoint {
    pub beta: f64,
    pub alpha: f64,
    pub l: f64,
    pub mu: f64,
    pub n: usize,
    pub n_g: u32,
    /// Increasing communication counts to compare.
    pub n_cs: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub point: GridPoint,
    pub kind: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub points: usize,
    pub comparisons: usize,
    pub violations: Vec<Violation>,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Relative slack absorbing rounding in the spectral radii.
const ORDER_SLACK: f64 = 1e-10;

/// Checks, for each point, that `rho` of the specialized matrices (`A_i` for
/// `n_g = 1`, `B_i` otherwise) does not increase with `n_c` and that
/// `rho_1 >= rho_2 >= rho_3` at every `n_c`.
pub fn monotonicity_report(grid: &[GridPoint]) -> Result<MonotonicityReport, TheoryError> {
    let mut report = MonotonicityReport {
        points: grid.len(),
        ..Default::default()
    };
    for point in grid {
        let mut rhos = Vec::with_capacity(point.n_cs.len());
        for &n_c in &point.n_cs {
            let mut row = [0.0; 3];
            for (slot, method) in Method::NAMED.into_iter().enumerate() {
                let p = SpectralParams::for_method(method, point.beta, n_c, point.n_g, point.alpha, point.l, point.mu, point.n)?;
                row[slot] = build_e_and_b(&p)?.b.spectral_radius()?;
            }
            for slot in 0..2 {
                report.comparisons += 1;
                if row[slot] < row[slot + 1] - ORDER_SLACK * row[slot + 1] {
                    report.violations.push(Violation {
                        point: point.clone(),
                        kind: format!(
                            "n_c={n_c}: rho(GTA-{}) = {} < rho(GTA-{}) = {}",
                            slot + 1,
                            row[slot],
                            slot + 2,
                            row[slot + 1]
                        ),
                    });
                }
            }
            rhos.push(row);
        }
        for w in 1..rhos.len() {
            let (prev, cur) = (rhos[w - 1], rhos[w]);
            for (slot, (before, after)) in prev.into_iter().zip(cur).enumerate() {
                report.comparisons += 1;
                if after > before * (1.0 + ORDER_SLACK) {
                    report.violations.push(Violation {
                        point: point.clone(),
                        kind: format!(
                            "GTA-{}: rho rose from {} (n_c={}) to {} (n_c={})",
                            slot + 1,
                            before,
                            point.n_cs[w - 1],
                            after,
                            point.n_cs[w]
                        ),
                    });
                }
            }
        }
    }
    Ok(report)
}

/// Whether `r_next <= M r + slack` holds componentwise.
pub fn satisfies_recursion(m: &TheoryMatrix, r: &[f64], r_next: &[f64], slack: f64) -> bool {
    m.apply(r).iter().zip(r_next).all(|(bound, got)| *got <= bound + slack)
}
