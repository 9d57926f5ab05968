//! Score-function kernels.
//!
//! Every score function here maps a row `x` to `S_j = f(x_j) / Σ_i f(x_i)`
//! for some element-wise map `f`. Softmax is the case `f = exp`; the
//! periodic alternatives swap `exp` for sine-based maps whose derivative
//! never flattens out on the whole real line.
//!
//! The soft-margin kinds are the exception: the margin `m` shifts only the
//! numerator term, so row `j` is normalized by
//! `f(x_j - m) + Σ_{i≠j} f(x_i)`. With `m = 0` they coincide with their
//! base kinds.

use std::f64::consts::{FRAC_PI_4, PI};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Rows whose normalizer falls below this magnitude are rejected.
pub const DENOMINATOR_EPS: f64 = 1e-8;
/// Minimum allowed `1 - sin x` for Siren-max.
pub const POLE_EPS: f64 = 1e-6;

/// Default phase for Sin2-max-shifted.
pub const DEFAULT_PHASE: f64 = FRAC_PI_4;
/// Default Taylor expansion order (the classic second-order Taylor softmax).
pub const DEFAULT_TAYLOR_ORDER: u32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
pub enum ScoreError {
    #[error("normalizer {value:e} for row element {index} is too close to zero")]
    DenominatorNearZero { index: usize, value: f64 },
    #[error("input {value} at index {index} is within the pole guard of siren-max")]
    PoleProximity { index: usize, value: f64 },
    #[error("non-finite input {value} at index {index}")]
    NonFiniteInput { index: usize, value: f64 },
    #[error("score functions need at least 2 elements, got {dim}")]
    TooFewElements { dim: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KindError {
    #[error("unknown score function `{0}`")]
    UnknownName(String),
    #[error("taylor order must be at least 1")]
    ZeroOrder,
    #[error("margin must be finite and non-negative, got {0}")]
    BadMargin(f64),
    #[error("phase must be finite, got {0}")]
    BadPhase(f64),
}

/// One of the eleven supported score functions, with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScoreFunctionKind {
    Softmax,
    TaylorSoftmax { order: u32 },
    SmSoftmax { margin: f64 },
    SmTaylorSoftmax { order: u32, margin: f64 },
    SinMaxConstant,
    SinMax,
    CosMax,
    Sin2Max,
    Sin2MaxShifted { phase: f64 },
    SinSoftmax,
    SirenMax,
}

/// Registry of CLI names, in a fixed order.
pub const KIND_NAMES: [&str; 11] = [
    "softmax",
    "taylor-softmax",
    "sm-softmax",
    "sm-taylor-softmax",
    "sin-max-constant",
    "sin-max",
    "cos-max",
    "sin2-max",
    "sin2-max-shifted",
    "sin-softmax",
    "siren-max",
];

impl ScoreFunctionKind {
    pub fn taylor(order: u32) -> Result<Self, KindError> {
        if order == 0 {
            return Err(KindError::ZeroOrder);
        }
        Ok(Self::TaylorSoftmax { order })
    }

    pub fn soft_margin(margin: f64) -> Result<Self, KindError> {
        check_margin(margin)?;
        Ok(Self::SmSoftmax { margin })
    }

    pub fn soft_margin_taylor(order: u32, margin: f64) -> Result<Self, KindError> {
        if order == 0 {
            return Err(KindError::ZeroOrder);
        }
        check_margin(margin)?;
        Ok(Self::SmTaylorSoftmax { order, margin })
    }

    pub fn sin2_shifted(phase: f64) -> Result<Self, KindError> {
        if !phase.is_finite() {
            return Err(KindError::BadPhase(phase));
        }
        Ok(Self::Sin2MaxShifted { phase })
    }

    /// All eleven kinds with default parameters (order 2, margin 0, phase π/4).
    pub fn all() -> [ScoreFunctionKind; 11] {
        KIND_NAMES.map(|name| name.parse().expect("registry names parse"))
    }

    /// Kebab-case registry name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Softmax => KIND_NAMES[0],
            Self::TaylorSoftmax { .. } => KIND_NAMES[1],
            Self::SmSoftmax { .. } => KIND_NAMES[2],
            Self::SmTaylorSoftmax { .. } => KIND_NAMES[3],
            Self::SinMaxConstant => KIND_NAMES[4],
            Self::SinMax => KIND_NAMES[5],
            Self::CosMax => KIND_NAMES[6],
            Self::Sin2Max => KIND_NAMES[7],
            Self::Sin2MaxShifted { .. } => KIND_NAMES[8],
            Self::SinSoftmax => KIND_NAMES[9],
            Self::SirenMax => KIND_NAMES[10],
        }
    }

    /// True for the kinds whose element map has period 2π.
    pub fn is_periodic(&self) -> bool {
        matches!(
            self,
            Self::SinMaxConstant
                | Self::SinMax
                | Self::CosMax
                | Self::Sin2Max
                | Self::Sin2MaxShifted { .. }
                | Self::SinSoftmax
                | Self::SirenMax
        )
    }

    /// True when `f(x) ≥ 0` on the whole real line.
    pub fn is_nonnegative(&self) -> bool {
        match self {
            Self::TaylorSoftmax { order } | Self::SmTaylorSoftmax { order, .. } => order % 2 == 0,
            Self::SinMax | Self::CosMax => false,
            _ => true,
        }
    }

    fn margin(&self) -> f64 {
        match self {
            Self::SmSoftmax { margin } | Self::SmTaylorSoftmax { margin, .. } => *margin,
            _ => 0.0,
        }
    }

    /// Element map without the numerator margin.
    fn base(&self, x: f64) -> f64 {
        match *self {
            Self::Softmax | Self::SmSoftmax { .. } => x.exp(),
            Self::TaylorSoftmax { order } | Self::SmTaylorSoftmax { order, .. } => {
                taylor_exp(x, order)
            }
            Self::SinMaxConstant => 1.0 + x.sin(),
            Self::SinMax => x.sin(),
            Self::CosMax => x.cos(),
            Self::Sin2Max => x.sin().powi(2),
            Self::Sin2MaxShifted { phase } => (x + phase).sin().powi(2),
            Self::SinSoftmax => x.sin().exp(),
            Self::SirenMax => {
                let s = x.sin();
                (1.0 + s) / (2.0 - 2.0 * s)
            }
        }
    }

    fn base_derivative(&self, x: f64) -> f64 {
        match *self {
            Self::Softmax | Self::SmSoftmax { .. } => x.exp(),
            Self::TaylorSoftmax { order } | Self::SmTaylorSoftmax { order, .. } => {
                taylor_exp(x, order - 1)
            }
            Self::SinMaxConstant | Self::SinMax => x.cos(),
            Self::CosMax => -x.sin(),
            Self::Sin2Max => (2.0 * x).sin(),
            Self::Sin2MaxShifted { phase } => (2.0 * (x + phase)).sin(),
            Self::SinSoftmax => x.sin().exp() * x.cos(),
            Self::SirenMax => {
                let one_minus = 1.0 - x.sin();
                x.cos() / (one_minus * one_minus)
            }
        }
    }

    fn check_input(&self, index: usize, x: f64) -> Result<(), ScoreError> {
        if !x.is_finite() {
            return Err(ScoreError::NonFiniteInput { index, value: x });
        }
        if matches!(self, Self::SirenMax) && (1.0 - x.sin()).abs() < POLE_EPS {
            return Err(ScoreError::PoleProximity { index, value: x });
        }
        Ok(())
    }
}

fn check_margin(margin: f64) -> Result<(), KindError> {
    if margin.is_finite() && margin >= 0.0 {
        Ok(())
    } else {
        Err(KindError::BadMargin(margin))
    }
}

/// Truncated exponential series `Σ_{i=0}^{n} x^i / i!`.
fn taylor_exp(x: f64, order: u32) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for i in 1..=order {
        term *= x / f64::from(i);
        sum += term;
    }
    sum
}

impl fmt::Display for ScoreFunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScoreFunctionKind {
    type Err = KindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "softmax" => Self::Softmax,
            "taylor-softmax" => Self::TaylorSoftmax { order: DEFAULT_TAYLOR_ORDER },
            "sm-softmax" => Self::SmSoftmax { margin: 0.0 },
            "sm-taylor-softmax" => Self::SmTaylorSoftmax { order: DEFAULT_TAYLOR_ORDER, margin: 0.0 },
            "sin-max-constant" => Self::SinMaxConstant,
            "sin-max" => Self::SinMax,
            "cos-max" => Self::CosMax,
            "sin2-max" => Self::Sin2Max,
            "sin2-max-shifted" => Self::Sin2MaxShifted { phase: DEFAULT_PHASE },
            "sin-softmax" => Self::SinSoftmax,
            "siren-max" => Self::SirenMax,
            other => return Err(KindError::UnknownName(other.to_string())),
        })
    }
}

/// Intermediate values, their sum and the normalized scores for one row.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEval {
    pub intermediates: Vec<f64>,
    pub sum: f64,
    pub scores: Vec<f64>,
}

impl ScoreEval {
    pub fn dim(&self) -> usize {
        self.scores.len()
    }
}

/// Dense `d × d` matrix of `∂S_j/∂x_k`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianMatrix {
    dim: usize,
    entries: Vec<f64>,
}

impl JacobianMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: vec![0.0; dim * dim] }
    }

    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut entries = Vec::with_capacity(dim * dim);
        for j in 0..dim {
            for k in 0..dim {
                entries.push(f(j, k));
            }
        }
        Self { dim, entries }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.dim + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.dim + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.dim..(row + 1) * self.dim]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.get(j, j)).collect()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.dim];
        for j in 0..self.dim {
            for (k, s) in sums.iter_mut().enumerate() {
                *s += self.get(j, k);
            }
        }
        sums
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &JacobianMatrix) -> JacobianMatrix {
        assert_eq!(self.dim, rhs.dim, "jacobian dimensions differ");
        let d = self.dim;
        let mut out = JacobianMatrix::zeros(d);
        for i in 0..d {
            for l in 0..d {
                let a = self.get(i, l);
                if a == 0.0 {
                    continue;
                }
                for k in 0..d {
                    out.entries[i * d + k] += a * rhs.get(l, k);
                }
            }
        }
        out
    }

    /// Vector-Jacobian product `vᵀ · J`.
    pub fn vjp(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for (j, &vj) in v.iter().enumerate() {
            if vj == 0.0 {
                continue;
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o += vj * self.get(j, k);
            }
        }
        out
    }

    /// Largest entry-wise error `|a - b| / max(1, |a|, |b|)`.
    ///
    /// Entries of magnitude below one are compared absolutely, larger ones
    /// relatively.
    pub fn max_rel_error(&self, other: &JacobianMatrix) -> f64 {
        assert_eq!(self.dim, other.dim, "jacobian dimensions differ");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| rel_error(*a, *b))
            .fold(0.0, f64::max)
    }
}

/// Mixed absolute/relative error used by every gradient check in the crate.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// `f(x)`; for the soft-margin kinds this is the margin-shifted numerator map.
pub fn intermediate(kind: ScoreFunctionKind, x: f64) -> Result<f64, ScoreError> {
    kind.check_input(0, x)?;
    Ok(kind.base(x - kind.margin()))
}

/// `f′(x)`, the derivative of [`intermediate`].
pub fn intermediate_derivative(kind: ScoreFunctionKind, x: f64) -> Result<f64, ScoreError> {
    kind.check_input(0, x)?;
    Ok(kind.base_derivative(x - kind.margin()))
}

/// Per-row quantities shared by [`scores`] and [`jacobian`].
struct RowTerms {
    /// Unshifted `f(x_i)`.
    base: Vec<f64>,
    base_sum: f64,
    /// Numerator `f(x_j - m)` and its derivative.
    numer: Vec<f64>,
    numer_deriv: Vec<f64>,
    /// `numer_j + Σ_{i≠j} base_i`.
    denom: Vec<f64>,
}

fn row_terms(kind: ScoreFunctionKind, x: &[f64], with_derivs: bool) -> Result<RowTerms, ScoreError> {
    if x.len() < 2 {
        return Err(ScoreError::TooFewElements { dim: x.len() });
    }
    for (i, &xi) in x.iter().enumerate() {
        kind.check_input(i, xi)?;
    }
    let base: Vec<f64> = x.iter().map(|&xi| kind.base(xi)).collect();
    let base_sum: f64 = base.iter().sum();
    let margin = kind.margin();
    let numer: Vec<f64> = if margin == 0.0 {
        base.clone()
    } else {
        x.iter().map(|&xi| kind.base(xi - margin)).collect()
    };
    let denom: Vec<f64> = if margin == 0.0 {
        vec![base_sum; x.len()]
    } else {
        numer.iter().zip(&base).map(|(n, b)| n + (base_sum - b)).collect()
    };
    for (index, &value) in denom.iter().enumerate() {
        if value.abs() < DENOMINATOR_EPS || !value.is_finite() {
            return Err(ScoreError::DenominatorNearZero { index, value });
        }
    }
    let numer_deriv = if with_derivs {
        x.iter().map(|&xi| kind.base_derivative(xi - margin)).collect()
    } else {
        Vec::new()
    };
    Ok(RowTerms { base, base_sum, numer, numer_deriv, denom })
}

/// Normalized scores for one row.
pub fn scores(kind: ScoreFunctionKind, x: &[f64]) -> Result<ScoreEval, ScoreError> {
    let terms = row_terms(kind, x, false)?;
    let scores = terms.numer.iter().zip(&terms.denom).map(|(n, d)| n / d).collect();
    Ok(ScoreEval { intermediates: terms.base, sum: terms.base_sum, scores })
}

/// Analytic Jacobian `∂S_j/∂x_k`.
///
/// Diagonal: `M_j f′(x_j) / (M_j + f(x_j))²` with `M_j = Σ_{i≠j} f(x_i)`.
/// Off-diagonal: `-f(x_j) f′(x_k) / D_j²` (quotient rule).
pub fn jacobian(kind: ScoreFunctionKind, x: &[f64]) -> Result<JacobianMatrix, ScoreError> {
    let terms = row_terms(kind, x, true)?;
    let d = x.len();
    // Off-diagonal terms need the unshifted derivative of the other elements.
    let margin = kind.margin();
    let base_deriv: Vec<f64> = if margin == 0.0 {
        terms.numer_deriv.clone()
    } else {
        x.iter().map(|&xi| kind.base_derivative(xi)).collect()
    };
    Ok(JacobianMatrix::from_fn(d, |j, k| {
        let denom_sq = terms.denom[j] * terms.denom[j];
        if j == k {
            let off_sum = terms.base_sum - terms.base[j];
            off_sum * terms.numer_deriv[j] / denom_sq
        } else {
            -terms.numer[j] * base_deriv[k] / denom_sq
        }
    }))
}

/// Central finite-difference Jacobian, one column per perturbed input.
pub fn finite_diff_jacobian(
    kind: ScoreFunctionKind,
    x: &[f64],
    h: f64,
) -> Result<JacobianMatrix, ScoreError> {
    scores(kind, x)?;
    let d = x.len();
    let mut out = JacobianMatrix::zeros(d);
    let mut probe = x.to_vec();
    for k in 0..d {
        probe[k] = x[k] + h;
        let plus = scores(kind, &probe)?.scores;
        probe[k] = x[k] - h;
        let minus = scores(kind, &probe)?.scores;
        probe[k] = x[k];
        for j in 0..d {
            out.set(j, k, (plus[j] - minus[j]) / (2.0 * h));
        }
    }
    Ok(out)
}

/// Step used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Outcome of comparing [`jacobian`] with [`finite_diff_jacobian`] over
/// random rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub kind: ScoreFunctionKind,
    pub dim: usize,
    pub trials: usize,
    /// Draws rejected by a guard.
    pub skipped: usize,
    /// Draws whose error exceeded the tolerance.
    pub failed: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failed == 0
    }
}

/// Checks the analytic Jacobian against central differences on `trials`
/// rows drawn from `N(0, 1)`. The draw stream depends on `seed`, the kind's
/// registry position and `dim`, so each kind sees the same rows whether it
/// is checked alone or with the others.
pub fn gradient_check(kind: ScoreFunctionKind, dim: usize, trials: usize, seed: u64, tol: f64) -> Result<GradcheckReport, ScoreError> {
    if dim < 2 {
        return Err(ScoreError::TooFewElements { dim });
    }
    let index = KIND_NAMES.iter().position(|n| *n == kind.name()).expect("registered kind");
    let mut rng = crate::rng::substream(seed, (index * 1000 + dim) as u64);
    let mut report = GradcheckReport { kind, dim, trials, skipped: 0, failed: 0, max_rel_error: 0.0, tolerance: tol };
    for _ in 0..trials {
        let x = crate::rng::normal_vec(&mut rng, dim, 1.0);
        let (Ok(analytic), Ok(numeric)) = (jacobian(kind, &x), finite_diff_jacobian(kind, &x, GRADCHECK_STEP)) else {
            report.skipped += 1;
            continue;
        };
        let err = analytic.max_rel_error(&numeric);
        if err > tol {
            report.failed += 1;
        }
        report.max_rel_error = report.max_rel_error.max(err);
    }
    Ok(report)
}

/// Diagonal gradient `M f′(x) / (M + f(x))²` with the off-sum held at `m_off`.
pub fn diagonal_gradient_at(kind: ScoreFunctionKind, x: f64, m_off: f64) -> Result<f64, ScoreError> {
    let f = intermediate(kind, x)?;
    let df = intermediate_derivative(kind, x)?;
    let denom = m_off + f;
    if denom.abs() < DENOMINATOR_EPS || !denom.is_finite() {
        return Err(ScoreError::DenominatorNearZero { index: 0, value: denom });
    }
    Ok(m_off * df / (denom * denom))
}

/// Period of the diagonal-gradient curve for periodic kinds.
pub fn period(kind: ScoreFunctionKind) -> Option<f64> {
    match kind {
        ScoreFunctionKind::Sin2Max | ScoreFunctionKind::Sin2MaxShifted { .. } => Some(PI),
        k if k.is_periodic() => Some(2.0 * PI),
        _ => None,
    }
}
