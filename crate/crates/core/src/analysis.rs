//! Stability analysis of score functions.
//!
//! Closed forms for gradient extrema, the band-pass view of the diagonal
//! gradient, Monte-Carlo saturation and submersion measurements, row
//! pre-normalization with its Jacobian, and the curve series that back
//! every gradient plot.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::rng;
use crate::scorefn::{self, diagonal_gradient_at, JacobianMatrix, ScoreError, ScoreEval, ScoreFunctionKind};

/// Rows with population variance at or below this are not normalized.
pub const VARIANCE_EPS: f64 = 1e-12;
/// Grid step of the coarse extremum search.
pub const GRID_STEP: f64 = 1e-4;
/// Target bracket width of the golden-section refinement.
pub const REFINE_TOL: f64 = 1e-10;

const COSMAX_POLE_EPS: f64 = 1e-8;
const GAIN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("row variance {variance:e} is too small to normalize")]
    DegenerateRow { variance: f64 },
    #[error("arccos argument {0} lies outside [-1, 1]")]
    Domain(f64),
    #[error("off-sum {0} sits on a pole of the cos-max extremum interval")]
    Pole(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn invalid(msg: impl Into<String>) -> AnalysisError {
    AnalysisError::InvalidArgument(msg.into())
}

// ---------------------------------------------------------------------------
// Numeric extremum search

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Goal {
    Max,
    Min,
    AbsMax,
}

impl Goal {
    fn objective(self, v: f64) -> f64 {
        match self {
            Goal::Max => v,
            Goal::Min => -v,
            Goal::AbsMax => v.abs(),
        }
    }
}

/// Location and value of a numerically found extremum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Found {
    pub x: f64,
    pub value: f64,
}

/// Coarse grid search over `[lo, hi]` followed by golden-section refinement
/// around the best grid point. `f` returns `None` at guarded points, which
/// are skipped. Returns `None` when every grid point is guarded.
pub fn search_extremum(f: impl Fn(f64) -> Option<f64>, lo: f64, hi: f64, goal: Goal) -> Option<Found> {
    let score = |x: f64| f(x).filter(|v| v.is_finite()).map(|v| goal.objective(v));
    let steps = ((hi - lo) / GRID_STEP).ceil() as usize;
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=steps {
        let x = (lo + i as f64 * GRID_STEP).min(hi);
        if let Some(s) = score(x) {
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((x, s));
            }
        }
    }
    let (x0, s0) = best?;

    let objective = |x: f64| score(x).unwrap_or(f64::NEG_INFINITY);
    let mut a = (x0 - GRID_STEP).max(lo);
    let mut b = (x0 + GRID_STEP).min(hi);
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let mut fc = objective(c);
    let mut fd = objective(d);
    while b - a > REFINE_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = objective(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = objective(d);
        }
    }
    let xm = 0.5 * (a + b);
    let (x, _) = [(x0, s0), (xm, objective(xm))]
        .into_iter()
        .fold((x0, f64::NEG_INFINITY), |acc, p| if p.1 > acc.1 { p } else { acc });
    Some(Found { x, value: f(x).expect("chosen point is unguarded") })
}

/// Extremum of the diagonal gradient of `kind` over `[lo, hi]` with the
/// off-sum held at `m_off`.
pub fn diagonal_extremum(kind: ScoreFunctionKind, m_off: f64, lo: f64, hi: f64, goal: Goal) -> Option<Found> {
    search_extremum(|x| diagonal_gradient_at(kind, x, m_off).ok(), lo, hi, goal)
}

// ---------------------------------------------------------------------------
// Closed forms

/// Largest diagonal gradient softmax can produce, attained when `e^{x_j}`
/// equals the off-sum.
pub fn softmax_extreme_gradient() -> f64 {
    0.25
}

/// Grid-and-refine maximum of the softmax diagonal gradient over `[-20, 20]`.
pub fn softmax_numeric_extreme_gradient(m_off: f64) -> Option<f64> {
    diagonal_extremum(ScoreFunctionKind::Softmax, m_off, -20.0, 20.0, Goal::Max).map(|f| f.value)
}

/// Interval bracketing the cos-max gradient extremum at a fixed off-sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExtremumInterval {
    pub lower: f64,
    pub upper: f64,
    pub m_value: f64,
    /// Set for `0 < |M| < 1`, where `M + cos x` crosses zero and the
    /// gradient is unbounded in both directions.
    pub unbounded: bool,
}

impl ExtremumInterval {
    pub fn contains(&self, value: f64, tol: f64) -> bool {
        value >= self.lower - tol && value <= self.upper + tol
    }
}

/// `[M²/(2M+2) − M/2, M²/(2M−2) − M/2]`.
pub fn cosmax_extremum_interval(m_off: f64) -> Result<ExtremumInterval, AnalysisError> {
    if !m_off.is_finite() {
        return Err(invalid("off-sum must be finite"));
    }
    if (m_off - 1.0).abs() < COSMAX_POLE_EPS || (m_off + 1.0).abs() < COSMAX_POLE_EPS {
        return Err(AnalysisError::Pole(m_off));
    }
    if m_off != 0.0 && m_off.abs() < 1.0 {
        return Ok(ExtremumInterval {
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            m_value: m_off,
            unbounded: true,
        });
    }
    let half = m_off / 2.0;
    let m2 = m_off * m_off;
    Ok(ExtremumInterval {
        lower: m2 / (2.0 * m_off + 2.0) - half,
        upper: m2 / (2.0 * m_off - 2.0) - half,
        m_value: m_off,
        unbounded: false,
    })
}

/// Location in `(0, π/2)` of the Sin2-max diagonal-gradient maximum:
/// `½ arccos(−½(2M + 1 − √(8 + (2M + 1)²)))`.
pub fn sin2max_extremum_location(m_off: f64) -> Result<f64, AnalysisError> {
    if !m_off.is_finite() {
        return Err(invalid("off-sum must be finite"));
    }
    let a = 2.0 * m_off + 1.0;
    let arg = -0.5 * (a - (8.0 + a * a).sqrt());
    if !(-1.0..=1.0).contains(&arg) {
        return Err(AnalysisError::Domain(arg));
    }
    if m_off <= 0.0 {
        return Err(invalid("off-sum must be positive"));
    }
    Ok(0.5 * arg.acos())
}

/// Band-pass gain `g(M) = M / (M + f)²` coupling `f′(x_j)` to `∂S_j/∂x_j`.
pub fn filter_gain(m_off: f64, f_x: f64) -> Result<f64, AnalysisError> {
    let denom = m_off + f_x;
    if denom.abs() < GAIN_EPS {
        return Err(ScoreError::DenominatorNearZero { index: 0, value: denom }.into());
    }
    Ok(m_off / (denom * denom))
}

/// `(1 + sin x_j) / d`: expected Sin-max-constant score when the off-sum
/// averages to `-sin x_j`.
pub fn sinmax_constant_expected_score(d: usize, x_j: f64) -> f64 {
    assert!(d >= 2, "dimension must be at least 2");
    (1.0 + x_j.sin()) / d as f64
}

/// `(d − 1 − sin x_j) cos x_j / d²`.
pub fn sinmax_constant_expected_gradient(d: usize, x_j: f64) -> f64 {
    assert!(d >= 2, "dimension must be at least 2");
    let d = d as f64;
    (d - 1.0 - x_j.sin()) * x_j.cos() / (d * d)
}

// ---------------------------------------------------------------------------
// Monte-Carlo measurements

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SaturationReport {
    pub kind: ScoreFunctionKind,
    pub epsilon: f64,
    pub fraction_saturated: f64,
    pub sample_count: usize,
    pub input_scale: f64,
    /// Trials rejected by a score guard; their entries are not counted.
    pub skipped_trials: usize,
}

/// Fraction of diagonal Jacobian entries with magnitude below `epsilon`
/// for rows drawn from `N(0, input_scale²)`.
pub fn saturation_fraction(
    kind: ScoreFunctionKind,
    dim: usize,
    trials: usize,
    input_scale: f64,
    epsilon: f64,
    seed: u64,
) -> Result<SaturationReport, AnalysisError> {
    if dim < 2 || trials == 0 || epsilon <= 0.0 {
        return Err(invalid("saturation needs dim >= 2, trials >= 1, epsilon > 0"));
    }
    let mut rng = rng::seeded(seed);
    let mut saturated = 0usize;
    let mut samples = 0usize;
    let mut skipped = 0usize;
    for _ in 0..trials {
        let x = rng::normal_vec(&mut rng, dim, input_scale);
        match scorefn::jacobian(kind, &x) {
            Ok(j) => {
                let diag = j.diagonal();
                saturated += diag.iter().filter(|g| g.abs() < epsilon).count();
                samples += diag.len();
            }
            Err(_) => skipped += 1,
        }
    }
    let fraction = if samples == 0 { f64::NAN } else { saturated as f64 / samples as f64 };
    Ok(SaturationReport {
        kind,
        epsilon,
        fraction_saturated: fraction,
        sample_count: samples,
        input_scale,
        skipped_trials: skipped,
    })
}

/// Mean over `trials` standard-normal rows of `max_j |S_j − 1/d|` under
/// Sin-max-constant. Shrinks with `d` as the constant term swamps the
/// input-dependent part.
pub fn submersion_deviation(d: usize, trials: usize, seed: u64) -> Result<f64, AnalysisError> {
    if d < 2 || trials == 0 {
        return Err(invalid("submersion needs d >= 2 and trials >= 1"));
    }
    let mut rng = rng::seeded(seed);
    let uniform = 1.0 / d as f64;
    let mut total = 0.0;
    for _ in 0..trials {
        let x = rng::normal_vec(&mut rng, d, 1.0);
        let eval = scorefn::scores(ScoreFunctionKind::SinMaxConstant, &x)?;
        total += eval.scores.iter().map(|s| (s - uniform).abs()).fold(0.0, f64::max);
    }
    Ok(total / trials as f64)
}

// ---------------------------------------------------------------------------
// Curves

/// One plottable series. `NaN` in `y_values` marks a guarded point.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub x_values: Vec<f64>,
    pub y_values: Vec<f64>,
    pub label: String,
    pub params: BTreeMap<String, f64>,
}

#[derive(Serialize)]
struct CurveMeta<'a> {
    label: &'a str,
    params: &'a BTreeMap<String, f64>,
}

impl CurveSeries {
    pub fn len(&self) -> usize {
        self.x_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_values.is_empty()
    }

    pub fn nan_count(&self) -> usize {
        self.y_values.iter().filter(|y| y.is_nan()).count()
    }

    /// CSV with header `x,y`; `NaN` is written as an empty field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("x,y\n");
        for (x, y) in self.x_values.iter().zip(&self.y_values) {
            if y.is_nan() {
                out.push_str(&format!("{x},\n"));
            } else {
                out.push_str(&format!("{x},{y}\n"));
            }
        }
        out
    }

    /// Writes the CSV to `path` and `label`/`params` to `<stem>.meta.json`
    /// beside it. Returns the meta path.
    pub fn write(&self, path: &Path) -> io::Result<PathBuf> {
        fs::write(path, self.to_csv())?;
        let meta_path = meta_path_for(path);
        let meta = CurveMeta { label: &self.label, params: &self.params };
        let mut file = fs::File::create(&meta_path)?;
        serde_json::to_writer_pretty(&mut file, &meta)?;
        file.write_all(b"\n")?;
        Ok(meta_path)
    }
}

/// `dir/name.csv` → `dir/name.meta.json`.
pub fn meta_path_for(path: &Path) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("curve");
    path.with_file_name(format!("{stem}.meta.json"))
}

fn linspace(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    let width = hi - lo;
    (0..steps)
        .map(|i| if i + 1 == steps { hi } else { lo + width * i as f64 / (steps - 1) as f64 })
        .collect()
}

fn check_range(x_min: f64, x_max: f64, steps: usize) -> Result<(), AnalysisError> {
    if steps < 2 {
        return Err(invalid("a curve needs at least 2 steps"));
    }
    if !(x_min < x_max) || !x_min.is_finite() || !x_max.is_finite() {
        return Err(invalid("x range must be finite with x_min < x_max"));
    }
    Ok(())
}

/// Diagonal gradient of `kind` over `[x_min, x_max]` with the off-sum
/// held at `m_off`.
pub fn gradient_curve(
    kind: ScoreFunctionKind,
    m_off: f64,
    x_min: f64,
    x_max: f64,
    steps: usize,
) -> Result<CurveSeries, AnalysisError> {
    check_range(x_min, x_max, steps)?;
    let x_values = linspace(x_min, x_max, steps);
    let y_values: Vec<f64> = x_values
        .iter()
        .map(|&x| diagonal_gradient_at(kind, x, m_off).unwrap_or(f64::NAN))
        .collect();
    let mut curve = CurveSeries {
        x_values,
        y_values,
        label: format!("{kind} diagonal gradient"),
        params: BTreeMap::new(),
    };
    curve.params.insert("m".into(), m_off);
    curve.params.insert("nan_count".into(), curve.nan_count() as f64);
    Ok(curve)
}

/// Diagonal gradient of the pre-normalized score as `x_j` sweeps
/// `[x_min, x_max]`, with the other `dim − 1` raw inputs fixed and evenly
/// spaced on `[−1, 1]`.
pub fn prenorm_gradient_curve(
    kind: ScoreFunctionKind,
    dim: usize,
    x_min: f64,
    x_max: f64,
    steps: usize,
) -> Result<CurveSeries, AnalysisError> {
    check_range(x_min, x_max, steps)?;
    if dim < 3 {
        return Err(invalid("prenorm curves need dim >= 3"));
    }
    let mut row = vec![0.0];
    row.extend(linspace(-1.0, 1.0, dim - 1));
    let x_values = linspace(x_min, x_max, steps);
    let y_values = x_values
        .iter()
        .map(|&x| {
            row[0] = x;
            prenormed_jacobian(kind, &row).map(|j| j.get(0, 0)).unwrap_or(f64::NAN)
        })
        .collect();
    let mut curve = CurveSeries {
        x_values,
        y_values,
        label: format!("norm-{kind} diagonal gradient"),
        params: BTreeMap::new(),
    };
    curve.params.insert("d".into(), dim as f64);
    curve.params.insert("nan_count".into(), curve.nan_count() as f64);
    Ok(curve)
}

/// Largest `|∂S_j/∂x_j|` over `x_j ∈ [−2π, 2π]` for each off-sum in
/// `m_values` (strictly increasing). Off-sums where every point is guarded
/// yield `NaN` and are counted in `params["skipped"]`.
pub fn extremum_vs_m_curve(kind: ScoreFunctionKind, m_values: &[f64]) -> Result<CurveSeries, AnalysisError> {
    if m_values.is_empty() {
        return Err(invalid("m_values must be nonempty"));
    }
    if m_values.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(invalid("m_values must be strictly increasing"));
    }
    let y_values: Vec<f64> = m_values
        .iter()
        .map(|&m| {
            diagonal_extremum(kind, m, -2.0 * PI, 2.0 * PI, Goal::AbsMax)
                .map(|f| f.value.abs())
                .unwrap_or(f64::NAN)
        })
        .collect();
    let mut curve = CurveSeries {
        x_values: m_values.to_vec(),
        y_values,
        label: format!("{kind} extreme gradient vs off-sum"),
        params: BTreeMap::new(),
    };
    curve.params.insert("skipped".into(), curve.nan_count() as f64);
    Ok(curve)
}

// ---------------------------------------------------------------------------
// Pre-normalization

fn mean_and_variance(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

/// `(x − mean) / √var` with the population variance.
pub fn row_normalize(x: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    if x.len() < 2 {
        return Err(ScoreError::TooFewElements { dim: x.len() }.into());
    }
    let (mean, var) = mean_and_variance(x);
    if !(var > VARIANCE_EPS) {
        return Err(AnalysisError::DegenerateRow { variance: var });
    }
    let inv_std = 1.0 / var.sqrt();
    Ok(x.iter().map(|v| (v - mean) * inv_std).collect())
}

/// `∂y_j/∂x_k = (δ_jk − 1/d − y_j y_k / d) / σ` for `y = row_normalize(x)`.
pub fn row_normalize_jacobian(x: &[f64]) -> Result<JacobianMatrix, AnalysisError> {
    let y = row_normalize(x)?;
    let (_, var) = mean_and_variance(x);
    let inv_std = 1.0 / var.sqrt();
    let d = x.len() as f64;
    Ok(JacobianMatrix::from_fn(x.len(), |j, k| {
        let delta = if j == k { 1.0 } else { 0.0 };
        (delta - 1.0 / d - y[j] * y[k] / d) * inv_std
    }))
}

pub fn prenormed_scores(kind: ScoreFunctionKind, x: &[f64]) -> Result<ScoreEval, AnalysisError> {
    let y = row_normalize(x)?;
    Ok(scorefn::scores(kind, &y)?)
}

/// Chain product `J_S(norm(x)) · J_norm(x)`.
pub fn prenormed_jacobian(kind: ScoreFunctionKind, x: &[f64]) -> Result<JacobianMatrix, AnalysisError> {
    let y = row_normalize(x)?;
    let outer = scorefn::jacobian(kind, &y)?;
    Ok(outer.matmul(&row_normalize_jacobian(x)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_extremum_is_a_quarter() {
        assert_eq!(softmax_extreme_gradient(), 0.25);
        for m in [1.0, 100.0] {
            let v = softmax_numeric_extreme_gradient(m).unwrap();
            assert!((v - 0.25).abs() < 1e-6, "M={m}: {v}");
        }
    }

    #[test]
    fn cosmax_interval_examples() {
        let i = cosmax_extremum_interval(2.0).unwrap();
        assert!((i.lower + 1.0 / 3.0).abs() < 1e-15);
        assert!((i.upper - 1.0).abs() < 1e-15);
        let i = cosmax_extremum_interval(10.0).unwrap();
        assert!((i.lower - (100.0 / 22.0 - 5.0)).abs() < 1e-12);
        assert!((i.upper - (100.0 / 18.0 - 5.0)).abs() < 1e-12);
        assert!((i.lower + 0.4545).abs() < 1e-4 && (i.upper - 0.5556).abs() < 1e-4);
        let i = cosmax_extremum_interval(0.0).unwrap();
        assert_eq!((i.lower, i.upper, i.unbounded), (0.0, 0.0, false));
    }

    #[test]
    fn cosmax_interval_poles_and_unbounded_band() {
        assert_eq!(cosmax_extremum_interval(1.0), Err(AnalysisError::Pole(1.0)));
        assert!(matches!(cosmax_extremum_interval(-1.0 + 1e-9), Err(AnalysisError::Pole(_))));
        let i = cosmax_extremum_interval(0.5).unwrap();
        assert!(i.unbounded && i.lower == f64::NEG_INFINITY && i.upper == f64::INFINITY);
    }

    #[test]
    fn sin2max_location_examples() {
        let x = sin2max_extremum_location(1.0).unwrap();
        assert!((x - 0.5616f64.acos() / 2.0).abs() < 1e-4);
        assert!((x - 0.4873).abs() < 1e-4);
        let x = sin2max_extremum_location(0.5).unwrap();
        assert!(x > 0.0 && x < PI / 2.0);
        assert!(matches!(sin2max_extremum_location(-1.0), Err(AnalysisError::Domain(a)) if a > 1.0));
    }

    #[test]
    fn filter_gain_examples() {
        assert_eq!(filter_gain(1.0, 1.0).unwrap(), 0.25);
        assert_eq!(filter_gain(0.0, 1.0).unwrap(), 0.0);
        assert!((filter_gain(100.0, 1.0).unwrap() - 100.0 / 10201.0).abs() < 1e-15);
        assert!(matches!(filter_gain(-1.0, 1.0), Err(AnalysisError::Score(ScoreError::DenominatorNearZero { .. }))));
    }

    #[test]
    fn filter_gain_peaks_at_center() {
        for f in [1.0, 2.0, 3.0] {
            let peak = filter_gain(f, f).unwrap();
            assert!((peak - 1.0 / (4.0 * f)).abs() < 1e-15);
            for delta in [0.01, 0.1, 1.0] {
                assert!(filter_gain(f + delta, f).unwrap() < peak);
                assert!(filter_gain(f - delta, f).unwrap() < peak);
            }
        }
    }

    #[test]
    fn sinmax_constant_expectations() {
        assert_eq!(sinmax_constant_expected_score(256, 0.0), 1.0 / 256.0);
        assert_eq!(sinmax_constant_expected_score(2, PI / 2.0), 1.0);
        assert!((sinmax_constant_expected_score(64, 0.5) - (1.0 + 0.5f64.sin()) / 64.0).abs() < 1e-15);
        assert!((sinmax_constant_expected_score(64, 0.5) - 0.0231).abs() < 1e-4);

        assert_eq!(sinmax_constant_expected_gradient(2, 0.0), 0.25);
        for d in [2, 7, 300] {
            assert!(sinmax_constant_expected_gradient(d, PI / 2.0).abs() < 1e-16);
        }
        assert!((sinmax_constant_expected_gradient(256, 0.0) - 255.0 / 65536.0).abs() < 1e-15);
        let decay: Vec<f64> = [4, 16, 64, 256].iter().map(|&d| sinmax_constant_expected_gradient(d, 0.3)).collect();
        assert!(decay.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn row_normalize_examples() {
        let y = row_normalize(&[1.0, 2.0, 3.0]).unwrap();
        let s = (1.5f64).sqrt();
        assert!((y[0] + s).abs() < 1e-12 && y[1].abs() < 1e-12 && (y[2] - s).abs() < 1e-12);
        assert!((y[0] + 1.2247).abs() < 1e-4);
        assert!(matches!(row_normalize(&[4.0, 4.0, 4.0]), Err(AnalysisError::DegenerateRow { .. })));
        assert_eq!(row_normalize(&[-1.0, 1.0]).unwrap(), vec![-1.0, 1.0]);
        let j = row_normalize_jacobian(&[1.0, 2.0, 3.0]).unwrap();
        assert!(j.column_sums().iter().all(|s| s.abs() < 1e-9));
    }

    #[test]
    fn prenormed_two_points() {
        let a = prenormed_scores(ScoreFunctionKind::Softmax, &[10.0, 20.0]).unwrap();
        let b = scorefn::scores(ScoreFunctionKind::Softmax, &[-1.0, 1.0]).unwrap();
        assert_eq!(a.scores, b.scores);
    }

    #[test]
    fn gradient_curve_contract() {
        let c = gradient_curve(ScoreFunctionKind::Softmax, 1.0, -10.0, 10.0, 1001).unwrap();
        assert_eq!(c.len(), 1001);
        assert_eq!(c.x_values[500], 0.0);
        assert!((c.y_values[500] - 0.25).abs() < 1e-15);
        assert!(c.x_values.windows(2).all(|w| w[0] < w[1]));
        assert!(gradient_curve(ScoreFunctionKind::Softmax, 1.0, 1.0, 1.0, 10).is_err());
        assert!(gradient_curve(ScoreFunctionKind::Softmax, 1.0, 0.0, 1.0, 1).is_err());
    }

    #[test]
    fn curve_csv_uses_empty_field_for_nan() {
        let c = CurveSeries {
            x_values: vec![0.0, 1.0],
            y_values: vec![f64::NAN, 2.5],
            label: "t".into(),
            params: BTreeMap::new(),
        };
        assert_eq!(c.to_csv(), "x,y\n0,\n1,2.5\n");
        assert_eq!(meta_path_for(Path::new("/a/s.csv")), Path::new("/a/s.meta.json"));
    }

    #[test]
    fn extremum_vs_m_rejects_unsorted() {
        assert!(extremum_vs_m_curve(ScoreFunctionKind::Softmax, &[]).is_err());
        assert!(extremum_vs_m_curve(ScoreFunctionKind::Softmax, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn search_skips_guarded_points() {
        let f = |x: f64| if x.abs() < 0.5 { None } else { Some(-x * x) };
        let found = search_extremum(f, -1.0, 1.0, Goal::Max).unwrap();
        assert!((found.x.abs() - 0.5).abs() < 2e-4);
        assert!(search_extremum(|_| None, 0.0, 1.0, Goal::Max).is_none());
    }
}
