use std::f64::consts::PI;

use periodic_core::analysis::{self, Goal};
use periodic_core::rng;
use periodic_core::scorefn::{self, JacobianMatrix, ScoreFunctionKind};
use proptest::prelude::*;

fn central_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> JacobianMatrix {
    let d = x.len();
    let mut cols = Vec::with_capacity(d);
    for k in 0..d {
        let mut up = x.to_vec();
        let mut down = x.to_vec();
        up[k] += h;
        down[k] -= h;
        let (a, b) = (f(&up), f(&down));
        cols.push(a.iter().zip(&b).map(|(p, q)| (p - q) / (2.0 * h)).collect::<Vec<_>>());
    }
    JacobianMatrix::from_fn(d, |j, k| cols[k][j])
}

#[test]
fn sin2max_location_zeroes_second_derivative() {
    let h = 1e-5;
    for m in [0.5, 1.0, 2.0] {
        let x = analysis::sin2max_extremum_location(m).unwrap();
        assert!(x > 0.0 && x < PI / 2.0);
        let g = |t: f64| scorefn::diagonal_gradient_at(ScoreFunctionKind::Sin2Max, t, m).unwrap();
        let second = (g(x + h) - g(x - h)) / (2.0 * h);
        assert!(second.abs() <= 1e-6, "M={m}: {second:e}");
    }
}

#[test]
fn cosmax_interval_brackets_numeric_maximum() {
    for m in [2.0, 5.0, 10.0, -5.0] {
        let interval = analysis::cosmax_extremum_interval(m).unwrap();
        let max = analysis::diagonal_extremum(ScoreFunctionKind::CosMax, m, 0.0, 2.0 * PI, Goal::Max).unwrap();
        assert!(interval.contains(max.value, 1e-6), "M={m}: {} not in {interval:?}", max.value);
    }
    assert!(analysis::cosmax_extremum_interval(0.5).unwrap().unbounded);
}

#[test]
fn filter_gain_is_largest_at_matching_offsum() {
    for f in [1.0, 2.0, 3.0] {
        let peak = analysis::filter_gain(f, f).unwrap();
        assert!((peak - 1.0 / (4.0 * f)).abs() < 1e-15);
        for delta in [0.01, 0.1, 1.0] {
            assert!(analysis::filter_gain(f + delta, f).unwrap() < peak);
            assert!(analysis::filter_gain(f - delta, f).unwrap() < peak);
        }
    }
}

#[test]
fn row_normalize_jacobian_matches_finite_differences() {
    let mut r = rng::seeded(3);
    let x = rng::normal_vec(&mut r, 16, 1.0);
    for input in [vec![-1.0, 1.0], x] {
        let analytic = analysis::row_normalize_jacobian(&input).unwrap();
        let numeric = central_jacobian(|v| analysis::row_normalize(v).unwrap(), &input, 1e-6);
        assert!(analytic.max_rel_error(&numeric) <= 1e-6);
    }
}

#[test]
fn prenormed_chain_jacobian_matches_finite_differences() {
    let mut r = rng::seeded(11);
    let x = rng::normal_vec(&mut r, 8, 1.0);
    let kind = ScoreFunctionKind::sin2_shifted(scorefn::DEFAULT_PHASE).unwrap();
    let analytic = analysis::prenormed_jacobian(kind, &x).unwrap();
    let numeric = central_jacobian(|v| analysis::prenormed_scores(kind, v).unwrap().scores, &x, 1e-6);
    assert!(analytic.max_rel_error(&numeric) <= 1e-6);
}

#[test]
fn frozen_saturation_fractions() {
    let frac = |kind, scale| analysis::saturation_fraction(kind, 64, 1000, scale, 1e-4, 7).unwrap();
    let softmax = frac(ScoreFunctionKind::Softmax, 8.0);
    let sin_softmax = frac(ScoreFunctionKind::SinSoftmax, 8.0);
    let shifted = frac(ScoreFunctionKind::sin2_shifted(scorefn::DEFAULT_PHASE).unwrap(), 8.0);
    assert_eq!(softmax.sample_count, 64_000);
    assert_eq!(softmax.fraction_saturated, 0.87015625);
    assert_eq!(sin_softmax.fraction_saturated, 0.008296875);
    assert_eq!(shifted.fraction_saturated, 0.002125);
    assert!(softmax.fraction_saturated >= 0.5);
    assert!(sin_softmax.fraction_saturated <= 0.05);
    assert!(softmax.fraction_saturated > shifted.fraction_saturated);
    assert!(softmax.fraction_saturated > sin_softmax.fraction_saturated);
    // Tiny inputs sit near the zero of sin², yet the diagonal gradient there is
    // about 2x/M, far above the threshold, so nothing counts as saturated.
    assert_eq!(frac(ScoreFunctionKind::Sin2Max, 0.01).fraction_saturated, 0.0);
}

#[test]
fn saturation_fraction_is_deterministic() {
    let a = analysis::saturation_fraction(ScoreFunctionKind::SinMax, 16, 200, 2.0, 1e-3, 99).unwrap();
    let b = analysis::saturation_fraction(ScoreFunctionKind::SinMax, 16, 200, 2.0, 1e-3, 99).unwrap();
    assert_eq!(a, b);
}

#[test]
fn submersion_shrinks_with_dimension() {
    let devs: Vec<f64> =
        [4, 16, 64, 256].iter().map(|&d| analysis::submersion_deviation(d, 1000, 7).unwrap()).collect();
    assert!(devs.windows(2).all(|w| w[0] > w[1]), "{devs:?}");
}

#[test]
fn softmax_curve_peaks_at_a_quarter_near_zero() {
    let c = analysis::gradient_curve(ScoreFunctionKind::Softmax, 1.0, -10.0, 10.0, 1001).unwrap();
    assert_eq!(c.len(), 1001);
    let (i, peak) = c.y_values.iter().enumerate().fold((0, f64::MIN), |acc, (i, &y)| if y > acc.1 { (i, y) } else { acc });
    assert!((peak - 0.25).abs() < 1e-12);
    assert!(c.x_values[i].abs() < 1e-9);
}

#[test]
fn shifted_sin2_curve_has_period_pi() {
    let kind = ScoreFunctionKind::sin2_shifted(scorefn::DEFAULT_PHASE).unwrap();
    let c = analysis::gradient_curve(kind, 1.0, -PI, PI, 1001).unwrap();
    // 1000 intervals over 2π: index i and i + 500 are π apart.
    for i in 0..=500 {
        assert!((c.y_values[i] - c.y_values[i + 500]).abs() < 1e-9, "i={i}");
    }
}

#[test]
fn siren_curve_marks_pole_with_nan() {
    let c = analysis::gradient_curve(ScoreFunctionKind::SirenMax, 1.0, -PI, PI, 1001).unwrap();
    assert!(c.nan_count() >= 1);
    let first_nan = c.y_values.iter().position(|y| y.is_nan()).unwrap();
    assert!((c.x_values[first_nan] - PI / 2.0).abs() < 1e-2);
    assert!(c.to_csv().lines().any(|l| l.ends_with(',')));
}

#[test]
fn extremum_vs_m_examples() {
    let soft = analysis::extremum_vs_m_curve(ScoreFunctionKind::Softmax, &[0.5, 1.0, 2.0, 10.0]).unwrap();
    for y in &soft.y_values {
        assert!((y - 0.25).abs() <= 1e-6);
    }
    let cos = analysis::extremum_vs_m_curve(ScoreFunctionKind::CosMax, &[2.0]).unwrap();
    let interval = analysis::cosmax_extremum_interval(2.0).unwrap();
    assert!(cos.y_values[0] >= interval.lower - 1e-6 && cos.y_values[0] <= interval.upper + 1e-6);
    let sin_soft = analysis::extremum_vs_m_curve(ScoreFunctionKind::SinSoftmax, &[1.0]).unwrap();
    assert!(sin_soft.y_values[0].is_finite() && sin_soft.y_values[0] > 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn prenorm_is_affine_invariant(
        idx in 0..11usize,
        x in prop::collection::vec(-3.0..3.0f64, 3..24),
        a in 0.1..10.0f64,
        b in -5.0..5.0f64,
    ) {
        let kind = ScoreFunctionKind::all()[idx];
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        if let (Ok(p), Ok(q)) = (analysis::prenormed_scores(kind, &x), analysis::prenormed_scores(kind, &moved)) {
            // Signed kinds amplify the rounding of the normalized row by 1/Σf.
            let cond: f64 = p.intermediates.iter().map(|f| f.abs()).sum::<f64>() / p.sum.abs();
            prop_assume!(cond < 20.0);
            for (s, t) in p.scores.iter().zip(&q.scores) {
                prop_assert!((s - t).abs() <= 1e-12, "{} {} vs {}", kind, s, t);
            }
        }
    }

    #[test]
    fn row_normalize_has_zero_mean_unit_variance(x in prop::collection::vec(-50.0..50.0f64, 2..64)) {
        if let Ok(y) = analysis::row_normalize(&x) {
            let n = y.len() as f64;
            let mean = y.iter().sum::<f64>() / n;
            let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            prop_assert!(mean.abs() <= 1e-12);
            prop_assert!((var - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn row_normalize_jacobian_columns_sum_to_zero(x in prop::collection::vec(-5.0..5.0f64, 2..32)) {
        if let Ok(j) = analysis::row_normalize_jacobian(&x) {
            for s in j.column_sums() {
                prop_assert!(s.abs() <= 1e-9);
            }
        }
    }
}
