use std::f64::consts::{E, PI};

use periodic_core::scorefn::{
    self, jacobian, scores, finite_diff_jacobian, ScoreFunctionKind, GRADCHECK_STEP,
};
use proptest::prelude::*;

fn any_kind() -> impl Strategy<Value = ScoreFunctionKind> {
    (0..11usize).prop_map(|i| ScoreFunctionKind::all()[i])
}

fn row(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0..4.0f64, 2..=max_dim)
}

/// Ratio of Σ|f| to |Σ f|. Large values mean the normalization amplifies
/// rounding, which only happens for the signed kinds.
fn cancellation(kind: ScoreFunctionKind, x: &[f64]) -> f64 {
    let f: Vec<f64> = x.iter().map(|&v| scorefn::intermediate(kind, v).unwrap_or(f64::NAN)).collect();
    let abs: f64 = f.iter().map(|v| v.abs()).sum();
    abs / f.iter().sum::<f64>().abs()
}

fn well_conditioned(kind: ScoreFunctionKind, x: &[f64]) -> bool {
    let c = cancellation(kind, x);
    c.is_finite() && c < 20.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn scores_sum_to_one(kind in any_kind(), x in row(64)) {
        prop_assume!(well_conditioned(kind, &x));
        if let Ok(eval) = scores(kind, &x) {
            prop_assert_eq!(eval.dim(), x.len());
            prop_assert_eq!(eval.intermediates.len(), x.len());
            let total: f64 = eval.scores.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12, "sum {}", total);
        }
    }

    #[test]
    fn jacobian_matches_central_difference(kind in any_kind(), x in row(16)) {
        prop_assume!(well_conditioned(kind, &x));
        let Ok(analytic) = jacobian(kind, &x) else { return Ok(()) };
        let Ok(numeric) = finite_diff_jacobian(kind, &x, GRADCHECK_STEP) else { return Ok(()) };
        let err = analytic.max_rel_error(&numeric);
        prop_assert!(err <= 1e-6, "{} err {:e}", kind, err);
    }

    #[test]
    fn jacobian_columns_sum_to_zero(kind in any_kind(), x in row(64)) {
        prop_assume!(well_conditioned(kind, &x));
        if let Ok(j) = jacobian(kind, &x) {
            for s in j.column_sums() {
                prop_assert!(s.abs() <= 1e-9, "{} column sum {:e}", kind, s);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in row(32), c in -20.0..20.0f64) {
        let a = scores(ScoreFunctionKind::Softmax, &x).unwrap();
        let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
        let b = scores(ScoreFunctionKind::Softmax, &shifted).unwrap();
        for (p, q) in a.scores.iter().zip(&b.scores) {
            prop_assert!((p - q).abs() <= 1e-12);
        }
    }

    #[test]
    fn periodic_kinds_repeat_every_two_pi(kind in any_kind(), x in row(32)) {
        prop_assume!(kind.is_periodic());
        prop_assume!(well_conditioned(kind, &x));
        let shifted: Vec<f64> = x.iter().map(|v| v + 2.0 * PI).collect();
        if let (Ok(a), Ok(b)) = (scores(kind, &x), scores(kind, &shifted)) {
            for (p, q) in a.scores.iter().zip(&b.scores) {
                prop_assert!((p - q).abs() <= 1e-12, "{} {} vs {}", kind, p, q);
            }
        }
    }

    #[test]
    fn shifted_sin2_equals_sin2_of_shifted_input(x in row(32), phase in -PI..PI) {
        let shifted_kind = ScoreFunctionKind::sin2_shifted(phase).unwrap();
        let moved: Vec<f64> = x.iter().map(|v| v + phase).collect();
        if let (Ok(a), Ok(b)) = (scores(shifted_kind, &x), scores(ScoreFunctionKind::Sin2Max, &moved)) {
            for (p, q) in a.scores.iter().zip(&b.scores) {
                prop_assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn sin_softmax_intermediates_stay_in_band(x in prop::collection::vec(-100.0..100.0f64, 2..64)) {
        let eval = scores(ScoreFunctionKind::SinSoftmax, &x).unwrap();
        let lo = eval.intermediates.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = eval.intermediates.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(lo >= 1.0 / E - 1e-15 && hi <= E + 1e-15);
        prop_assert!(hi / lo <= E * E * (1.0 + 1e-15));
    }

    #[test]
    fn softmax_diagonal_never_exceeds_a_quarter(x in prop::collection::vec(-30.0..30.0f64, 2..64)) {
        let j = jacobian(ScoreFunctionKind::Softmax, &x).unwrap();
        for d in j.diagonal() {
            prop_assert!(d <= 0.25 + 1e-12);
        }
    }

    #[test]
    fn soft_margin_jacobian_matches_central_difference(margin in 0.01..3.0f64, x in row(16)) {
        let kind = ScoreFunctionKind::soft_margin(margin).unwrap();
        let analytic = jacobian(kind, &x).unwrap();
        let numeric = finite_diff_jacobian(kind, &x, GRADCHECK_STEP).unwrap();
        prop_assert!(analytic.max_rel_error(&numeric) <= 1e-6);
        let kind = ScoreFunctionKind::soft_margin_taylor(2, margin).unwrap();
        let analytic = jacobian(kind, &x).unwrap();
        let numeric = finite_diff_jacobian(kind, &x, GRADCHECK_STEP).unwrap();
        prop_assert!(analytic.max_rel_error(&numeric) <= 1e-6);
    }

    #[test]
    fn intermediate_derivative_matches_central_difference(kind in any_kind(), x in -6.0..6.0f64) {
        let h = 1e-6;
        let (Ok(d), Ok(up), Ok(down)) = (
            scorefn::intermediate_derivative(kind, x),
            scorefn::intermediate(kind, x + h),
            scorefn::intermediate(kind, x - h),
        ) else { return Ok(()) };
        // Keep away from the siren pole, where the difference quotient itself is unreliable.
        prop_assume!(1.0 - x.sin() > 1e-2);
        let fd = (up - down) / (2.0 * h);
        prop_assert!(scorefn::rel_error(d, fd) <= 1e-7, "{} at {}: {} vs {}", kind, x, d, fd);
    }
}

#[test]
fn gradient_check_covers_dims_for_well_behaved_kinds() {
    for kind in ScoreFunctionKind::all() {
        if matches!(kind, ScoreFunctionKind::SinMax | ScoreFunctionKind::SirenMax) {
            continue;
        }
        for dim in [2, 8, 64] {
            let r = scorefn::gradient_check(kind, dim, 100, 42, 1e-6).unwrap();
            assert!(r.passed(), "{kind} dim {dim}: {r:?}");
            assert_eq!(r.trials, 100);
        }
    }
}

#[test]
fn gradient_check_rejects_single_element() {
    assert!(scorefn::gradient_check(ScoreFunctionKind::Softmax, 1, 10, 0, 1e-6).is_err());
}

#[test]
fn siren_finite_difference_near_pole_is_guarded() {
    // sin(x0) = 1 − POLE_EPS/2 puts the first input inside the guard band.
    let x0 = (1.0 - scorefn::POLE_EPS / 2.0).asin();
    let err = finite_diff_jacobian(ScoreFunctionKind::SirenMax, &[x0, 0.3, -0.2], GRADCHECK_STEP);
    assert!(matches!(err, Err(scorefn::ScoreError::PoleProximity { .. })), "{err:?}");
}

#[test]
fn shifted_sin2_random_vector_matches_oracle() {
    let mut rng = periodic_core::rng::seeded(42);
    let x = periodic_core::rng::normal_vec(&mut rng, 8, 1.0);
    let kind = ScoreFunctionKind::sin2_shifted(scorefn::DEFAULT_PHASE).unwrap();
    let a = jacobian(kind, &x).unwrap();
    let n = finite_diff_jacobian(kind, &x, GRADCHECK_STEP).unwrap();
    assert!(a.max_rel_error(&n) <= 1e-6);
}
