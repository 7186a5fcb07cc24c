use proptest::prelude::*;
use riskalloc::model::{Micros, PolicyKind, Position};
use riskalloc::risk::{
    exponential_optimizer, kl_divergence, penalty_exponential, penalty_linear, penalty_log,
    penalty_numeric, soft_log_norm, theta, theta_parts, value, value_derivative, PenaltyInput,
    RiskError, ValueFunctionSpec,
};

fn spec(
    kind: PolicyKind,
    p: Vec<f64>,
    b: Vec<f64>,
    lambda: f64,
    kappa: f64,
    h: u64,
    horizon: u64,
    p_max: f64,
) -> ValueFunctionSpec {
    ValueFunctionSpec {
        kind,
        p_eps: p,
        budgets: b,
        lambda_log: lambda,
        kappa,
        h,
        horizon,
        epsilon_floor: 1e-6,
        p_max,
    }
}

fn kind_strategy() -> impl Strategy<Value = PolicyKind> {
    prop_oneof![
        Just(PolicyKind::Linear),
        Just(PolicyKind::Log),
        Just(PolicyKind::Exponential)
    ]
}

prop_compose! {
    fn any_spec()(kind in kind_strategy(), n in 1usize..5)
        (kind in Just(kind),
         p in prop::collection::vec(0.0f64..3.0, n),
         b in prop::collection::vec(1.0f64..40.0, n),
         lambda in 0.01f64..3.0, kappa in 0.2f64..5.0,
         h in 0u64..=500, p_max in 3.0f64..20.0) -> ValueFunctionSpec {
        spec(kind, p, b, lambda, kappa, h, 500, p_max)
    }
}

/// Direct evaluation of the log value without any knee handling.
fn raw_log_value(p: f64, lambda: f64, s: f64, b: f64) -> f64 {
    p * s + lambda * (s / b).ln()
}

#[test]
fn log_value_matches_direct_formula_above_the_knee() {
    let sp = spec(PolicyKind::Log, vec![0.5], vec![2.0], 0.4, 1.0, 0, 1, 10.0);
    let s = 0.8;
    let v = value(&sp, 0, s).unwrap();
    assert!((v - raw_log_value(0.5, 0.4, s, 2.0)).abs() < 1e-12);
    assert!((v - 0.033483).abs() < 1e-6);
    // The value at the full budget is p b.
    assert!((value(&sp, 0, 2.0).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn exponential_value_at_budget_and_inside() {
    let sp = spec(
        PolicyKind::Exponential,
        vec![1.0],
        vec![1.0],
        1.0,
        1.0,
        0,
        10,
        10.0,
    );
    // v(b) = -p b / kappa at tau = 0.
    assert!((value(&sp, 0, 1.0).unwrap() + 1.0).abs() < 1e-12);
    assert!((value_derivative(&sp, 0, 1.0).unwrap() - 1.0).abs() < 1e-12);
    assert!((value_derivative(&sp, 0, 0.8).unwrap() - 0.2f64.exp()).abs() < 1e-12);
}

#[test]
fn derivative_never_exceeds_ceiling() {
    let sp = spec(PolicyKind::Log, vec![0.5], vec![2.0], 1.0, 1.0, 0, 1, 4.0);
    for k in 0..=200 {
        let s = 2.0 * k as f64 / 200.0;
        assert!(value_derivative(&sp, 0, s).unwrap() <= 4.0);
    }
    let sp = spec(
        PolicyKind::Exponential,
        vec![1.0],
        vec![1.0],
        1.0,
        8.0,
        0,
        10,
        4.0,
    );
    for k in 0..=200 {
        assert!(value_derivative(&sp, 0, k as f64 / 200.0).unwrap() <= 4.0);
    }
}

#[test]
fn penalty_examples() {
    let lin = PenaltyInput::new(vec![1.0, 0.2], vec![0.4, 0.5], vec![1.0, 3.0]).unwrap();
    assert!((penalty_linear(&lin) - 0.6).abs() < 1e-12);
    let log = PenaltyInput::new(vec![0.5], vec![1.0], vec![2.0]).unwrap();
    assert!((penalty_log(&log, 0.4).unwrap() + 0.76652).abs() < 1e-5);
    let exp = PenaltyInput::new(vec![1.0], vec![1.0], vec![1.0]).unwrap();
    assert_eq!(penalty_exponential(&exp, 1.0, 0, 10).unwrap(), -2.0);
    assert_eq!(penalty_exponential(&exp, 1.0, 10, 10).unwrap(), -1.0);
}

#[test]
fn soft_log_norm_branches_meet() {
    let lambda = 0.7;
    assert_eq!(soft_log_norm(-lambda, lambda), -lambda);
    assert!((soft_log_norm(-lambda - 1e-12, lambda) + lambda).abs() < 1e-9);
    assert_eq!(soft_log_norm(2.0, lambda), 2.0);
    // Grows only logarithmically below the boundary.
    assert!((soft_log_norm(-lambda * std::f64::consts::E, lambda) + 2.0 * lambda).abs() < 1e-12);
}

#[test]
fn kl_of_identical_distributions_is_zero() {
    assert!(kl_divergence(&[0.2, 0.8], &[0.2, 0.8]).unwrap().abs() < 1e-15);
    assert!(kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap() > 0.0);
}

#[test]
fn mismatched_zero_weight_is_rejected() {
    let inp = PenaltyInput::new(vec![0.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap();
    assert!(matches!(
        penalty_exponential(&inp, 1.0, 0, 10),
        Err(RiskError::ZeroWeight { .. })
    ));
}

#[test]
fn missing_parameters_and_dimensions_are_errors() {
    assert!(matches!(
        PenaltyInput::new(vec![1.0], vec![1.0, 2.0], vec![1.0]),
        Err(RiskError::Dimension { .. })
    ));
    let mut sp = spec(PolicyKind::Log, vec![0.5], vec![2.0], 0.4, 1.0, 0, 1, 10.0);
    sp.lambda_log = 0.0;
    assert!(value(&sp, 0, 1.0).is_err());
}

#[test]
fn exponential_optimizer_solves_first_order_condition() {
    let (p, q, b, kappa, tau) = (0.8, 1.3, 4.0, 2.0, 0.25);
    let s = exponential_optimizer(p, q, b, kappa, tau);
    let sp = spec(
        PolicyKind::Exponential,
        vec![p],
        vec![b],
        1.0,
        kappa,
        25,
        100,
        50.0,
    );
    assert!((value_derivative(&sp, 0, s).unwrap() - q).abs() < 1e-12);
}

fn rel(a: f64, b: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        0.0
    } else {
        d / a.abs().max(b.abs())
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn theta_is_monotone_under_covered_dominance(
        sp in any_spec(),
        fr in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 5),
        w_bar in 0i64..50_000_000,
        extra in 0i64..5_000_000,
    ) {
        let n = sp.budgets.len();
        let s_bar: Vec<Micros> = (0..n).map(|i| Micros::from_units(fr[i].0 * sp.budgets[i])).collect();
        let s: Vec<Micros> = (0..n).map(|i| Micros::from_units(fr[i].1 * sp.budgets[i])).collect();
        let cover: f64 = (0..n).map(|i| sp.p_max * (s_bar[i].as_units() - s[i].as_units()).max(0.0)).sum();
        let w = Micros(w_bar + (cover * 1e6).ceil() as i64 + extra);
        let lo = theta(&Position::new(w, s), &sp).unwrap();
        let hi = theta(&Position::new(Micros(w_bar), s_bar), &sp).unwrap();
        prop_assert!(lo <= hi, "{lo} > {hi}");
    }

    #[test]
    fn cash_translation_is_exact(sp in any_spec(), w in -1_000_000_000i64..1_000_000_000, m in -1_000_000_000i64..1_000_000_000, fr in 0.0f64..1.0) {
        let s: Vec<Micros> = sp.budgets.iter().map(|b| Micros::from_units(fr * b)).collect();
        let base = theta_parts(&Position::new(Micros(w), s.clone()), &sp).unwrap();
        let moved = theta_parts(&Position::new(Micros(w + m), s), &sp).unwrap();
        prop_assert_eq!(moved.cash, base.cash - Micros(m));
        prop_assert_eq!(moved.budget_term.to_bits(), base.budget_term.to_bits());
    }

    #[test]
    fn values_are_concave(sp in any_spec(), a in 0.0f64..1.0, c in 0.0f64..1.0, t in 0.0f64..1.0) {
        let b = sp.budgets[0];
        let lo = sp.epsilon_floor * b;
        let (x, y) = (lo + a * (b - lo), lo + c * (b - lo));
        let v = |s: f64| value(&sp, 0, s).unwrap();
        let mid = t * x + (1.0 - t) * y;
        let chord = t * v(x) + (1.0 - t) * v(y);
        prop_assert!(v(mid) >= chord - 1e-10 * (1.0 + v(x).abs() + v(y).abs()));
    }

    #[test]
    fn derivative_matches_finite_difference(sp in any_spec(), a in 0.02f64..0.98) {
        let b = sp.budgets[0];
        let x = a * b;
        let step = 1e-6 * b;
        let fd = (value(&sp, 0, x + step).unwrap() - value(&sp, 0, x - step).unwrap()) / (2.0 * step);
        let d = value_derivative(&sp, 0, x).unwrap();
        prop_assert!(rel(d, fd) <= 1e-6, "{d} vs {fd}");
    }

    #[test]
    fn derivative_is_nonincreasing(sp in any_spec(), a in 0.0f64..1.0, c in 0.0f64..1.0) {
        let b = sp.budgets[0];
        let (x, y) = (a.min(c) * b, a.max(c) * b);
        prop_assert!(value_derivative(&sp, 0, x).unwrap() >= value_derivative(&sp, 0, y).unwrap() - 1e-12);
    }

    #[test]
    fn linear_and_log_penalties_match_grid_search(
        n in 1usize..4,
        seed in prop::collection::vec((0.5f64..10.0, 0.05f64..2.0, 0.05f64..3.0), 4),
        lambda in 0.05f64..2.0,
    ) {
        let b: Vec<f64> = seed[..n].iter().map(|t| t.0).collect();
        let pe: Vec<f64> = seed[..n].iter().map(|t| t.1).collect();
        let ps: Vec<f64> = seed[..n].iter().map(|t| t.2).collect();
        let inp = PenaltyInput::new(pe.clone(), ps.clone(), b.clone()).unwrap();
        let num = penalty_numeric(&spec(PolicyKind::Linear, pe.clone(), b.clone(), lambda, 1.0, 0, 1, 10.0), &ps, 2000).unwrap();
        prop_assert!(rel(penalty_linear(&inp), num) <= 1e-6);
        let num = penalty_numeric(&spec(PolicyKind::Log, pe, b, lambda, 1.0, 0, 1, 10.0), &ps, 2000).unwrap();
        prop_assert!(rel(penalty_log(&inp, lambda).unwrap(), num) <= 1e-6);
    }

    #[test]
    fn exponential_penalty_matches_grid_search_at_interior_optima(
        p in 0.3f64..2.0, q in 0.3f64..2.0, b in 0.5f64..10.0, kappa in 0.5f64..4.0, h in 0u64..=50,
    ) {
        let tau = h as f64 / 50.0;
        let s = exponential_optimizer(p, q, b, kappa, tau);
        prop_assume!((0.0..=b).contains(&s));
        let inp = PenaltyInput::new(vec![p], vec![q], vec![b]).unwrap();
        let closed = penalty_exponential(&inp, kappa, h, 50).unwrap();
        let num = penalty_numeric(&spec(PolicyKind::Exponential, vec![p], vec![b], 1.0, kappa, h, 50, 10.0), &[q], 2000).unwrap();
        prop_assert!(rel(closed, num) <= 1e-6, "{closed} vs {num}");
    }
}
