use nalgebra::{DMatrix, DVector};
use smoothlin::chain::ConjugatedMap;
use smoothlin::dynamics::{BoxRegion, MapModel, PolyMap};
use smoothlin::linearize_hyperbolic::{
    axis_residual, linearize_hyperbolic, stable_unstable_manifolds, straighten_manifolds,
    HyperbolicParams, Route,
};
use smoothlin::spectral::LinearPart;

fn model(terms: &[(f64, Vec<u32>, usize)]) -> MapModel {
    MapModel::polynomial(PolyMap::from_terms(2, terms), BoxRegion::symmetric(2, 1.0)).unwrap()
}

/// F(x) = (0.5 x1 + x1 x2, 2 x2).
fn product_saddle() -> MapModel {
    model(&[
        (0.5, vec![1, 0], 0),
        (1.0, vec![1, 1], 0),
        (2.0, vec![0, 1], 1),
    ])
}

/// F(x) = (0.5 x1 + x2², 2 x2).
fn quadratic_saddle() -> MapModel {
    model(&[
        (0.5, vec![1, 0], 0),
        (1.0, vec![0, 2], 0),
        (2.0, vec![0, 1], 1),
    ])
}

fn lin(map: &MapModel) -> LinearPart {
    LinearPart::from_matrix(map.linear_part(), 0.2, 1e-9).unwrap()
}

/// φ(y) = ∏_{j≥0} (1 + y 2^{−j})⁻¹, truncated once y 2^{−j} < 1e−16.
fn phi_product(y: f64) -> f64 {
    let mut p = 1.0;
    let mut t = y;
    while t.abs() >= 1e-16 {
        p /= 1.0 + t;
        t *= 0.5;
    }
    p
}

fn grid_points(r: f64, k: usize) -> Vec<DVector<f64>> {
    let mut pts = Vec::new();
    for i in 0..k {
        for j in 0..k {
            let a = -r + 2.0 * r * i as f64 / (k - 1) as f64;
            let b = -r + 2.0 * r * j as f64 / (k - 1) as f64;
            pts.push(DVector::from_vec(vec![a, b]));
        }
    }
    pts
}

#[test]
fn infinite_product_oracle_conjugates() {
    // Independent check of the oracle itself: Φ(F(x)) = ΛΦ(x).
    for x in grid_points(0.01, 7) {
        let (a, b) = (x[0], x[1]);
        let lhs = (0.5 * a + a * b) * phi_product(2.0 * b);
        assert!((lhs - 0.5 * a * phi_product(b)).abs() < 1e-17);
    }
}

#[test]
fn saddle_conjugates_and_decouples() {
    let map = product_saddle();
    let res = linearize_hyperbolic(&map, &lin(&map), &HyperbolicParams::default()).unwrap();
    assert_eq!(res.report.route, Route::Saddle);
    let saddle = res.report.saddle.as_ref().unwrap();
    assert!(saddle.decoupling_residual <= 1e-4, "{saddle:?}");
    assert!(
        saddle.dpsi_origin_error < 1e-3 && saddle.axis_residual == 0.0,
        "{saddle:?}"
    );
    assert!(saddle.lp_factors.0 < 1.0 && saddle.lp_factors.1 < 1.0);
    assert!(
        res.report.conjugacy.max <= 1e-5 && res.report.conjugacy.inverse_max <= 1e-5,
        "{:?}",
        res.report.conjugacy
    );
    assert!(
        res.report.dphi_origin_error < 1e-3,
        "{}",
        res.report.dphi_origin_error
    );
}

#[test]
fn saddle_deviation_from_product_oracle_is_the_truncated_tail() {
    // Conjugacies of this map are unique only up to x1 ↦ x1 q(x1 x2), which
    // commutes with Λ. The globalized map keeps only the factors of the
    // product for the backward steps spent inside the cutoff ball, so the
    // computed Φ differs from the oracle by at most the full correction
    // |x1 (φ(x2) − 1)| ≈ 2 |x1 x2|, and by far less near the origin.
    let map = product_saddle();
    let res = linearize_hyperbolic(&map, &lin(&map), &HyperbolicParams::default()).unwrap();
    let (mut outer, mut inner) = (0.0f64, 0.0f64);
    for x in grid_points(0.01, 21) {
        let y = res.chain.forward(&x).unwrap();
        let err = (&y - DVector::from_vec(vec![x[0] * phi_product(x[1]), x[1]])).amax();
        assert!(
            err <= 1.05 * (x[0] * (phi_product(x[1]) - 1.0)).abs() + 1e-6,
            "{x:?}: {err:e}"
        );
        assert!((y[1] - x[1]).abs() < 1e-9);
        outer = outer.max(err);
        if x.amax() <= 0.005 + 1e-12 {
            inner = inner.max(err);
        }
    }
    assert!(
        inner <= 1e-4 && outer <= 2e-4,
        "inner {inner:e}, outer {outer:e}"
    );
}

#[test]
fn decoupling_identity_holds_on_the_wider_box() {
    let map = product_saddle();
    let params = HyperbolicParams {
        report_radius: 0.02,
        r0: Some(0.018),
        r1: Some(0.038),
        ..HyperbolicParams::default()
    };
    let res = linearize_hyperbolic(&map, &lin(&map), &params).unwrap();
    let saddle = res.report.saddle.unwrap();
    assert!(
        saddle.decoupling_residual <= 1e-4,
        "{}",
        saddle.decoupling_residual
    );
}

#[test]
fn unstable_graph_matches_undetermined_coefficients() {
    // g_u(2y) = 0.5 g_u(y) + y² gives g_u(y) = (2/7) y²; the stable graph is 0.
    let map = quadratic_saddle();
    let pair = stable_unstable_manifolds(&map, &[0], &[1], 0.2, 65, 1e-14, 500).unwrap();
    let mut worst_u = 0.0f64;
    let mut worst_s = 0.0f64;
    for k in 0..=40 {
        let y = -0.19 + 0.38 * k as f64 / 40.0;
        worst_u = worst_u.max((pair.g_u.eval(&[y]).unwrap()[0] - 2.0 / 7.0 * y * y).abs());
        worst_s = worst_s.max(pair.g_s.eval(&[y]).unwrap()[0].abs());
    }
    // Cubic Hermite interpolation reproduces quadratics up to rounding.
    assert!(
        worst_u < 1e-13 && worst_s < 1e-15,
        "g_u {worst_u:e}, g_s {worst_s:e}"
    );
    assert!(
        pair.residual_u < 1e-13 && pair.residual_s < 1e-15,
        "{pair:?}"
    );
}

#[test]
fn straightened_map_fixes_both_axes() {
    let map = quadratic_saddle();
    let pair = stable_unstable_manifolds(&map, &[0], &[1], 0.2, 65, 1e-14, 500).unwrap();
    let st = straighten_manifolds(&pair).unwrap();
    // Θ₁ and Θ₂ have exact algebraic inverses.
    let chain = st.chain(2);
    let x = DVector::from_vec(vec![0.03, -0.05]);
    assert!((chain.inverse(&chain.forward(&x).unwrap()).unwrap() - &x).amax() < 1e-17);
    let g2 = MapModel::from_eval(
        std::sync::Arc::new(ConjugatedMap::new(map.evaluator(), chain)),
        BoxRegion::symmetric(2, 0.05),
    )
    .unwrap();
    let before = axis_residual(&map, &[0], &[1], 0.05, 100, 3).unwrap();
    let after = axis_residual(&g2, &[0], &[1], 0.05, 100, 3).unwrap();
    assert!(
        before > 1e-4 && after < 1e-15,
        "before {before:e}, after {after:e}"
    );
}

#[test]
fn decoupled_map_has_zero_graphs_and_identity_straightening() {
    let map = model(&[
        (0.5, vec![1, 0], 0),
        (1.0, vec![2, 0], 0),
        (2.0, vec![0, 1], 1),
        (1.0, vec![0, 3], 1),
    ]);
    let pair = stable_unstable_manifolds(&map, &[0], &[1], 0.1, 33, 1e-14, 500).unwrap();
    assert!(pair
        .g_s
        .values()
        .iter()
        .chain(pair.g_u.values())
        .all(|v| v.abs() < 1e-17));
    let chain = straighten_manifolds(&pair).unwrap().chain(2);
    let x = DVector::from_vec(vec![0.02, -0.07]);
    assert!((chain.forward(&x).unwrap() - &x).amax() < 1e-17);
}

#[test]
fn linear_saddle_gives_identity_conjugacy() {
    let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![0.5, 2.0]));
    let map = MapModel::linear(lam);
    let res = linearize_hyperbolic(&map, &lin(&map), &HyperbolicParams::default()).unwrap();
    assert_eq!(res.report.route, Route::Linear);
    assert!(
        res.report.conjugacy.max < 1e-15,
        "{:?}",
        res.report.conjugacy
    );
    for x in grid_points(0.01, 5) {
        assert!((res.chain.forward(&x).unwrap() - &x).amax() < 1e-15);
    }
}

#[test]
fn pure_contraction_is_dispatched_to_the_cascade() {
    let map = model(&[
        (0.2, vec![1, 0], 0),
        (1.0, vec![0, 2], 0),
        (0.5, vec![0, 1], 1),
    ]);
    let res = linearize_hyperbolic(&map, &lin(&map), &HyperbolicParams::default()).unwrap();
    assert_eq!(res.report.route, Route::Contraction);
    assert!(res.report.saddle.is_none() && !res.report.stages.is_empty());
    for x in grid_points(0.01, 9) {
        let y = res.chain.forward(&x).unwrap();
        assert!((y - DVector::from_vec(vec![x[0] - 20.0 * x[1] * x[1], x[1]])).amax() < 1e-6);
    }
}

#[test]
fn pure_expansion_is_linearized_through_its_inverse() {
    // F = (5 x1 − 20 x2², 2 x2) inverts (0.2 x1 + x2², 0.5 x2), so the same
    // Φ(x) = (x1 − 20 x2², x2) conjugates F to diag(5, 2).
    let map = model(&[
        (5.0, vec![1, 0], 0),
        (-20.0, vec![0, 2], 0),
        (2.0, vec![0, 1], 1),
    ]);
    let res = linearize_hyperbolic(&map, &lin(&map), &HyperbolicParams::default()).unwrap();
    assert_eq!(res.report.route, Route::Expansion);
    for x in grid_points(0.01, 9) {
        let y = res.chain.forward(&x).unwrap();
        assert!((y - DVector::from_vec(vec![x[0] - 20.0 * x[1] * x[1], x[1]])).amax() < 1e-6);
    }
    assert!(
        res.report.conjugacy.max < 1e-6,
        "{:?}",
        res.report.conjugacy
    );
}

#[test]
fn failures_are_labeled_by_phase() {
    let map = product_saddle();
    let params = HyperbolicParams {
        eta_target: 1e-6,
        ..HyperbolicParams::default()
    };
    let err = linearize_hyperbolic(&map, &lin(&map), &params).unwrap_err();
    assert_eq!(err.phase(), Some("cutoff"), "{err}");
    assert!(err.to_string().starts_with("cutoff: "));
}
