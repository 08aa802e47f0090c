use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smoothlin::chain::TransformChain;
use smoothlin::dynamics::{BoxRegion, FnMap, MapModel, PolyMap};
use smoothlin::linearize_contraction::{
    growth_bound_diagnostics, invariant_graph, linearize_contraction, manifold_residual,
    slow_manifold_jet, BandSplit, ContractionError, ContractionParams, SlowManifold,
};
use smoothlin::spectral::{LinearPart, SpectralBand, SpectrumDecomposition};
use smoothlin::verify::{conjugacy_residual, diffeo_check};

fn poly(n: usize, terms: &[(f64, Vec<u32>, usize)]) -> MapModel {
    MapModel::polynomial(PolyMap::from_terms(n, terms), BoxRegion::symmetric(n, 1.0)).unwrap()
}

fn lin_of(map: &MapModel) -> LinearPart {
    LinearPart::from_matrix(map.linear_part(), 1e-3, 1e-9).unwrap()
}

fn params(res: usize) -> ContractionParams {
    ContractionParams {
        resolution: res,
        ..ContractionParams::default()
    }
}

/// F(x1, x2) = (0.2 x1 + x2², 0.5 x2), conjugated to Λ by Φ = (x1 − 20 x2², x2).
fn quadratic_planar() -> MapModel {
    poly(
        2,
        &[
            (0.2, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (0.5, vec![0, 1], 1),
        ],
    )
}

#[test]
fn jet_of_quadratic_planar_map_is_twenty_w_squared() {
    let map = quadratic_planar();
    let lin = lin_of(&map);
    let split = BandSplit::new(&lin, 1);
    assert_eq!(
        (split.u.len(), split.v.clone(), split.w.clone()),
        (0, vec![0], vec![1])
    );
    let h = slow_manifold_jet(map.polynomial_rep().unwrap(), &split, 10).unwrap();
    assert_eq!(h.ncomps(), 1);
    assert!((h.comps()[0].coeff(&[2]) - 20.0).abs() < 1e-12);
    assert_eq!(h.comps()[0].degree(), 2);
}

#[test]
fn quadratic_planar_cascade_matches_closed_form() {
    let map = quadratic_planar();
    let lin = lin_of(&map);
    let res = linearize_contraction(&map, &lin, &params(65)).unwrap();
    assert_eq!(
        res.stages.iter().map(|s| s.band).collect::<Vec<_>>(),
        vec![2, 1]
    );
    for s in &res.stages {
        assert!(s.dpsi_origin_error < 1e-9, "{s:?}");
        assert!(s.structure_residual < 1e-10, "{s:?}");
    }
    let region = BoxRegion::symmetric(2, 0.02);
    let grid = BoxRegion::symmetric(2, 0.019);
    for i in 0..=20 {
        for j in 0..=20 {
            let x = DVector::from_vec(vec![
                grid.lo[0] + 0.0019 * i as f64,
                grid.lo[1] + 0.0019 * j as f64,
            ]);
            let phi = res.chain.forward(&x).unwrap();
            assert!(
                (phi[0] - (x[0] - 20.0 * x[1] * x[1])).abs() < 1e-12,
                "{x:?} {phi:?}"
            );
            assert!((phi[1] - x[1]).abs() < 1e-14);
        }
    }
    let c = conjugacy_residual(&map, &res.chain, map.linear_part(), &region, 300, 3).unwrap();
    assert!(c.max < 1e-6 && c.inverse_max < 1e-6, "{c:?}");
}

#[test]
fn cascade_conjugates_three_band_polynomial() {
    // Λ = diag(0.3, 0.45, 0.6) with mixed quadratic and cubic couplings.
    let map = poly(
        3,
        &[
            (0.3, vec![1, 0, 0], 0),
            (1.0, vec![0, 1, 1], 0),
            (0.5, vec![0, 2, 0], 0),
            (0.45, vec![0, 1, 0], 1),
            (2.0, vec![0, 0, 2], 1),
            (1.0, vec![1, 0, 1], 1),
            (0.6, vec![0, 0, 1], 2),
            (1.0, vec![0, 0, 3], 2),
        ],
    );
    let lin = lin_of(&map);
    assert_eq!(lin.decomposition.m(), 3);
    let p = ContractionParams {
        report_radius: 0.01,
        ..params(17)
    };
    let res = linearize_contraction(&map, &lin, &p).unwrap();
    assert_eq!(res.stages.len(), 3);
    for s in &res.stages {
        assert!(
            s.psi.converged || s.psi.differences.last().unwrap() < &1e-9,
            "{s:?}"
        );
        if let Some(rate) = s.psi.fitted_rate {
            assert!(rate <= 1.5 * s.psi.eta, "{s:?}");
        }
    }
    let region = BoxRegion::symmetric(3, 0.01);
    let c = conjugacy_residual(&map, &res.chain, map.linear_part(), &region, 200, 5).unwrap();
    assert!(c.max < 1e-6, "{c:?}");
    let d = diffeo_check(&res.chain, &region, 50, 7).unwrap();
    assert!(
        d.inverse_residual < 1e-10 && d.min_singular_value > 0.5,
        "{d:?}"
    );
}

#[test]
fn non_diagonal_linear_part_is_handled_in_block_coordinates() {
    // Rotation-scaling block (|μ| = 0.5) plus a real eigenvalue 0.8, mixed by a shear.
    let s = DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.3, 0.1, 0.0, 1.0]);
    let d = DMatrix::from_row_slice(3, 3, &[0.3, -0.4, 0.0, 0.4, 0.3, 0.0, 0.0, 0.0, 0.8]);
    let lam = &s * d * s.clone().try_inverse().unwrap();
    let mut terms = Vec::new();
    for i in 0..3 {
        for j in 0..3 {
            terms.push((lam[(i, j)], (0..3).map(|k| u32::from(k == j)).collect(), i));
        }
    }
    terms.push((1.0, vec![0, 0, 2], 0));
    terms.push((-0.5, vec![1, 1, 0], 2));
    let map = poly(3, &terms);
    let lin = lin_of(&map);
    assert!(!lin.is_identity_basis());
    let res = linearize_contraction(&map, &lin, &params(17)).unwrap();
    let region = BoxRegion::symmetric(3, 0.01);
    let c = conjugacy_residual(&map, &res.chain, map.linear_part(), &region, 200, 9).unwrap();
    assert!(c.max < 1e-6, "{c:?}");
}

#[test]
fn non_polynomial_map_uses_graph_transform() {
    // F = (0.2 x1 + sin(x2)², 0.5 x2): the invariant graph is close to 20 x2².
    let eval = FnMap::new(
        2,
        |x| {
            Ok(DVector::from_vec(vec![
                0.2 * x[0] + x[1].sin().powi(2),
                0.5 * x[1],
            ]))
        },
        |x| {
            Ok(DMatrix::from_row_slice(
                2,
                2,
                &[0.2, (2.0 * x[1]).sin(), 0.0, 0.5],
            ))
        },
    );
    let map = MapModel::from_eval(Arc::new(eval), BoxRegion::symmetric(2, 1.0)).unwrap();
    let lin = lin_of(&map);
    let split = BandSplit::new(&lin, 1);
    let w_box = BoxRegion::symmetric(1, 0.03);
    let (h, log) = invariant_graph(&map, &split, &w_box, 65, 2, 1e-13, 300).unwrap();
    assert!(log.iterations < 300, "{log:?}");
    let manifold = SlowManifold::Grid(h.clone());
    assert!(manifold_residual(&map, &split, &manifold, &w_box, 200, 1).unwrap() < 1e-9);
    // Invariant graphs tangent to x2 form the family 20 x2² + … + c|x2|^{log 0.2/log 0.5};
    // the continuation beyond the box selects one member with small c.
    let err = h.eval(&[0.01]).unwrap()[0] - 20.0 * 1e-4;
    assert!(err.abs() < 1e-2 * 20.0 * 1e-4, "{err:e}");
    let res = linearize_contraction(&map, &lin, &params(33)).unwrap();
    assert_eq!(res.stages[1].manifold, "graph");
    let c = conjugacy_residual(
        &map,
        &res.chain,
        map.linear_part(),
        &BoxRegion::symmetric(2, 0.02),
        200,
        4,
    )
    .unwrap();
    assert!(c.max < 1e-6, "{c:?}");
}

#[test]
fn resonant_jet_falls_back_to_graph_transform() {
    // 0.25 = 0.5²: no polynomial conjugacy, but a C¹ one exists.
    let map = poly(
        2,
        &[
            (0.25, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (0.5, vec![0, 1], 1),
        ],
    );
    let lin = lin_of(&map);
    let split = BandSplit::new(&lin, 1);
    assert!(matches!(
        slow_manifold_jet(map.polynomial_rep().unwrap(), &split, 4),
        Err(ContractionError::Resonance { degree: 2 })
    ));
    let res = linearize_contraction(&map, &lin, &params(33)).unwrap();
    assert_eq!(res.stages[1].manifold, "graph");
    let c = conjugacy_residual(
        &map,
        &res.chain,
        map.linear_part(),
        &BoxRegion::symmetric(2, 0.02),
        200,
        4,
    )
    .unwrap();
    assert!(c.max < 1e-5, "{c:?}");
}

#[test]
fn expanding_map_is_rejected() {
    let map = poly(2, &[(0.5, vec![1, 0], 0), (2.0, vec![0, 1], 1)]);
    let r = linearize_contraction(&map, &lin_of(&map), &params(9));
    assert!(
        matches!(r, Err(ContractionError::NotContraction { d: 1, m: 2 })),
        "{r:?}"
    );
}

#[test]
fn band_condition_violation_is_rejected() {
    let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 0.2, 0.9, 0.95]));
    let dec = SpectrumDecomposition::from_bands(vec![
        SpectralBand::new(0.1, 0.2),
        SpectralBand::new(0.9, 0.95),
    ])
    .unwrap();
    let lin = LinearPart::from_matrix_and_bands(&lam, dec).unwrap();
    let r = linearize_contraction(&MapModel::linear(lam), &lin, &params(5));
    assert!(
        matches!(
            r,
            Err(ContractionError::BandConditionViolated { band: 1, .. })
        ),
        "{r:?}"
    );
}

#[test]
fn linear_map_gives_identity_conjugacy() {
    let lam = DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.5]));
    let map = MapModel::linear(lam.clone());
    let res = linearize_contraction(&map, &lin_of(&map), &params(9)).unwrap();
    let x = DVector::from_vec(vec![0.013, -0.007]);
    assert!((res.chain.forward(&x).unwrap() - &x).amax() < 1e-16);
}

#[test]
fn growth_rates_respect_band_bounds() {
    // F = (0.2 x1 + x1 x2, 0.5 x2), stage ℓ = 1: μ_1^+ = 0.2, μ_m^+ = 0.5.
    let map = poly(
        2,
        &[
            (0.2, vec![1, 0], 0),
            (1.0, vec![1, 1], 0),
            (0.5, vec![0, 1], 1),
        ],
    );
    let lin = lin_of(&map);
    let split = BandSplit::new(&lin, 1);
    let manifold =
        SlowManifold::Jet(slow_manifold_jet(map.polynomial_rep().unwrap(), &split, 6).unwrap());
    let p = TransformChain::identity(2);
    let rep = growth_bound_diagnostics(
        &map,
        &p,
        &split,
        &manifold,
        &lin,
        &BoxRegion::symmetric(2, 0.01),
        40,
        15,
        2,
    )
    .unwrap();
    assert!(rep.within(0.05), "{rep:?}");
    assert!((rep.b1_rate - 0.5f64.ln()).abs() < 0.05, "{rep:?}");
    assert!(rep.r_squared.iter().all(|r| *r > 0.99), "{rep:?}");
}
