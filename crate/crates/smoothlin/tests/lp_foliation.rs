use nalgebra::{DMatrix, DVector};
use smoothlin::dynamics::{bump_modify, BoxRegion, MapModel, PolyMap};
use smoothlin::lp_foliation::{
    foliation_properties, holder_check_dq0, measure_t_lipschitz, stable_foliation,
    verify_lp_equivalence, LpError, LpParameters, LpProblem,
};

fn coupled() -> MapModel {
    // F(x1, x2) = (0.5 x1 + x1 x2, 2 x2)
    let p = PolyMap::from_terms(
        2,
        &[
            (0.5, vec![1, 0], 0),
            (1.0, vec![1, 1], 0),
            (2.0, vec![0, 1], 1),
        ],
    );
    MapModel::polynomial(p, BoxRegion::symmetric(2, 1.0)).unwrap()
}

fn linear_planar() -> MapModel {
    MapModel::linear(DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 2.0]))
}

fn coupled_problem(r0: f64) -> LpProblem {
    let (g, rec) = bump_modify(&coupled(), r0, 2.0 * r0, 0.5).unwrap();
    LpProblem::new(g, vec![0], vec![1], rec.eta).unwrap()
}

fn params() -> LpParameters {
    LpParameters::auto(0.5, 2.0, 2.0).unwrap()
}

#[test]
fn auto_weights_are_admissible() {
    let p = params();
    assert!(0.5 < p.gamma1 && p.gamma1 < 1.0 && 1.0 < p.gamma2 && p.gamma2 < 2.0);
    assert!(p.gamma1 * 2.0 < p.gamma2);
    assert_eq!((p.n_seq, p.k_tail), (8, 32));
}

#[test]
fn inadmissible_weights_rejected() {
    let mut p = params();
    p.gamma1 = 0.4;
    assert!(matches!(
        p.validate(0.5, 2.0, 2.0),
        Err(LpError::InvalidWeights(_))
    ));
    let mut p = params();
    p.k_tail = 4;
    assert!(matches!(
        p.validate(0.5, 2.0, 2.0),
        Err(LpError::InvalidParameters(_))
    ));
}

#[test]
fn linear_map_first_iterate_is_fixed_point() {
    let prob = LpProblem::new(linear_planar(), vec![0], vec![1], 0.0).unwrap();
    let p = params();
    let x = DVector::from_vec(vec![0.003, -0.002]);
    let y = DVector::from_vec(vec![0.001]);
    let zero = vec![DVector::zeros(2); p.k_tail + 1];
    let t0 = prob.operator_t_point(&x, &y, &zero).unwrap();
    for (n, v) in t0.iter().enumerate() {
        let expect = 0.5f64.powi(n as i32) * (0.001 - 0.003);
        assert!((v[0] - expect).abs() < 1e-18);
        assert_eq!(v[1], 0.0);
    }
    // T is constant in v for a linear map.
    let other: Vec<DVector<f64>> = (0..=p.k_tail)
        .map(|k| DVector::from_vec(vec![0.1 / (k + 1) as f64, 0.2]))
        .collect();
    assert_eq!(prob.operator_t_point(&x, &y, &other).unwrap(), t0);
    let sol = prob.solve_point(&x, &y, &p, true).unwrap();
    assert!(sol.delta_v.len() <= 2);
    // S(v, w)_n = (diag(0, -Λ_-^n), Λ_-^n) exactly.
    let w = &sol.w.unwrap();
    for (n, wn) in w.iter().enumerate() {
        let l = 0.5f64.powi(n as i32);
        let expect = DMatrix::from_row_slice(2, 3, &[-l, 0.0, l, 0.0, 0.0, 0.0]);
        assert!((wn - expect).amax() < 1e-18);
    }
}

#[test]
fn linear_map_leaves_are_affine() {
    let prob = LpProblem::new(linear_planar(), vec![0], vec![1], 0.0).unwrap();
    let omega = BoxRegion::symmetric(3, 0.01);
    let fol = stable_foliation(&prob, &params(), &omega, &[5, 5, 5]).unwrap();
    for node in 0..fol.h.node_count() {
        let c = fol.h.node_coords(node);
        assert!((fol.h.node_value(node)[0] - c[1]).abs() < 1e-18);
    }
    assert!(verify_lp_equivalence(&linear_planar(), &fol.q, 50, 1).unwrap() < 1e-16);
}

#[test]
fn decoupled_map_h_independent_of_y() {
    // F = (0.5 x1 + x1^2, 2 x2 + x2^2)
    let p = PolyMap::from_terms(
        2,
        &[
            (0.5, vec![1, 0], 0),
            (1.0, vec![2, 0], 0),
            (2.0, vec![0, 1], 1),
            (1.0, vec![0, 2], 1),
        ],
    );
    let map = MapModel::polynomial(p, BoxRegion::symmetric(2, 1.0)).unwrap();
    let (g, rec) = bump_modify(&map, 0.02, 0.04, 0.5).unwrap();
    let prob = LpProblem::new(g, vec![0], vec![1], rec.eta).unwrap();
    let fol =
        stable_foliation(&prob, &params(), &BoxRegion::symmetric(3, 0.01), &[5, 5, 5]).unwrap();
    for node in 0..fol.h.node_count() {
        let c = fol.h.node_coords(node);
        assert!((fol.h.node_value(node)[0] - c[1]).abs() < 1e-12);
    }
}

#[test]
fn coupled_operator_t_is_contractive() {
    let prob = coupled_problem(0.02);
    assert!(prob.eta() <= 0.2, "eta = {}", prob.eta());
    let p = params();
    let (kt, ks) = prob.contraction_factors(&p);
    assert!(kt < 1.0 && ks < 1.0);
    let x = DVector::from_vec(vec![0.004, 0.007]);
    let y = DVector::from_vec(vec![-0.003]);
    let c = measure_t_lipschitz(&prob, &p, &x, &y, 20, 0.01, 7).unwrap();
    assert!(c < 1.0 && c <= kt, "measured {c}, bound {kt}");
}

#[test]
fn coupled_foliation_residuals() {
    let prob = coupled_problem(0.02);
    let omega = BoxRegion::symmetric(3, 0.01);
    let fol = stable_foliation(&prob, &params(), &omega, &[9, 9, 9]).unwrap();
    assert!(fol.derivative_check < 1e-6);
    let props = foliation_properties(prob.map(), &fol, 400, 3).unwrap();
    assert!(props.b1 < 1e-10, "{props:?}");
    assert!(props.b2 < 1e-10, "{props:?}");
    assert!(props.b3 < 1e-4 && props.b3_samples > 50, "{props:?}");
    assert!(props.b4 < 1e-4 && props.b4_samples > 50, "{props:?}");
    // Stable leaves of this map are the lines {x2 = const}.
    for node in 0..fol.h.node_count() {
        let c = fol.h.node_coords(node);
        assert!((fol.h.node_value(node)[0] - c[1]).abs() < 1e-10);
    }
    let eq = verify_lp_equivalence(prob.map(), &fol.q, 200, 5).unwrap();
    assert!(eq < 1e-4, "{eq}");
    let (est, _) = holder_check_dq0(&fol, 0.5, 11).unwrap();
    assert!(est.exponent >= 0.4, "{est:?}");
}

#[test]
fn eta_too_large_is_reported() {
    let (g, rec) = bump_modify(&coupled(), 0.3, 0.6, 10.0).unwrap();
    let prob = LpProblem::new(g, vec![0], vec![1], rec.eta).unwrap();
    let r = stable_foliation(&prob, &params(), &BoxRegion::symmetric(3, 0.1), &[3, 3, 3]);
    assert!(matches!(r, Err(LpError::EtaTooLarge { .. })), "{r:?}");
}
