use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use smoothlin::chain::{ChainError, ConjugatedMap, Transform, TransformChain, TransformKind};
use smoothlin::dynamics::{
    BoxRegion, FnMap, GridFunction, Interpolation, MapEval, MapModel, PolyMap,
};

fn v(x: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(x)
}

fn linear(label: &str, m: DMatrix<f64>) -> Transform {
    let inverse = m.clone().try_inverse().unwrap();
    Transform::new(label, TransformKind::Linear { matrix: m, inverse })
}

fn shift_20w2() -> Transform {
    let g = GridFunction::sample(BoxRegion::symmetric(1, 0.5), vec![33], 1, |w| {
        vec![20.0 * w[0] * w[0]]
    })
    .unwrap()
    .with_interpolation(Interpolation::CubicHermite);
    Transform::new(
        "Theta",
        TransformKind::GraphShift {
            target: vec![0],
            source: vec![1],
            graph: g,
        },
    )
}

fn sample_chain() -> TransformChain {
    let mut c = TransformChain::identity(3);
    c.push(linear(
        "T",
        DMatrix::from_row_slice(3, 3, &[1.0, 0.2, 0.0, 0.0, 1.0, 0.1, 0.3, 0.0, 1.0]),
    ));
    let mut inner = TransformChain::identity(2);
    inner.push(shift_20w2());
    let mut single = TransformChain::identity(1);
    single.push(linear("s", DMatrix::from_element(1, 1, 2.0)));
    c.push(Transform::new(
        "P",
        TransformKind::Product {
            blocks: vec![(vec![0, 2], inner), (vec![1], single)],
        },
    ));
    let psi = GridFunction::sample(BoxRegion::symmetric(3, 0.5), vec![9, 9, 9], 1, |x| {
        vec![x[1] + 0.5 * x[0] * x[2]]
    })
    .unwrap()
    .with_interpolation(Interpolation::CubicHermite);
    c.push(Transform::new(
        "Phi",
        TransformKind::ComponentReplace {
            target: vec![1],
            psi,
        },
    ));
    c
}

#[test]
fn graph_shift_has_exact_inverse() {
    let mut c = TransformChain::identity(2);
    c.push(shift_20w2());
    let x = v(&[0.1, -0.2]);
    let y = c.forward(&x).unwrap();
    assert!((y[0] - (0.1 - 20.0 * 0.04)).abs() < 1e-13);
    assert!((c.inverse(&y).unwrap() - &x).amax() < 1e-15);
    let d = c.derivative(&x).unwrap();
    assert!((d[(0, 1)] - 40.0 * 0.2).abs() < 1e-12 && d[(0, 0)] == 1.0);
}

#[test]
fn chain_forward_inverse_and_derivative_agree() {
    let c = sample_chain();
    let h = 1e-6;
    for x in [v(&[0.01, -0.02, 0.03]), v(&[-0.1, 0.05, 0.02])] {
        let y = c.forward(&x).unwrap();
        assert!((c.inverse(&y).unwrap() - &x).amax() < 1e-12);
        let d = c.derivative(&x).unwrap();
        for j in 0..3 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (c.forward(&xp).unwrap() - c.forward(&xm).unwrap()) / (2.0 * h);
            assert!((fd - d.column(j)).amax() < 1e-7);
        }
    }
}

#[test]
fn export_import_roundtrip_is_exact() {
    let c = sample_chain();
    let dir = tempfile::tempdir().unwrap();
    c.export(dir.path()).unwrap();
    assert!(dir.path().join("manifest.txt").exists());
    let back = TransformChain::import(dir.path()).unwrap();
    assert_eq!(back.dim(), 3);
    assert_eq!(back.transforms().len(), c.transforms().len());
    for x in [v(&[0.01, -0.02, 0.03]), v(&[-0.1, 0.05, 0.02])] {
        assert_eq!(back.forward(&x).unwrap(), c.forward(&x).unwrap());
    }
}

#[test]
fn analytic_transforms_are_not_exportable() {
    let f = Arc::new(FnMap::new(
        1,
        |x| Ok(x * 2.0),
        |_| Ok(DMatrix::from_element(1, 1, 2.0)),
    ));
    let g = Arc::new(FnMap::new(
        1,
        |x| Ok(x * 0.5),
        |_| Ok(DMatrix::from_element(1, 1, 0.5)),
    ));
    let mut c = TransformChain::identity(1);
    c.push(Transform::new(
        "A",
        TransformKind::Analytic {
            forward: f,
            inverse: g,
        },
    ));
    assert_eq!(c.inverse(&v(&[3.0])).unwrap(), v(&[1.5]));
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(c.export(dir.path()), Err(ChainError::NotExportable(l)) if l == "A"));
}

#[test]
fn malformed_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("manifest.txt"),
        "dim = 2\nteleport | X | 1\n",
    )
    .unwrap();
    assert!(matches!(
        TransformChain::import(dir.path()),
        Err(ChainError::Format(_))
    ));
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(
        TransformChain::import(empty.path()),
        Err(ChainError::Io(_))
    ));
}

#[test]
fn conjugated_map_applies_chain_on_both_sides() {
    // Φ(x) = (x1 − 20 x2², x2) conjugates F = (0.2 x1 + x2², 0.5 x2) to Λ, so
    // Φ ∘ F ∘ Φ⁻¹ is linear up to interpolation error.
    let f = PolyMap::from_terms(
        2,
        &[
            (0.2, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (0.5, vec![0, 1], 1),
        ],
    );
    let map = MapModel::polynomial(f, BoxRegion::symmetric(2, 1.0)).unwrap();
    let mut c = TransformChain::identity(2);
    c.push(shift_20w2());
    let g = ConjugatedMap::new(map.evaluator(), c);
    let y = v(&[0.03, -0.07]);
    let out = g.eval(&y).unwrap();
    assert!((out - v(&[0.2 * 0.03, 0.5 * -0.07])).amax() < 1e-13);
    let j = g.jacobian(&y).unwrap();
    assert!((j - DMatrix::from_diagonal(&DVector::from_vec(vec![0.2, 0.5]))).amax() < 1e-10);
}
