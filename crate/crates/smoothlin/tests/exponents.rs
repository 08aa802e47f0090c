use proptest::prelude::*;
use smoothlin::exponents::{
    beta_contraction, beta_expansion, beta_overall, beta_planar, beta_s, beta_u, series_beta,
    ExponentError,
};
use smoothlin::spectral::{SpectralBand, SpectrumDecomposition};

fn dec(list: &[(f64, f64)]) -> SpectrumDecomposition {
    SpectrumDecomposition::from_bands(list.iter().map(|&(a, b)| SpectralBand::new(a, b)).collect())
        .unwrap()
}

fn points(list: &[f64]) -> Vec<SpectralBand> {
    list.iter().map(|&x| SpectralBand::point(x)).collect()
}

fn gap_without_rs() -> SpectrumDecomposition {
    dec(&[(0.1, 1.0 / 6.0), (2.0, 3.0), (9.0, 10.0)])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn series_beta_branches() {
    assert_eq!(series_beta(0.5, 0.5, 0.8, 1.0, 0.0).unwrap(), 0.5);
    assert!(close(
        series_beta(0.7, 0.25, 2.0, 0.5, 0.01).unwrap(),
        0.69,
        1e-15
    ));
    // Third branch, evaluated independently: ln 0.9 / (ln 0.9 − ln 1.05).
    let v = series_beta(1.0, 0.9, 1.05, 1.0, 0.0).unwrap();
    assert!(close(v, 0.6834904379007187, 1e-12), "{v}");
    assert!(close(
        series_beta(1.0, 0.5, 2.0, 1.0, 0.0).unwrap(),
        0.5,
        1e-12
    ));
    assert!(matches!(
        series_beta(1.0, 1.2, 2.0, 1.0, 0.0),
        Err(ExponentError::HypothesisViolated(_))
    ));
}

#[test]
fn beta_s_and_beta_u_examples() {
    let two = dec(&[(0.5, 0.5), (2.0, 2.0)]);
    assert!(close(beta_s(&two, 0.0).unwrap(), 0.5, 1e-12));
    assert!(close(beta_s(&two, 0.01).unwrap(), 0.49, 1e-12));
    assert!(close(beta_u(&two, 0.0).unwrap(), 0.5, 1e-12));
    let r7 = gap_without_rs();
    let l = |x: f64| x.ln();
    let s_oracle = (l(1.0 / 6.0) + l(10.0) - l(2.0)) / (l(1.0 / 6.0) - l(10.0));
    let u_oracle = (l(2.0) + l(0.1) - l(1.0 / 6.0)) / (l(2.0) - l(0.1));
    assert!(close(beta_s(&r7, 0.0).unwrap(), s_oracle, 1e-12));
    assert!(close(s_oracle, 0.04453009609308601, 1e-15));
    // The direct evaluation of the dual formula is 0.0608604…, not 0.04510.
    assert!(close(beta_u(&r7, 0.0).unwrap(), u_oracle, 1e-12));
    assert!(close(u_oracle, 0.06086043082136224, 1e-15));
}

#[test]
fn symmetric_spectrum_has_equal_side_exponents() {
    for lam in [0.1, 0.3, 0.7] {
        let d = dec(&[(lam, lam), (1.0 / lam, 1.0 / lam)]);
        assert!(close(
            beta_s(&d, 1e-3).unwrap(),
            beta_u(&d, 1e-3).unwrap(),
            1e-12
        ));
    }
}

#[test]
fn contraction_recursion_examples() {
    let (b, z) = beta_contraction(&points(&[0.5]), 0.5, 0.0).unwrap();
    assert_eq!((b, z.len()), (vec![1.0], 0));
    let (b, z) = beta_contraction(&points(&[0.1, 0.5]), 0.5, 0.0).unwrap();
    assert_eq!(z, vec![1.0]);
    assert!(close(
        b[0],
        0.5f64.ln() / (0.1f64.ln() - 0.5f64.ln()),
        1e-12
    ));
    assert!(close(b[0], 0.4306765580733931, 1e-12));
    // {0.4},{0.5}: ζ₁ = ln0.4/ln0.5 − 1, and the second term reduces to exactly ζ₁
    // for point bands (σ − 1 < 2 branch), so β₁ = ζ₁ = 0.3219281, not 0.31904.
    let (b, z) = beta_contraction(&points(&[0.4, 0.5]), 0.5, 0.0).unwrap();
    let zeta = 0.4f64.ln() / 0.5f64.ln() - 1.0;
    assert!(close(z[0], zeta, 1e-12));
    assert!(
        close(b[0], zeta, 1e-12) && close(b[0], 0.3219280948873622, 1e-12),
        "{b:?}"
    );
}

#[test]
fn expansion_recursion_examples() {
    let (b, _) = beta_expansion(&points(&[3.0]), 0.0).unwrap();
    assert_eq!(b, vec![1.0]);
    let (b, z) = beta_expansion(&points(&[2.0, 10.0]), 0.0).unwrap();
    assert_eq!(z, vec![1.0]);
    assert!(close(b[1], 2f64.ln() / (10f64.ln() - 2f64.ln()), 1e-12));
    let (be, _) = beta_expansion(&points(&[2.0, 2.5]), 0.0).unwrap();
    let (bc, _) = beta_contraction(&points(&[0.4, 0.5]), 0.5, 0.0).unwrap();
    assert!(close(be[1], bc[0], 1e-12));
}

#[test]
fn overall_examples() {
    let r = beta_overall(&dec(&[(0.5, 0.5), (2.0, 2.0)]), 0.0).unwrap();
    assert!(close(r.beta_overall, 0.5, 1e-12));
    let r = beta_overall(&dec(&[(0.1, 0.1), (2.0, 2.0)]), 0.0).unwrap();
    assert!(close(r.beta_s.unwrap(), 0.7686217868402408, 1e-12));
    assert!(close(r.beta_u.unwrap(), 0.23137821315975918, 1e-12));
    assert!(close(r.beta_overall, 0.23137821315975918, 1e-12));
    let r = beta_overall(&dec(&[(0.1, 0.1), (0.5, 0.5)]), 0.0).unwrap();
    assert!(r.beta_s.is_none() && close(r.beta_overall, 0.4306765580733931, 1e-12));
    let r = beta_overall(&gap_without_rs(), 1e-3).unwrap();
    assert!(
        close(r.beta_overall, 0.04453009609308601 - 1e-3, 1e-12),
        "{r}"
    );
    assert!(r.to_string().contains("beta_overall = "));
}

#[test]
fn planar_examples() {
    assert!(close(beta_planar(0.5, 2.0, 0.0), 0.5, 1e-12));
    assert!(close(
        beta_planar(0.1, 2.0, 0.0),
        0.23137821315975918,
        1e-12
    ));
    for lam in [0.05, 0.4, 0.9] {
        assert!(close(beta_planar(lam, 1.0 / lam, 0.01), 0.49, 1e-12));
    }
}

#[test]
fn series_beta_is_continuous_across_the_boundary() {
    let (alpha, tau1, tau2) = (0.8, 0.5, 1.25);
    let rho0 = 1.0 / tau2;
    let mut prev = f64::INFINITY;
    for k in 1..12 {
        let rho = rho0 * (1.0 + 10f64.powi(-k));
        let v = series_beta(alpha, tau1, tau2, rho, 0.0).unwrap();
        let gap = (alpha - v).abs();
        assert!(gap < prev);
        prev = gap;
    }
    assert!(prev < 1e-10);
}

fn ascending(n: usize, lo: f64, hi: f64) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(lo..hi, n).prop_map(|mut v| {
        v.sort_by(f64::total_cmp);
        v
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn overall_equals_planar(l1 in 0.01f64..0.99, l2 in 1.01f64..100.0, eps in 0.0f64..1e-3) {
        let r = beta_overall(&dec(&[(l1, l1), (l2, l2)]), eps).unwrap();
        prop_assert!(close(r.beta_overall, beta_planar(l1, l2, eps), 1e-12));
    }

    #[test]
    fn two_band_contraction_closed_form(l2 in 0.05f64..0.95, sigma in 1.05f64..6.0) {
        let l1 = l2.powf(sigma);
        prop_assume!(l1 > 1e-300 && (sigma - 2.0).abs() > 1e-9);
        let (b, _) = beta_contraction(&points(&[l1, l2]), l2, 0.0).unwrap();
        let oracle = if sigma > 2.0 { l2.ln() / (l1.ln() - l2.ln()) } else { sigma - 1.0 };
        prop_assert!(close(b[0], oracle, 1e-9), "sigma = {}, got {}, oracle {}", sigma, b[0], oracle);
    }

    #[test]
    fn expansion_is_dual_to_contraction(
        v in ascending(4, 1.05f64, 20.0),
        widen in prop::collection::vec(1.0f64..1.02, 4),
        eps in 0.0f64..1e-3,
    ) {
        let list: Vec<(f64, f64)> = v.iter().zip(&widen).map(|(&a, &w)| (a, a * w)).collect();
        prop_assume!(list.windows(2).all(|w| w[0].1 < w[1].0));
        let bands: Vec<SpectralBand> = list.iter().map(|&(a, b)| SpectralBand::new(a, b)).collect();
        let recip: Vec<SpectralBand> = bands.iter().rev().map(|b| b.reciprocal()).collect();
        let top = recip[recip.len() - 1].lambda_plus;
        let e = beta_expansion(&bands, eps);
        let c = beta_contraction(&recip, top, eps);
        match (e, c) {
            (Ok((be, ze)), Ok((bc, zc))) => {
                for (x, y) in be.iter().zip(bc.iter().rev()) {
                    prop_assert!(close(*x, *y, 1e-12));
                }
                for (x, y) in ze.iter().zip(zc.iter().rev()) {
                    prop_assert!(close(*x, *y, 1e-12));
                }
            }
            (Err(_), Err(_)) => {}
            (e, c) => prop_assert!(false, "duality broken: {:?} vs {:?}", e, c),
        }
    }

    #[test]
    fn exponents_are_monotone_in_epsilon(
        s in ascending(2, 0.01f64, 0.9),
        u in ascending(2, 1.1f64, 50.0),
        e1 in 0.0f64..5e-3,
        de in 0.0f64..5e-3,
    ) {
        let d = dec(&[(s[0], s[0]), (s[1], s[1]), (u[0], u[0]), (u[1], u[1])]);
        prop_assume!(d.m() == 4);
        let (Ok(a), Ok(b)) = (beta_overall(&d, e1), beta_overall(&d, e1 + de)) else {
            return Ok(());
        };
        prop_assert!(b.beta_overall <= a.beta_overall + 1e-15);
        for (x, y) in a.beta_sequence_contraction.iter().zip(&b.beta_sequence_contraction) {
            prop_assert!(y <= &(x + 1e-15));
        }
        for (x, y) in a.beta_sequence_expansion.iter().zip(&b.beta_sequence_expansion) {
            prop_assert!(y <= &(x + 1e-15));
        }
        prop_assert!(b.beta_s.unwrap() <= a.beta_s.unwrap() + 1e-15);
        prop_assert!(b.beta_u.unwrap() <= a.beta_u.unwrap() + 1e-15);
    }

    #[test]
    fn report_entries_lie_in_unit_interval(
        s in ascending(2, 0.01f64, 0.9),
        u in ascending(2, 1.1f64, 50.0),
    ) {
        let d = dec(&[(s[0], s[0]), (s[1], s[1]), (u[0], u[0]), (u[1], u[1])]);
        prop_assume!(d.m() == 4);
        if let Ok(r) = beta_overall(&d, 1e-3) {
            let all: Vec<f64> = r.beta_sequence_contraction.iter()
                .chain(&r.zeta_sequence_contraction)
                .chain(&r.beta_sequence_expansion)
                .chain(&r.zeta_sequence_expansion)
                .copied()
                .chain([r.beta_s.unwrap(), r.beta_u.unwrap(), r.beta_overall])
                .collect();
            prop_assert!(all.iter().all(|v| *v > 0.0 && *v <= 1.0), "{r}");
            let min4 = r.beta_sequence_contraction[0]
                .min(r.beta_s.unwrap())
                .min(*r.beta_sequence_expansion.last().unwrap())
                .min(r.beta_u.unwrap());
            prop_assert_eq!(r.beta_overall, min4);
        }
    }
}
