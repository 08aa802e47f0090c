//! Acceptance suite: one PASS/FAIL line per criterion AC1–AC9, with the
//! measured values and the runtime. Every criterion is evaluated even when an
//! earlier one fails. The process exits 0 so that the suite can run inside
//! `cargo test`; set `ACCEPTANCE_STRICT=1` to exit 1 when any line is FAIL.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smoothlin::chain::TransformChain;
use smoothlin::cli::{run, Command, RunConfig};
use smoothlin::dynamics::{bump_modify, BoxRegion, MapModel, PolyMap};
use smoothlin::exponents::{beta_contraction, beta_expansion, beta_overall, beta_planar};
use smoothlin::linearize_contraction::{
    growth_bound_diagnostics, linearize_contraction, slow_manifold_jet, BandSplit,
    ContractionParams, SlowManifold,
};
use smoothlin::linearize_hyperbolic::{
    linearize_hyperbolic, stable_unstable_manifolds, HyperbolicParams,
};
use smoothlin::lp_foliation::{
    foliation_properties, measure_t_lipschitz, stable_foliation, verify_lp_equivalence,
    FoliationResult, LpParameters, LpProblem,
};
use smoothlin::spectral::{
    check_band_condition, check_gap_condition, check_rs_condition, cluster_eigenvalues, LinearPart,
    Margins, SpectralBand, SpectrumDecomposition,
};
use smoothlin::verify::{
    chain_derivative_holder, conjugacy_residual, holder_exponent, HolderOptions,
};

type Outcome = Result<(bool, String), String>;

/// Identifier, runtime limit in seconds, and check.
type Criterion = (&'static str, Option<f64>, fn() -> Outcome);

fn poly(n: usize, terms: &[(f64, Vec<u32>, usize)]) -> MapModel {
    MapModel::polynomial(PolyMap::from_terms(n, terms), BoxRegion::symmetric(n, 1.0))
        .expect("valid polynomial map")
}

fn lin_of(map: &MapModel) -> Result<LinearPart, String> {
    LinearPart::from_matrix(map.linear_part(), 0.2, 1e-9).map_err(|e| e.to_string())
}

fn bands(list: &[(f64, f64)]) -> Result<SpectrumDecomposition, String> {
    SpectrumDecomposition::from_bands(list.iter().map(|&(a, b)| SpectralBand::new(a, b)).collect())
        .map_err(|e| e.to_string())
}

/// F(x) = (0.2 x1 + x2², 0.5 x2), conjugated to Λ by (x1 − 20 x2², x2).
fn planar_quadratic() -> MapModel {
    poly(
        2,
        &[
            (0.2, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (0.5, vec![0, 1], 1),
        ],
    )
}

/// F(x) = (0.2 x1 + x1 x2, 0.5 x2): its Ψ-limit x1 ∏ (1 + 5·2^{−j} x2) converges geometrically.
fn planar_product() -> MapModel {
    poly(
        2,
        &[
            (0.2, vec![1, 0], 0),
            (1.0, vec![1, 1], 0),
            (0.5, vec![0, 1], 1),
        ],
    )
}

/// F(x) = (0.5 x1 + x1 x2, 2 x2).
fn product_saddle() -> MapModel {
    poly(
        2,
        &[
            (0.5, vec![1, 0], 0),
            (1.0, vec![1, 1], 0),
            (2.0, vec![0, 1], 1),
        ],
    )
}

/// F(x) = (0.5 x1 + x2², 2 x2).
fn quadratic_saddle() -> MapModel {
    poly(
        2,
        &[
            (0.5, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (2.0, vec![0, 1], 1),
        ],
    )
}

/// F(x) = (0.5 x1 + x2², 2 x2 + x1²).
fn coupled_saddle() -> MapModel {
    poly(
        2,
        &[
            (0.5, vec![1, 0], 0),
            (1.0, vec![0, 2], 0),
            (2.0, vec![0, 1], 1),
            (1.0, vec![2, 0], 1),
        ],
    )
}

/// Three contracting bands with quadratic and cubic couplings.
fn three_band() -> MapModel {
    poly(
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
    )
}

/// φ(y) = ∏_{j≥0} (1 + y 2^{−j})⁻¹, truncated once the factor is 1 to rounding.
fn phi_product(y: f64) -> f64 {
    let mut p = 1.0;
    let mut t = y;
    while t.abs() >= 1e-17 {
        p /= 1.0 + t;
        t *= 0.5;
    }
    p
}

fn grid2(r: f64, k: usize) -> impl Iterator<Item = DVector<f64>> {
    (0..k * k).map(move |idx| {
        let (i, j) = (idx / k, idx % k);
        let s = |t: usize| -r + 2.0 * r * t as f64 / (k - 1) as f64;
        DVector::from_vec(vec![s(i), s(j)])
    })
}

fn ac1() -> Outcome {
    let d = 1e-3;
    let r5 = bands(&[
        (1.0 / 16.0 + d, 1.0 / 8.0),
        (1.0 / 8.0 + d, 1.0 / 4.0),
        (1.0 / 4.0 + d, 1.0 / 2.0),
    ])?;
    let r5_band = check_band_condition(&r5).holds();
    let r7 = bands(&[(0.1, 1.0 / 6.0), (2.0, 3.0), (9.0, 10.0)])?;
    let r7_gap = check_gap_condition(&r7, &Margins::exact(&r7))
        .map_err(|e| e.to_string())?
        .holds();
    let r7_band = check_band_condition(&r7).holds();
    let r7_rs = check_rs_condition(&r7).map_err(|e| e.to_string())?.holds();
    let r8 =
        cluster_eigenvalues(&[0.1, 1.0 / 6.0, 2.0, 5.0, 10.0], 0.2).map_err(|e| e.to_string())?;
    let r8_gap = check_gap_condition(&r8, &Margins::exact(&r8))
        .map_err(|e| e.to_string())?
        .holds();
    let pass = r5_band && r7_band && r7_gap && !r7_rs && r8_gap;
    Ok((
        pass,
        format!(
            "dyadic_bands band={r5_band} (expect true); gap_without_rs band row={r7_band}, gap row={r7_gap} (expect true), rs={r7_rs} (expect false); clustered_gap gap={r8_gap} (expect true)"
        ),
    ))
}

fn ac2() -> Outcome {
    let planar = beta_planar(0.5, 2.0, 0.0);
    let overall = beta_overall(&bands(&[(0.5, 0.5), (2.0, 2.0)])?, 0.0)
        .map_err(|e| e.to_string())?
        .beta_overall;
    let e1 = (planar - 0.5).abs().max((overall - planar).abs());
    let (bc, _) = beta_contraction(
        &[SpectralBand::point(0.1), SpectralBand::point(0.5)],
        0.5,
        0.0,
    )
    .map_err(|e| e.to_string())?;
    let direct = 0.5f64.ln() / (0.1f64.ln() - 0.5f64.ln());
    let e2 = (bc[0] - direct).abs();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst, mut compared) = (0.0f64, 0usize);
    for _ in 0..100 {
        let m = rng.gen_range(1..=4);
        let mut lo = 1.0;
        let mut list = Vec::new();
        for _ in 0..m {
            let a = lo * rng.gen_range(1.05..4.0);
            let b = a * rng.gen_range(1.0..1.02);
            list.push(SpectralBand::new(a, b));
            lo = b;
        }
        let recip: Vec<SpectralBand> = list.iter().rev().map(|b| b.reciprocal()).collect();
        let top = recip[recip.len() - 1].lambda_plus;
        match (
            beta_expansion(&list, 1e-4),
            beta_contraction(&recip, top, 1e-4),
        ) {
            (Ok((be, ze)), Ok((bc, zc))) => {
                compared += 1;
                for (x, y) in be
                    .iter()
                    .zip(bc.iter().rev())
                    .chain(ze.iter().zip(zc.iter().rev()))
                {
                    worst = worst.max((x - y).abs());
                }
            }
            (Err(_), Err(_)) => {}
            _ => {
                return Ok((
                    false,
                    "duality broken: one side failed and the other did not".into(),
                ))
            }
        }
    }
    let pass = e1 <= 1e-12 && e2 <= 1e-12 && worst <= 1e-12 && compared >= 50;
    Ok((
        pass,
        format!(
            "planar/overall err={e1:.2e}; beta_contraction({{0.1}},{{0.5}})={:.12} err={e2:.2e}; duality max err={worst:.2e} over {compared}/100 spectra",
            bc[0]
        ),
    ))
}

fn ac3() -> Outcome {
    let map = planar_quadratic();
    let lin = lin_of(&map)?;
    let res = 65;
    let params = ContractionParams {
        report_radius: 0.02,
        resolution: res,
        ..ContractionParams::default()
    };
    let out = linearize_contraction(&map, &lin, &params).map_err(|e| e.to_string())?;
    let h = 0.04 / (res - 1) as f64;
    let mut err = 0.0f64;
    for x in grid2(0.02, res) {
        let y = out.chain.forward(&x).map_err(|e| e.to_string())?;
        err = err.max((y - DVector::from_vec(vec![x[0] - 20.0 * x[1] * x[1], x[1]])).amax());
    }
    let c = conjugacy_residual(
        &map,
        &out.chain,
        map.linear_part(),
        &BoxRegion::symmetric(2, 0.02),
        400,
        3,
    )
    .map_err(|e| e.to_string())?;
    let pass = err <= 5.0 * h * h && c.max <= 1e-6 && c.inverse_max <= 1e-6;
    Ok((
        pass,
        format!(
            "oracle max err={err:.2e} (bound 5h²={:.2e}, h={h:.3e}); conjugacy residual={:.2e}, inverse={:.2e}",
            5.0 * h * h,
            c.max,
            c.inverse_max
        ),
    ))
}

fn ac4() -> Outcome {
    let map = product_saddle();
    let res = linearize_hyperbolic(&map, &lin_of(&map)?, &HyperbolicParams::default())
        .map_err(|e| e.to_string())?;
    let mut oracle_err = 0.0f64;
    for x in grid2(0.01, 21) {
        let y = res.chain.forward(&x).map_err(|e| e.to_string())?;
        oracle_err =
            oracle_err.max((y - DVector::from_vec(vec![x[0] * phi_product(x[1]), x[1]])).amax());
    }
    let decoupling = res
        .report
        .saddle
        .as_ref()
        .map_or(f64::NAN, |s| s.decoupling_residual);
    let q = quadratic_saddle();
    let pair = stable_unstable_manifolds(&q, &[0], &[1], 0.2, 65, 1e-14, 500)
        .map_err(|e| e.to_string())?;
    let mut gu_err = 0.0f64;
    for k in 0..=40 {
        let y = -0.19 + 0.38 * k as f64 / 40.0;
        let g = pair.g_u.eval(&[y]).map_err(|e| e.to_string())?[0];
        gu_err = gu_err.max((g - 2.0 / 7.0 * y * y).abs());
    }
    // Cubic Hermite interpolation reproduces the quadratic oracle up to rounding.
    let pass = oracle_err <= 1e-4 && decoupling <= 1e-4 && gu_err <= 1e-13;
    Ok((
        pass,
        format!(
            "product oracle max err={oracle_err:.3e} (bound 1e-4{}); decoupling residual={decoupling:.2e}; g_u=(2/7)y² err={gu_err:.2e}; conjugacy residual={:.2e}",
            if oracle_err <= 1e-4 { "" } else { ", exceeded" },
            res.report.conjugacy.max
        ),
    ))
}

fn coupled_lp(
    res: usize,
    radius: f64,
    params: &LpParameters,
) -> Result<(LpProblem, FoliationResult), String> {
    let (g, rec) = bump_modify(&product_saddle(), 0.02, 0.04, 0.5).map_err(|e| e.to_string())?;
    let prob = LpProblem::new(g, vec![0], vec![1], rec.eta).map_err(|e| e.to_string())?;
    let fol = stable_foliation(&prob, params, &BoxRegion::symmetric(3, radius), &[res; 3])
        .map_err(|e| e.to_string())?;
    Ok((prob, fol))
}

/// Residuals of the Lyapunov–Perron identity under successive halvings of the grid step.
fn refinement(radius: f64, params: &LpParameters) -> Result<Vec<f64>, String> {
    [5, 9, 17, 33]
        .into_iter()
        .map(|res| {
            let (prob, fol) = coupled_lp(res, radius, params)?;
            verify_lp_equivalence(prob.map(), &fol.q, 1000, 5).map_err(|e| e.to_string())
        })
        .collect()
}

fn ratios(r: &[f64]) -> String {
    r.windows(2)
        .map(|w| format!("{:.2}", w[1] / w[0]))
        .collect::<Vec<_>>()
        .join("/")
}

fn ac5() -> Outcome {
    let auto = LpParameters::auto(0.5, 2.0, 2.0).map_err(|e| e.to_string())?;
    let residuals = refinement(0.01, &auto)?;
    // On a box whose first N iterates stay inside the cutoff radius the grid
    // resolves q_n; reported as a diagnostic only.
    let resolved = refinement(5e-5, &auto)?;
    let (prob, fol) = coupled_lp(17, 0.01, &auto)?;
    let props = foliation_properties(prob.map(), &fol, 400, 3).map_err(|e| e.to_string())?;
    let other = LpParameters {
        gamma1: 0.6,
        gamma2: 1.8,
        ..auto.clone()
    };
    other.validate(0.5, 2.0, 2.0).map_err(|e| e.to_string())?;
    let (_, fol2) = coupled_lp(17, 0.01, &other)?;
    let (a, b) = (&fol.q.entries[0], &fol2.q.entries[0]);
    let gamma_diff = (0..a.node_count())
        .map(|k| {
            a.node_value(k)
                .iter()
                .zip(b.node_value(k))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .fold(0.0, f64::max);
    let halving = residuals.windows(2).all(|w| w[1] <= 0.5 * w[0]);
    let b_max = props.b1.max(props.b2).max(props.b3).max(props.b4);
    let pass =
        residuals.iter().all(|&r| r <= 1e-4) && halving && b_max <= 1e-4 && gamma_diff <= 1e-5;
    Ok((
        pass,
        format!(
            "LP residual N=8 on 0.01-box at 5/9/17/33 nodes per axis: {} (ratios {}, halving={halving}; cutoff-shell features of width r0·2^-8 unresolved); resolved 5e-5-box ratios {}; B1={:.1e} B2={:.1e} B3={:.1e} B4={:.1e}; q0 gamma-independence (0.707,1.682) vs (0.6,1.8)={gamma_diff:.2e}",
            residuals.iter().map(|r| format!("{r:.2e}")).collect::<Vec<_>>().join("/"),
            ratios(&residuals),
            ratios(&resolved),
            props.b1,
            props.b2,
            props.b3,
            props.b4
        ),
    ))
}

fn ac6() -> Outcome {
    let auto = LpParameters::auto(0.5, 2.0, 2.0).map_err(|e| e.to_string())?;
    let (prob, fol) = coupled_lp(9, 0.01, &auto)?;
    let ratios = fol.log.measured_ratios(1e-14);
    let worst_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let (kt, _) = prob.contraction_factors(&auto);
    let t_lip = measure_t_lipschitz(
        &prob,
        &auto,
        &DVector::from_vec(vec![0.004, 0.007]),
        &DVector::from_vec(vec![-0.003]),
        20,
        0.01,
        7,
    )
    .map_err(|e| e.to_string())?;
    let q_ok = !ratios.is_empty() && worst_ratio <= fol.log.factor && t_lip <= kt;
    let map = planar_product();
    let lin = lin_of(&map)?;
    let out = linearize_contraction(
        &map,
        &lin,
        &ContractionParams {
            resolution: 33,
            ..ContractionParams::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut psi_ok = true;
    let mut psi_text = Vec::new();
    let mut fitted = 0;
    for s in &out.stages {
        if let (Some(rate), Some(r2)) = (s.psi.fitted_rate, s.psi.r_squared) {
            fitted += 1;
            psi_ok &= rate <= s.psi.eta + 0.05 && r2 >= 0.98;
            psi_text.push(format!(
                "stage {}: rate={rate:.4} (eta={:.3}) R²={r2:.4}",
                s.band, s.psi.eta
            ));
        }
    }
    let pass = q_ok && psi_ok && fitted > 0;
    Ok((
        pass,
        format!(
            "LP Picard ratios max={worst_ratio:.3} over {} steps vs factor {:.3}; T Lipschitz {t_lip:.3} <= K_T eta {kt:.3}; Psi-limit {}",
            ratios.len(),
            fol.log.factor,
            if psi_text.is_empty() { "no decay fitted".into() } else { psi_text.join(", ") }
        ),
    ))
}

fn ac7() -> Outcome {
    let mut parts = Vec::new();
    let mut pass = true;
    for (name, map) in [
        ("x1*x2 coupling", planar_product()),
        ("x2^2 coupling", planar_quadratic()),
    ] {
        let lin = lin_of(&map)?;
        let split = BandSplit::new(&lin, 1);
        let jet = slow_manifold_jet(map.polynomial_rep().expect("polynomial"), &split, 6)
            .map_err(|e| e.to_string())?;
        let rep = growth_bound_diagnostics(
            &map,
            &TransformChain::identity(2),
            &split,
            &SlowManifold::Jet(jet),
            &lin,
            &BoxRegion::symmetric(2, 0.01),
            40,
            15,
            2,
        )
        .map_err(|e| e.to_string())?;
        pass &= rep.within(0.05);
        parts.push(format!(
            "{name}: Q rate={:.3}, c1 rate={:.3} (bound {:.3}); b1-B rate={:.3} (bound {:.3})",
            rep.q_rate,
            rep.c1_rate,
            rep.log_mu_plus + 0.05,
            rep.b1_rate,
            rep.log_mu_m_plus + 0.05
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn ac8() -> Outcome {
    let est = holder_exponent(
        |x: &[f64]| Ok(vec![x[0].signum() * x[0].abs().sqrt()]),
        &HolderOptions::new(vec![0.0], 1.0, 2),
    )
    .map_err(|e| e.to_string())?;
    let mut pass = (est.exponent - 0.5).abs() <= 0.05;
    let mut parts = vec![format!("sqrt field exponent={:.4}", est.exponent)];
    let cases: Vec<(&str, MapModel, f64)> = vec![
        ("planar x2^2", planar_quadratic(), 0.02),
        ("planar x1*x2", planar_product(), 0.01),
        ("three-band", three_band(), 0.01),
        ("product saddle", product_saddle(), 0.01),
        ("quadratic saddle", quadratic_saddle(), 0.01),
        ("coupled saddle", coupled_saddle(), 0.01),
    ];
    for (name, map, radius) in cases {
        let lin = lin_of(&map)?;
        let beta = beta_overall(&lin.decomposition, 1e-3)
            .map_err(|e| e.to_string())?
            .beta_overall;
        let params = HyperbolicParams {
            report_radius: radius,
            contraction: ContractionParams {
                report_radius: radius,
                resolution: 33,
                ..ContractionParams::default()
            },
            ..HyperbolicParams::default()
        };
        let res = linearize_hyperbolic(&map, &lin, &params).map_err(|e| format!("{name}: {e}"))?;
        let h = chain_derivative_holder(&res.chain, &vec![0.0; map.dim()], radius, 5)
            .map_err(|e| e.to_string())?;
        pass &= h.exponent >= beta - 0.1;
        parts.push(format!("{name} {:.3}>={:.3}", h.exponent, beta - 0.1));
    }
    Ok((pass, parts.join("; ")))
}

fn ac9() -> Outcome {
    let mut same = true;
    let mut parts = Vec::new();
    for (cmd, name) in [
        (Command::Analyze, "gap_without_rs"),
        (Command::Linearize, "saddle"),
        (Command::Foliate, "saddle"),
    ] {
        let config = RunConfig::builtin(name).map_err(|e| e.to_string())?;
        let dirs = [
            tempfile::tempdir().map_err(|e| e.to_string())?,
            tempfile::tempdir().map_err(|e| e.to_string())?,
        ];
        let mut texts = Vec::new();
        for d in &dirs {
            run(&cmd, &config, d.path(), Some(11)).map_err(|e| e.to_string())?;
            texts.push(std::fs::read(d.path().join("report.txt")).map_err(|e| e.to_string())?);
        }
        let eq = texts[0] == texts[1] && !texts[0].is_empty();
        same &= eq;
        parts.push(format!(
            "{} {name}: {} bytes identical={eq}",
            cmd.name(),
            texts[0].len()
        ));
    }
    Ok((same, parts.join("; ")))
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AC1", Some(1.0), ac1),
        ("AC2", Some(1.0), ac2),
        ("AC3", Some(30.0), ac3),
        ("AC4", Some(120.0), ac4),
        ("AC5", Some(120.0), ac5),
        ("AC6", None, ac6),
        ("AC7", None, ac7),
        ("AC8", None, ac8),
        ("AC9", None, ac9),
    ];
    let mut failures = 0;
    for (id, limit, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        let in_time = limit.is_none_or(|l| secs < l);
        let (ok, detail) = match outcome {
            Ok((ok, detail)) => (ok && in_time, detail),
            Err(e) => (false, format!("error: {e}")),
        };
        let time = match limit {
            Some(l) => format!("{secs:.2}s, limit {l}s"),
            None => format!("{secs:.2}s"),
        };
        println!(
            "{id} {} [{time}] {detail}",
            if ok { "PASS" } else { "FAIL" }
        );
        failures += usize::from(!ok);
    }
    println!("acceptance: {}/9 PASS", 9 - failures);
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
