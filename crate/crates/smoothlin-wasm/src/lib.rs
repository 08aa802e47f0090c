//! Browser bindings: spectral analysis of a configuration, the planar Hölder
//! exponent, and the conjugacy of a planar quadratic contraction.

use nalgebra::DVector;
use smoothlin::cli::{analyze_report, RunConfig};
use smoothlin::dynamics::{BoxRegion, MapModel, PolyMap};
use smoothlin::exponents;
use smoothlin::linearize_contraction::{linearize_contraction, ContractionParams};
use smoothlin::spectral::LinearPart;
use wasm_bindgen::prelude::*;

/// Grid nodes per axis of the planar conjugacy (kept small for interactivity).
const PLANAR_RESOLUTION: usize = 33;

/// Renders the `analyze` report of a TOML configuration (same keys as the CLI).
#[wasm_bindgen]
pub fn analyze(config_toml: &str) -> Result<String, JsError> {
    let config = RunConfig::parse(config_toml)?;
    Ok(analyze_report(&config)?.report.render())
}

/// Planar exponent `min{log λ₁/(log λ₁ − log λ₂), log λ₂/(log λ₂ − log λ₁)} − ε`
/// for `0 < λ₁ < 1 < λ₂`.
#[wasm_bindgen]
pub fn beta_planar(lambda1: f64, lambda2: f64, epsilon: f64) -> f64 {
    exponents::beta_planar(lambda1, lambda2, epsilon)
}

/// Linearizes `F(x) = (λ₁x₁ + c x₂², λ₂x₂)` on the box of the given radius and
/// returns `[Φ₁(x), Φ₂(x), oracle Φ₁(x), max conjugacy residual]`, where the
/// oracle is `x₁ + c/(λ₁ − λ₂²) x₂²`.
#[wasm_bindgen]
pub fn planar_conjugacy(
    lambda1: f64,
    lambda2: f64,
    c: f64,
    radius: f64,
    x1: f64,
    x2: f64,
) -> Result<Vec<f64>, JsError> {
    let terms = [
        (lambda1, vec![1, 0], 0),
        (c, vec![0, 2], 0),
        (lambda2, vec![0, 1], 1),
    ];
    let map = MapModel::polynomial(PolyMap::from_terms(2, &terms), BoxRegion::symmetric(2, 1.0))?;
    let lin = LinearPart::from_matrix(map.linear_part(), 0.2, 1e-9)?;
    let params = ContractionParams {
        report_radius: radius,
        resolution: PLANAR_RESOLUTION,
        ..ContractionParams::default()
    };
    let out = linearize_contraction(&map, &lin, &params)?;
    let phi = out.chain.forward(&DVector::from_vec(vec![x1, x2]))?;
    let residual = smoothlin::verify::conjugacy_residual(
        &map,
        &out.chain,
        map.linear_part(),
        &BoxRegion::symmetric(2, radius),
        200,
        1,
    )?;
    Ok(vec![
        phi[0],
        phi[1],
        x1 + c / (lambda1 - lambda2 * lambda2) * x2 * x2,
        residual.max,
    ])
}
