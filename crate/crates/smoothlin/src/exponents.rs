//! Closed-form Hölder exponents of the linearization.
//!
//! All logarithms are natural; every formula is homogeneous in the log base.
//! The exponents are guaranteed lower bounds: a map satisfying the conditions
//! admits a `C^{1,β}` linearization with `β` at least the value computed here.

use std::fmt;

use thiserror::Error;

use crate::spectral::{
    check_band_condition, check_foliation_condition, check_gap_condition, Margins, SpectralBand,
    SpectrumDecomposition,
};

/// Default `ε` subtracted from every exponent.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Relative tolerance for detecting `ρτ₂ = 1`.
const EQUALITY_TOL: f64 = 1e-12;

/// Errors of the exponent formulas.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ExponentError {
    /// `ρτ₁ ≥ 1` in the series lemma.
    #[error("hypothesis rho*tau1 < 1 violated (rho*tau1 = {0})")]
    HypothesisViolated(f64),
    /// The third branch of the series lemma is not positive.
    #[error("series exponent is not positive ({0}); inputs are inconsistent")]
    NonpositiveResult(f64),
    /// A recursion step produced a non-positive exponent.
    #[error(
        "exponent {name} = {value} is not positive; the condition slack is too small for epsilon"
    )]
    NonpositiveExponent {
        /// Name of the offending quantity.
        name: String,
        /// Its value.
        value: f64,
    },
    /// A required spectral condition fails.
    #[error("condition violated: {0}")]
    ConditionViolated(String),
    /// Invalid input (empty band list, `ε` outside `[0, 1)`, wrong sides).
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

/// The series exponent: `α` if `ρτ₂ < 1`, `α − ε` if `ρτ₂ = 1`, and
/// `α(log τ₁ + log ρ)/(log τ₁ − log τ₂)` if `ρτ₂ > 1`. Requires `ρτ₁ < 1`.
pub fn series_beta(
    alpha: f64,
    tau1: f64,
    tau2: f64,
    rho: f64,
    epsilon: f64,
) -> Result<f64, ExponentError> {
    if !(tau1 > 0.0 && tau2 > 0.0 && rho > 0.0 && alpha > 0.0 && alpha <= 1.0) {
        return Err(ExponentError::InvalidInput(format!(
            "alpha = {alpha}, tau1 = {tau1}, tau2 = {tau2}, rho = {rho}"
        )));
    }
    if rho * tau1 >= 1.0 {
        return Err(ExponentError::HypothesisViolated(rho * tau1));
    }
    let p = rho * tau2;
    let value = if (p - 1.0).abs() <= EQUALITY_TOL {
        alpha - epsilon
    } else if p < 1.0 {
        alpha
    } else {
        (tau1.ln() + rho.ln()) / (tau1.ln() - tau2.ln()) * alpha
    };
    if value <= 0.0 {
        return Err(ExponentError::NonpositiveResult(value));
    }
    Ok(value)
}

fn check_epsilon(epsilon: f64) -> Result<(), ExponentError> {
    if (0.0..1.0).contains(&epsilon) {
        Ok(())
    } else {
        Err(ExponentError::InvalidInput(format!(
            "epsilon = {epsilon} must lie in [0, 1)"
        )))
    }
}

fn positive(name: impl Into<String>, value: f64) -> Result<f64, ExponentError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(ExponentError::NonpositiveExponent {
            name: name.into(),
            value,
        })
    }
}

fn require_mixed(dec: &SpectrumDecomposition) -> Result<(), ExponentError> {
    if dec.is_mixed() {
        Ok(())
    } else {
        Err(ExponentError::InvalidInput(format!(
            "spectrum is not mixed (d = {}, m = {})",
            dec.d(),
            dec.m()
        )))
    }
}

/// Exponent of the stable-foliation derivative:
/// `(log λ_d^+ + log λ_m^+ − log λ_{d+1}^-)/(log λ_d^+ − log λ_m^+) − ε`.
pub fn beta_s(dec: &SpectrumDecomposition, epsilon: f64) -> Result<f64, ExponentError> {
    check_epsilon(epsilon)?;
    require_mixed(dec)?;
    let report = check_foliation_condition(dec, &Margins::exact(dec)).expect("mixed spectrum");
    if !report.holds() {
        return Err(ExponentError::ConditionViolated(report.to_string()));
    }
    let b = dec.bands();
    let (ld, lm, ld1) = (
        b[dec.d() - 1].lambda_plus,
        b[dec.m() - 1].lambda_plus,
        b[dec.d()].lambda_minus,
    );
    positive(
        "beta_s",
        (ld.ln() + lm.ln() - ld1.ln()) / (ld.ln() - lm.ln()) - epsilon,
    )
}

/// Exponent of the unstable-foliation derivative:
/// `(log λ_{d+1}^- + log λ_1^- − log λ_d^+)/(log λ_{d+1}^- − log λ_1^-) − ε`.
pub fn beta_u(dec: &SpectrumDecomposition, epsilon: f64) -> Result<f64, ExponentError> {
    check_epsilon(epsilon)?;
    require_mixed(dec)?;
    let b = dec.bands();
    let (l1, ld, ld1) = (
        b[0].lambda_minus,
        b[dec.d() - 1].lambda_plus,
        b[dec.d()].lambda_minus,
    );
    // Dual foliation condition 1/(λ_{d+1}^- λ_1^-) < 1/λ_d^+.
    if ld1 * l1 <= ld {
        return Err(ExponentError::ConditionViolated(format!(
            "dual foliation condition fails: lambda_{{d+1}}^- * lambda_1^- = {} <= lambda_d^+ = {ld}",
            ld1 * l1
        )));
    }
    positive(
        "beta_u",
        (ld1.ln() + l1.ln() - ld.ln()) / (ld1.ln() - l1.ln()) - epsilon,
    )
}

/// Contraction-side recursion.
///
/// Input bands are contractive and ascending; `lambda_top` is the largest
/// contractive modulus. Returns `(β₁..β_d, ζ₁..ζ_{d−1})` in ascending band order,
/// computed by descending from `β_d = 1`.
pub fn beta_contraction(
    bands: &[SpectralBand],
    lambda_top: f64,
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>), ExponentError> {
    check_epsilon(epsilon)?;
    if bands.is_empty() {
        return Err(ExponentError::InvalidInput("no contractive bands".into()));
    }
    if bands.iter().any(|b| b.lambda_plus >= 1.0) || !(lambda_top > 0.0 && lambda_top < 1.0) {
        return Err(ExponentError::InvalidInput(
            "contraction recursion needs bands inside the unit disk".into(),
        ));
    }
    for (i, b) in bands.iter().enumerate() {
        if b.ratio() >= 1.0 / lambda_top {
            return Err(ExponentError::ConditionViolated(format!(
                "band {} ratio {} >= 1/lambda_top = {}",
                i + 1,
                b.ratio(),
                1.0 / lambda_top
            )));
        }
    }
    let d = bands.len();
    let mut beta = vec![0.0f64; d];
    let mut zeta = vec![0.0; d.saturating_sub(1)];
    beta[d - 1] = 1.0;
    let lt = lambda_top.ln();
    for i in (0..d - 1).rev() {
        let (lp, lm) = (bands[i].lambda_plus.ln(), bands[i].lambda_minus.ln());
        let z = beta[i + 1].min(lp / bands[i + 1].lambda_minus.ln() - 1.0 - epsilon);
        zeta[i] = positive(format!("zeta_{}", i + 1), z)?;
        let b = (z - epsilon).min((lp + lt - lm) / (lp - z * lt) * z - epsilon);
        beta[i] = positive(format!("beta_{}", i + 1), b)?;
    }
    Ok((beta, zeta))
}

/// Expansion-side recursion.
///
/// Input bands are expansive and ascending. Returns `(β_{d+1}..β_m, ζ_{d+2}..ζ_m)`
/// computed by ascending from `β_{d+1} = 1`.
pub fn beta_expansion(
    bands: &[SpectralBand],
    epsilon: f64,
) -> Result<(Vec<f64>, Vec<f64>), ExponentError> {
    check_epsilon(epsilon)?;
    if bands.is_empty() {
        return Err(ExponentError::InvalidInput("no expansive bands".into()));
    }
    if bands.iter().any(|b| b.lambda_minus <= 1.0) {
        return Err(ExponentError::InvalidInput(
            "expansion recursion needs bands outside the unit disk".into(),
        ));
    }
    let bottom = bands[0].lambda_minus;
    for (j, b) in bands.iter().enumerate() {
        if b.ratio() >= bottom {
            return Err(ExponentError::ConditionViolated(format!(
                "expansive band {} ratio {} >= lambda_bottom = {bottom}",
                j + 1,
                b.ratio()
            )));
        }
    }
    let k = bands.len();
    let mut beta = vec![0.0f64; k];
    let mut zeta = vec![0.0; k.saturating_sub(1)];
    beta[0] = 1.0;
    let lb = bottom.ln();
    for j in 1..k {
        let (lm, lp) = (bands[j].lambda_minus.ln(), bands[j].lambda_plus.ln());
        let z = beta[j - 1].min(lm / bands[j - 1].lambda_plus.ln() - 1.0 - epsilon);
        zeta[j - 1] = positive(format!("zeta_{}", j + 1), z)?;
        let b = (z - epsilon).min((lm + lb - lp) / (lm - z * lb) * z - epsilon);
        beta[j] = positive(format!("beta_{}", j + 1), b)?;
    }
    Ok((beta, zeta))
}

/// Every intermediate exponent and the overall `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExponentReport {
    /// The `ε` used.
    pub epsilon: f64,
    /// `β₁..β_d` (empty for a pure expansion).
    pub beta_sequence_contraction: Vec<f64>,
    /// `ζ₁..ζ_{d−1}`.
    pub zeta_sequence_contraction: Vec<f64>,
    /// `β_{d+1}..β_m` (empty for a pure contraction).
    pub beta_sequence_expansion: Vec<f64>,
    /// `ζ_{d+2}..ζ_m`.
    pub zeta_sequence_expansion: Vec<f64>,
    /// `β_s` (mixed spectra only).
    pub beta_s: Option<f64>,
    /// `β_u` (mixed spectra only).
    pub beta_u: Option<f64>,
    /// The overall exponent.
    pub beta_overall: f64,
}

impl ExponentReport {
    /// Key-value lines (`key = value`) with 17 significant digits.
    pub fn key_values(&self) -> Vec<(String, String)> {
        let fmt = |v: f64| format!("{v:.16e}");
        let seq = |v: &[f64]| v.iter().map(|x| fmt(*x)).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("epsilon".to_string(), fmt(self.epsilon)),
            (
                "beta_sequence_contraction".to_string(),
                seq(&self.beta_sequence_contraction),
            ),
            (
                "zeta_sequence_contraction".to_string(),
                seq(&self.zeta_sequence_contraction),
            ),
            (
                "beta_sequence_expansion".to_string(),
                seq(&self.beta_sequence_expansion),
            ),
            (
                "zeta_sequence_expansion".to_string(),
                seq(&self.zeta_sequence_expansion),
            ),
        ];
        out.push(("beta_s".into(), self.beta_s.map_or("none".into(), fmt)));
        out.push(("beta_u".into(), self.beta_u.map_or("none".into(), fmt)));
        out.push(("beta_overall".into(), fmt(self.beta_overall)));
        out
    }
}

impl fmt::Display for ExponentReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, v) in self.key_values() {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// The overall exponent `β = min{β₁, β_s, β_m, β_u}`; for a pure contraction
/// `β = β₁`, for a pure expansion `β = β_m`.
pub fn beta_overall(
    dec: &SpectrumDecomposition,
    epsilon: f64,
) -> Result<ExponentReport, ExponentError> {
    check_epsilon(epsilon)?;
    let band = check_band_condition(dec);
    if !band.holds() {
        return Err(ExponentError::ConditionViolated(band.to_string()));
    }
    let mut report = ExponentReport {
        epsilon,
        beta_sequence_contraction: Vec::new(),
        zeta_sequence_contraction: Vec::new(),
        beta_sequence_expansion: Vec::new(),
        zeta_sequence_expansion: Vec::new(),
        beta_s: None,
        beta_u: None,
        beta_overall: f64::INFINITY,
    };
    if dec.d() > 0 {
        let c = dec.contractive();
        let (b, z) = beta_contraction(c, c[c.len() - 1].lambda_plus, epsilon)?;
        report.beta_overall = report.beta_overall.min(b[0]);
        report.beta_sequence_contraction = b;
        report.zeta_sequence_contraction = z;
    }
    if dec.d() < dec.m() {
        let (b, z) = beta_expansion(dec.expansive(), epsilon)?;
        report.beta_overall = report.beta_overall.min(b[b.len() - 1]);
        report.beta_sequence_expansion = b;
        report.zeta_sequence_expansion = z;
    }
    if dec.is_mixed() {
        let gap = check_gap_condition(dec, &Margins::exact(dec)).expect("mixed spectrum");
        if !gap.holds() {
            return Err(ExponentError::ConditionViolated(gap.to_string()));
        }
        let bs = beta_s(dec, epsilon)?;
        let bu = beta_u(dec, epsilon)?;
        report.beta_s = Some(bs);
        report.beta_u = Some(bu);
        report.beta_overall = report.beta_overall.min(bs).min(bu);
    }
    Ok(report)
}

/// Planar exponent
/// `min{log λ₁/(log λ₁ − log λ₂), log λ₂/(log λ₂ − log λ₁)} − ε` for `0 < λ₁ < 1 < λ₂`.
pub fn beta_planar(lambda1: f64, lambda2: f64, epsilon: f64) -> f64 {
    let (l1, l2) = (lambda1.abs().ln(), lambda2.abs().ln());
    (l1 / (l1 - l2)).min(l2 / (l2 - l1)) - epsilon
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn series_lemma_middle_branch() {
        assert_eq!(series_beta(0.8, 0.5, 2.0, 0.5, 0.01).unwrap(), 0.8 - 0.01);
    }

    #[test]
    fn series_lemma_rejects_violated_hypothesis() {
        assert!(matches!(
            series_beta(1.0, 2.0, 3.0, 1.0, 0.0),
            Err(ExponentError::HypothesisViolated(_))
        ));
    }
}
