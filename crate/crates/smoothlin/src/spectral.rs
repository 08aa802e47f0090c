//! Spectral analysis of the linear part `Λ = DF(O)`.
//!
//! The spectrum is clustered into bands `σ₁ ∪ … ∪ σ_m` by modulus, with `d`
//! contractive bands (inside the unit circle) followed by `m − d` expansive
//! ones. The module checks the band, gap, Rodrigues–Solà-Morales-type and
//! foliation conditions, builds adapted norms in which each block's operator
//! norm approaches its spectral radius, and produces a real block-diagonal
//! coordinate system with one block per band.

use std::fmt;

use nalgebra::{Complex, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default relative ratio gap separating bands.
pub const DEFAULT_GAP_THRESHOLD: f64 = 0.2;
/// Default relative distance from 1 below which a modulus counts as non-hyperbolic.
pub const DEFAULT_HYPERBOLICITY_TOL: f64 = 1e-9;
/// Default ratio of `δ` to the smallest spectral gap.
pub const DEFAULT_DELTA_FRACTION: f64 = 1e-3;

/// Errors of the spectral module.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum SpectralError {
    /// No moduli were supplied.
    #[error("empty spectrum")]
    EmptySpectrum,
    /// A modulus lies on (or too close to) the unit circle.
    #[error("modulus {0} is within the hyperbolicity tolerance of 1")]
    NonHyperbolic(f64),
    /// A modulus is zero, negative or not finite.
    #[error("invalid modulus {0}")]
    InvalidModulus(f64),
    /// Bands overlap or are out of order.
    #[error("invalid band structure: {0}")]
    InvalidBands(String),
    /// The requested check needs both contractive and expansive bands.
    #[error("spectrum is not mixed (d = {d}, m = {m}); use the pure contraction/expansion path")]
    NotMixed {
        /// Number of contractive bands.
        d: usize,
        /// Total number of bands.
        m: usize,
    },
    /// `δ` destroys the ordering of the margins.
    #[error("margin delta = {0:e} too large for the band structure")]
    DeltaTooLarge(f64),
    /// The adapted-norm target does not exceed the spectral radius.
    #[error("target {target} does not exceed the spectral radius {radius}")]
    TargetTooTight {
        /// Requested operator-norm bound.
        target: f64,
        /// Spectral radius of the block.
        radius: f64,
    },
    /// Too few terms in the adapted norm.
    #[error("adapted norm needs at least K = {required} terms")]
    KTooSmall {
        /// Smallest admissible number of terms.
        required: usize,
    },
    /// Block diagonalization failed numerically.
    #[error("block diagonalization failed: {0}")]
    BlockDiagonalization(String),
}

/// A spectral band `[λ⁻, λ⁺]` of moduli.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralBand {
    /// Infimum of the moduli in the band.
    pub lambda_minus: f64,
    /// Supremum of the moduli in the band.
    pub lambda_plus: f64,
}

impl SpectralBand {
    /// A band; panics on `lambda_minus > lambda_plus` or non-positive values.
    pub fn new(lambda_minus: f64, lambda_plus: f64) -> Self {
        assert!(
            lambda_minus > 0.0 && lambda_minus <= lambda_plus,
            "invalid band [{lambda_minus}, {lambda_plus}]"
        );
        Self {
            lambda_minus,
            lambda_plus,
        }
    }

    /// A single-modulus band.
    pub fn point(lambda: f64) -> Self {
        Self::new(lambda, lambda)
    }

    /// Whether the band lies inside the unit disk.
    pub fn is_contractive(&self) -> bool {
        self.lambda_plus < 1.0
    }

    /// Width ratio `λ⁺/λ⁻`.
    pub fn ratio(&self) -> f64 {
        self.lambda_plus / self.lambda_minus
    }

    /// Band of reciprocal moduli `[1/λ⁺, 1/λ⁻]`.
    pub fn reciprocal(&self) -> Self {
        Self::new(1.0 / self.lambda_plus, 1.0 / self.lambda_minus)
    }
}

/// Ordered bands with split index `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumDecomposition {
    bands: Vec<SpectralBand>,
    d: usize,
}

impl SpectrumDecomposition {
    /// Validates explicit bands (ascending, disjoint, none touching 1).
    pub fn from_bands(bands: Vec<SpectralBand>) -> Result<Self, SpectralError> {
        Self::from_bands_with_tol(bands, DEFAULT_HYPERBOLICITY_TOL)
    }

    /// As [`SpectrumDecomposition::from_bands`] with an explicit hyperbolicity tolerance.
    pub fn from_bands_with_tol(
        bands: Vec<SpectralBand>,
        hyp_tol: f64,
    ) -> Result<Self, SpectralError> {
        if bands.is_empty() {
            return Err(SpectralError::EmptySpectrum);
        }
        for b in &bands {
            for v in [b.lambda_minus, b.lambda_plus] {
                if !(v.is_finite() && v > 0.0) {
                    return Err(SpectralError::InvalidModulus(v));
                }
            }
            if b.lambda_minus <= 1.0 + hyp_tol && b.lambda_plus >= 1.0 - hyp_tol {
                let v = if (b.lambda_minus - 1.0).abs() < (b.lambda_plus - 1.0).abs() {
                    b.lambda_minus
                } else {
                    b.lambda_plus
                };
                return Err(SpectralError::NonHyperbolic(v));
            }
        }
        for w in bands.windows(2) {
            if w[0].lambda_plus >= w[1].lambda_minus {
                return Err(SpectralError::InvalidBands(format!(
                    "bands [{}, {}] and [{}, {}] overlap or are unordered",
                    w[0].lambda_minus, w[0].lambda_plus, w[1].lambda_minus, w[1].lambda_plus
                )));
            }
        }
        let d = bands.iter().filter(|b| b.is_contractive()).count();
        Ok(Self { bands, d })
    }

    /// Bands in ascending order.
    pub fn bands(&self) -> &[SpectralBand] {
        &self.bands
    }

    /// Number of contractive bands.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Total number of bands.
    pub fn m(&self) -> usize {
        self.bands.len()
    }

    /// Whether both contractive and expansive bands are present.
    pub fn is_mixed(&self) -> bool {
        self.d > 0 && self.d < self.m()
    }

    /// Contractive bands `1..d`.
    pub fn contractive(&self) -> &[SpectralBand] {
        &self.bands[..self.d]
    }

    /// Expansive bands `d+1..m`.
    pub fn expansive(&self) -> &[SpectralBand] {
        &self.bands[self.d..]
    }

    /// Smallest gap between consecutive bands or between a band and the unit circle.
    pub fn min_gap(&self) -> f64 {
        let mut g = f64::INFINITY;
        for w in self.bands.windows(2) {
            g = g.min(w[1].lambda_minus - w[0].lambda_plus);
        }
        if self.d > 0 {
            g = g.min(1.0 - self.bands[self.d - 1].lambda_plus);
        }
        if self.d < self.m() {
            g = g.min(self.bands[self.d].lambda_minus - 1.0);
        }
        g
    }

    fn require_mixed(&self) -> Result<(), SpectralError> {
        if self.is_mixed() {
            Ok(())
        } else {
            Err(SpectralError::NotMixed {
                d: self.d,
                m: self.m(),
            })
        }
    }
}

/// Clusters moduli into bands: consecutive sorted moduli whose ratio is at most
/// `1 + gap_threshold` share a band.
pub fn cluster_eigenvalues(
    moduli: &[f64],
    gap_threshold: f64,
) -> Result<SpectrumDecomposition, SpectralError> {
    cluster_eigenvalues_with_tol(moduli, gap_threshold, DEFAULT_HYPERBOLICITY_TOL)
}

/// As [`cluster_eigenvalues`] with an explicit hyperbolicity tolerance.
pub fn cluster_eigenvalues_with_tol(
    moduli: &[f64],
    gap_threshold: f64,
    hyp_tol: f64,
) -> Result<SpectrumDecomposition, SpectralError> {
    if moduli.is_empty() {
        return Err(SpectralError::EmptySpectrum);
    }
    for &v in moduli {
        if !(v.is_finite() && v > 0.0) {
            return Err(SpectralError::InvalidModulus(v));
        }
        if (v - 1.0).abs() <= hyp_tol {
            return Err(SpectralError::NonHyperbolic(v));
        }
    }
    let points: Vec<SpectralBand> = moduli.iter().map(|&v| SpectralBand::point(v)).collect();
    cluster_bands_with_tol(&points, gap_threshold, hyp_tol)
}

/// Merges modulus intervals whose separation ratio `next.λ⁻ / current.λ⁺` is at most
/// `1 + gap_threshold`, never across the unit circle.
///
/// Applied to the bands of a decomposition produced with the same threshold it returns
/// that decomposition unchanged, since adjacent bands are already separated by more
/// than the threshold.
pub fn cluster_bands(
    bands: &[SpectralBand],
    gap_threshold: f64,
) -> Result<SpectrumDecomposition, SpectralError> {
    cluster_bands_with_tol(bands, gap_threshold, DEFAULT_HYPERBOLICITY_TOL)
}

/// As [`cluster_bands`] with an explicit hyperbolicity tolerance.
pub fn cluster_bands_with_tol(
    bands: &[SpectralBand],
    gap_threshold: f64,
    hyp_tol: f64,
) -> Result<SpectrumDecomposition, SpectralError> {
    if bands.is_empty() {
        return Err(SpectralError::EmptySpectrum);
    }
    let mut sorted = bands.to_vec();
    sorted.sort_by(|a, b| a.lambda_minus.total_cmp(&b.lambda_minus));
    let mut out = Vec::new();
    let mut lo = sorted[0].lambda_minus;
    let mut hi = sorted[0].lambda_plus;
    for b in &sorted[1..] {
        // Never merge across the unit circle.
        let crosses = hi < 1.0 && b.lambda_minus > 1.0;
        if b.lambda_minus / hi <= 1.0 + gap_threshold && !crosses {
            hi = hi.max(b.lambda_plus);
        } else {
            out.push(SpectralBand::new(lo, hi));
            lo = b.lambda_minus;
            hi = b.lambda_plus;
        }
    }
    out.push(SpectralBand::new(lo, hi));
    SpectrumDecomposition::from_bands_with_tol(out, hyp_tol)
}

/// The margin `δ` and the derived quantities `μ_i^±`, `λ_s^±`, `λ_u^±`.
#[derive(Clone, Debug, PartialEq)]
pub struct Margins {
    /// The margin `δ ≥ 0` (0 gives the exact envelopes).
    pub delta: f64,
    /// `μ_i^- = λ_i^- − δ`.
    pub mu_minus: Vec<f64>,
    /// `μ_i^+ = λ_i^+ + δ`.
    pub mu_plus: Vec<f64>,
    /// `λ_s^- = λ_1^- − δ` (contractive side present).
    pub lambda_s_minus: Option<f64>,
    /// `λ_s^+ = λ_d^+ + δ`.
    pub lambda_s_plus: Option<f64>,
    /// `λ_u^- = λ_{d+1}^- − δ` (expansive side present).
    pub lambda_u_minus: Option<f64>,
    /// `λ_u^+ = λ_m^+ + δ`.
    pub lambda_u_plus: Option<f64>,
}

impl Margins {
    /// Margins with an explicit `δ`; fails if the ordering of the margins breaks.
    pub fn new(dec: &SpectrumDecomposition, delta: f64) -> Result<Self, SpectralError> {
        if !(delta >= 0.0 && delta.is_finite()) {
            return Err(SpectralError::DeltaTooLarge(delta));
        }
        let mu_minus: Vec<f64> = dec.bands.iter().map(|b| b.lambda_minus - delta).collect();
        let mu_plus: Vec<f64> = dec.bands.iter().map(|b| b.lambda_plus + delta).collect();
        // Ordering 0 < μ₁⁻ < μ₁⁺ < μ₂⁻ < … with the unit circle kept out of every margin band.
        if mu_minus[0] <= 0.0 {
            return Err(SpectralError::DeltaTooLarge(delta));
        }
        for i in 0..dec.m() {
            if i + 1 < dec.m() && mu_plus[i] >= mu_minus[i + 1] {
                return Err(SpectralError::DeltaTooLarge(delta));
            }
        }
        if dec.d > 0 && mu_plus[dec.d - 1] >= 1.0 {
            return Err(SpectralError::DeltaTooLarge(delta));
        }
        if dec.d < dec.m() && mu_minus[dec.d] <= 1.0 {
            return Err(SpectralError::DeltaTooLarge(delta));
        }
        let d = dec.d;
        let m = dec.m();
        Ok(Self {
            delta,
            lambda_s_minus: (d > 0).then(|| mu_minus[0]),
            lambda_s_plus: (d > 0).then(|| mu_plus[d - 1]),
            lambda_u_minus: (d < m).then(|| mu_minus[d]),
            lambda_u_plus: (d < m).then(|| mu_plus[m - 1]),
            mu_minus,
            mu_plus,
        })
    }

    /// Margins with the default `δ = 10⁻³ ·` (smallest spectral gap).
    pub fn default_for(dec: &SpectrumDecomposition) -> Result<Self, SpectralError> {
        Self::new(dec, DEFAULT_DELTA_FRACTION * dec.min_gap())
    }

    /// Exact envelopes (`δ = 0`).
    pub fn exact(dec: &SpectrumDecomposition) -> Self {
        Self::new(dec, 0.0).expect("delta = 0 always preserves the band ordering")
    }

    fn envelopes(&self) -> (f64, f64, f64, f64) {
        (
            self.lambda_s_minus.unwrap_or(f64::NAN),
            self.lambda_s_plus.unwrap_or(f64::NAN),
            self.lambda_u_minus.unwrap_or(f64::NAN),
            self.lambda_u_plus.unwrap_or(f64::NAN),
        )
    }
}

/// One inequality `lhs < rhs` of a condition.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionEntry {
    /// Human-readable description.
    pub label: String,
    /// Left-hand side.
    pub lhs: f64,
    /// Right-hand side (strict upper bound for `lhs`).
    pub rhs: f64,
}

impl ConditionEntry {
    fn new(label: impl Into<String>, lhs: f64, rhs: f64) -> Self {
        Self {
            label: label.into(),
            lhs,
            rhs,
        }
    }

    /// Whether `lhs < rhs`.
    pub fn holds(&self) -> bool {
        self.lhs < self.rhs
    }

    /// Slack `rhs − lhs`.
    pub fn slack(&self) -> f64 {
        self.rhs - self.lhs
    }
}

/// Outcome of a condition check with every inequality listed.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionReport {
    /// Name of the condition.
    pub name: &'static str,
    /// Individual inequalities.
    pub entries: Vec<ConditionEntry>,
}

impl ConditionReport {
    /// Whether every inequality holds.
    pub fn holds(&self) -> bool {
        self.entries.iter().all(ConditionEntry::holds)
    }

    /// Smallest slack over the inequalities.
    pub fn min_slack(&self) -> f64 {
        self.entries
            .iter()
            .map(ConditionEntry::slack)
            .fold(f64::INFINITY, f64::min)
    }
}

impl fmt::Display for ConditionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{}: {}",
            self.name,
            if self.holds() { "pass" } else { "fail" }
        )?;
        for e in &self.entries {
            writeln!(
                f,
                "  {}: {:.6} < {:.6} [{}]",
                e.label,
                e.lhs,
                e.rhs,
                if e.holds() { "ok" } else { "violated" }
            )?;
        }
        Ok(())
    }
}

/// Band-width condition with exact band values: for a pure contraction every
/// band satisfies `λ_i^+/λ_i^- < 1/λ_m^+`; for a mixed spectrum contractive
/// bands satisfy `λ_i^+/λ_i^- < 1/λ_d^+` and expansive bands `λ_j^+/λ_j^- < λ_{d+1}^-`;
/// for a pure expansion `λ_j^+/λ_j^- < λ_1^-`.
pub fn check_band_condition(dec: &SpectrumDecomposition) -> ConditionReport {
    check_band_condition_with(dec, &Margins::exact(dec))
}

/// Band-width condition evaluated with the margins `μ_i^±`.
pub fn check_band_condition_with(
    dec: &SpectrumDecomposition,
    margins: &Margins,
) -> ConditionReport {
    let d = dec.d();
    let mut entries = Vec::new();
    if d > 0 {
        let top = margins.mu_plus[d - 1];
        for i in 0..d {
            entries.push(ConditionEntry::new(
                format!("band {} ratio vs 1/lambda_top_contractive", i + 1),
                margins.mu_plus[i] / margins.mu_minus[i],
                1.0 / top,
            ));
        }
    }
    if d < dec.m() {
        let bottom = margins.mu_minus[d];
        for j in d..dec.m() {
            entries.push(ConditionEntry::new(
                format!("band {} ratio vs lambda_bottom_expansive", j + 1),
                margins.mu_plus[j] / margins.mu_minus[j],
                bottom,
            ));
        }
    }
    ConditionReport {
        name: "band_condition",
        entries,
    }
}

/// Gap condition `λ_u^-/λ_s^+ > max{λ_u^+, 1/λ_s^-}` with the envelopes of `margins`.
pub fn check_gap_condition(
    dec: &SpectrumDecomposition,
    margins: &Margins,
) -> Result<ConditionReport, SpectralError> {
    dec.require_mixed()?;
    let (sm, sp, um, up) = margins.envelopes();
    let lhs = um / sp;
    Ok(ConditionReport {
        name: "gap_condition",
        entries: vec![
            ConditionEntry::new("lambda_u_plus < lambda_u_minus/lambda_s_plus", up, lhs),
            ConditionEntry::new(
                "1/lambda_s_minus < lambda_u_minus/lambda_s_plus",
                1.0 / sm,
                lhs,
            ),
        ],
    })
}

/// The stronger three-part condition (gap plus `λ_s^+/λ_s^- < 1/λ_s^+` and
/// `λ_u^+/λ_u^- < λ_u^-`), evaluated with the exact envelopes. Reported for
/// comparison only.
pub fn check_rs_condition(dec: &SpectrumDecomposition) -> Result<ConditionReport, SpectralError> {
    dec.require_mixed()?;
    let margins = Margins::exact(dec);
    let (sm, sp, um, up) = margins.envelopes();
    let mut report = check_gap_condition(dec, &margins)?;
    report.name = "rs_condition";
    report.entries.push(ConditionEntry::new(
        "lambda_s_plus/lambda_s_minus < 1/lambda_s_plus",
        sp / sm,
        1.0 / sp,
    ));
    report.entries.push(ConditionEntry::new(
        "lambda_u_plus/lambda_u_minus < lambda_u_minus",
        up / um,
        um,
    ));
    Ok(report)
}

/// Foliation condition `λ_s^+ λ_u^+ < λ_u^-`.
pub fn check_foliation_condition(
    dec: &SpectrumDecomposition,
    margins: &Margins,
) -> Result<ConditionReport, SpectralError> {
    dec.require_mixed()?;
    let (_, sp, um, up) = margins.envelopes();
    Ok(ConditionReport {
        name: "foliation_condition",
        entries: vec![ConditionEntry::new(
            "lambda_s_plus*lambda_u_plus < lambda_u_minus",
            sp * up,
            um,
        )],
    })
}

/// Dual foliation condition `(λ_u^-)⁻¹(λ_s^-)⁻¹ < (λ_s^+)⁻¹`, i.e. the foliation
/// condition of the inverse map.
pub fn check_dual_foliation_condition(
    dec: &SpectrumDecomposition,
    margins: &Margins,
) -> Result<ConditionReport, SpectralError> {
    dec.require_mixed()?;
    let (sm, sp, um, _) = margins.envelopes();
    Ok(ConditionReport {
        name: "dual_foliation_condition",
        entries: vec![ConditionEntry::new(
            "1/(lambda_u_minus*lambda_s_minus) < 1/lambda_s_plus",
            1.0 / (um * sm),
            1.0 / sp,
        )],
    })
}

/// Spectral radius of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// The norm `‖x‖_* = Σ_{k=0}^{K} ρ^{−k} ‖A^k x‖₂`.
///
/// With `ρ` equal to the target, `‖Ax‖_* = ρ(‖x‖_* − ‖x‖ + ρ^{−(K+1)}‖A^{K+1}x‖)`,
/// so the induced operator norm is at most `ρ` exactly when
/// `‖A^{K+1}‖₂ ≤ ρ^{K+1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptedNorm {
    powers: Vec<DMatrix<f64>>,
    rho: f64,
}

impl AdaptedNorm {
    /// Evaluates `‖x‖_*`.
    pub fn norm(&self, x: &DVector<f64>) -> f64 {
        let mut s = 0.0;
        let mut w = 1.0;
        for p in &self.powers {
            s += w * (p * x).norm();
            w /= self.rho;
        }
        s
    }

    /// The scale `ρ`.
    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Number of terms `K`.
    pub fn terms(&self) -> usize {
        self.powers.len() - 1
    }

    /// Sampled induced operator norm of `a` (maximum of `‖a x‖_*/‖x‖_*` over
    /// `samples` seeded random directions).
    pub fn sampled_operator_norm(&self, a: &DMatrix<f64>, samples: usize, seed: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = a.ncols();
        (0..samples)
            .map(|_| {
                let x = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
                let nx = self.norm(&x);
                if nx > 0.0 {
                    self.norm(&(a * &x)) / nx
                } else {
                    0.0
                }
            })
            .fold(0.0, f64::max)
    }
}

fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone().svd(false, false).singular_values.max()
}

/// Builds the adapted norm of `block` realizing the operator bound `target`
/// with `k_terms` terms.
pub fn adapted_norm(
    block: &DMatrix<f64>,
    target: f64,
    k_terms: usize,
) -> Result<AdaptedNorm, SpectralError> {
    let radius = spectral_radius(block);
    if radius >= target {
        return Err(SpectralError::TargetTooTight { target, radius });
    }
    let n = block.nrows();
    let scaled = block / target;
    let admissible = |k: usize| spectral_norm(&scaled.pow((k + 1) as u32)) <= 1.0;
    if !admissible(k_terms) {
        // The powers of `scaled` decay geometrically, so a finite K always exists.
        let required = (k_terms + 1..=k_terms + 100_000)
            .find(|&k| admissible(k))
            .unwrap_or(usize::MAX);
        return Err(SpectralError::KTooSmall { required });
    }
    let mut powers = Vec::with_capacity(k_terms + 1);
    let mut q = DMatrix::identity(n, n);
    for _ in 0..=k_terms {
        powers.push(q.clone());
        q = block * q;
    }
    Ok(AdaptedNorm {
        powers,
        rho: target,
    })
}

/// Real block-diagonal coordinates for `Λ`, one block per band.
///
/// `Λ = T · diag(Λ₁, …, Λ_m) · T⁻¹`; block coordinates are `y = T⁻¹x`, and band
/// `i` occupies the contiguous index range `ranges[i]` of `y`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearPart {
    /// The original matrix `Λ`.
    pub lambda: DMatrix<f64>,
    /// Block-diagonal form `T⁻¹ΛT`.
    pub block: DMatrix<f64>,
    /// Change of basis `T` (block coordinates → original).
    pub t: DMatrix<f64>,
    /// Inverse change of basis.
    pub t_inv: DMatrix<f64>,
    /// Index range of each band in block coordinates.
    pub ranges: Vec<std::ops::Range<usize>>,
    /// The band decomposition.
    pub decomposition: SpectrumDecomposition,
}

impl LinearPart {
    /// Dimension.
    pub fn dim(&self) -> usize {
        self.lambda.nrows()
    }

    /// Whether the block coordinates coincide with the original coordinates.
    pub fn is_identity_basis(&self) -> bool {
        self.t == DMatrix::identity(self.dim(), self.dim())
    }

    /// Block `Λ_i`.
    pub fn band_block(&self, i: usize) -> DMatrix<f64> {
        let r = self.ranges[i].clone();
        self.block
            .view((r.start, r.start), (r.len(), r.len()))
            .into_owned()
    }

    /// Indices (in block coordinates) of the contractive bands.
    pub fn stable_indices(&self) -> Vec<usize> {
        let d = self.decomposition.d();
        self.ranges[..d].iter().flat_map(|r| r.clone()).collect()
    }

    /// Indices (in block coordinates) of the expansive bands.
    pub fn unstable_indices(&self) -> Vec<usize> {
        let d = self.decomposition.d();
        self.ranges[d..].iter().flat_map(|r| r.clone()).collect()
    }

    /// Projection `π_i` onto band `i` in block coordinates, as a diagonal 0/1 matrix.
    pub fn projection(&self, i: usize) -> DMatrix<f64> {
        let n = self.dim();
        let r = self.ranges[i].clone();
        DMatrix::from_fn(
            n,
            n,
            |a, b| if a == b && r.contains(&a) { 1.0 } else { 0.0 },
        )
    }

    /// Adapted norm for band `i` with operator bound `λ_i^+ + δ`.
    pub fn adapted_band_norm(
        &self,
        i: usize,
        delta: f64,
        k_terms: usize,
    ) -> Result<AdaptedNorm, SpectralError> {
        adapted_norm(
            &self.band_block(i),
            self.decomposition.bands()[i].lambda_plus + delta,
            k_terms,
        )
    }

    /// Analyzes `Λ`: clusters the eigenvalue moduli and builds block coordinates.
    pub fn from_matrix(
        lambda: &DMatrix<f64>,
        gap_threshold: f64,
        hyp_tol: f64,
    ) -> Result<Self, SpectralError> {
        let n = lambda.nrows();
        let eig: Vec<Complex<f64>> = lambda.complex_eigenvalues().iter().copied().collect();
        let moduli: Vec<f64> = eig.iter().map(|z| z.norm()).collect();
        let dec = cluster_eigenvalues_with_tol(&moduli, gap_threshold, hyp_tol)?;
        Self::from_matrix_with_bands(lambda, dec, &eig, n)
    }

    /// Analyzes `Λ` against a prescribed band decomposition.
    pub fn from_matrix_and_bands(
        lambda: &DMatrix<f64>,
        dec: SpectrumDecomposition,
    ) -> Result<Self, SpectralError> {
        let n = lambda.nrows();
        let eig: Vec<Complex<f64>> = lambda.complex_eigenvalues().iter().copied().collect();
        Self::from_matrix_with_bands(lambda, dec, &eig, n)
    }

    fn from_matrix_with_bands(
        lambda: &DMatrix<f64>,
        dec: SpectrumDecomposition,
        eig: &[Complex<f64>],
        n: usize,
    ) -> Result<Self, SpectralError> {
        let band_of = |z: &Complex<f64>| -> Option<usize> {
            let r = z.norm();
            dec.bands().iter().position(|b| {
                r >= b.lambda_minus * (1.0 - 1e-9) && r <= b.lambda_plus * (1.0 + 1e-9)
            })
        };
        let mut members: Vec<Vec<Complex<f64>>> = vec![Vec::new(); dec.m()];
        for z in eig {
            let b = band_of(z).ok_or_else(|| {
                SpectralError::BlockDiagonalization(format!("eigenvalue {z} lies in no band"))
            })?;
            members[b].push(*z);
        }
        // Fast path: Λ already block diagonal with coordinate-aligned bands.
        if let Some(lp) = Self::try_coordinate_aligned(lambda, &dec, &members) {
            return Ok(lp);
        }
        let mut basis_cols: Vec<DVector<f64>> = Vec::with_capacity(n);
        let mut ranges = Vec::with_capacity(dec.m());
        for zs in &members {
            let k = zs.len();
            let start = basis_cols.len();
            if k == 0 {
                return Err(SpectralError::BlockDiagonalization("empty band".into()));
            }
            let p = band_polynomial(lambda, zs);
            let svd = p.clone().svd(false, true);
            let v_t = svd
                .v_t
                .ok_or_else(|| SpectralError::BlockDiagonalization("SVD failed".into()))?;
            let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
            order.sort_by(|&a, &b| svd.singular_values[a].total_cmp(&svd.singular_values[b]));
            let scale = svd.singular_values.max().max(1.0);
            let kth = svd.singular_values[order[k - 1]];
            if kth > 1e-6 * scale {
                return Err(SpectralError::BlockDiagonalization(format!(
                    "invariant subspace of dimension {k} not resolved (singular value {kth:e})"
                )));
            }
            let mut v = DMatrix::zeros(n, k);
            for (c, &idx) in order.iter().take(k).enumerate() {
                v.set_column(c, &v_t.row(idx).transpose());
            }
            let v = canonical_basis(v);
            for c in 0..k {
                basis_cols.push(v.column(c).into_owned());
            }
            ranges.push(start..start + k);
        }
        let t = DMatrix::from_columns(&basis_cols);
        let t_inv = t.clone().try_inverse().ok_or_else(|| {
            SpectralError::BlockDiagonalization("band subspaces are not independent".into())
        })?;
        let mut block = &t_inv * lambda * &t;
        let tol = 1e-9 * lambda.amax().max(1.0);
        for (bi, ri) in ranges.iter().enumerate() {
            for (bj, rj) in ranges.iter().enumerate() {
                if bi == bj {
                    continue;
                }
                for a in ri.clone() {
                    for b in rj.clone() {
                        if block[(a, b)].abs() > tol {
                            return Err(SpectralError::BlockDiagonalization(format!(
                                "off-block entry {:e} between bands {bi} and {bj}",
                                block[(a, b)]
                            )));
                        }
                        block[(a, b)] = 0.0;
                    }
                }
            }
        }
        Ok(Self {
            lambda: lambda.clone(),
            block,
            t,
            t_inv,
            ranges,
            decomposition: dec,
        })
    }

    fn try_coordinate_aligned(
        lambda: &DMatrix<f64>,
        dec: &SpectrumDecomposition,
        members: &[Vec<Complex<f64>>],
    ) -> Option<Self> {
        // Group coordinates by connectivity of the sparsity pattern, then check
        // that every group's eigenvalues fall in a single band.
        let n = lambda.nrows();
        let mut group: Vec<usize> = (0..n).collect();
        fn find(g: &mut [usize], i: usize) -> usize {
            let mut r = i;
            while g[r] != r {
                r = g[r];
            }
            let mut c = i;
            while g[c] != r {
                let next = g[c];
                g[c] = r;
                c = next;
            }
            r
        }
        for a in 0..n {
            for b in 0..n {
                if lambda[(a, b)] != 0.0 {
                    let (ra, rb) = (find(&mut group, a), find(&mut group, b));
                    group[ra] = rb;
                }
            }
        }
        let mut band_coords: Vec<Vec<usize>> = vec![Vec::new(); dec.m()];
        let mut roots: Vec<usize> = (0..n).map(|i| find(&mut group, i)).collect();
        roots.dedup();
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..n {
            let r = find(&mut group, i);
            if !seen.insert(r) {
                continue;
            }
            let coords: Vec<usize> = (0..n).filter(|&j| find(&mut group, j) == r).collect();
            let sub = DMatrix::from_fn(coords.len(), coords.len(), |a, b| {
                lambda[(coords[a], coords[b])]
            });
            let eig = sub.complex_eigenvalues();
            let bands: std::collections::BTreeSet<usize> = eig
                .iter()
                .map(|z| {
                    let r = z.norm();
                    dec.bands().iter().position(|bd| {
                        r >= bd.lambda_minus * (1.0 - 1e-9) && r <= bd.lambda_plus * (1.0 + 1e-9)
                    })
                })
                .collect::<Option<_>>()?;
            if bands.len() != 1 {
                return None;
            }
            let b = *bands.iter().next()?;
            band_coords[b].extend(coords);
        }
        if band_coords
            .iter()
            .zip(members)
            .any(|(c, m)| c.len() != m.len())
        {
            return None;
        }
        let mut perm = Vec::with_capacity(n);
        let mut ranges = Vec::with_capacity(dec.m());
        for c in &mut band_coords {
            c.sort_unstable();
            let start = perm.len();
            perm.extend(c.iter().copied());
            ranges.push(start..perm.len());
        }
        let t = DMatrix::from_fn(n, n, |a, b| if perm[b] == a { 1.0 } else { 0.0 });
        let t_inv = t.transpose();
        let block = &t_inv * lambda * &t;
        Some(Self {
            lambda: lambda.clone(),
            block,
            t,
            t_inv,
            ranges,
            decomposition: dec.clone(),
        })
    }
}

/// Real polynomial `p(Λ)` whose roots are the given eigenvalues (conjugate
/// pairs combined into real quadratic factors).
fn band_polynomial(lambda: &DMatrix<f64>, zs: &[Complex<f64>]) -> DMatrix<f64> {
    let n = lambda.nrows();
    let id = DMatrix::<f64>::identity(n, n);
    let mut p = id.clone();
    let mut used = vec![false; zs.len()];
    for i in 0..zs.len() {
        if used[i] {
            continue;
        }
        used[i] = true;
        let z = zs[i];
        if z.im.abs() <= 1e-12 * z.norm().max(1.0) {
            p = (lambda - &id * z.re) * p;
        } else {
            // Consume the conjugate partner.
            if let Some(j) =
                (0..zs.len()).find(|&j| !used[j] && (zs[j] - z.conj()).norm() <= 1e-8 * z.norm())
            {
                used[j] = true;
            }
            let q = lambda * lambda - lambda * (2.0 * z.re) + &id * z.norm_sqr();
            p = q * p;
        }
    }
    p
}

/// Normalizes a basis so that it restricts to the identity on a set of pivot
/// rows (exact unit vectors for coordinate-aligned subspaces).
fn canonical_basis(v: DMatrix<f64>) -> DMatrix<f64> {
    let (n, k) = v.shape();
    let mut work = v.clone();
    let mut pivots = Vec::with_capacity(k);
    for c in 0..k {
        let (mut best, mut bv) = (0, -1.0);
        for r in 0..n {
            if pivots.contains(&r) {
                continue;
            }
            if work[(r, c)].abs() > bv {
                bv = work[(r, c)].abs();
                best = r;
            }
        }
        pivots.push(best);
        let pv = work[(best, c)];
        for c2 in (c + 1)..k {
            let f = work[(best, c2)] / pv;
            for r in 0..n {
                let val = work[(r, c)];
                work[(r, c2)] -= f * val;
            }
        }
    }
    let sub = DMatrix::from_fn(k, k, |a, b| v[(pivots[a], b)]);
    let Some(inv) = sub.try_inverse() else {
        return v;
    };
    let mut out = v * inv;
    for x in out.iter_mut() {
        if x.abs() < 1e-13 {
            *x = 0.0;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_block_is_one_band() {
        // Complex pair with modulus 0.5 plus a real eigenvalue 2.
        let a = DMatrix::from_row_slice(3, 3, &[0.3, -0.4, 0.0, 0.4, 0.3, 0.0, 0.0, 0.0, 2.0]);
        let lp =
            LinearPart::from_matrix(&a, DEFAULT_GAP_THRESHOLD, DEFAULT_HYPERBOLICITY_TOL).unwrap();
        assert_eq!(lp.decomposition.m(), 2);
        assert_eq!(lp.ranges[0].len(), 2);
        assert!(lp.is_identity_basis());
    }

    #[test]
    fn non_normal_coupled_matrix_is_block_diagonalized() {
        let a = DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 2.0]);
        let lp =
            LinearPart::from_matrix(&a, DEFAULT_GAP_THRESHOLD, DEFAULT_HYPERBOLICITY_TOL).unwrap();
        assert!(lp.block[(0, 1)] == 0.0 && lp.block[(1, 0)] == 0.0);
        let back = &lp.t * &lp.block * &lp.t_inv;
        assert!((back - a).amax() < 1e-12);
    }
}
