//! Empirical validation: conjugacy residuals, Hölder-exponent estimation,
//! foliation invariance, diffeomorphism checks and sharpness sweeps.
//!
//! Every randomized check draws its samples from a seeded `ChaCha8` stream, so
//! results are reproducible bit for bit given the seed.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{ChainError, TransformChain};
use crate::dynamics::{BoxRegion, DynamicsError, MapModel};
use crate::lp_foliation::{foliation_properties, FoliationResult, LpError};

/// Lower end of the default separation range, relative to the radius.
pub const DEFAULT_SEP_MIN: f64 = 1e-4;
/// Upper end of the default separation range, relative to the radius.
pub const DEFAULT_SEP_MAX: f64 = 1e-2;
/// Default number of sample pairs for the Hölder fit.
pub const DEFAULT_PAIRS: usize = 400;
/// Minimum number of usable pairs.
pub const MIN_PAIRS: usize = 200;
/// Upper clamp of fitted exponents.
pub const MAX_EXPONENT: f64 = 1.05;

/// Errors of the validation routines.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum VerifyError {
    /// Evaluation failure of a map or grid.
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// Evaluation failure of a transform chain.
    #[error(transparent)]
    Chain(#[from] ChainError),
    /// Invalid options.
    #[error("invalid options: {0}")]
    InvalidOptions(String),
    /// Too few samples satisfied the sampling constraints.
    #[error("only {found} usable samples (need {needed})")]
    TooFewSamples {
        /// Usable samples found.
        found: usize,
        /// Samples required.
        needed: usize,
    },
    /// Foliation evaluation failure.
    #[error("foliation: {0}")]
    Foliation(String),
}

impl From<LpError> for VerifyError {
    fn from(e: LpError) -> Self {
        match e {
            LpError::Dynamics(d) => Self::Dynamics(d),
            other => Self::Foliation(other.to_string()),
        }
    }
}

/// Options of the Hölder estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct HolderOptions {
    /// Center of the sampling ball (the point whose regularity is probed).
    pub center: Vec<f64>,
    /// Radius `R` of the sampling box around the center.
    pub radius: f64,
    /// Separation range `[s_min, s_max]` as fractions of `R`.
    pub separation: (f64, f64),
    /// Number of sample pairs.
    pub pairs: usize,
    /// Number of logarithmic separation bins.
    pub bins: usize,
    /// Seed of the sample stream.
    pub seed: u64,
}

impl HolderOptions {
    /// Default options around `center` with radius `radius`.
    pub fn new(center: Vec<f64>, radius: f64, seed: u64) -> Self {
        Self {
            center,
            radius,
            separation: (DEFAULT_SEP_MIN, DEFAULT_SEP_MAX),
            pairs: DEFAULT_PAIRS,
            bins: 12,
            seed,
        }
    }
}

/// Result of a Hölder-exponent fit.
#[derive(Clone, Debug, PartialEq)]
pub struct HolderEstimate {
    /// Fitted exponent, clamped to `[0, 1.05]`.
    pub exponent: f64,
    /// Standard error of the regression slope.
    pub stderr: f64,
    /// Coefficient of determination of the fit.
    pub r_squared: f64,
    /// Smallest and largest separations used.
    pub separation_range: (f64, f64),
    /// Number of pairs that passed the round-off filter.
    pub samples: usize,
    /// Set when the field is (numerically) constant; the exponent is then 1.
    pub insufficient_variation: bool,
}

impl HolderEstimate {
    fn flat(samples: usize, range: (f64, f64)) -> Self {
        Self {
            exponent: 1.0,
            stderr: 0.0,
            r_squared: 1.0,
            separation_range: range,
            samples,
            insufficient_variation: true,
        }
    }
}

/// Ordinary least squares fit `y ≈ a + b x`; returns `(b, stderr(b), R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|v| (v - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|v| (v - my).powi(2)).sum();
    let b = sxy / sxx;
    let a = my - b * mx;
    let sse: f64 = x.iter().zip(y).map(|(u, v)| (v - a - b * u).powi(2)).sum();
    let stderr = if x.len() > 2 {
        (sse / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    let r2 = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    (b, stderr, r2)
}

/// Estimates the Hölder exponent of `field` at `opts.center`.
///
/// Base points are drawn at distances `R·10^{U(−5,0)}` from the center in
/// random directions, partners at log-uniform separations in
/// `[s_min, s_max]·R`. Pairs whose difference is below `100·ε_mach` (relative
/// to the field magnitude) are discarded. The pairs are binned by separation,
/// the largest `log‖Δfield‖` of each bin approximates the local seminorm
/// profile, and the exponent is the least-squares slope of those maxima
/// against `log s`.
pub fn holder_exponent<F>(mut field: F, opts: &HolderOptions) -> Result<HolderEstimate, VerifyError>
where
    F: FnMut(&[f64]) -> Result<Vec<f64>, VerifyError>,
{
    let (smin, smax) = opts.separation;
    if !(opts.radius > 0.0
        && smin > 0.0
        && smax > smin
        && opts.bins >= 3
        && opts.pairs >= MIN_PAIRS)
    {
        return Err(VerifyError::InvalidOptions(format!(
            "radius {}, separation {:?}, bins {}, pairs {} (need >= {MIN_PAIRS})",
            opts.radius, opts.separation, opts.bins, opts.pairs
        )));
    }
    if smax / smin < 100.0 - 1e-9 {
        return Err(VerifyError::InvalidOptions(
            "separation range must span at least two decades".into(),
        ));
    }
    let dim = opts.center.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let direction = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        loop {
            let d: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..=1.0)).collect();
            let n = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 1e-3 {
                return d.iter().map(|v| v / n).collect();
            }
        }
    };
    let (lmin, lmax) = (smin.ln(), smax.ln());
    let mut best = vec![f64::NEG_INFINITY; opts.bins];
    let mut used = 0usize;
    let mut seps = (f64::INFINITY, 0.0f64);
    for _ in 0..opts.pairs {
        let r = opts.radius * 10f64.powf(rng.gen_range(-5.0..=0.0)) * 0.5;
        let d1 = direction(&mut rng);
        let t: f64 = rng.gen_range(0.0..1.0);
        let s = opts.radius * (lmin + t * (lmax - lmin)).exp();
        let d2 = direction(&mut rng);
        let a: Vec<f64> = (0..dim).map(|i| opts.center[i] + r * d1[i]).collect();
        let b: Vec<f64> = (0..dim).map(|i| a[i] + s * d2[i]).collect();
        let fa = field(&a)?;
        let fb = field(&b)?;
        let diff = fa
            .iter()
            .zip(&fb)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        let scale = fa.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
        if diff <= 100.0 * f64::EPSILON * scale {
            continue;
        }
        used += 1;
        let sep = s;
        seps = (seps.0.min(sep), seps.1.max(sep));
        let bin = ((t * opts.bins as f64) as usize).min(opts.bins - 1);
        best[bin] = best[bin].max(diff.ln());
    }
    let range = (opts.radius * smin, opts.radius * smax);
    let (xs, ys): (Vec<f64>, Vec<f64>) = best
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(bin, &v)| {
            (
                opts.radius.ln() + lmin + (bin as f64 + 0.5) / opts.bins as f64 * (lmax - lmin),
                v,
            )
        })
        .unzip();
    if used < MIN_PAIRS / 2 || xs.len() < 3 {
        return Ok(HolderEstimate::flat(used, range));
    }
    let (slope, stderr, r2) = linear_fit(&xs, &ys);
    Ok(HolderEstimate {
        exponent: slope.clamp(0.0, MAX_EXPONENT),
        stderr,
        r_squared: r2,
        separation_range: if seps.1 > 0.0 { seps } else { range },
        samples: used,
        insufficient_variation: false,
    })
}

/// Hölder exponent of `DΦ` for a transform chain at `center`.
pub fn chain_derivative_holder(
    chain: &TransformChain,
    center: &[f64],
    radius: f64,
    seed: u64,
) -> Result<HolderEstimate, VerifyError> {
    let opts = HolderOptions::new(center.to_vec(), radius, seed);
    holder_exponent(
        |p: &[f64]| {
            let d = chain.derivative(&DVector::from_column_slice(p))?;
            Ok(d.iter().copied().collect())
        },
        &opts,
    )
}

/// Forward and inverse conjugacy residuals.
#[derive(Clone, Debug, PartialEq)]
pub struct ConjugacyResidual {
    /// `max ‖Φ(F(x)) − ΛΦ(x)‖∞`.
    pub max: f64,
    /// Mean of the same quantity.
    pub mean: f64,
    /// `max ‖F(Φ⁻¹(y)) − Φ⁻¹(Λy)‖∞`.
    pub inverse_max: f64,
    /// Mean of the same quantity.
    pub inverse_mean: f64,
    /// Number of forward samples used.
    pub samples: usize,
}

/// Conjugacy residuals over `samples` random points `x ∈ box` with
/// `F(x) ∈ box`. The inverse side uses `y = Φ(x)` for such `x`, so `Φ⁻¹` is
/// only evaluated on the image of the box.
pub fn conjugacy_residual(
    map: &MapModel,
    chain: &TransformChain,
    lambda: &DMatrix<f64>,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<ConjugacyResidual, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = map.dim();
    let draw = |rng: &mut ChaCha8Rng| {
        DVector::from_fn(n, |i, _| rng.gen_range(region.lo[i]..=region.hi[i]))
    };
    let (mut max, mut sum, mut count) = (0.0f64, 0.0, 0usize);
    let mut tries = 0;
    while count < samples && tries < 100 * samples {
        tries += 1;
        let x = draw(&mut rng);
        let fx = map.eval(&x)?;
        if !region.contains(fx.as_slice()) {
            continue;
        }
        let r = (chain.forward(&fx)? - lambda * chain.forward(&x)?).amax();
        max = max.max(r);
        sum += r;
        count += 1;
    }
    let (mut imax, mut isum, mut icount) = (0.0f64, 0.0, 0usize);
    tries = 0;
    while icount < samples && tries < 100 * samples {
        tries += 1;
        let x = draw(&mut rng);
        if !region.contains(map.eval(&x)?.as_slice()) {
            continue;
        }
        let y = chain.forward(&x)?;
        let ly = lambda * &y;
        let r = (map.eval(&chain.inverse(&y)?)? - chain.inverse(&ly)?).amax();
        imax = imax.max(r);
        isum += r;
        icount += 1;
    }
    if count == 0 || icount == 0 {
        return Err(VerifyError::TooFewSamples {
            found: count.min(icount),
            needed: samples,
        });
    }
    Ok(ConjugacyResidual {
        max,
        mean: sum / count as f64,
        inverse_max: imax,
        inverse_mean: isum / icount as f64,
        samples: count,
    })
}

/// Maximum residual of the leaf-invariance identity
/// `F(x + q_0(x, y_-)) = F(x) + q_0(F(x), π_-F(x + q_0(x, y_-)))`.
pub fn foliation_invariance(
    map: &MapModel,
    fol: &FoliationResult,
    samples: usize,
    seed: u64,
) -> Result<f64, VerifyError> {
    Ok(foliation_properties(map, fol, samples, seed)?.b4)
}

/// Diffeomorphism diagnostics of a chain.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffeoReport {
    /// `max ‖Φ⁻¹(Φ(x)) − x‖∞`.
    pub inverse_residual: f64,
    /// `max` entrywise difference between `DΦ` and central differences of `Φ`.
    pub derivative_residual: f64,
    /// Smallest singular value of `DΦ` over the samples.
    pub min_singular_value: f64,
    /// Number of samples.
    pub samples: usize,
}

/// Forward/inverse, derivative and non-degeneracy checks of `chain` on `region`.
pub fn diffeo_check(
    chain: &TransformChain,
    region: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<DiffeoReport, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = chain.dim();
    let inner = region.scaled(0.95);
    let h = 1e-6 * region.radius().max(1e-300);
    let mut rep = DiffeoReport {
        inverse_residual: 0.0,
        derivative_residual: 0.0,
        min_singular_value: f64::INFINITY,
        samples,
    };
    for _ in 0..samples {
        let x = DVector::from_fn(n, |i, _| rng.gen_range(inner.lo[i]..=inner.hi[i]));
        let y = chain.forward(&x)?;
        rep.inverse_residual = rep.inverse_residual.max((chain.inverse(&y)? - &x).amax());
        let d = chain.derivative(&x)?;
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (chain.forward(&xp)? - chain.forward(&xm)?) / (2.0 * h);
            for i in 0..n {
                rep.derivative_residual = rep.derivative_residual.max((fd[i] - d[(i, j)]).abs());
            }
        }
        let sv = d.singular_values().min();
        rep.min_singular_value = rep.min_singular_value.min(sv);
    }
    Ok(rep)
}

/// One row of a sharpness sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessRow {
    /// Family parameter.
    pub parameter: f64,
    /// Predicted lower bound `β`.
    pub predicted: f64,
    /// Measured exponent of `DΦ` (when the member succeeded).
    pub measured: Option<HolderEstimate>,
    /// Failure message of a member (non-fatal).
    pub error: Option<String>,
}

impl SharpnessRow {
    /// Whether the measurement respects the lower bound `measured ≥ predicted − margin`.
    pub fn lower_bound_holds(&self, margin: f64) -> Option<bool> {
        self.measured
            .as_ref()
            .map(|m| m.exponent >= self.predicted - margin)
    }
}

/// Runs `linearize` on each family member and measures the Hölder exponent of
/// the resulting `DΦ` at the origin on the ball of radius `radius`.
pub fn sharpness_experiment<L>(
    family: &[(f64, MapModel, f64)],
    mut linearize: L,
    radius: f64,
    seed: u64,
) -> Vec<SharpnessRow>
where
    L: FnMut(&MapModel) -> Result<TransformChain, String>,
{
    family
        .iter()
        .map(|(parameter, map, predicted)| {
            let center = vec![0.0; map.dim()];
            let outcome = linearize(map).and_then(|chain| {
                chain_derivative_holder(&chain, &center, radius, seed).map_err(|e| e.to_string())
            });
            match outcome {
                Ok(est) => SharpnessRow {
                    parameter: *parameter,
                    predicted: *predicted,
                    measured: Some(est),
                    error: None,
                },
                Err(e) => SharpnessRow {
                    parameter: *parameter,
                    predicted: *predicted,
                    measured: None,
                    error: Some(e),
                },
            }
        })
        .collect()
}
