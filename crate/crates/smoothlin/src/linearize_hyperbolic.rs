//! Linearization of a hyperbolic fixed point with both contracting and
//! expanding directions.
//!
//! In block coordinates `z = T⁻¹x` with contracting coordinates `X_-` and
//! expanding coordinates `X_+` the pipeline runs
//!
//! ```text
//! manifolds g_s, g_u  →  Θ₁, Θ₂ (straightening)  →  cutoff  →  foliations
//!   →  Ψ (decoupling)  →  ψ_-, ψ_+ (factor cascades)  →  Φ = (ψ_- ⊕ ψ_+) ∘ Ψ ∘ Θ₂ ∘ Θ₁.
//! ```
//!
//! * The unstable graph `x_- = g_u(x_+)` is the invariant graph of `G`
//!   tangent to `X_+`; the stable graph `x_+ = g_s(x_-)` is the invariant
//!   graph of `G⁻¹` tangent to `X_-`. Both come from the grid graph transform.
//! * `Θ₁(x) = (x_- − g_u(x_+), x_+)` flattens the unstable manifold onto
//!   `X_+`; `Θ₂(x) = (x_-, x_+ − g̃_s(x_-))` then flattens the image of the
//!   stable manifold onto `X_-`, where `g̃_s` is the stable graph expressed in
//!   the `Θ₁` coordinates. Θ₂ keeps `X_+` fixed, so both axes are invariant
//!   for the straightened map `G₂ = Θ G Θ⁻¹`.
//! * `G₂` is made globally close to linear with the radial cutoff. The stable
//!   foliation of `G₂` and the stable foliation of `G₂⁻¹` (the unstable
//!   foliation of `G₂`) come from the Lyapunov–Perron solver, and
//!   `Ψ(x) = (unstable leaf through x ∩ X_-, stable leaf through x ∩ X_+)`.
//!   Leaves are mapped to leaves and the axes are invariant, so
//!   `Ψ∘G₂ = (F_- ∘ π_-Ψ, F_+ ∘ π_+Ψ)` with `F_-(x_-) = π_-G₂(x_-, 0)` and
//!   `F_+(x_+) = π_+G₂(0, x_+)`.
//! * `F_-` is linearized by the contraction cascade. `F_+` is handled through
//!   its inverse: a chain `ψ` with `ψ∘F_+⁻¹ = Λ_+⁻¹ψ` also satisfies
//!   `ψ∘F_+ = Λ_+ψ`, so the cascade of `F_+⁻¹` is used as `ψ_+` directly.
//!
//! Pure contractions are sent to the contraction cascade, pure expansions to
//! the cascade of their inverse, and linear maps get the identity.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{ChainError, ConjugatedMap, Transform, TransformChain, TransformKind};
use crate::dynamics::{
    bump_modify, BoxRegion, BumpModification, DynamicsError, FnMap, GridFunction, Interpolation,
    InverseMap, MapModel,
};
use crate::linearize_contraction::{
    block_coordinates, invariant_graph, linearize_contraction, BandSplit, ContractionError,
    ContractionParams, StageReport,
};
use crate::lp_foliation::{leaf_axis_map, ConvergenceLog, LpError, LpParameters, LpProblem};
use crate::spectral::{LinearPart, SpectralBand, SpectralError, SpectrumDecomposition};
use crate::verify::{conjugacy_residual, ConjugacyResidual, VerifyError};

/// Default radius of the reporting box (block coordinates).
pub const DEFAULT_REPORT_RADIUS: f64 = 0.01;
/// Default grid nodes per axis of the manifold graphs.
pub const DEFAULT_MANIFOLD_RESOLUTION: usize = 65;
/// Default grid nodes per axis of the decoupling grid `Ψ`.
pub const DEFAULT_PSI_RESOLUTION: usize = 33;
/// Iterations of the fixed-point solve `x_- = ξ + g_u(g_s(x_-))`.
const REEXPRESS_MAX_ITER: usize = 200;

/// Errors of the hyperbolic pipeline.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum HyperbolicError {
    /// Spectral analysis failure.
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    /// Map or grid evaluation failure.
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// Transform evaluation failure.
    #[error(transparent)]
    Chain(#[from] ChainError),
    /// Failure of the graph transform or a factor cascade.
    #[error(transparent)]
    Contraction(#[from] ContractionError),
    /// Failure of the Lyapunov–Perron solver.
    #[error(transparent)]
    Lp(#[from] LpError),
    /// Failure of a residual check.
    #[error(transparent)]
    Verify(#[from] VerifyError),
    /// An iteration did not reach its tolerance.
    #[error("{what} did not converge after {iterations} iterations (last change {delta:e})")]
    NoConvergence {
        /// What was iterated.
        what: String,
        /// Iterations performed.
        iterations: usize,
        /// Last successive difference.
        delta: f64,
    },
    /// Invalid parameters.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    /// Failure inside a labeled phase of the pipeline.
    #[error("{phase}: {source}")]
    Phase {
        /// Phase label (`manifolds`, `straighten`, `cutoff`, `foliations`,
        /// `decouple`, `factor-`, `factor+`, `verify`).
        phase: &'static str,
        /// Underlying error.
        #[source]
        source: Box<HyperbolicError>,
    },
}

impl HyperbolicError {
    /// The phase label, if the error was raised inside a labeled phase.
    pub fn phase(&self) -> Option<&'static str> {
        match self {
            Self::Phase { phase, .. } => Some(phase),
            _ => None,
        }
    }
}

fn in_phase<T, E: Into<HyperbolicError>>(
    phase: &'static str,
    r: Result<T, E>,
) -> Result<T, HyperbolicError> {
    r.map_err(|e| HyperbolicError::Phase {
        phase,
        source: Box::new(e.into()),
    })
}

fn pick(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn embed(n: usize, a_idx: &[usize], a: &[f64], b_idx: &[usize], b: &[f64]) -> DVector<f64> {
    let mut z = DVector::zeros(n);
    for (k, &i) in a_idx.iter().enumerate() {
        z[i] = a[k];
    }
    for (k, &i) in b_idx.iter().enumerate() {
        z[i] = b[k];
    }
    z
}

fn norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// The stable graph `x_+ = g_s(x_-)` and the unstable graph `x_- = g_u(x_+)`
/// of a map in block coordinates.
#[derive(Clone, Debug)]
pub struct ManifoldPair {
    /// `g_s: X_- → X_+` on a box of the contracting coordinates.
    pub g_s: GridFunction,
    /// `g_u: X_+ → X_-` on a box of the expanding coordinates.
    pub g_u: GridFunction,
    /// Contracting indices.
    pub stable: Vec<usize>,
    /// Expanding indices.
    pub unstable: Vec<usize>,
    /// Graph-transform iterations for `g_s` (under `G⁻¹`).
    pub iterations_s: usize,
    /// Graph-transform iterations for `g_u` (under `G`).
    pub iterations_u: usize,
    /// `max ‖π_+G(x_-, g_s(x_-)) − g_s(π_-G(x_-, g_s(x_-)))‖∞` over samples.
    pub residual_s: f64,
    /// `max ‖π_-G(g_u(x_+), x_+) − g_u(π_+G(g_u(x_+), x_+))‖∞` over samples
    /// whose image stays in the box.
    pub residual_u: f64,
}

/// Stable and unstable graphs of `g` (block coordinates, block-diagonal
/// linear part) over boxes of sup-radius `radius`.
pub fn stable_unstable_manifolds(
    g: &MapModel,
    stable: &[usize],
    unstable: &[usize],
    radius: f64,
    res: usize,
    tol: f64,
    max_iter: usize,
) -> Result<ManifoldPair, HyperbolicError> {
    if stable.is_empty() || unstable.is_empty() || !(radius > 0.0) || res < 3 {
        return Err(HyperbolicError::InvalidParameters(
            "manifolds need both index sets, a positive radius and resolution >= 3".into(),
        ));
    }
    let lam = g.linear_part();
    let (ls, lu) = (sub(lam, stable, stable), sub(lam, unstable, unstable));
    let split_u = BandSplit {
        band: 0,
        u: Vec::new(),
        v: stable.to_vec(),
        w: unstable.to_vec(),
        a: DMatrix::zeros(0, 0),
        b: ls.clone(),
        c: lu.clone(),
    };
    let (g_u, log_u) = invariant_graph(
        g,
        &split_u,
        &BoxRegion::symmetric(unstable.len(), radius),
        res,
        1,
        tol,
        max_iter,
    )?;
    let inv = InverseMap::new(g.clone())?.into_model();
    let inv_of = |m: &DMatrix<f64>| {
        m.clone().try_inverse().ok_or_else(|| {
            HyperbolicError::Dynamics(DynamicsError::Singular("linear block".into()))
        })
    };
    let split_s = BandSplit {
        band: 0,
        u: Vec::new(),
        v: unstable.to_vec(),
        w: stable.to_vec(),
        a: DMatrix::zeros(0, 0),
        b: inv_of(&lu)?,
        c: inv_of(&ls)?,
    };
    let (g_s, log_s) = invariant_graph(
        &inv,
        &split_s,
        &BoxRegion::symmetric(stable.len(), radius),
        res,
        1,
        tol,
        max_iter,
    )?;
    let mut pair = ManifoldPair {
        g_s,
        g_u,
        stable: stable.to_vec(),
        unstable: unstable.to_vec(),
        iterations_s: log_s.iterations,
        iterations_u: log_u.iterations,
        residual_s: 0.0,
        residual_u: 0.0,
    };
    let (rs, ru) = manifold_residuals(g, &pair, 200, 7)?;
    pair.residual_s = rs;
    pair.residual_u = ru;
    Ok(pair)
}

/// Forward invariance residuals `(residual_s, residual_u)` of a manifold pair
/// under `g`, over `samples` seeded points of 0.9 times the graph boxes.
pub fn manifold_residuals(
    g: &MapModel,
    pair: &ManifoldPair,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64), HyperbolicError> {
    let n = g.dim();
    let (s, u) = (&pair.stable, &pair.unstable);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rad_s = 0.9 * pair.g_s.bounds().radius();
    let rad_u = 0.9 * pair.g_u.bounds().radius();
    let (mut worst_s, mut worst_u) = (0.0f64, 0.0f64);
    let mut tries = 0;
    let mut hits = 0;
    while hits < samples && tries < 100 * samples {
        tries += 1;
        let xm: Vec<f64> = (0..s.len())
            .map(|_| rng.gen_range(-rad_s..=rad_s))
            .collect();
        let z = embed(n, s, &xm, u, &pair.g_s.eval(&xm)?);
        let gz = g.eval(&z)?;
        let (gm, gp) = (pick(&gz, s), pick(&gz, u));
        if !pair.g_s.bounds().contains(gm.as_slice()) {
            continue;
        }
        let r = (gp - DVector::from_vec(pair.g_s.eval(gm.as_slice())?)).amax();
        worst_s = worst_s.max(r);
        hits += 1;
    }
    tries = 0;
    hits = 0;
    while hits < samples && tries < 100 * samples {
        tries += 1;
        let xp: Vec<f64> = (0..u.len())
            .map(|_| rng.gen_range(-rad_u..=rad_u))
            .collect();
        let z = embed(n, s, &pair.g_u.eval(&xp)?, u, &xp);
        let gz = g.eval(&z)?;
        let (gm, gp) = (pick(&gz, s), pick(&gz, u));
        if !pair.g_u.bounds().contains(gp.as_slice()) {
            continue;
        }
        let r = (gm - DVector::from_vec(pair.g_u.eval(gp.as_slice())?)).amax();
        worst_u = worst_u.max(r);
        hits += 1;
    }
    Ok((worst_s, worst_u))
}

/// The straightening transforms of a manifold pair.
#[derive(Clone, Debug)]
pub struct Straightening {
    /// `Θ₁(x) = (x_- − g_u(x_+), x_+)`.
    pub theta1: Transform,
    /// `Θ₂(x) = (x_-, x_+ − g̃_s(x_-))`.
    pub theta2: Transform,
    /// The stable graph in the `Θ₁` coordinates.
    pub g_s_shifted: GridFunction,
}

impl Straightening {
    /// The chain `Θ₂ ∘ Θ₁`.
    pub fn chain(&self, n: usize) -> TransformChain {
        let mut c = TransformChain::identity(n);
        c.push(self.theta1.clone());
        c.push(self.theta2.clone());
        c
    }
}

/// Builds `Θ₁` and `Θ₂`. The stable manifold `{(x_-, g_s(x_-))}` becomes
/// `{(ξ, g_s(x_-)) : ξ = x_- − g_u(g_s(x_-))}` after `Θ₁`; `g̃_s(ξ)` is found by
/// solving `x_- = ξ + g_u(g_s(x_-))` by fixed-point iteration on a slightly
/// smaller box.
pub fn straighten_manifolds(pair: &ManifoldPair) -> Result<Straightening, HyperbolicError> {
    let theta1 = Transform::new(
        "Theta1",
        TransformKind::GraphShift {
            target: pair.stable.clone(),
            source: pair.unstable.clone(),
            graph: pair.g_u.clone(),
        },
    );
    let ns = pair.stable.len();
    let bounds = pair.g_s.bounds().scaled(0.95);
    let res = pair.g_s.resolution().to_vec();
    let g_s_shifted =
        GridFunction::try_sample(bounds, res, pair.unstable.len(), |xi: &[f64]| {
            let mut x = xi.to_vec();
            let mut delta = f64::INFINITY;
            for _ in 0..REEXPRESS_MAX_ITER {
                let gu = pair.g_u.eval(&pair.g_s.eval(&x)?)?;
                let next: Vec<f64> = (0..ns).map(|k| xi[k] + gu[k]).collect();
                delta = next
                    .iter()
                    .zip(&x)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                x = next;
                if delta
                    <= 4.0 * f64::EPSILON * x.iter().fold(f64::MIN_POSITIVE, |m, v| m.max(v.abs()))
                {
                    return Ok(pair.g_s.eval(&x)?);
                }
            }
            Err(HyperbolicError::NoConvergence {
                what: "stable graph re-expression".into(),
                iterations: REEXPRESS_MAX_ITER,
                delta,
            })
        })?
        .with_interpolation(Interpolation::CubicHermite);
    let theta2 = Transform::new(
        "Theta2",
        TransformKind::GraphShift {
            target: pair.unstable.clone(),
            source: pair.stable.clone(),
            graph: g_s_shifted.clone(),
        },
    );
    Ok(Straightening {
        theta1,
        theta2,
        g_s_shifted,
    })
}

/// `max(‖π_-G₂(0, x_+)‖∞, ‖π_+G₂(x_-, 0)‖∞)` over seeded samples of the
/// axes in the `radius`-box: zero when both axes are invariant.
pub fn axis_residual(
    g2: &MapModel,
    stable: &[usize],
    unstable: &[usize],
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, HyperbolicError> {
    let n = g2.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let xp: Vec<f64> = (0..unstable.len())
            .map(|_| rng.gen_range(-radius..=radius))
            .collect();
        let xm: Vec<f64> = (0..stable.len())
            .map(|_| rng.gen_range(-radius..=radius))
            .collect();
        let on_u = g2.eval(&embed(n, stable, &vec![0.0; stable.len()], unstable, &xp))?;
        let on_s = g2.eval(&embed(n, stable, &xm, unstable, &vec![0.0; unstable.len()]))?;
        worst = worst
            .max(pick(&on_u, stable).amax())
            .max(pick(&on_s, unstable).amax());
    }
    Ok(worst)
}

/// The decoupling transform and the two factor maps.
#[derive(Clone, Debug)]
pub struct DecouplingResult {
    /// `Ψ` as a component replacement of all coordinates (inverse by Newton).
    pub psi: Transform,
    /// `F_-(x_-) = π_-G₂(x_-, 0)` on `X_-`.
    pub f_minus: MapModel,
    /// `F_+(x_+) = π_+G₂(0, x_+)` on `X_+`.
    pub f_plus: MapModel,
    /// `max ‖Ψ(G₂(x)) − (F_-(π_-Ψ(x)), F_+(π_+Ψ(x)))‖∞` over samples.
    pub residual: f64,
    /// `‖DΨ(O) − id‖∞`.
    pub dpsi_origin_error: f64,
    /// Picard log of the stable foliation (leaves meeting `X_+`).
    pub stable_log: ConvergenceLog,
    /// Picard log of the unstable foliation (leaves meeting `X_-`).
    pub unstable_log: ConvergenceLog,
}

fn factor_map(g: &MapModel, keep: &[usize], zero: &[usize]) -> Result<MapModel, DynamicsError> {
    let n = g.dim();
    let (k1, z1, g1) = (keep.to_vec(), zero.to_vec(), g.clone());
    let (k2, z2, g2) = (keep.to_vec(), zero.to_vec(), g.clone());
    let lin = sub(g.linear_part(), keep, keep);
    let eval = FnMap::new(
        keep.len(),
        move |x| {
            let z = embed(n, &k1, x.as_slice(), &z1, &vec![0.0; z1.len()]);
            Ok(pick(&g1.eval(&z)?, &k1))
        },
        move |x| {
            let z = embed(n, &k2, x.as_slice(), &z2, &vec![0.0; z2.len()]);
            Ok(sub(&g2.jacobian(&z)?, &k2, &k2))
        },
    );
    Ok(MapModel::from_eval(Arc::new(eval), BoxRegion::unbounded(keep.len()))?.with_linear(lin))
}

/// Builds `Ψ` on `x_box` from the stable foliation problem of the
/// straightened, globalized map and the stable foliation problem of its
/// inverse, together with the factors `F_-`, `F_+`, and checks the
/// decoupling identity on `samples` seeded points of `check_box` whose image
/// stays in `x_box`.
#[allow(clippy::too_many_arguments)]
pub fn decouple(
    stable_problem: &LpProblem,
    stable_params: &LpParameters,
    unstable_problem: &LpProblem,
    unstable_params: &LpParameters,
    x_box: &BoxRegion,
    res: usize,
    check_box: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<DecouplingResult, HyperbolicError> {
    let g = stable_problem.map();
    let n = g.dim();
    let (s, u) = (
        stable_problem.stable().to_vec(),
        stable_problem.unstable().to_vec(),
    );
    if unstable_problem.stable() != u.as_slice() || unstable_problem.unstable() != s.as_slice() {
        return Err(HyperbolicError::InvalidParameters(
            "the unstable problem must swap the index sets".into(),
        ));
    }
    let resv = vec![res; n];
    let (to_plus, stable_log) = leaf_axis_map(stable_problem, stable_params, x_box, &resv)?;
    let (to_minus, unstable_log) = leaf_axis_map(unstable_problem, unstable_params, x_box, &resv)?;
    let nodes = to_plus.node_count();
    let mut vals = Vec::with_capacity(nodes * n);
    let (vp, vm) = (to_plus.values(), to_minus.values());
    for node in 0..nodes {
        for i in 0..n {
            if let Some(k) = s.iter().position(|&j| j == i) {
                vals.push(vm[node * s.len() + k]);
            } else {
                let k = u
                    .iter()
                    .position(|&j| j == i)
                    .expect("indices partition the coordinates");
                vals.push(vp[node * u.len() + k]);
            }
        }
    }
    let grid = GridFunction::from_values(x_box.clone(), resv, n, vals)?
        .with_interpolation(Interpolation::CubicHermite);
    let dpsi_origin_error = (grid.derivative(&vec![0.0; n])? - DMatrix::identity(n, n)).amax();
    let psi = Transform::new(
        "Psi",
        TransformKind::ComponentReplace {
            target: (0..n).collect(),
            psi: grid.clone(),
        },
    );
    let f_minus = factor_map(g, &s, &u)?;
    let f_plus = factor_map(g, &u, &s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut residual = 0.0f64;
    let (mut hits, mut tries) = (0, 0);
    while hits < samples && tries < 100 * samples {
        tries += 1;
        let x = DVector::from_fn(n, |i, _| rng.gen_range(check_box.lo[i]..=check_box.hi[i]));
        let gx = g.eval(&x)?;
        if !x_box.contains(gx.as_slice()) {
            continue;
        }
        let lhs = DVector::from_vec(grid.eval(gx.as_slice())?);
        let px = DVector::from_vec(grid.eval(x.as_slice())?);
        let fm = f_minus.eval(&pick(&px, &s))?;
        let fp = f_plus.eval(&pick(&px, &u))?;
        let rhs = embed(n, &s, fm.as_slice(), &u, fp.as_slice());
        residual = residual.max((lhs - rhs).amax());
        hits += 1;
    }
    Ok(DecouplingResult {
        psi,
        f_minus,
        f_plus,
        residual,
        dpsi_origin_error,
        stable_log,
        unstable_log,
    })
}

/// Parameters of the hyperbolic pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperbolicParams {
    /// Sup-radius of the reporting box in block coordinates; `Ψ` is sampled
    /// on twice this box.
    pub report_radius: f64,
    /// Inner cutoff radius `r₀` (default `1.1·√n·report_radius`, so the
    /// reporting box lies inside the `r₀`-ball).
    pub r0: Option<f64>,
    /// Outer cutoff radius `r₁` (default `2 r₀`).
    pub r1: Option<f64>,
    /// Largest acceptable `η` of the globalized map.
    pub eta_target: f64,
    /// Grid nodes per axis of the manifold graphs.
    pub manifold_resolution: usize,
    /// Tolerance of the graph transforms.
    pub manifold_tol: f64,
    /// Iteration cap of the graph transforms.
    pub manifold_max_iter: usize,
    /// Grid nodes per axis of `Ψ`.
    pub psi_resolution: usize,
    /// Truncation `K` of the Lyapunov–Perron sums (`None`: solver default).
    pub k_tail: Option<usize>,
    /// Picard tolerance of the Lyapunov–Perron solver.
    pub lp_tol: f64,
    /// Picard iteration cap.
    pub lp_max_iter: usize,
    /// Parameters of the two factor cascades (`report_radius` is overridden).
    pub contraction: ContractionParams,
    /// Samples of the residual checks.
    pub check_samples: usize,
    /// Seed of the sampled checks.
    pub seed: u64,
}

impl Default for HyperbolicParams {
    fn default() -> Self {
        Self {
            report_radius: DEFAULT_REPORT_RADIUS,
            r0: None,
            r1: None,
            eta_target: 1.0,
            manifold_resolution: DEFAULT_MANIFOLD_RESOLUTION,
            manifold_tol: 1e-13,
            manifold_max_iter: 500,
            psi_resolution: DEFAULT_PSI_RESOLUTION,
            k_tail: None,
            lp_tol: 1e-12,
            lp_max_iter: 400,
            contraction: ContractionParams::default(),
            check_samples: 200,
            seed: 1,
        }
    }
}

/// Which route the pipeline took.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Route {
    /// The map equals its linear part: `Φ` is the identity.
    Linear,
    /// All bands contract: the contraction cascade on `F`.
    Contraction,
    /// All bands expand: the contraction cascade on `F⁻¹`.
    Expansion,
    /// Both kinds of bands: the full saddle pipeline.
    Saddle,
}

impl Route {
    /// Short name for reports.
    pub fn name(self) -> &'static str {
        match self {
            Self::Linear => "linear",
            Self::Contraction => "contraction",
            Self::Expansion => "expansion",
            Self::Saddle => "saddle",
        }
    }
}

/// Per-phase record of a saddle run.
#[derive(Clone, Debug, PartialEq)]
pub struct SaddleReport {
    /// Graph-transform iterations `(g_s, g_u)`.
    pub manifold_iterations: (usize, usize),
    /// Invariance residuals `(g_s, g_u)`.
    pub manifold_residuals: (f64, f64),
    /// Axis invariance residual of the straightened map.
    pub axis_residual: f64,
    /// Cutoff record.
    pub cutoff: BumpModification,
    /// `η` of the inverse of the globalized map.
    pub eta_inverse: f64,
    /// Estimated contraction factors of the two Picard iterations.
    pub lp_factors: (f64, f64),
    /// Picard iterations (maximum over nodes) of the two foliations.
    pub lp_iterations: (usize, usize),
    /// Residual of the decoupling identity.
    pub decoupling_residual: f64,
    /// `‖DΨ(O) − id‖∞`.
    pub dpsi_origin_error: f64,
    /// Stage records of the `F_-` cascade.
    pub stages_minus: Vec<StageReport>,
    /// Stage records of the `F_+⁻¹` cascade.
    pub stages_plus: Vec<StageReport>,
}

/// Report of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct HyperbolicReport {
    /// The route taken.
    pub route: Route,
    /// Saddle phases (absent for pure contractions and expansions).
    pub saddle: Option<SaddleReport>,
    /// Stage records of the cascade for pure contractions and expansions.
    pub stages: Vec<StageReport>,
    /// Final conjugacy residual on the reporting box (original coordinates).
    pub conjugacy: ConjugacyResidual,
    /// `‖DΦ(O) − id‖∞`.
    pub dphi_origin_error: f64,
    /// Reporting box (original coordinates).
    pub report_box: BoxRegion,
}

impl HyperbolicReport {
    /// Flat `(key, value)` list for text reports.
    pub fn key_values(&self) -> Vec<(String, f64)> {
        let mut kv = vec![
            ("conjugacy_residual_max".to_string(), self.conjugacy.max),
            ("conjugacy_residual_mean".to_string(), self.conjugacy.mean),
            (
                "inverse_residual_max".to_string(),
                self.conjugacy.inverse_max,
            ),
            ("dphi_origin_error".to_string(), self.dphi_origin_error),
            ("report_radius".to_string(), self.report_box.radius()),
        ];
        let stage_kv = |prefix: &str, stages: &[StageReport], kv: &mut Vec<(String, f64)>| {
            for st in stages {
                let p = format!("{prefix}stage{}", st.band);
                kv.push((format!("{p}_manifold_residual"), st.manifold_residual));
                kv.push((format!("{p}_eta"), st.psi.eta));
                kv.push((
                    format!("{p}_psi_iterations"),
                    st.psi.differences.len() as f64,
                ));
                if let Some(r) = st.psi.fitted_rate {
                    kv.push((format!("{p}_fitted_rate"), r));
                }
                kv.push((format!("{p}_dpsi_origin_error"), st.dpsi_origin_error));
                kv.push((format!("{p}_structure_residual"), st.structure_residual));
            }
        };
        stage_kv("", &self.stages, &mut kv);
        if let Some(s) = &self.saddle {
            kv.extend([
                (
                    "manifold_s_iterations".to_string(),
                    s.manifold_iterations.0 as f64,
                ),
                (
                    "manifold_u_iterations".to_string(),
                    s.manifold_iterations.1 as f64,
                ),
                ("manifold_s_residual".to_string(), s.manifold_residuals.0),
                ("manifold_u_residual".to_string(), s.manifold_residuals.1),
                ("axis_residual".to_string(), s.axis_residual),
                ("cutoff_r0".to_string(), s.cutoff.r0),
                ("cutoff_r1".to_string(), s.cutoff.r1),
                ("eta".to_string(), s.cutoff.eta),
                ("eta_inverse".to_string(), s.eta_inverse),
                ("lp_factor_stable".to_string(), s.lp_factors.0),
                ("lp_factor_unstable".to_string(), s.lp_factors.1),
                ("lp_iterations_stable".to_string(), s.lp_iterations.0 as f64),
                (
                    "lp_iterations_unstable".to_string(),
                    s.lp_iterations.1 as f64,
                ),
                ("decoupling_residual".to_string(), s.decoupling_residual),
                ("dpsi_origin_error".to_string(), s.dpsi_origin_error),
            ]);
            stage_kv("minus_", &s.stages_minus, &mut kv);
            stage_kv("plus_", &s.stages_plus, &mut kv);
        }
        kv
    }
}

/// Result of the pipeline.
#[derive(Clone, Debug)]
pub struct HyperbolicResult {
    /// `Φ` in the original coordinates.
    pub chain: TransformChain,
    /// Per-phase report.
    pub report: HyperbolicReport,
}

fn reciprocal(dec: &[SpectralBand]) -> Result<SpectrumDecomposition, SpectralError> {
    SpectrumDecomposition::from_bands(
        dec.iter()
            .rev()
            .map(|b| SpectralBand::new(1.0 / b.lambda_plus, 1.0 / b.lambda_minus))
            .collect(),
    )
}

/// The linear part of a restriction to band-aligned indices, with the given bands.
fn restricted_linear(
    block: &DMatrix<f64>,
    bands: SpectrumDecomposition,
) -> Result<LinearPart, SpectralError> {
    LinearPart::from_matrix_and_bands(block, bands)
}

fn wrap_basis(lin: &LinearPart, inner: TransformChain) -> TransformChain {
    if lin.is_identity_basis() {
        return inner;
    }
    let n = lin.dim();
    let mut c = TransformChain::identity(n);
    c.push(Transform::new(
        "T_inv",
        TransformKind::Linear {
            matrix: lin.t_inv.clone(),
            inverse: lin.t.clone(),
        },
    ));
    let mut c = c.then(inner);
    c.push(Transform::new(
        "T",
        TransformKind::Linear {
            matrix: lin.t.clone(),
            inverse: lin.t_inv.clone(),
        },
    ));
    c
}

/// The reporting box in original coordinates: the block-coordinate box of
/// sup-radius `radius` mapped by `T` and shrunk to a cube inside its image.
fn report_box(lin: &LinearPart, radius: f64) -> BoxRegion {
    let n = lin.dim();
    let r = if lin.is_identity_basis() {
        radius
    } else {
        radius / norm_inf(&lin.t_inv).max(f64::MIN_POSITIVE)
    };
    BoxRegion::symmetric(n, r)
}

/// Linearizes `map` at the origin: dispatches pure contractions and pure
/// expansions to the contraction cascade, and runs the saddle pipeline
/// otherwise. The final conjugacy residual and `DΦ(O)` are measured on the
/// reporting box.
pub fn linearize_hyperbolic(
    map: &MapModel,
    lin: &LinearPart,
    params: &HyperbolicParams,
) -> Result<HyperbolicResult, HyperbolicError> {
    if !(params.report_radius > 0.0
        && params.psi_resolution >= 3
        && params.manifold_resolution >= 3)
    {
        return Err(HyperbolicError::InvalidParameters(
            "report radius and resolutions >= 3".into(),
        ));
    }
    let dec = &lin.decomposition;
    let (d, m) = (dec.d(), dec.m());
    let n = map.dim();
    let rbox = report_box(lin, params.report_radius);
    let cparams = ContractionParams {
        report_radius: params.report_radius,
        ..params.contraction.clone()
    };
    let (chain, route, stages, saddle) = if map.is_linear() {
        (TransformChain::identity(n), Route::Linear, Vec::new(), None)
    } else if d == m {
        let res = in_phase("contraction", linearize_contraction(map, lin, &cparams))?;
        (res.chain, Route::Contraction, res.stages, None)
    } else if d == 0 {
        let inv = in_phase("expansion", InverseMap::new(map.clone()))?.into_model();
        let lam_inv = in_phase(
            "expansion",
            lin.lambda
                .clone()
                .try_inverse()
                .ok_or_else(|| DynamicsError::Singular("linear part".into())),
        )?;
        let inv_lin = in_phase(
            "expansion",
            reciprocal(dec.bands()).and_then(|b| restricted_linear(&lam_inv, b)),
        )?;
        let res = in_phase("expansion", linearize_contraction(&inv, &inv_lin, &cparams))?;
        (res.chain, Route::Expansion, res.stages, None)
    } else {
        let (chain, report) = saddle(map, lin, params)?;
        (chain, Route::Saddle, Vec::new(), Some(report))
    };
    let conjugacy = in_phase(
        "verify",
        conjugacy_residual(
            map,
            &chain,
            &lin.lambda,
            &rbox,
            params.check_samples,
            params.seed,
        ),
    )?;
    let dphi_origin_error = (in_phase("verify", chain.derivative(&DVector::zeros(n)))?
        - DMatrix::identity(n, n))
    .amax();
    Ok(HyperbolicResult {
        chain,
        report: HyperbolicReport {
            route,
            saddle,
            stages,
            conjugacy,
            dphi_origin_error,
            report_box: rbox,
        },
    })
}

fn saddle(
    map: &MapModel,
    lin: &LinearPart,
    params: &HyperbolicParams,
) -> Result<(TransformChain, SaddleReport), HyperbolicError> {
    let n = map.dim();
    let dec = &lin.decomposition;
    let bands = dec.bands();
    let d = dec.d();
    let (s, u) = (lin.stable_indices(), lin.unstable_indices());
    let g = in_phase("manifolds", block_coordinates(map, lin))?;
    let rr = params.report_radius;
    let r0 = params.r0.unwrap_or(1.1 * (n as f64).sqrt() * rr);
    let r1 = params.r1.unwrap_or(2.0 * r0);
    if !(r0 > 0.0 && r1 > r0) {
        return Err(HyperbolicError::InvalidParameters(format!(
            "need 0 < r0 < r1 (r0 = {r0}, r1 = {r1})"
        )));
    }
    // The straightening is evaluated at points of the r1-ball and at their
    // images, so the graphs cover the image of the r1-box with some room.
    let graph_radius = 1.5 * norm_inf(&lin.block).max(1.0) * r1;

    let pair = in_phase(
        "manifolds",
        stable_unstable_manifolds(
            &g,
            &s,
            &u,
            graph_radius,
            params.manifold_resolution,
            params.manifold_tol,
            params.manifold_max_iter,
        ),
    )?;
    let st = in_phase("straighten", straighten_manifolds(&pair))?;
    let theta = st.chain(n);
    let g2 = in_phase(
        "straighten",
        MapModel::from_eval(
            Arc::new(ConjugatedMap::new(g.evaluator(), theta.clone())),
            BoxRegion::symmetric(n, r1),
        ),
    )?
    .with_linear(lin.block.clone());
    let axis = in_phase(
        "straighten",
        axis_residual(&g2, &s, &u, r1, params.check_samples, params.seed),
    )?;

    let (gmod, cutoff) = in_phase("cutoff", bump_modify(&g2, r0, r1, params.eta_target))?;
    let (ls_minus, ls_plus) = (bands[0].lambda_minus, bands[d - 1].lambda_plus);
    let (lu_minus, lu_plus) = (bands[d].lambda_minus, bands[bands.len() - 1].lambda_plus);
    let with_opts = |mut p: LpParameters| {
        if let Some(k) = params.k_tail {
            p.k_tail = k;
        }
        p.tol = params.lp_tol;
        p.max_iter = params.lp_max_iter;
        p
    };
    let sp = in_phase("foliations", LpParameters::auto(ls_plus, lu_minus, lu_plus))?;
    let sp = with_opts(sp);
    let up = in_phase(
        "foliations",
        LpParameters::auto(1.0 / lu_minus, 1.0 / ls_plus, 1.0 / ls_minus),
    )?;
    let up = with_opts(up);
    let sprob = in_phase(
        "foliations",
        LpProblem::new(gmod.clone(), s.clone(), u.clone(), cutoff.eta),
    )?;
    let uprob = in_phase("foliations", sprob.inverse(r1))?;
    let x_box = BoxRegion::symmetric(n, 2.0 * rr);
    let dc = in_phase(
        "decouple",
        decouple(
            &sprob,
            &sp,
            &uprob,
            &up,
            &x_box,
            params.psi_resolution,
            &BoxRegion::symmetric(n, rr),
            params.check_samples,
            params.seed,
        ),
    )?;

    // Factor cascades: the factor boxes cover π_∓Ψ of the reporting box.
    let fparams = ContractionParams {
        report_radius: 1.25 * rr,
        ..params.contraction.clone()
    };
    let minus_lin = in_phase(
        "factor-",
        SpectrumDecomposition::from_bands(bands[..d].to_vec())
            .and_then(|b| restricted_linear(dc.f_minus.linear_part(), b)),
    )?;
    let minus = in_phase(
        "factor-",
        linearize_contraction(&dc.f_minus, &minus_lin, &fparams),
    )?;
    let f_plus_inv = in_phase("factor+", InverseMap::new(dc.f_plus.clone()))?.into_model();
    let plus_lin = in_phase(
        "factor+",
        reciprocal(&bands[d..]).and_then(|b| restricted_linear(f_plus_inv.linear_part(), b)),
    )?;
    let plus = in_phase(
        "factor+",
        linearize_contraction(&f_plus_inv, &plus_lin, &fparams),
    )?;

    let mut inner = theta;
    inner.push(dc.psi.clone());
    inner.push(Transform::new(
        "Factors",
        TransformKind::Product {
            blocks: vec![(s.clone(), minus.chain), (u.clone(), plus.chain)],
        },
    ));
    let chain = wrap_basis(lin, inner);
    let report = SaddleReport {
        manifold_iterations: (pair.iterations_s, pair.iterations_u),
        manifold_residuals: (pair.residual_s, pair.residual_u),
        axis_residual: axis,
        eta_inverse: uprob.eta(),
        lp_factors: (dc.stable_log.factor, dc.unstable_log.factor),
        lp_iterations: (dc.stable_log.iterations(), dc.unstable_log.iterations()),
        decoupling_residual: dc.residual,
        dpsi_origin_error: dc.dpsi_origin_error,
        stages_minus: minus.stages,
        stages_plus: plus.stages,
        cutoff,
    };
    Ok((chain, report))
}
