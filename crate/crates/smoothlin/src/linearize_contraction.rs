//! Partial-linearization cascade for contractions.
//!
//! For a contraction `G` with bands `σ_1, …, σ_m` (ascending moduli) the
//! cascade removes the nonlinearity band by band, starting from the slowest:
//!
//! ```text
//! G = F_m  →(Φ_m)  F_{m−1}  →(Φ_{m−1})  ⋯  →(Φ_1)  F_0 = Λ,     Φ = Φ_1 ∘ ⋯ ∘ Φ_m.
//! ```
//!
//! At step `ℓ` the coordinates split as `u` (bands `< ℓ`), `v` (band `ℓ`) and
//! `w` (bands `> ℓ`), and the current map `F_ℓ = P∘G∘P⁻¹`
//! (`P = Φ_{ℓ+1} ∘ ⋯ ∘ Φ_m`) acts linearly on `w`. With `Γ` the invariant
//! graph tangent to `w` and `Θ` its straightening,
//! `Ψ̃_ℓ = lim B^{-k} π_v F̃_ℓ^k` and `Ψ_ℓ = Ψ̃_ℓ ∘ Θ`. Since `π_v P = π_v`
//! and the band-`ℓ` component of the full conjugacy vanishes on the invariant
//! graph `Γ_G` of `G` tangent to `w`, this equals
//!
//! ```text
//! Ψ_ℓ(x) = lim_k B^{-k} π_v (G^k a − b_k),     a = P⁻¹x,
//! ```
//!
//! where `b_k ∈ Γ_G` has the same `w`-component as `G^k a`. The difference
//! `G^k a − b_k` is propagated with [`MapModel::eval_difference`], which is
//! cancellation free for polynomial maps, and `b_k` is moved along `Γ_G`
//! after every step; the limit therefore keeps its relative accuracy for
//! large `k` and does not feel the interpolation error of `P`.
//! `Φ_ℓ(x) = (u, Ψ_ℓ(x), w)` is stored as a grid-backed component replacement.
//!
//! Invariant graphs of polynomial maps are computed as Taylor jets by
//! undetermined coefficients, which selects the analytic manifold; for other
//! maps a grid graph transform is used.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chain::{ChainError, Transform, TransformChain, TransformKind};
use crate::dynamics::{
    monomials_of_degree, BoxRegion, DynamicsError, FnMap, GridFunction, Interpolation, MapModel,
    PolyMap, Polynomial,
};
use crate::spectral::{check_band_condition, LinearPart, SpectralError};
use crate::verify::linear_fit;

/// Default stopping tolerance of the `Ψ`-limits and graph transforms.
pub const DEFAULT_TOL: f64 = 1e-12;
/// Default grid nodes per axis for the `Ψ_ℓ` grids.
pub const DEFAULT_RESOLUTION: usize = 33;
/// Default Taylor order of invariant-graph jets.
pub const DEFAULT_JET_ORDER: u32 = 10;
/// Growth of the stage boxes per cascade step, keeping compositions interior.
pub const DEFAULT_BOX_GROWTH: f64 = 1.5;
/// A fitted decay rate above `SLOW_DECAY_FACTOR · η` signals a too large domain.
pub const SLOW_DECAY_FACTOR: f64 = 1.5;
/// Graph-transform iterates larger than this multiple of the `w`-box radius
/// signal that the box is outside the perturbative regime.
pub const GRAPH_SIZE_FACTOR: f64 = 10.0;
/// Extra iterations beyond the a-priori bound `⌈log tol / log η⌉`.
pub const KMAX_EXTRA: usize = 8;

/// Errors of the contraction cascade.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ContractionError {
    /// Spectral analysis failure.
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    /// Map or grid evaluation failure.
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// Transform evaluation failure.
    #[error(transparent)]
    Chain(#[from] ChainError),
    /// The linear part has expanding bands.
    #[error("the map is not a contraction (d = {d}, m = {m})")]
    NotContraction {
        /// Number of contractive bands.
        d: usize,
        /// Number of bands.
        m: usize,
    },
    /// `η = μ_m^+ μ_ℓ^+ / μ_ℓ^- ≥ 1`.
    #[error("band condition violated at band {band}: eta = {eta} >= 1")]
    BandConditionViolated {
        /// Band index (1-based).
        band: usize,
        /// The offending `η`.
        eta: f64,
    },
    /// The `Ψ`-limit decays much slower than predicted.
    #[error("slow decay at band {band}: fitted rate {rate} > 1.5 eta = {limit}")]
    SlowDecay {
        /// Band index (1-based).
        band: usize,
        /// Fitted rate.
        rate: f64,
        /// `1.5 η`.
        limit: f64,
    },
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
    /// The invariant graph grew far beyond the working box.
    #[error("invariant graph leaves the working regime (|h| = {size:e} > {radius:e})")]
    GraphLeavesBox {
        /// Largest graph value.
        size: f64,
        /// Box radius.
        radius: f64,
    },
    /// The homological equation of the jet is singular.
    #[error("resonance at jet degree {degree}")]
    Resonance {
        /// Degree of the singular equation.
        degree: u32,
    },
    /// Invalid parameters.
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    /// Failure inside a cascade stage.
    #[error("stage {band}: {source}")]
    Stage {
        /// Band index (1-based).
        band: usize,
        /// Underlying error.
        #[source]
        source: Box<ContractionError>,
    },
}

impl ContractionError {
    fn at(self, band: usize) -> Self {
        match self {
            e @ Self::Stage { .. } => e,
            e => Self::Stage {
                band,
                source: Box::new(e),
            },
        }
    }
}

/// The `(u, v, w)` coordinate split of cascade step `ℓ` with blocks `A, B, C`.
#[derive(Clone, Debug, PartialEq)]
pub struct BandSplit {
    /// Band index `ℓ` (1-based).
    pub band: usize,
    /// Indices of bands `1..ℓ−1`.
    pub u: Vec<usize>,
    /// Indices of band `ℓ`.
    pub v: Vec<usize>,
    /// Indices of bands `ℓ+1..m`.
    pub w: Vec<usize>,
    /// `A = diag(Λ_1, …, Λ_{ℓ−1})`.
    pub a: DMatrix<f64>,
    /// `B = Λ_ℓ`.
    pub b: DMatrix<f64>,
    /// `C = diag(Λ_{ℓ+1}, …, Λ_m)`.
    pub c: DMatrix<f64>,
}

fn sub(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn pick(x: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| x[idx[i]])
}

impl BandSplit {
    /// Split of the block coordinates of `lin` for band `band` (1-based).
    pub fn new(lin: &LinearPart, band: usize) -> Self {
        let r = &lin.ranges;
        let u: Vec<usize> = r[..band - 1].iter().flat_map(|x| x.clone()).collect();
        let v: Vec<usize> = r[band - 1].clone().collect();
        let w: Vec<usize> = r[band..].iter().flat_map(|x| x.clone()).collect();
        let blk = &lin.block;
        Self {
            band,
            a: sub(blk, &u, &u),
            b: sub(blk, &v, &v),
            c: sub(blk, &w, &w),
            u,
            v,
            w,
        }
    }

    /// `u` followed by `v` indices.
    pub fn uv(&self) -> Vec<usize> {
        self.u.iter().chain(&self.v).copied().collect()
    }

    /// `v` followed by `w` indices.
    pub fn vw(&self) -> Vec<usize> {
        self.v.iter().chain(&self.w).copied().collect()
    }

    /// Total dimension.
    pub fn dim(&self) -> usize {
        self.u.len() + self.v.len() + self.w.len()
    }

    /// The point `(h, w)`; an empty `h` (graph through the origin) stands for zero.
    fn embed(&self, huv: &[f64], w: &[f64]) -> DVector<f64> {
        let mut z = DVector::zeros(self.dim());
        for (&i, &h) in self.uv().iter().zip(huv) {
            z[i] = h;
        }
        for (k, &i) in self.w.iter().enumerate() {
            z[i] = w[k];
        }
        z
    }
}

/// An invariant graph `(u, v) = h(w)` tangent to the `w` directions.
#[derive(Clone, Debug)]
pub enum SlowManifold {
    /// No `w` directions (first cascade step): the graph is the origin.
    Origin,
    /// Taylor jet of `h` (`n_w` variables, `n_u + n_v` components).
    Jet(PolyMap),
    /// Grid graph over a `w`-box.
    Grid(GridFunction),
}

impl SlowManifold {
    /// `h(w)`.
    pub fn eval(&self, w: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        match self {
            Self::Origin => Ok(Vec::new()),
            Self::Jet(p) => Ok(p.eval(&DVector::from_column_slice(w)).as_slice().to_vec()),
            Self::Grid(g) => g.eval(w),
        }
    }

    /// `Dh(w)`.
    pub fn derivative(&self, w: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
        match self {
            Self::Origin => Ok(DMatrix::zeros(0, w.len())),
            Self::Jet(p) => Ok(p.jacobian(&DVector::from_column_slice(w))),
            Self::Grid(g) => g.derivative(w),
        }
    }

    /// `h(w + d) − h(w)`, exact for jets.
    pub fn eval_difference(&self, w: &[f64], d: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        match self {
            Self::Origin => Ok(Vec::new()),
            Self::Jet(p) => Ok(p
                .eval_difference(
                    &DVector::from_column_slice(w),
                    &DVector::from_column_slice(d),
                )
                .as_slice()
                .to_vec()),
            Self::Grid(g) => {
                let moved: Vec<f64> = w.iter().zip(d).map(|(a, b)| a + b).collect();
                let (h1, h0) = (g.eval(&moved)?, g.eval(w)?);
                Ok(h1.iter().zip(&h0).map(|(a, b)| a - b).collect())
            }
        }
    }

    /// Short name for reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Origin => "origin",
            Self::Jet(_) => "jet",
            Self::Grid(_) => "graph",
        }
    }
}

/// Taylor jet of the invariant graph `(u, v) = h(w)` of a polynomial map
/// (in block coordinates) up to `order`, solving
/// `h_d(Cw) − A_{uv} h_d(w) = [π_{uv}G(h(w), w) − h(π_w G(h(w), w))]_d`
/// degree by degree.
pub fn slow_manifold_jet(
    g: &PolyMap,
    split: &BandSplit,
    order: u32,
) -> Result<PolyMap, ContractionError> {
    let nw = split.w.len();
    let uv = split.uv();
    let nuv = uv.len();
    let n = split.dim();
    let lam = g.linear_part();
    let a_uv = sub(&lam, &uv, &uv);
    let cross = sub(&lam, &uv, &split.w)
        .amax()
        .max(sub(&lam, &split.w, &uv).amax());
    if cross > 1e-12 * lam.amax().max(1.0) {
        return Err(ContractionError::InvalidParameters(format!(
            "linear part couples (u, v) and w ({cross:e})"
        )));
    }
    let c = &split.c;
    let c_map = PolyMap::linear(c);
    let mut h: Vec<Polynomial> = vec![Polynomial::zero(nw); nuv];
    for d in 2..=order {
        let mut subs = vec![Polynomial::zero(nw); n];
        for (k, &i) in uv.iter().enumerate() {
            subs[i] = h[k].clone();
        }
        for (k, &i) in split.w.iter().enumerate() {
            subs[i] = Polynomial::variable(nw, k);
        }
        let gx = g.compose_trunc(&PolyMap::new(subs), d);
        let wdyn = PolyMap::new(split.w.iter().map(|&i| gx.comps()[i].clone()).collect());
        let hw = PolyMap::new(h.clone()).compose_trunc(&wdyn, d);
        let mons = monomials_of_degree(nw, d);
        let mcount = mons.len();
        let size = nuv * mcount;
        let mut rhs = DVector::zeros(size);
        for k in 0..nuv {
            let r = gx.comps()[uv[k]]
                .homogeneous(d)
                .add(&hw.comps()[k].homogeneous(d).scale(-1.0));
            for (j, e) in mons.iter().enumerate() {
                rhs[k * mcount + j] = r.coeff(e);
            }
        }
        if rhs.amax() == 0.0 {
            continue;
        }
        let mut mat = DMatrix::<f64>::zeros(size, size);
        for (j, e) in mons.iter().enumerate() {
            let mut mono = Polynomial::zero(nw);
            mono.add_term(e.clone(), 1.0);
            let composed = mono.compose_trunc(c_map.comps(), d);
            for k in 0..nuv {
                for (jj, ee) in mons.iter().enumerate() {
                    mat[(k * mcount + jj, k * mcount + j)] += composed.coeff(ee);
                }
                for kk in 0..nuv {
                    mat[(kk * mcount + j, k * mcount + j)] -= a_uv[(kk, k)];
                }
            }
        }
        let svd = mat.clone().svd(false, false);
        let smin = svd.singular_values.min();
        if smin < 1e-12 * svd.singular_values.max().max(1.0) {
            return Err(ContractionError::Resonance { degree: d });
        }
        let sol = mat
            .lu()
            .solve(&rhs)
            .ok_or(ContractionError::Resonance { degree: d })?;
        for k in 0..nuv {
            for (j, e) in mons.iter().enumerate() {
                h[k].add_term(e.clone(), sol[k * mcount + j]);
            }
        }
    }
    Ok(PolyMap::new(h))
}

/// Log of a grid graph transform.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphLog {
    /// Iterations performed.
    pub iterations: usize,
    /// Sup-norm change per iteration.
    pub deltas: Vec<f64>,
}

/// Invariant graph `(u, v) = h(w)` of `g` by the graph transform
/// `h(w) ← π_{uv} G(h(w'), w')` with `π_w G(h(w'), w') = w` (for maps acting
/// linearly on `w` this is `w' = C⁻¹w`). Beyond the grid box `h` is continued
/// by its Taylor expansion of order `extension_order` at the nearest box
/// point. The transform contracts with factor `μ_ℓ^+ / (μ_w^-)^p` for order
/// `p`; [`extension_order`] picks the largest admissible `p ≤ 2`. Invariant
/// graphs tangent to `w` are not unique (they differ by terms of order
/// `|w|^{log μ_ℓ / log μ_w}`); the extension fixes one of them.
pub fn invariant_graph(
    g: &MapModel,
    split: &BandSplit,
    w_box: &BoxRegion,
    res: usize,
    extension_order: usize,
    tol: f64,
    max_iter: usize,
) -> Result<(GridFunction, GraphLog), ContractionError> {
    let nw = split.w.len();
    let uv = split.uv();
    let nuv = uv.len();
    if nw == 0 || w_box.dim() != nw {
        return Err(ContractionError::InvalidParameters(
            "graph box must span the w coordinates".into(),
        ));
    }
    let c_inv = split
        .c
        .clone()
        .try_inverse()
        .ok_or_else(|| ContractionError::InvalidParameters("C is singular".into()))?;
    let resv = vec![res; nw];
    let mut h = GridFunction::from_values(
        w_box.clone(),
        resv.clone(),
        nuv,
        vec![0.0; res.pow(nw as u32) * nuv],
    )?
    .with_interpolation(Interpolation::CubicHermite);
    let radius = w_box.radius();
    let mut deltas = Vec::new();
    for it in 1..=max_iter {
        let prev = h.clone();
        let h_ext = |w: &DVector<f64>| extend(&prev, w.as_slice(), extension_order);
        let next = GridFunction::try_sample(w_box.clone(), resv.clone(), nuv, |wn: &[f64]| {
            let target = DVector::from_column_slice(wn);
            let mut wp = &c_inv * &target;
            for _ in 0..60 {
                let z = split.embed(&h_ext(&wp)?, wp.as_slice());
                let gz = g.eval(&z)?;
                let r = pick(&gz, &split.w) - &target;
                if r.amax() <= 4.0 * f64::EPSILON * target.amax().max(1e-300) {
                    break;
                }
                let jw = sub(&g.jacobian(&z)?, &split.w, &split.w);
                let step = jw
                    .lu()
                    .solve(&r)
                    .ok_or_else(|| DynamicsError::Singular("w-block of DG".into()))?;
                wp -= step;
            }
            let z = split.embed(&h_ext(&wp)?, wp.as_slice());
            let gz = g.eval(&z)?;
            Ok::<_, ContractionError>(uv.iter().map(|&i| gz[i]).collect())
        })?
        .with_interpolation(Interpolation::CubicHermite);
        let delta = next
            .values()
            .iter()
            .zip(prev.values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        let size = next.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if !(size <= GRAPH_SIZE_FACTOR * radius) {
            return Err(ContractionError::GraphLeavesBox {
                size,
                radius: GRAPH_SIZE_FACTOR * radius,
            });
        }
        h = next;
        deltas.push(delta);
        if delta <= tol {
            return Ok((
                h,
                GraphLog {
                    iterations: it,
                    deltas,
                },
            ));
        }
    }
    Err(ContractionError::NoConvergence {
        what: "graph transform".into(),
        iterations: max_iter,
        delta: deltas.last().copied().unwrap_or(f64::NAN),
    })
}

/// Taylor continuation of `h` beyond its box of the given order (at most 2):
/// `h(p) + Dh(p)d + ½D²h(p)[d, d]` with `p` the nearest box point and
/// `d = w − p`; the second derivative along `d` is a one-step difference of `Dh`.
fn extend(h: &GridFunction, w: &[f64], order: usize) -> Result<Vec<f64>, DynamicsError> {
    let b = h.bounds();
    if b.contains(w) {
        return h.eval(w);
    }
    let p = b.project_point(w);
    if order == 0 {
        return h.eval(&p);
    }
    let d = DVector::from_iterator(w.len(), w.iter().zip(&p).map(|(a, c)| a - c));
    let dn = d.norm();
    let s = h.max_step();
    let back: Vec<f64> = p
        .iter()
        .zip(d.iter())
        .map(|(c, di)| c - s * di / dn)
        .collect();
    let back = b.project_point(&back);
    let dp = h.derivative(&p)?;
    let db = h.derivative(&back)?;
    let span = p
        .iter()
        .zip(&back)
        .map(|(a, c)| (a - c).powi(2))
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    let lin = &dp * &d;
    let quad = (&dp - &db) * &d * (if order >= 2 { 0.5 * dn / span } else { 0.0 });
    let base = h.eval(&p)?;
    Ok(base
        .iter()
        .enumerate()
        .map(|(k, v)| v + lin[k] + quad[k])
        .collect())
}

/// Largest `p ≤ 2` with `μ_ℓ^+ < (μ_{ℓ+1}^-)^p`, the order of the graph
/// continuation that keeps the graph transform contractive.
pub fn extension_order(lin: &LinearPart, band: usize) -> usize {
    let bands = lin.decomposition.bands();
    if band >= bands.len() {
        return 0;
    }
    let (mu, slow) = (bands[band - 1].lambda_plus, bands[band].lambda_minus);
    (0..=2)
        .rev()
        .find(|&p| mu < slow.powi(p as i32) * (1.0 - 1e-9))
        .unwrap_or(0)
}

/// Invariance residual `max ‖π_{uv}G(h(w), w) − h(π_w G(h(w), w))‖∞` over
/// random `w` in `w_box` whose image stays in the box.
pub fn manifold_residual(
    g: &MapModel,
    split: &BandSplit,
    manifold: &SlowManifold,
    w_box: &BoxRegion,
    samples: usize,
    seed: u64,
) -> Result<f64, ContractionError> {
    if split.w.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let uv = split.uv();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let w: Vec<f64> = (0..w_box.dim())
            .map(|i| rng.gen_range(w_box.lo[i]..=w_box.hi[i]))
            .collect();
        let z = split.embed(&manifold.eval(&w)?, &w);
        let gz = g.eval(&z)?;
        let gw: Vec<f64> = split.w.iter().map(|&i| gz[i]).collect();
        if !w_box.contains(&gw) {
            continue;
        }
        let hg = manifold.eval(&gw)?;
        for (k, &i) in uv.iter().enumerate() {
            worst = worst.max((gz[i] - hg[k]).abs());
        }
    }
    Ok(worst)
}

/// The straightening `Θ(x) = (u − h_1(w), v − h_2(w), w)` of a grid graph.
pub fn straighten(graph: &GridFunction, split: &BandSplit, label: &str) -> Transform {
    Transform::new(
        label,
        TransformKind::GraphShift {
            target: split.uv(),
            source: split.w.clone(),
            graph: graph.clone(),
        },
    )
}

/// `Φ_ℓ(x) = (u, Ψ_ℓ(x), w)`.
pub fn build_phi(psi: GridFunction, split: &BandSplit) -> Transform {
    Transform::new(
        format!("Phi_{}", split.band),
        TransformKind::ComponentReplace {
            target: split.v.clone(),
            psi,
        },
    )
}

/// The point `z ∈ Γ_G` with `π_w P(z) = π_w x`.
fn anchor(
    x: &DVector<f64>,
    split: &BandSplit,
    manifold: &SlowManifold,
    p: &TransformChain,
) -> Result<DVector<f64>, ContractionError> {
    if split.w.is_empty() {
        return Ok(DVector::zeros(split.dim()));
    }
    let target = pick(x, &split.w);
    let mut w = target.clone();
    let scale = target.amax().max(1e-300);
    for _ in 0..60 {
        let z = split.embed(&manifold.eval(w.as_slice())?, w.as_slice());
        if p.transforms().is_empty() {
            return Ok(z);
        }
        let r = pick(&p.forward(&z)?, &split.w) - &target;
        if r.amax() <= 4.0 * f64::EPSILON * scale {
            return Ok(z);
        }
        w -= r;
    }
    let z = split.embed(&manifold.eval(w.as_slice())?, w.as_slice());
    let r = (pick(&p.forward(&z)?, &split.w) - &target).amax();
    if r <= 1e3 * f64::EPSILON * scale {
        Ok(z)
    } else {
        Err(ContractionError::NoConvergence {
            what: "anchor on invariant graph".into(),
            iterations: 60,
            delta: r,
        })
    }
}

/// Convergence record of a `Ψ`-limit.
#[derive(Clone, Debug, PartialEq)]
pub struct PsiLimitLog {
    /// `max_nodes ‖ψ_k − ψ_{k−1}‖∞` for `k = 1, 2, …`.
    pub differences: Vec<f64>,
    /// The a-priori rate `η = μ_m^+ μ_ℓ^+ / μ_ℓ^-`.
    pub eta: f64,
    /// Iteration cap `⌈log tol / log η⌉ + 8`.
    pub kmax: usize,
    /// Fitted geometric rate of the differences (when at least three are
    /// above rounding level).
    pub fitted_rate: Option<f64>,
    /// `R²` of the log-linear fit.
    pub r_squared: Option<f64>,
    /// Whether the tolerance was reached (otherwise the iteration stopped at
    /// its rounding floor).
    pub converged: bool,
}

/// Log-linear fit of a positive sequence against its index (1-based);
/// returns `(rate, R²)` using entries above `floor`.
pub fn fit_decay(values: &[f64], floor: f64) -> Option<(f64, f64)> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > floor && v.is_finite())
        .map(|(k, v)| ((k + 1) as f64, v.ln()))
        .unzip();
    if xs.len() < 3 {
        return None;
    }
    let (slope, _, r2) = linear_fit(&xs, &ys);
    Some((slope.exp(), r2))
}

/// `η` and the iteration cap for band `band` (1-based) of `lin`.
pub fn stage_eta(
    lin: &LinearPart,
    band: usize,
    tol: f64,
) -> Result<(f64, usize), ContractionError> {
    let bands = lin.decomposition.bands();
    let m = bands.len();
    let b = &bands[band - 1];
    let eta = bands[m - 1].lambda_plus * b.lambda_plus / b.lambda_minus;
    if !(eta < 1.0) {
        return Err(ContractionError::BandConditionViolated { band, eta });
    }
    let kmax = (tol.ln() / eta.ln()).ceil().max(1.0) as usize + KMAX_EXTRA;
    Ok((eta, kmax))
}

/// Moves the anchor `b` along the invariant graph so that the tracked
/// difference `δ = a − b` has no `w`-component; `a = b + δ` is unchanged. The
/// graph increment is evaluated without cancellation.
fn reanchor(
    split: &BandSplit,
    manifold: &SlowManifold,
    b: &mut DVector<f64>,
    d: &mut DVector<f64>,
) -> Result<(), ContractionError> {
    if split.w.is_empty() {
        return Ok(());
    }
    let dw = pick(d, &split.w);
    if dw.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    let wb = pick(b, &split.w);
    let dh = manifold.eval_difference(wb.as_slice(), dw.as_slice())?;
    for (k, i) in split.uv().into_iter().enumerate() {
        b[i] += dh[k];
        d[i] -= dh[k];
    }
    for (k, &i) in split.w.iter().enumerate() {
        b[i] += dw[k];
        d[i] = 0.0;
    }
    Ok(())
}

/// `Ψ_ℓ(x) = lim_k B^{-k} π_v(G^k a − b_k)` on a grid over `grid_box`, where
/// `a = P⁻¹x` and `b_k` is the point of the invariant graph `Γ_G` with the
/// same `w`-component as `G^k a`. The difference `G^k a − b_k` is propagated
/// directly (see [`MapModel::eval_difference`]) and the anchor is moved along
/// `Γ_G` after every step, so only the `(u, v)`-distance to `Γ_G`, which
/// decays like `μ_ℓ^k`, enters the limit.
#[allow(clippy::too_many_arguments)]
pub fn psi_limit(
    g: &MapModel,
    p: &TransformChain,
    split: &BandSplit,
    manifold: &SlowManifold,
    grid_box: &BoxRegion,
    res: usize,
    tol: f64,
    eta: f64,
    kmax: usize,
    interpolation: Interpolation,
) -> Result<(GridFunction, PsiLimitLog), ContractionError> {
    let n = split.dim();
    let nv = split.v.len();
    let b_inv = split
        .b
        .clone()
        .try_inverse()
        .ok_or_else(|| ContractionError::InvalidParameters("B is singular".into()))?;
    let probe = GridFunction::from_values(grid_box.clone(), vec![res; n], 0, Vec::new())?;
    let nodes = probe.node_count();
    let mut base = Vec::with_capacity(nodes);
    let mut delta = Vec::with_capacity(nodes);
    let mut psi = Vec::with_capacity(nodes);
    for node in 0..nodes {
        let a = p.inverse(&DVector::from_vec(probe.node_coords(node)))?;
        let w: Vec<f64> = split.w.iter().map(|&i| a[i]).collect();
        let z = split.embed(&manifold.eval(&w)?, &w);
        let mut d = &a - &z;
        for &i in &split.w {
            d[i] = 0.0;
        }
        psi.push(pick(&d, &split.v));
        base.push(z);
        delta.push(d);
    }
    let mut b_pow = DMatrix::identity(nv, nv);
    let mut differences = Vec::new();
    let mut converged = false;
    for _k in 1..=kmax {
        b_pow = &b_inv * b_pow;
        let mut worst = 0.0f64;
        for node in 0..nodes {
            let dn = g.eval_difference(&base[node], &delta[node])?;
            base[node] = g.eval(&base[node])?;
            delta[node] = dn;
            reanchor(split, manifold, &mut base[node], &mut delta[node])?;
            let next = &b_pow * pick(&delta[node], &split.v);
            worst = worst.max((&next - &psi[node]).amax());
            psi[node] = next;
        }
        if !worst.is_finite() {
            return Err(DynamicsError::NonFinite("Psi-limit iterate".into()).into());
        }
        differences.push(worst);
        if worst <= tol {
            converged = true;
            break;
        }
        // Stop at the rounding floor: no new minimum over ten steps.
        let len = differences.len();
        if len > 20 {
            let recent = differences[len - 10..]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            let before = differences[..len - 10]
                .iter()
                .copied()
                .fold(f64::INFINITY, f64::min);
            if recent >= before {
                break;
            }
        }
    }
    let last = differences.last().copied().unwrap_or(0.0);
    if !converged && last > 1e3 * tol {
        return Err(ContractionError::NoConvergence {
            what: "Psi-limit".into(),
            iterations: differences.len(),
            delta: last,
        });
    }
    let scale = psi.iter().fold(0.0f64, |m, v| m.max(v.amax())).max(1e-300);
    let fit = fit_decay(&differences, 1e4 * f64::EPSILON * scale);
    if let Some((rate, _)) = fit {
        if rate > SLOW_DECAY_FACTOR * eta {
            return Err(ContractionError::SlowDecay {
                band: split.band,
                rate,
                limit: SLOW_DECAY_FACTOR * eta,
            });
        }
    }
    let values: Vec<f64> = psi
        .iter()
        .flat_map(|v| v.iter().copied().collect::<Vec<_>>())
        .collect();
    let grid = GridFunction::from_values(grid_box.clone(), vec![res; n], nv, values)?
        .with_interpolation(interpolation);
    Ok((
        grid,
        PsiLimitLog {
            differences,
            eta,
            kmax,
            fitted_rate: fit.map(|f| f.0),
            r_squared: fit.map(|f| f.1),
            converged,
        },
    ))
}

/// Fitted growth rates of the straightened stage map `F̃_ℓ = Θ P G P⁻¹ Θ⁻¹`.
#[derive(Clone, Debug, PartialEq)]
pub struct GrowthReport {
    /// `max_samples ‖Q_k‖` (rows `u`, `v` of `DF̃^k`), `k = 1..`.
    pub q_norms: Vec<f64>,
    /// `max_samples ‖c_1(F̃^k x)‖` (block `∂π_vF̃/∂w`).
    pub c1_norms: Vec<f64>,
    /// `max_samples ‖b_1(F̃^k x) − B‖` (block `∂π_vF̃/∂v`).
    pub b1_norms: Vec<f64>,
    /// Fitted log-rate of `q_norms`.
    pub q_rate: f64,
    /// Fitted log-rate of `c1_norms`.
    pub c1_rate: f64,
    /// Fitted log-rate of `b1_norms`.
    pub b1_rate: f64,
    /// `R²` of the three fits.
    pub r_squared: [f64; 3],
    /// `log μ_ℓ^+`.
    pub log_mu_plus: f64,
    /// `log μ_m^+`.
    pub log_mu_m_plus: f64,
}

impl GrowthReport {
    /// Whether the fitted rates respect the bounds with the given slack.
    pub fn within(&self, slack: f64) -> bool {
        self.q_rate <= self.log_mu_plus + slack
            && self.c1_rate <= self.log_mu_plus + slack
            && self.b1_rate <= self.log_mu_m_plus + slack
    }
}

/// Relative size below which a one-step derivative block is rounding noise.
const ROUNDING_FLOOR: f64 = 64.0 * f64::EPSILON;

fn op_norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn log_slope(values: &[f64]) -> (f64, f64) {
    let (xs, ys): (Vec<f64>, Vec<f64>) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 1e-290)
        .map(|(k, v)| ((k + 1) as f64, v.ln()))
        .unzip();
    if xs.len() < 3 {
        return (f64::NEG_INFINITY, 1.0);
    }
    let (s, _, r2) = linear_fit(&xs, &ys);
    (s, r2)
}

/// Evaluates the block derivatives of `F̃_ℓ` along orbits of random samples in
/// `sample_box` and fits their growth rates over `k = 1..=kfit`.
#[allow(clippy::too_many_arguments)]
pub fn growth_bound_diagnostics(
    g: &MapModel,
    p: &TransformChain,
    split: &BandSplit,
    manifold: &SlowManifold,
    lin: &LinearPart,
    sample_box: &BoxRegion,
    samples: usize,
    kfit: usize,
    seed: u64,
) -> Result<GrowthReport, ContractionError> {
    let n = split.dim();
    let uv = split.uv();
    // E(w) = Dh_F(w) placed in rows uv, columns w, where h_F(w) = π_uv P(z(w)).
    let e_matrix = |y: &DVector<f64>| -> Result<DMatrix<f64>, ContractionError> {
        let mut e = DMatrix::zeros(n, n);
        if split.w.is_empty() {
            return Ok(e);
        }
        let z = anchor(y, split, manifold, p)?;
        let wz: Vec<f64> = split.w.iter().map(|&i| z[i]).collect();
        let dh = manifold.derivative(&wz)?;
        // dz/dw'' = [Dh_G; I] in embedded coordinates.
        let mut emb = DMatrix::zeros(n, split.w.len());
        for (k, &i) in uv.iter().enumerate() {
            for j in 0..split.w.len() {
                emb[(i, j)] = dh[(k, j)];
            }
        }
        for (j, &i) in split.w.iter().enumerate() {
            emb[(i, j)] = 1.0;
        }
        let dp = p.derivative(&z)?;
        let dpe = &dp * &emb;
        let pw = sub(&dpe, &split.w, &(0..split.w.len()).collect::<Vec<_>>());
        let pw_inv = pw
            .try_inverse()
            .ok_or_else(|| DynamicsError::Singular("w-block of DP".into()))?;
        let dh_f = sub(&dpe, &uv, &(0..split.w.len()).collect::<Vec<_>>()) * pw_inv;
        for (k, &i) in uv.iter().enumerate() {
            for (j, &c) in split.w.iter().enumerate() {
                e[(i, c)] = dh_f[(k, j)];
            }
        }
        Ok(e)
    };
    let ident = DMatrix::<f64>::identity(n, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q_norms = vec![0.0f64; kfit];
    let mut c1_norms = vec![0.0f64; kfit];
    let mut b1_norms = vec![0.0f64; kfit];
    for _ in 0..samples {
        let x = DVector::from_fn(n, |i, _| rng.gen_range(sample_box.lo[i]..=sample_box.hi[i]));
        // y = Θ⁻¹x: add h_F(w) to the uv components.
        let hf = |w_point: &DVector<f64>| -> Result<DVector<f64>, ContractionError> {
            let z = anchor(w_point, split, manifold, p)?;
            Ok(p.forward(&z)?)
        };
        let mut y = x.clone();
        if !split.w.is_empty() {
            let on = hf(&x)?;
            for &i in &uv {
                y[i] = x[i] + on[i];
            }
        }
        let mut z = p.inverse(&y)?;
        let left0 = &ident + e_matrix(&y)?;
        let right = p
            .derivative(&z)?
            .try_inverse()
            .ok_or_else(|| DynamicsError::Singular("DP".into()))?
            * left0;
        let mut dgk = DMatrix::<f64>::identity(n, n);
        for k in 0..kfit {
            dgk = g.jacobian(&z)? * dgk;
            z = g.eval(&z)?;
            let y_k = p.forward(&z)?;
            let e_k = e_matrix(&y_k)?;
            let dp_k = p.derivative(&z)?;
            let full = (&ident - &e_k) * &dp_k * &dgk * &right;
            let q = DMatrix::from_fn(uv.len(), n, |i, j| full[(uv[i], j)]);
            q_norms[k] = q_norms[k].max(op_norm_inf(&q));
            // One-step derivative DF̃ at F̃^{k+1}(x) = Θ(y_k).
            let z1 = g.eval(&z)?;
            let e1 = e_matrix(&p.forward(&z1)?)?;
            let dp_inv = dp_k
                .try_inverse()
                .ok_or_else(|| DynamicsError::Singular("DP".into()))?;
            let one =
                (&ident - e1) * p.derivative(&z1)? * g.jacobian(&z)? * dp_inv * (&ident + &e_k);
            // Blocks at the rounding level of DF̃ are zero, not a decaying signal.
            let floor = ROUNDING_FLOOR * op_norm_inf(&one);
            let clip = |v: f64| if v <= floor { 0.0 } else { v };
            if !split.w.is_empty() {
                c1_norms[k] = c1_norms[k].max(clip(op_norm_inf(&sub(&one, &split.v, &split.w))));
            }
            b1_norms[k] = b1_norms[k].max(clip(op_norm_inf(
                &(sub(&one, &split.v, &split.v) - &split.b),
            )));
        }
    }
    let (q_rate, r_q) = log_slope(&q_norms);
    let (c1_rate, r_c) = log_slope(&c1_norms);
    let (b1_rate, r_b) = log_slope(&b1_norms);
    let bands = lin.decomposition.bands();
    Ok(GrowthReport {
        q_norms,
        c1_norms,
        b1_norms,
        q_rate,
        c1_rate,
        b1_rate,
        r_squared: [r_q, r_c, r_b],
        log_mu_plus: bands[split.band - 1].lambda_plus.ln(),
        log_mu_m_plus: bands[bands.len() - 1].lambda_plus.ln(),
    })
}

/// Parameters of the cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct ContractionParams {
    /// Radius of the reporting box (in the original coordinates' block frame).
    pub report_radius: f64,
    /// Grid nodes per axis of the `Ψ_ℓ` grids.
    pub resolution: usize,
    /// Stopping tolerance of the `Ψ`-limits and graph transforms.
    pub tol: f64,
    /// Override of the iteration cap (default `⌈log tol / log η⌉ + 8`).
    pub kmax: Option<usize>,
    /// Taylor order of invariant-graph jets (polynomial maps).
    pub jet_order: u32,
    /// Growth factor of the stage boxes.
    pub box_growth: f64,
    /// Grid nodes per axis of graph-transform grids (non-polynomial maps).
    pub graph_resolution: usize,
    /// Interpolation of the `Ψ_ℓ` grids.
    pub interpolation: Interpolation,
    /// Samples of the per-stage residual checks.
    pub check_samples: usize,
    /// Seed of the sampled checks.
    pub seed: u64,
}

impl Default for ContractionParams {
    fn default() -> Self {
        Self {
            report_radius: 0.02,
            resolution: DEFAULT_RESOLUTION,
            tol: DEFAULT_TOL,
            kmax: None,
            jet_order: DEFAULT_JET_ORDER,
            box_growth: DEFAULT_BOX_GROWTH,
            graph_resolution: 65,
            interpolation: Interpolation::CubicHermite,
            check_samples: 200,
            seed: 1,
        }
    }
}

/// Per-stage record of the cascade.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    /// Band index `ℓ` (1-based).
    pub band: usize,
    /// Radius of the stage box.
    pub box_radius: f64,
    /// Kind of invariant graph used (`origin`, `jet`, `graph`).
    pub manifold: &'static str,
    /// Invariance residual of the graph.
    pub manifold_residual: f64,
    /// Convergence of the `Ψ`-limit.
    pub psi: PsiLimitLog,
    /// `‖DΨ_ℓ(O) − (0, id_V, 0)‖∞`.
    pub dpsi_origin_error: f64,
    /// `max ‖π_{vw} F_{ℓ−1}(x) − (Bv, Cw)‖∞` over samples after the step.
    pub structure_residual: f64,
}

/// Result of the cascade.
#[derive(Clone, Debug)]
pub struct ContractionResult {
    /// `Φ` in the original coordinates.
    pub chain: TransformChain,
    /// Stage records in execution order (`ℓ = m, …, 1`).
    pub stages: Vec<StageReport>,
    /// The map in block coordinates.
    pub block_map: MapModel,
}

/// The map in the block coordinates `y = T⁻¹x` of `lin`. The linear part is
/// set to the exact block-diagonal matrix: rounding in `T⁻¹ΛT` would
/// otherwise couple the bands, and the `Ψ`-limits amplify such couplings
/// geometrically.
pub fn block_coordinates(map: &MapModel, lin: &LinearPart) -> Result<MapModel, ContractionError> {
    if lin.is_identity_basis() {
        return Ok(map.clone());
    }
    let n = map.dim();
    let block = lin.block.clone();
    if let Some(p) = map.polynomial_rep() {
        let q = p.conjugate_linear(&lin.t, &lin.t_inv);
        let comps = q
            .comps()
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let mut out = Polynomial::zero(n);
                for (e, v) in c.terms().filter(|(e, _)| e.iter().sum::<u32>() != 1) {
                    out.add_term(e.clone(), *v);
                }
                for j in 0..n {
                    if block[(i, j)] != 0.0 {
                        out.add_term((0..n).map(|k| u32::from(k == j)).collect(), block[(i, j)]);
                    }
                }
                out
            })
            .collect();
        return Ok(
            MapModel::polynomial(PolyMap::new(comps), BoxRegion::unbounded(n))?.with_linear(block),
        );
    }
    let (t, ti, lam) = (lin.t.clone(), lin.t_inv.clone(), lin.lambda.clone());
    let (t2, ti2, b2) = (lin.t.clone(), lin.t_inv.clone(), block.clone());
    let (f, df) = (map.clone(), map.clone());
    let eval = FnMap::new(
        n,
        move |y| {
            let x = &t * y;
            Ok(&block * y + &ti * (f.eval(&x)? - &lam * &x))
        },
        move |y| Ok(&b2 + &ti2 * (df.jacobian(&(&t2 * y))? - df.linear_part()) * &t2),
    );
    Ok(
        MapModel::from_eval(std::sync::Arc::new(eval), BoxRegion::unbounded(n))?
            .with_linear(lin.block.clone()),
    )
}

/// Runs the cascade `Φ_m, …, Φ_1` on a contraction and returns `Φ` with
/// `Φ∘F = ΛΦ` near the origin.
pub fn linearize_contraction(
    map: &MapModel,
    lin: &LinearPart,
    params: &ContractionParams,
) -> Result<ContractionResult, ContractionError> {
    let dec = &lin.decomposition;
    if dec.d() != dec.m() {
        return Err(ContractionError::NotContraction {
            d: dec.d(),
            m: dec.m(),
        });
    }
    if !check_band_condition(dec).holds() {
        let (band, eta) = (1..=dec.m())
            .map(|b| {
                let bands = dec.bands();
                (b, bands[dec.m() - 1].lambda_plus * bands[b - 1].ratio())
            })
            .fold((0, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        return Err(ContractionError::BandConditionViolated { band, eta });
    }
    if !(params.report_radius > 0.0
        && params.resolution >= 3
        && params.tol > 0.0
        && params.box_growth >= 1.0)
    {
        return Err(ContractionError::InvalidParameters(
            "radius, resolution >= 3, tol and box growth".into(),
        ));
    }
    let n = map.dim();
    let g = block_coordinates(map, lin)?;
    let m = dec.m();
    let mut cascade = TransformChain::identity(n);
    let mut stages = Vec::with_capacity(m);
    for band in (1..=m).rev() {
        let report = run_stage(&g, lin, band, &mut cascade, params).map_err(|e| e.at(band))?;
        stages.push(report);
    }
    let chain = if lin.is_identity_basis() {
        cascade
    } else {
        let mut c = TransformChain::identity(n);
        c.push(Transform::new(
            "T_inv",
            TransformKind::Linear {
                matrix: lin.t_inv.clone(),
                inverse: lin.t.clone(),
            },
        ));
        let mut c = c.then(cascade);
        c.push(Transform::new(
            "T",
            TransformKind::Linear {
                matrix: lin.t.clone(),
                inverse: lin.t_inv.clone(),
            },
        ));
        c
    };
    Ok(ContractionResult {
        chain,
        stages,
        block_map: g,
    })
}

fn run_stage(
    g: &MapModel,
    lin: &LinearPart,
    band: usize,
    cascade: &mut TransformChain,
    params: &ContractionParams,
) -> Result<StageReport, ContractionError> {
    let n = g.dim();
    let split = BandSplit::new(lin, band);
    let radius = params.report_radius * params.box_growth.powi(band as i32);
    let (eta, kmax_default) = stage_eta(lin, band, params.tol)?;
    let kmax = params.kmax.unwrap_or(kmax_default);
    let w_box = BoxRegion::symmetric(split.w.len(), radius * params.box_growth);
    let manifold = if split.w.is_empty() {
        SlowManifold::Origin
    } else {
        // Resonant jets have no polynomial solution; the graph transform still
        // yields the (finitely smooth) invariant graph.
        let jet = match g.polynomial_rep() {
            Some(p) => match slow_manifold_jet(p, &split, params.jet_order) {
                Ok(h) => Some(h),
                Err(ContractionError::Resonance { .. }) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        match jet {
            Some(h) => SlowManifold::Jet(h),
            None => {
                let order = extension_order(lin, band);
                let (h, _) = invariant_graph(
                    g,
                    &split,
                    &w_box,
                    params.graph_resolution,
                    order,
                    params.tol,
                    1000,
                )?;
                SlowManifold::Grid(h)
            }
        }
    };
    let manifold_residual = manifold_residual(
        g,
        &split,
        &manifold,
        &w_box.scaled(0.9),
        params.check_samples,
        params.seed,
    )?;
    let grid_box = BoxRegion::symmetric(n, radius);
    let (psi, log) = psi_limit(
        g,
        cascade,
        &split,
        &manifold,
        &grid_box,
        params.resolution,
        params.tol,
        eta,
        kmax,
        params.interpolation,
    )?;
    let dpsi = psi.derivative(&vec![0.0; n])?;
    let mut expect = DMatrix::zeros(split.v.len(), n);
    for (k, &i) in split.v.iter().enumerate() {
        expect[(k, i)] = 1.0;
    }
    let dpsi_origin_error = (dpsi - expect).amax();
    cascade.push(build_phi(psi, &split));
    let structure_residual = structure_residual(
        g,
        cascade,
        &split,
        &grid_box.scaled(0.9 / params.box_growth),
        params,
    )?;
    Ok(StageReport {
        band,
        box_radius: radius,
        manifold: manifold.kind(),
        manifold_residual,
        psi: log,
        dpsi_origin_error,
        structure_residual,
    })
}

/// `max ‖π_{vw}(P G P⁻¹)(x) − (Bv, Cw)‖∞` over `x = P(z)` with random `z`.
fn structure_residual(
    g: &MapModel,
    p: &TransformChain,
    split: &BandSplit,
    sample_box: &BoxRegion,
    params: &ContractionParams,
) -> Result<f64, ContractionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ 0x5757);
    let vw = split.vw();
    let n = split.dim();
    let mut worst = 0.0f64;
    let lam = g.linear_part();
    for _ in 0..params.check_samples {
        let z = DVector::from_fn(n, |i, _| rng.gen_range(sample_box.lo[i]..=sample_box.hi[i]));
        let x = p.forward(&z)?;
        let fx = p.forward(&g.eval(&z)?)?;
        let lx = lam * &x;
        for &i in &vw {
            worst = worst.max((fx[i] - lx[i]).abs());
        }
    }
    Ok(worst)
}
