//! Map models, iterates, globalization by a radial cutoff, and inverse maps.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::bump::RadialCutoff;
use super::grid::BoxRegion;
use super::poly::PolyMap;
use super::DynamicsError;

/// Maximum Newton iterations for inverse evaluations.
const NEWTON_MAX_ITER: usize = 50;
/// Absolute residual accepted on stagnation: maps composed from interpolation
/// grids carry absolute rounding noise that does not shrink with `|y|`.
const NEWTON_NOISE_FLOOR: f64 = 1e-18;

/// An evaluator of a map `ℝⁿ → ℝⁿ` together with its Jacobian.
pub trait MapEval: Send + Sync {
    /// Dimension `n`.
    fn dim(&self) -> usize;
    /// `F(x)`.
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError>;
    /// `DF(x)`.
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError>;
    /// Whether the map is known to coincide with its linear part near `x`.
    ///
    /// Callers use this to evaluate `f(x + v) − f(x)` as exactly zero far from
    /// the origin, where cancellation would otherwise destroy all digits.
    fn is_linear_at(&self, _x: &DVector<f64>) -> bool {
        false
    }
    /// `F(x + d) − F(x)`; implementations with exact structure override this
    /// to avoid cancellation when `d` is much smaller than `x`.
    fn eval_difference(
        &self,
        x: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        Ok(self.eval(&(x + d))? - self.eval(x)?)
    }
}

/// Central finite-difference Jacobian with per-axis step `h`.
pub fn fd_jacobian<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DMatrix<f64>, DynamicsError>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>, DynamicsError>,
{
    let n = x.len();
    let mut cols = Vec::with_capacity(n);
    for j in 0..n {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        cols.push((f(&xp)? - f(&xm)?) / (2.0 * h));
    }
    let m = cols.first().map_or(0, |c| c.len());
    Ok(DMatrix::from_fn(m, n, |i, j| cols[j][i]))
}

/// Evaluator backed by an exact polynomial map.
#[derive(Clone, Debug)]
pub struct PolyEval(pub PolyMap);

impl MapEval for PolyEval {
    fn dim(&self) -> usize {
        self.0.nvars()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        Ok(self.0.eval(x))
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        Ok(self.0.jacobian(x))
    }
    fn eval_difference(
        &self,
        x: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        Ok(self.0.eval_difference(x, d))
    }
}

type VecFn = dyn Fn(&DVector<f64>) -> Result<DVector<f64>, DynamicsError> + Send + Sync;
type MatFn = dyn Fn(&DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> + Send + Sync;

/// Evaluator backed by closures; the Jacobian falls back to central finite
/// differences when no derivative closure is supplied.
pub struct FnMap {
    dim: usize,
    f: Box<VecFn>,
    df: Option<Box<MatFn>>,
    fd_step: f64,
}

impl FnMap {
    /// Map with an explicit derivative.
    pub fn new(
        dim: usize,
        f: impl Fn(&DVector<f64>) -> Result<DVector<f64>, DynamicsError> + Send + Sync + 'static,
        df: impl Fn(&DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            dim,
            f: Box::new(f),
            df: Some(Box::new(df)),
            fd_step: 1e-7,
        }
    }

    /// Map whose derivative is computed by central differences with step `fd_step`.
    pub fn without_derivative(
        dim: usize,
        f: impl Fn(&DVector<f64>) -> Result<DVector<f64>, DynamicsError> + Send + Sync + 'static,
        fd_step: f64,
    ) -> Self {
        Self {
            dim,
            f: Box::new(f),
            df: None,
            fd_step,
        }
    }
}

impl MapEval for FnMap {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        (self.f)(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        match &self.df {
            Some(df) => df(x),
            None => fd_jacobian(|y| (self.f)(y), x, self.fd_step),
        }
    }
}

/// A smooth map with a fixed point at the origin.
#[derive(Clone)]
pub struct MapModel {
    eval: Arc<dyn MapEval>,
    linear: DMatrix<f64>,
    domain: BoxRegion,
    poly: Option<PolyMap>,
}

impl fmt::Debug for MapModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("MapModel")
            .field("dim", &self.dim())
            .field("linear", &self.linear)
            .field("domain", &self.domain)
            .field("polynomial", &self.poly.is_some())
            .finish()
    }
}

impl MapModel {
    /// Polynomial map; `Λ` is read off the degree-one terms exactly.
    pub fn polynomial(p: PolyMap, domain: BoxRegion) -> Result<Self, DynamicsError> {
        assert_eq!(p.nvars(), p.ncomps(), "polynomial map must be square");
        assert_eq!(domain.dim(), p.nvars(), "domain dimension mismatch");
        let c = p.constant_part().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if c > 1e-12 {
            return Err(DynamicsError::NotFixed(c));
        }
        let linear = p.linear_part();
        Ok(Self {
            eval: Arc::new(PolyEval(p.clone())),
            linear,
            domain,
            poly: Some(p),
        })
    }

    /// The linear map `x ↦ Λx` on `ℝⁿ`.
    pub fn linear(lambda: DMatrix<f64>) -> Self {
        let n = lambda.nrows();
        let p = PolyMap::linear(&lambda);
        Self {
            eval: Arc::new(PolyEval(p.clone())),
            linear: lambda,
            domain: BoxRegion::unbounded(n),
            poly: Some(p),
        }
    }

    /// Map from a generic evaluator whose derivative is trusted (internal
    /// compositions); `Λ` is taken as `DF(0)`.
    pub fn from_eval(eval: Arc<dyn MapEval>, domain: BoxRegion) -> Result<Self, DynamicsError> {
        let n = eval.dim();
        let zero = DVector::zeros(n);
        let f0 = eval.eval(&zero)?;
        let c = f0.amax();
        if c > 1e-12 {
            return Err(DynamicsError::NotFixed(c));
        }
        let linear = eval.jacobian(&zero)?;
        Ok(Self {
            eval,
            linear,
            domain,
            poly: None,
        })
    }

    /// Map from a user evaluator with a user derivative: `DF(0)` is checked
    /// against central differences (tolerance 1e−10 relative to `‖Λ‖`).
    pub fn from_user_eval(
        eval: Arc<dyn MapEval>,
        domain: BoxRegion,
    ) -> Result<Self, DynamicsError> {
        let m = Self::from_eval(eval, domain)?;
        let zero = DVector::zeros(m.dim());
        let width = m
            .domain
            .lo
            .iter()
            .zip(&m.domain.hi)
            .map(|(a, b)| (b - a).min(1.0))
            .fold(f64::INFINITY, f64::min);
        let fd = fd_jacobian(|y| m.eval.eval(y), &zero, width * 1e-5)?;
        let err = (&fd - &m.linear).amax();
        if err > 1e-10 * m.linear.amax().max(1.0) {
            return Err(DynamicsError::DerivativeMismatch(err));
        }
        Ok(m)
    }

    /// Same map on a different domain.
    pub fn with_domain(&self, domain: BoxRegion) -> Self {
        Self {
            domain,
            ..self.clone()
        }
    }

    /// Replaces the recorded linear part (used when `Λ` is known exactly and
    /// the evaluator only reproduces it to rounding).
    pub fn with_linear(&self, linear: DMatrix<f64>) -> Self {
        Self {
            linear,
            ..self.clone()
        }
    }

    /// Dimension.
    pub fn dim(&self) -> usize {
        self.linear.nrows()
    }

    /// Linear part `Λ = DF(O)`.
    pub fn linear_part(&self) -> &DMatrix<f64> {
        &self.linear
    }

    /// Domain box.
    pub fn domain(&self) -> &BoxRegion {
        &self.domain
    }

    /// Exact polynomial representation, when available.
    pub fn polynomial_rep(&self) -> Option<&PolyMap> {
        self.poly.as_ref()
    }

    /// Shared evaluator.
    pub fn evaluator(&self) -> Arc<dyn MapEval> {
        Arc::clone(&self.eval)
    }

    /// `F(x)`.
    pub fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.eval.eval(x)
    }

    /// `DF(x)`.
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        self.eval.jacobian(x)
    }

    /// `F(x + d) − F(x)`, exact for polynomial maps and zero where the map is
    /// linear at both points.
    pub fn eval_difference(
        &self,
        x: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        if self.is_linear() || (self.eval.is_linear_at(x) && self.eval.is_linear_at(&(x + d))) {
            return Ok(&self.linear * d);
        }
        self.eval.eval_difference(x, d)
    }

    /// Nonlinear part `f(x) = F(x) − Λx`.
    pub fn nonlinear(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        Ok(self.eval(x)? - &self.linear * x)
    }

    /// Whether the map is exactly its linear part.
    pub fn is_linear(&self) -> bool {
        self.poly.as_ref().is_some_and(|p| p.degree() <= 1)
    }

    /// Whether the map coincides with its linear part near `x`.
    pub fn is_linear_at(&self, x: &DVector<f64>) -> bool {
        self.is_linear() || self.eval.is_linear_at(x)
    }

    /// Sampled Lipschitz constant of `DF` on the (bounded part of the) domain,
    /// from `pairs` seeded random pairs at separation ≤ 1e−3 of the box width.
    pub fn estimate_lipschitz(&self, pairs: usize, seed: u64) -> Result<f64, DynamicsError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = self.dim();
        let (lo, hi): (Vec<f64>, Vec<f64>) = self
            .domain
            .lo
            .iter()
            .zip(&self.domain.hi)
            .map(|(a, b)| (a.max(-1.0), b.min(1.0)))
            .unzip();
        let mut lip = 0.0f64;
        for _ in 0..pairs {
            let x = DVector::from_fn(n, |i, _| rng.gen_range(lo[i]..=hi[i]));
            let dx = DVector::from_fn(n, |i, _| (hi[i] - lo[i]) * 1e-3 * rng.gen_range(-1.0..=1.0));
            let y = &x + &dx;
            let d = (self.jacobian(&x)? - self.jacobian(&y)?).norm();
            let s = dx.norm();
            if s > 0.0 {
                lip = lip.max(d / s);
            }
        }
        Ok(lip)
    }
}

/// `F^k(x)`; fails with [`DynamicsError::LeftDomain`] if an iterate leaves the domain.
pub fn iterate(map: &MapModel, x: &DVector<f64>, k: usize) -> Result<DVector<f64>, DynamicsError> {
    let mut y = x.clone();
    if !map.domain().contains(y.as_slice()) {
        return Err(DynamicsError::LeftDomain { step: 0 });
    }
    for step in 1..=k {
        y = map.eval(&y)?;
        if !map.domain().contains(y.as_slice()) {
            return Err(DynamicsError::LeftDomain { step });
        }
    }
    Ok(y)
}

/// `DF^k(x) = DF(F^{k−1}x) ⋯ DF(x)`.
pub fn iterate_derivative(
    map: &MapModel,
    x: &DVector<f64>,
    k: usize,
) -> Result<DMatrix<f64>, DynamicsError> {
    let mut y = x.clone();
    let mut d = DMatrix::identity(map.dim(), map.dim());
    if !map.domain().contains(y.as_slice()) {
        return Err(DynamicsError::LeftDomain { step: 0 });
    }
    for step in 1..=k {
        d = map.jacobian(&y)? * d;
        y = map.eval(&y)?;
        if !map.domain().contains(y.as_slice()) {
            return Err(DynamicsError::LeftDomain { step });
        }
    }
    Ok(d)
}

/// The globalized map `F_mod(x) = Λx + ϱ(‖x‖)(F(x) − Λx)` (Euclidean norm).
pub struct BumpModified {
    inner: MapModel,
    cutoff: RadialCutoff,
}

impl BumpModified {
    /// Cutoff in use.
    pub fn cutoff(&self) -> RadialCutoff {
        self.cutoff
    }
}

impl MapEval for BumpModified {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let lin = self.inner.linear_part() * x;
        let r = x.norm();
        if r >= self.cutoff.r1 {
            return Ok(lin);
        }
        let rho = self.cutoff.value(r);
        let f = self.inner.eval(x)?;
        Ok(&lin + (f - &lin) * rho)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let lam = self.inner.linear_part();
        let r = x.norm();
        if r >= self.cutoff.r1 {
            return Ok(lam.clone());
        }
        let rho = self.cutoff.value(r);
        let mut j = lam + (self.inner.jacobian(x)? - lam) * rho;
        if r > self.cutoff.r0 {
            let drho = self.cutoff.derivative(r);
            let nl = self.inner.eval(x)? - lam * x;
            j += nl * (x.transpose() * (drho / r));
        }
        Ok(j)
    }
    fn is_linear_at(&self, x: &DVector<f64>) -> bool {
        x.norm() >= self.cutoff.r1
    }
    fn eval_difference(
        &self,
        x: &DVector<f64>,
        d: &DVector<f64>,
    ) -> Result<DVector<f64>, DynamicsError> {
        // Λd + ϱ(y)[f(y) − f(x)] + [ϱ(y) − ϱ(x)] f(x) with y = x + d.
        let lam = self.inner.linear_part();
        let y = x + d;
        let (rx, ry) = (x.norm(), y.norm());
        let (px, py) = (self.cutoff.value(rx), self.cutoff.value(ry));
        let mut out = lam * d;
        if py != 0.0 {
            let df = self.inner.eval_difference(x, d)? - lam * d;
            out += df * py;
        }
        if py != px {
            out += (self.inner.eval(x)? - lam * x) * (py - px);
        }
        Ok(out)
    }
}

/// Record of a bump modification.
#[derive(Clone, Debug, PartialEq)]
pub struct BumpModification {
    /// Inner radius (map unchanged inside).
    pub r0: f64,
    /// Outer radius (map linear outside).
    pub r1: f64,
    /// Achieved `η = sup ‖DF_mod(x) − Λ‖_∞` (sampled, inflated by 5% for safety).
    pub eta: f64,
    /// Raw sampled supremum before inflation.
    pub eta_sampled: f64,
}

/// Safety factor applied to the sampled supremum of `‖DF_mod − Λ‖`.
const ETA_SAFETY: f64 = 1.05;

/// Operator ∞-norm (maximum absolute row sum).
pub(crate) fn norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Supremum of `f` over a tensor grid of the cube `[−r, r]ⁿ` restricted to the
/// Euclidean `r`-ball plus 4000 seeded random points of the ball.
pub fn sample_ball_sup<F>(n: usize, r: f64, mut f: F) -> Result<f64, DynamicsError>
where
    F: FnMut(&DVector<f64>) -> Result<f64, DynamicsError>,
{
    let mut sup = 0.0f64;
    let per_axis = match n {
        1 => 4001,
        2 => 161,
        3 => 31,
        4 => 13,
        _ => 7,
    };
    let total: usize = (0..n).map(|_| per_axis).product();
    for idx in 0..total {
        let mut rem = idx;
        let x = DVector::from_fn(n, |_, _| {
            let i = rem % per_axis;
            rem /= per_axis;
            -r + 2.0 * r * i as f64 / (per_axis - 1) as f64
        });
        if x.norm() >= r {
            continue;
        }
        sup = sup.max(f(&x)?);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_b0b);
    for _ in 0..4000 {
        let dir = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..=1.0));
        let nrm = dir.norm();
        if nrm == 0.0 {
            continue;
        }
        let rad = r * rng.gen::<f64>().powf(1.0 / n as f64);
        sup = sup.max(f(&(dir * (rad / nrm)))?);
    }
    Ok(sup)
}

/// Globalizes `map` by cutting off its nonlinear part between radii `r0 < r1`.
///
/// The achieved `η` is the supremum of the operator ∞-norm of `DF_mod − Λ`
/// over a tensor grid of the cube `[−r1, r1]ⁿ` plus 4000 seeded random points
/// of the `r1`-ball, inflated by 5%.
pub fn bump_modify(
    map: &MapModel,
    r0: f64,
    r1: f64,
    eta_target: f64,
) -> Result<(MapModel, BumpModification), DynamicsError> {
    if !(r0 > 0.0 && r1 > r0) {
        return Err(DynamicsError::InvalidRadii(format!(
            "need 0 < r0 < r1, got r0={r0}, r1={r1}"
        )));
    }
    let n = map.dim();
    let ball = BoxRegion::symmetric(n, r1);
    if !(map.domain().contains(&ball.lo) && map.domain().contains(&ball.hi)) {
        return Err(DynamicsError::InvalidRadii(format!(
            "the r1-ball (r1={r1}) is not inside the domain box"
        )));
    }
    let cutoff = RadialCutoff { r0, r1 };
    let modified = BumpModified {
        inner: map.clone(),
        cutoff,
    };
    let lam = map.linear_part().clone();

    let sup = sample_ball_sup(n, r1, |x| Ok(norm_inf(&(modified.jacobian(x)? - &lam))))?;
    let eta = sup * ETA_SAFETY;
    if eta > eta_target {
        return Err(DynamicsError::EtaNotAchievable {
            achieved: eta,
            target: eta_target,
        });
    }
    let model = MapModel {
        eval: Arc::new(modified),
        linear: lam,
        domain: BoxRegion::unbounded(n),
        poly: if map.is_linear() {
            map.poly.clone()
        } else {
            None
        },
    };
    Ok((
        model,
        BumpModification {
            r0,
            r1,
            eta,
            eta_sampled: sup,
        },
    ))
}

/// Inverse of a globally invertible map, evaluated by damped Newton iteration
/// from the linear-part seed `Λ⁻¹y`.
pub struct InverseMap {
    forward: MapModel,
    lambda_inv: DMatrix<f64>,
}

impl InverseMap {
    /// Wraps `forward`; fails when `Λ` is singular.
    pub fn new(forward: MapModel) -> Result<Self, DynamicsError> {
        let lambda_inv = forward
            .linear_part()
            .clone()
            .try_inverse()
            .ok_or_else(|| DynamicsError::Singular("linear part is not invertible".into()))?;
        Ok(Self {
            forward,
            lambda_inv,
        })
    }

    /// The inverse as a map model (linear part `Λ⁻¹`).
    pub fn into_model(self) -> MapModel {
        let lin = self.lambda_inv.clone();
        let n = lin.nrows();
        MapModel {
            eval: Arc::new(self),
            linear: lin,
            domain: BoxRegion::unbounded(n),
            poly: None,
        }
    }

    /// Solves `F(z) = y`.
    pub fn solve(&self, y: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let mut z = &self.lambda_inv * y;
        let mut r = self.forward.eval(&z)? - y;
        let mut rn = r.amax();
        let scale = y.amax().max(z.amax()).max(f64::MIN_POSITIVE);
        let tol = 8.0 * f64::EPSILON * scale;
        let mut iter = 0;
        while rn > tol {
            iter += 1;
            if iter > NEWTON_MAX_ITER {
                // Accept stagnation at rounding level.
                if rn <= (1e3 * tol).max(NEWTON_NOISE_FLOOR) {
                    break;
                }
                return Err(DynamicsError::InverseNewtonFailed {
                    point: y.as_slice().to_vec(),
                    residual: rn,
                });
            }
            let j = self.forward.jacobian(&z)?;
            let step = j.lu().solve(&r).ok_or_else(|| {
                DynamicsError::Singular("Jacobian singular in inverse Newton".into())
            })?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &z - &step * t;
                let rc = self.forward.eval(&cand)? - y;
                let rcn = rc.amax();
                if rcn < rn {
                    z = cand;
                    r = rc;
                    rn = rcn;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                if rn <= (1e3 * tol).max(NEWTON_NOISE_FLOOR) {
                    break;
                }
                return Err(DynamicsError::InverseNewtonFailed {
                    point: y.as_slice().to_vec(),
                    residual: rn,
                });
            }
        }
        Ok(z)
    }
}

impl MapEval for InverseMap {
    fn dim(&self) -> usize {
        self.forward.dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        self.solve(x)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let z = self.solve(x)?;
        self.forward
            .jacobian(&z)?
            .try_inverse()
            .ok_or_else(|| DynamicsError::Singular("forward Jacobian singular".into()))
    }
    fn is_linear_at(&self, x: &DVector<f64>) -> bool {
        // F(Λ⁻¹y) = y whenever F is linear at Λ⁻¹y, so F⁻¹ is linear there.
        self.forward.is_linear_at(&(&self.lambda_inv * x))
    }
}
