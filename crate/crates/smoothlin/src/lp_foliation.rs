//! Lyapunov–Perron solver and invariant foliations.
//!
//! For a globalized map `F = Λ + f` in block coordinates with contracting
//! indices `S` and expanding indices `U`, the leaves of the stable foliation are
//! parametrized by sequences `q_n(x, y_-)` solving
//! `F^n(x + q_0) − F^n(x) = q_n`. The sequences are the fixed point of
//!
//! ```text
//! (T v)_n = Λ_-^n (y_- − π_- x) + Σ_{k<n} Λ_-^{n−k−1} π_-[f(v_k + F^k x) − f(F^k x)]
//!                               − Σ_{k≥n} Λ_+^{n−k−1} π_+[f(v_k + F^k x) − f(F^k x)]
//! ```
//!
//! together with its derivative operator `S(v, w)`; the pair `Q = (T, S)` is a
//! fiber contraction on the weighted spaces `S_{γ₁} × S_{γ₂}`. The equation
//! decouples across base points `(x, y_-)`, so each grid node is solved
//! independently with `O(K)` recursions: with `a_k, b_k` the `π_-`, `π_+`
//! parts of the bracket,
//! `A_0 = y_- − π_- x`, `A_n = Λ_- A_{n−1} + a_{n−1}` and
//! `B_{K+1} = 0`, `B_n = Λ_+^{-1}(b_n + B_{n+1})` give `(T v)_n = (A_n, −B_n)`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::dynamics::{
    iterate, sample_ball_sup, BoxRegion, DynamicsError, GridFunction, InverseMap, MapModel,
};
use crate::verify::{holder_exponent, HolderEstimate, HolderOptions, VerifyError};

/// Default sequence length `N` reported and checked.
pub const DEFAULT_N: usize = 8;
/// Default tail truncation `K` of the infinite sums.
pub const DEFAULT_K_TAIL: usize = 32;
/// Default fixed-point tolerance in the weighted norms.
pub const DEFAULT_TOL: f64 = 1e-11;
/// Default maximum number of Picard iterations.
pub const DEFAULT_MAX_ITER: usize = 400;
/// Tolerance of the finite-difference check of `w* = Dv*`.
pub const DERIVATIVE_CHECK_TOL: f64 = 1e-6;

/// Errors of the Lyapunov–Perron solver.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum LpError {
    /// Map evaluation failure.
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    /// The weights violate `λ_s^+ < γ₁ < 1 < γ₂ < λ_u^-`, `γ₁λ_u^+ < γ₂`.
    #[error("inadmissible weights: {0}")]
    InvalidWeights(String),
    /// Invalid parameters (sizes, index sets).
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    /// Estimated contraction factor `Kη ≥ 1`.
    #[error("estimated contraction factor {factor} >= 1 (eta = {eta}); shrink the cutoff radii")]
    EtaTooLarge {
        /// Estimated factor.
        factor: f64,
        /// The `η` of the globalized map.
        eta: f64,
    },
    /// The geometric tail bound exceeds `tol/10`.
    #[error("tail bound {bound:e} exceeds tol/10; increase K_tail")]
    TailTooShort {
        /// Bound on the truncated tail.
        bound: f64,
    },
    /// The Picard iteration did not reach the tolerance.
    #[error("no convergence after {iterations} iterations (last delta {delta:e})")]
    NoConvergence {
        /// Iterations performed.
        iterations: usize,
        /// Last weighted delta.
        delta: f64,
    },
    /// `w*` disagrees with a finite-difference derivative of `v*`.
    #[error("derivative mismatch {0:e} between w* and finite differences of v*")]
    DerivativeMismatch(f64),
    /// Hölder estimation failure.
    #[error(transparent)]
    Verify(#[from] VerifyError),
}

/// Weights, truncation and tolerance of the Lyapunov–Perron iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LpParameters {
    /// Weight of the sequence space for `q`.
    pub gamma1: f64,
    /// Weight of the sequence space for `Dq`.
    pub gamma2: f64,
    /// Number of sequence terms `q_0..q_N` reported.
    pub n_seq: usize,
    /// Truncation index of the infinite sums (sequences have `K + 1` terms).
    pub k_tail: usize,
    /// Stopping tolerance for the weighted successive differences.
    pub tol: f64,
    /// Maximum number of Picard iterations.
    pub max_iter: usize,
}

impl LpParameters {
    /// Geometric-midpoint weights `γ₁ = √(λ_s^+ λ_u^-/λ_u^+)` and
    /// `γ₂ = √(γ₁λ_u^+ · λ_u^-)`, which satisfy the admissibility
    /// inequalities whenever `λ_s^+ λ_u^+ < λ_u^-`.
    pub fn auto(ls_plus: f64, lu_minus: f64, lu_plus: f64) -> Result<Self, LpError> {
        let gamma1 = (ls_plus * lu_minus / lu_plus).sqrt();
        let gamma2 = (gamma1 * lu_plus * lu_minus).sqrt();
        let p = Self {
            gamma1,
            gamma2,
            n_seq: DEFAULT_N,
            k_tail: DEFAULT_K_TAIL,
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
        };
        p.validate(ls_plus, lu_minus, lu_plus)?;
        Ok(p)
    }

    /// Checks the weight inequalities and sizes.
    pub fn validate(&self, ls_plus: f64, lu_minus: f64, lu_plus: f64) -> Result<(), LpError> {
        let (g1, g2) = (self.gamma1, self.gamma2);
        if !(ls_plus < g1 && g1 < 1.0 && 1.0 < g2 && g2 < lu_minus && g1 * lu_plus < g2) {
            return Err(LpError::InvalidWeights(format!(
                "gamma1 = {g1}, gamma2 = {g2} with lambda_s^+ = {ls_plus}, lambda_u^- = {lu_minus}, lambda_u^+ = {lu_plus}"
            )));
        }
        if self.n_seq < 1 || self.k_tail < self.n_seq {
            return Err(LpError::InvalidParameters(format!(
                "need 1 <= N <= K_tail (N = {}, K = {})",
                self.n_seq, self.k_tail
            )));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err(LpError::InvalidParameters(
                "tol and max_iter must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-iteration weighted deltas of the Picard iteration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceLog {
    /// `sup_n γ₁^{-n} ‖v_n^{new} − v_n‖∞` per iteration (maximum over nodes).
    pub delta_v: Vec<f64>,
    /// `sup_n γ₂^{-n} ‖w_n^{new} − w_n‖∞` per iteration (maximum over nodes).
    pub delta_w: Vec<f64>,
    /// The a-priori contraction factor `max(K_T, K_S)·η`.
    pub factor: f64,
}

impl ConvergenceLog {
    fn merge(&mut self, dv: &[f64], dw: &[f64]) {
        for (i, &d) in dv.iter().enumerate() {
            if i < self.delta_v.len() {
                self.delta_v[i] = self.delta_v[i].max(d);
            } else {
                self.delta_v.push(d);
            }
        }
        for (i, &d) in dw.iter().enumerate() {
            if i < self.delta_w.len() {
                self.delta_w[i] = self.delta_w[i].max(d);
            } else {
                self.delta_w.push(d);
            }
        }
    }

    /// Combined delta `max(δv, δw)` per iteration.
    pub fn combined(&self) -> Vec<f64> {
        (0..self.delta_v.len().max(self.delta_w.len()))
            .map(|i| {
                self.delta_v
                    .get(i)
                    .copied()
                    .unwrap_or(0.0)
                    .max(self.delta_w.get(i).copied().unwrap_or(0.0))
            })
            .collect()
    }

    /// Ratios of successive combined deltas, skipping the first (seed) step and
    /// steps that already reached rounding level (`floor`).
    pub fn measured_ratios(&self, floor: f64) -> Vec<f64> {
        let c = self.combined();
        c.windows(2)
            .skip(1)
            .filter(|w| w[0] > floor && w[1] > floor)
            .map(|w| w[1] / w[0])
            .collect()
    }

    /// Number of iterations performed by the slowest node.
    pub fn iterations(&self) -> usize {
        self.delta_v.len().max(self.delta_w.len())
    }
}

/// A finite family `(q_n)_{0≤n≤K}` of grid functions with weight `γ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceFamily {
    /// The weight `γ`.
    pub gamma: f64,
    /// Entries `q_0, q_1, …` sharing one grid.
    pub entries: Vec<GridFunction>,
}

impl SequenceFamily {
    /// `sup_n γ^{-n} sup_Ω ‖q_n‖∞` over grid nodes.
    pub fn weighted_norm(&self) -> f64 {
        self.entries
            .iter()
            .enumerate()
            .map(|(n, g)| {
                g.values().iter().fold(0.0f64, |m, v| m.max(v.abs())) * self.gamma.powi(-(n as i32))
            })
            .fold(0.0, f64::max)
    }

    /// `sup_n γ^{-n} sup_Ω ‖q_n − q̃_n‖∞` over grid nodes.
    pub fn weighted_distance(&self, other: &Self) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .enumerate()
            .map(|(n, (a, b))| {
                a.values()
                    .iter()
                    .zip(b.values())
                    .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
                    * self.gamma.powi(-(n as i32))
            })
            .fold(0.0, f64::max)
    }
}

/// Orbit data of a base point.
struct Orbit {
    /// `F^k(x)` for `k = 0..=K`.
    pts: Vec<DVector<f64>>,
    /// `DF(F^k x)` for `k = 0..=K` (empty unless derivatives are requested).
    jac: Vec<DMatrix<f64>>,
    /// `DF^k(x)` for `k = 0..=K` (empty unless derivatives are requested).
    dfk: Vec<DMatrix<f64>>,
    /// Whether `F` is linear near `F^k(x)`.
    linear: Vec<bool>,
}

/// Converged sequences at one base point.
#[derive(Clone, Debug)]
pub struct PointSolution {
    /// `v_0..v_K`.
    pub v: Vec<DVector<f64>>,
    /// `w_0..w_K` (`n × (n + n_s)` each) when derivatives were requested.
    pub w: Option<Vec<DMatrix<f64>>>,
    /// Weighted `δv` per iteration.
    pub delta_v: Vec<f64>,
    /// Weighted `δw` per iteration.
    pub delta_w: Vec<f64>,
}

/// A globalized map in block coordinates with its stable/unstable splitting.
#[derive(Clone, Debug)]
pub struct LpProblem {
    map: MapModel,
    stable: Vec<usize>,
    unstable: Vec<usize>,
    lam_s: DMatrix<f64>,
    lam_u_inv: DMatrix<f64>,
    eta: f64,
}

fn sub_matrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn sub_vector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn norm_inf(m: &DMatrix<f64>) -> f64 {
    (0..m.nrows())
        .map(|i| m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

impl LpProblem {
    /// Wraps a globalized map (`‖DF − Λ‖∞ ≤ η` everywhere) whose linear part is
    /// block diagonal with respect to `stable ∪ unstable`.
    pub fn new(
        map: MapModel,
        stable: Vec<usize>,
        unstable: Vec<usize>,
        eta: f64,
    ) -> Result<Self, LpError> {
        let n = map.dim();
        let mut all: Vec<usize> = stable.iter().chain(&unstable).copied().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() || stable.is_empty() || unstable.is_empty() {
            return Err(LpError::InvalidParameters(
                "stable/unstable indices must partition the coordinates".into(),
            ));
        }
        let lam = map.linear_part().clone();
        let off = sub_matrix(&lam, &stable, &unstable)
            .amax()
            .max(sub_matrix(&lam, &unstable, &stable).amax());
        if off > 1e-12 * lam.amax().max(1.0) {
            return Err(LpError::InvalidParameters(format!(
                "linear part couples the splitting (off-block {off:e})"
            )));
        }
        let lam_s = sub_matrix(&lam, &stable, &stable);
        let lam_u = sub_matrix(&lam, &unstable, &unstable);
        let lam_u_inv = lam_u
            .clone()
            .try_inverse()
            .ok_or_else(|| LpError::InvalidParameters("expanding block is singular".into()))?;
        Ok(Self {
            map,
            stable,
            unstable,
            lam_s,
            lam_u_inv,
            eta,
        })
    }

    /// The stable foliation problem of the inverse map: the roles of the index
    /// sets swap and `η` is re-measured for `DF⁻¹ − Λ⁻¹` on the ball of
    /// radius `r1` outside of which `F` is linear.
    pub fn inverse(&self, r1: f64) -> Result<Self, LpError> {
        let lam = self.map.linear_part().clone();
        let lam_inv = lam
            .clone()
            .try_inverse()
            .ok_or_else(|| LpError::InvalidParameters("singular linear part".into()))?;
        let fwd = self.map.clone();
        let n = fwd.dim();
        let eta_inv = sample_ball_sup(n, r1, |z| {
            let j = fwd.jacobian(z)?;
            let ji = j
                .try_inverse()
                .ok_or_else(|| DynamicsError::Singular("DF singular".into()))?;
            Ok(norm_inf(&(ji - &lam_inv)))
        })? * 1.05;
        let inv = InverseMap::new(self.map.clone())?.into_model();
        Self::new(inv, self.unstable.clone(), self.stable.clone(), eta_inv)
    }

    /// Dimension `n`.
    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    /// Contracting indices.
    pub fn stable(&self) -> &[usize] {
        &self.stable
    }

    /// Expanding indices.
    pub fn unstable(&self) -> &[usize] {
        &self.unstable
    }

    /// The underlying map.
    pub fn map(&self) -> &MapModel {
        &self.map
    }

    /// The `η` of the globalized map.
    pub fn eta(&self) -> f64 {
        self.eta
    }

    fn weight_sums(&self, gamma: f64) -> f64 {
        // γ^{-1} Σ_{j≥0} ‖Λ_-^j‖ γ^{-j} and γ^{-1} Σ_{i≥1} ‖Λ_+^{-i}‖ γ^{i}.
        let mut s1 = 0.0;
        let mut p = DMatrix::identity(self.lam_s.nrows(), self.lam_s.nrows());
        for _ in 0..100_000 {
            let t = norm_inf(&p);
            s1 += t;
            if t < 1e-17 * s1 {
                break;
            }
            p = &self.lam_s * p / gamma;
        }
        let mut s2 = 0.0;
        let mut q = &self.lam_u_inv * gamma;
        for _ in 0..100_000 {
            let t = norm_inf(&q);
            s2 += t;
            if t < 1e-17 * s2.max(1e-300) {
                break;
            }
            q = &self.lam_u_inv * q * gamma;
        }
        s1.max(s2) / gamma
    }

    /// A-priori Lipschitz factors `(K_T η, K_S η)` of `T` in `S_{γ₁}` and of
    /// `S(v, ·)` in `S_{γ₂}`.
    pub fn contraction_factors(&self, params: &LpParameters) -> (f64, f64) {
        (
            self.weight_sums(params.gamma1) * self.eta,
            self.weight_sums(params.gamma2) * self.eta,
        )
    }

    /// Geometric bound on the truncated tail of the `T` sum for base points of
    /// size `radius`.
    pub fn tail_bound(&self, params: &LpParameters, radius: f64) -> f64 {
        let lu_minus = 1.0 / norm_inf(&self.lam_u_inv);
        let r = params.gamma1 / lu_minus;
        r.powi(params.k_tail as i32 + 1) / (1.0 - r) * self.eta * radius / params.gamma1
    }

    fn check(&self, params: &LpParameters, radius: f64) -> Result<f64, LpError> {
        let (kt, ks) = self.contraction_factors(params);
        let factor = kt.max(ks);
        if factor >= 1.0 {
            return Err(LpError::EtaTooLarge {
                factor,
                eta: self.eta,
            });
        }
        let bound = self.tail_bound(params, radius);
        if bound > params.tol / 10.0 {
            return Err(LpError::TailTooShort { bound });
        }
        Ok(factor)
    }

    fn orbit(&self, x: &DVector<f64>, k: usize, derivative: bool) -> Result<Orbit, LpError> {
        let n = self.dim();
        let mut pts = Vec::with_capacity(k + 1);
        let mut jac = Vec::new();
        let mut dfk = Vec::new();
        let mut linear = Vec::with_capacity(k + 1);
        let mut y = x.clone();
        let mut d = DMatrix::identity(n, n);
        for i in 0..=k {
            let lin = self.map.is_linear_at(&y);
            linear.push(lin);
            if derivative {
                let j = if lin {
                    self.map.linear_part().clone()
                } else {
                    self.map.jacobian(&y)?
                };
                dfk.push(d.clone());
                if i < k {
                    d = &j * &d;
                }
                jac.push(j);
            }
            pts.push(y.clone());
            if i < k {
                y = if lin {
                    self.map.linear_part() * &y
                } else {
                    self.map.eval(&y)?
                };
            }
        }
        Ok(Orbit {
            pts,
            jac,
            dfk,
            linear,
        })
    }

    /// `f(X + v) − f(X)`, exactly zero where the map is linear at both points.
    fn bracket(&self, orbit: &Orbit, k: usize, v: &DVector<f64>) -> Result<DVector<f64>, LpError> {
        let xk = &orbit.pts[k];
        let z = xk + v;
        if orbit.linear[k] && self.map.is_linear_at(&z) {
            return Ok(DVector::zeros(self.dim()));
        }
        let lam = self.map.linear_part();
        Ok(self.map.eval_difference(xk, v)? - lam * v)
    }

    fn apply_t(
        &self,
        orbit: &Orbit,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>, LpError> {
        let k = v.len() - 1;
        let brackets: Vec<DVector<f64>> = (0..=k)
            .map(|i| self.bracket(orbit, i, &v[i]))
            .collect::<Result<_, _>>()?;
        let mut a = Vec::with_capacity(k + 1);
        a.push(y - sub_vector(x, &self.stable));
        for i in 1..=k {
            let next = &self.lam_s * &a[i - 1] + sub_vector(&brackets[i - 1], &self.stable);
            a.push(next);
        }
        let mut b = vec![DVector::zeros(self.unstable.len()); k + 2];
        for i in (0..=k).rev() {
            b[i] = &self.lam_u_inv * (sub_vector(&brackets[i], &self.unstable) + &b[i + 1]);
        }
        Ok((0..=k)
            .map(|i| {
                let mut out = DVector::zeros(self.dim());
                for (r, &s) in self.stable.iter().enumerate() {
                    out[s] = a[i][r];
                }
                for (r, &u) in self.unstable.iter().enumerate() {
                    out[u] = -b[i][r];
                }
                out
            })
            .collect())
    }

    fn apply_s(
        &self,
        orbit: &Orbit,
        v: &[DVector<f64>],
        w: &[DMatrix<f64>],
    ) -> Result<Vec<DMatrix<f64>>, LpError> {
        let n = self.dim();
        let ns = self.stable.len();
        let k = v.len() - 1;
        let lam = self.map.linear_part();
        let mut m = Vec::with_capacity(k + 1);
        for i in 0..=k {
            let z = &orbit.pts[i] + &v[i];
            if orbit.linear[i] && self.map.is_linear_at(&z) {
                m.push(DMatrix::zeros(n, n + ns));
                continue;
            }
            let mut dk = DMatrix::zeros(n, n + ns);
            dk.view_mut((0, 0), (n, n)).copy_from(&orbit.dfk[i]);
            let dz = self.map.jacobian(&z)? - lam;
            let dx = &orbit.jac[i] - lam;
            m.push(dz * (&w[i] + &dk) - dx * dk);
        }
        let rows = |mat: &DMatrix<f64>, idx: &[usize]| {
            DMatrix::from_fn(idx.len(), mat.ncols(), |r, c| mat[(idx[r], c)])
        };
        let mut e = Vec::with_capacity(k + 1);
        let mut e0 = DMatrix::zeros(ns, n + ns);
        for (r, &s) in self.stable.iter().enumerate() {
            e0[(r, s)] = -1.0;
            e0[(r, n + r)] = 1.0;
        }
        e.push(e0);
        for i in 1..=k {
            let next = &self.lam_s * &e[i - 1] + rows(&m[i - 1], &self.stable);
            e.push(next);
        }
        let nu = self.unstable.len();
        let mut g = vec![DMatrix::zeros(nu, n + ns); k + 2];
        for i in (0..=k).rev() {
            g[i] = &self.lam_u_inv * (rows(&m[i], &self.unstable) + &g[i + 1]);
        }
        Ok((0..=k)
            .map(|i| {
                let mut out = DMatrix::zeros(n, n + ns);
                for (r, &s) in self.stable.iter().enumerate() {
                    out.row_mut(s).copy_from(&e[i].row(r));
                }
                for (r, &u) in self.unstable.iter().enumerate() {
                    out.row_mut(u).copy_from(&(-g[i].row(r)));
                }
                out
            })
            .collect())
    }

    /// One application of `T` at a base point.
    pub fn operator_t_point(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        v: &[DVector<f64>],
    ) -> Result<Vec<DVector<f64>>, LpError> {
        let orbit = self.orbit(x, v.len() - 1, false)?;
        self.apply_t(&orbit, x, y, v)
    }

    /// One application of `S(v, ·)` at a base point.
    pub fn operator_s_point(
        &self,
        x: &DVector<f64>,
        v: &[DVector<f64>],
        w: &[DMatrix<f64>],
    ) -> Result<Vec<DMatrix<f64>>, LpError> {
        let orbit = self.orbit(x, v.len() - 1, true)?;
        self.apply_s(&orbit, v, w)
    }

    /// Picard iteration of `Q = (T, S)` from `v = 0, w = 0` at one base point.
    pub fn solve_point(
        &self,
        x: &DVector<f64>,
        y: &DVector<f64>,
        params: &LpParameters,
        derivative: bool,
    ) -> Result<PointSolution, LpError> {
        let n = self.dim();
        let ns = self.stable.len();
        let k = params.k_tail;
        let orbit = self.orbit(x, k, derivative)?;
        let mut v = vec![DVector::zeros(n); k + 1];
        let mut w = if derivative {
            vec![DMatrix::zeros(n, n + ns); k + 1]
        } else {
            Vec::new()
        };
        let mut delta_v = Vec::new();
        let mut delta_w = Vec::new();
        let wv: Vec<f64> = (0..=k).map(|i| params.gamma1.powi(-(i as i32))).collect();
        let ww: Vec<f64> = (0..=k).map(|i| params.gamma2.powi(-(i as i32))).collect();
        for _ in 0..params.max_iter {
            let vn = self.apply_t(&orbit, x, y, &v)?;
            let dv = (0..=k)
                .map(|i| (&vn[i] - &v[i]).amax() * wv[i])
                .fold(0.0, f64::max);
            let mut dw = 0.0;
            if derivative {
                let wn = self.apply_s(&orbit, &v, &w)?;
                dw = (0..=k)
                    .map(|i| (&wn[i] - &w[i]).amax() * ww[i])
                    .fold(0.0, f64::max);
                w = wn;
                delta_w.push(dw);
            }
            v = vn;
            delta_v.push(dv);
            if !(dv.is_finite() && dw.is_finite()) {
                return Err(LpError::Dynamics(DynamicsError::NonFinite(
                    "Picard iterate".into(),
                )));
            }
            if dv <= params.tol && dw <= params.tol {
                return Ok(PointSolution {
                    v,
                    w: derivative.then_some(w),
                    delta_v,
                    delta_w,
                });
            }
        }
        Err(LpError::NoConvergence {
            iterations: params.max_iter,
            delta: delta_v
                .last()
                .copied()
                .unwrap_or(f64::NAN)
                .max(delta_w.last().copied().unwrap_or(0.0)),
        })
    }

    /// Applies `T` node-wise to a family on the grid of its entries (the grid
    /// lives on `Ω ⊂ X × X_-`).
    pub fn operator_t(&self, v: &SequenceFamily) -> Result<SequenceFamily, LpError> {
        let grid = &v.entries[0];
        let n = self.dim();
        let mut values: Vec<Vec<f64>> =
            vec![Vec::with_capacity(grid.node_count() * n); v.entries.len()];
        for node in 0..grid.node_count() {
            let c = grid.node_coords(node);
            let x = DVector::from_column_slice(&c[..n]);
            let y = DVector::from_column_slice(&c[n..]);
            let seq: Vec<DVector<f64>> = v
                .entries
                .iter()
                .map(|e| DVector::from_column_slice(e.node_value(node)))
                .collect();
            let out = self.operator_t_point(&x, &y, &seq)?;
            for (i, o) in out.iter().enumerate() {
                values[i].extend(o.iter());
            }
        }
        let entries = values
            .into_iter()
            .map(|vals| {
                GridFunction::from_values(
                    grid.bounds().clone(),
                    grid.resolution().to_vec(),
                    n,
                    vals,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(SequenceFamily {
            gamma: v.gamma,
            entries,
        })
    }

    /// Applies `S(v, ·)` node-wise; `w` entries hold row-major `n × (n + n_s)` matrices.
    pub fn operator_s(
        &self,
        v: &SequenceFamily,
        w: &SequenceFamily,
    ) -> Result<SequenceFamily, LpError> {
        let grid = &v.entries[0];
        let n = self.dim();
        let cols = n + self.stable.len();
        let mut values: Vec<Vec<f64>> =
            vec![Vec::with_capacity(grid.node_count() * n * cols); v.entries.len()];
        for node in 0..grid.node_count() {
            let c = grid.node_coords(node);
            let x = DVector::from_column_slice(&c[..n]);
            let seq: Vec<DVector<f64>> = v
                .entries
                .iter()
                .map(|e| DVector::from_column_slice(e.node_value(node)))
                .collect();
            let wseq: Vec<DMatrix<f64>> = w
                .entries
                .iter()
                .map(|e| DMatrix::from_row_slice(n, cols, e.node_value(node)))
                .collect();
            let out = self.operator_s_point(&x, &seq, &wseq)?;
            for (i, o) in out.iter().enumerate() {
                values[i].extend(o.transpose().iter());
            }
        }
        let entries = values
            .into_iter()
            .map(|vals| {
                GridFunction::from_values(
                    grid.bounds().clone(),
                    grid.resolution().to_vec(),
                    n * cols,
                    vals,
                )
            })
            .collect::<Result<_, _>>()?;
        Ok(SequenceFamily {
            gamma: w.gamma,
            entries,
        })
    }
}

/// The stable foliation sampled on `Ω ⊂ X × X_-`.
#[derive(Clone, Debug)]
pub struct FoliationResult {
    /// `h(x, y_-) = π_+(x + q_0(x, y_-))`, codimension `n_u`.
    pub h: GridFunction,
    /// `q_0..q_N` on `Ω`.
    pub q: SequenceFamily,
    /// `Dq_0` as row-major `n × (n + n_s)` matrices.
    pub dq0: GridFunction,
    /// Convergence log (maximum over nodes).
    pub log: ConvergenceLog,
    /// Largest node-wise mismatch of `w*` against finite differences of `v*`.
    pub derivative_check: f64,
    /// Reported tail bound.
    pub tail_bound: f64,
    /// Stable indices of the problem (coordinates `y_-` refer to these).
    pub stable: Vec<usize>,
    /// Unstable indices of the problem.
    pub unstable: Vec<usize>,
}

fn omega_dims(problem: &LpProblem, omega: &BoxRegion) -> Result<(), LpError> {
    if omega.dim() != problem.dim() + problem.stable.len() {
        return Err(LpError::InvalidParameters(format!(
            "Omega must have dimension n + n_s = {}",
            problem.dim() + problem.stable.len()
        )));
    }
    Ok(())
}

/// Solves the Lyapunov–Perron equation with derivatives on every node of `Ω`
/// and assembles the stable foliation.
pub fn stable_foliation(
    problem: &LpProblem,
    params: &LpParameters,
    omega: &BoxRegion,
    res: &[usize],
) -> Result<FoliationResult, LpError> {
    omega_dims(problem, omega)?;
    let factor = problem.check(params, omega.radius())?;
    let n = problem.dim();
    let ns = problem.stable.len();
    let cols = n + ns;
    let probe = GridFunction::from_values(
        omega.clone(),
        res.to_vec(),
        1,
        vec![0.0; res.iter().product()],
    )?;
    let nodes = probe.node_count();
    let mut q_vals: Vec<Vec<f64>> = vec![Vec::with_capacity(nodes * n); params.n_seq + 1];
    let mut h_vals = Vec::with_capacity(nodes * problem.unstable.len());
    let mut dq_vals = Vec::with_capacity(nodes * n * cols);
    let mut log = ConvergenceLog {
        factor,
        ..Default::default()
    };
    for node in 0..nodes {
        let c = probe.node_coords(node);
        let x = DVector::from_column_slice(&c[..n]);
        let y = DVector::from_column_slice(&c[n..]);
        let sol = problem.solve_point(&x, &y, params, true)?;
        log.merge(&sol.delta_v, &sol.delta_w);
        for (i, vals) in q_vals.iter_mut().enumerate() {
            vals.extend(sol.v[i].iter());
        }
        for &u in &problem.unstable {
            h_vals.push(x[u] + sol.v[0][u]);
        }
        let w0 = &sol.w.as_ref().expect("derivatives requested")[0];
        dq_vals.extend(w0.transpose().iter());
    }
    let entries = q_vals
        .into_iter()
        .map(|v| GridFunction::from_values(omega.clone(), res.to_vec(), n, v))
        .collect::<Result<Vec<_>, _>>()?;
    let derivative_check = derivative_check(problem, params, omega)?;
    if derivative_check > DERIVATIVE_CHECK_TOL {
        return Err(LpError::DerivativeMismatch(derivative_check));
    }
    Ok(FoliationResult {
        h: GridFunction::from_values(omega.clone(), res.to_vec(), problem.unstable.len(), h_vals)?,
        q: SequenceFamily {
            gamma: params.gamma1,
            entries,
        },
        dq0: GridFunction::from_values(omega.clone(), res.to_vec(), n * cols, dq_vals)?,
        log,
        derivative_check,
        tail_bound: problem.tail_bound(params, omega.radius()),
        stable: problem.stable.clone(),
        unstable: problem.unstable.clone(),
    })
}

/// Compares `w*_0` with central differences of `v*_0` at a few interior points
/// of `Ω`, solving tightly at the perturbed points.
fn derivative_check(
    problem: &LpProblem,
    params: &LpParameters,
    omega: &BoxRegion,
) -> Result<f64, LpError> {
    let n = problem.dim();
    let tight = LpParameters {
        tol: 1e-15,
        max_iter: params.max_iter.max(400),
        ..params.clone()
    };
    let dims = omega.dim();
    let mut worst = 0.0f64;
    for frac in [0.3, -0.45, 0.1] {
        let p: Vec<f64> = (0..dims)
            .map(|i| {
                let s = if i % 2 == 0 { frac } else { -0.6 * frac };
                0.5 * (omega.lo[i] + omega.hi[i]) + s * 0.5 * (omega.hi[i] - omega.lo[i])
            })
            .collect();
        let split = |p: &[f64]| {
            (
                DVector::from_column_slice(&p[..n]),
                DVector::from_column_slice(&p[n..]),
            )
        };
        let (x, y) = split(&p);
        let base = problem.solve_point(&x, &y, &tight, true)?;
        let w0 = &base.w.as_ref().expect("derivatives requested")[0];
        for j in 0..dims {
            let h = (omega.hi[j] - omega.lo[j]) * 1e-5;
            let mut pp = p.clone();
            let mut pm = p.clone();
            pp[j] += h;
            pm[j] -= h;
            let (xp, yp) = split(&pp);
            let (xm, ym) = split(&pm);
            let vp = problem.solve_point(&xp, &yp, &tight, false)?;
            let vm = problem.solve_point(&xm, &ym, &tight, false)?;
            let fd = (&vp.v[0] - &vm.v[0]) / (2.0 * h);
            for r in 0..n {
                worst = worst.max((fd[r] - w0[(r, j)]).abs());
            }
        }
    }
    Ok(worst)
}

/// The leaf-axis map `x ↦ h(x, 0) = π_+(x + q_0(x, 0))` on an `x`-grid: the
/// `X_+`-coordinate where the stable leaf through `x` meets `X_+`.
pub fn leaf_axis_map(
    problem: &LpProblem,
    params: &LpParameters,
    x_box: &BoxRegion,
    res: &[usize],
) -> Result<(GridFunction, ConvergenceLog), LpError> {
    let factor = problem.check(params, x_box.radius())?;
    let mut log = ConvergenceLog {
        factor,
        ..Default::default()
    };
    let y = DVector::zeros(problem.stable.len());
    let g = GridFunction::try_sample(
        x_box.clone(),
        res.to_vec(),
        problem.unstable.len(),
        |c: &[f64]| {
            let x = DVector::from_column_slice(c);
            let sol = problem.solve_point(&x, &y, params, false)?;
            log.merge(&sol.delta_v, &sol.delta_w);
            Ok::<_, LpError>(
                problem
                    .unstable
                    .iter()
                    .map(|&u| x[u] + sol.v[0][u])
                    .collect(),
            )
        },
    )?;
    Ok((g, log))
}

/// Residuals of the foliation properties on `Ω`.
#[derive(Clone, Debug, PartialEq)]
pub struct FoliationProperties {
    /// `max ‖π_-(x + q_0(x, y_-)) − y_-‖` over nodes.
    pub b1: f64,
    /// `max ‖h(x, π_- x) − π_+ x‖` over nodes with `π_- x` inside the `y`-box.
    pub b2: f64,
    /// Leaf-identity residual `max ‖h(z, y') − h(x, y')‖` for `z = x + q_0(x, y_-)`
    /// on the leaf through `x` and a second `y'`: leaves through points of one
    /// leaf coincide.
    pub b3: f64,
    /// Number of samples used for the leaf-identity residual.
    pub b3_samples: usize,
    /// Invariance residual `‖F(x + q_0(x,y_-)) − F(x) − q_0(F(x), π_-F(x + q_0(x,y_-)))‖`
    /// over random interior samples whose images stay in `Ω`.
    pub b4: f64,
    /// Number of samples used for the invariance residual.
    pub b4_samples: usize,
}

/// Checks the foliation properties using the map `map` (the same map the
/// foliation was computed for).
pub fn foliation_properties(
    map: &MapModel,
    fol: &FoliationResult,
    samples: usize,
    seed: u64,
) -> Result<FoliationProperties, LpError> {
    let q0 = &fol.q.entries[0];
    let omega = q0.bounds().clone();
    let n = map.dim();
    let mut b1 = 0.0f64;
    let mut b2 = 0.0f64;
    for node in 0..q0.node_count() {
        let c = q0.node_coords(node);
        let q = q0.node_value(node);
        for (r, &s) in fol.stable.iter().enumerate() {
            b1 = b1.max((c[s] + q[s] - c[n + r]).abs());
        }
    }
    // (B2) at points with y_- = π_- x.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..samples {
        let mut p: Vec<f64> = (0..omega.dim())
            .map(|i| rng.gen_range(omega.lo[i]..=omega.hi[i]))
            .collect();
        for (r, &s) in fol.stable.iter().enumerate() {
            p[n + r] = p[s];
        }
        if !omega.contains(&p) {
            continue;
        }
        let h = fol.h.eval(&p)?;
        for (r, &u) in fol.unstable.iter().enumerate() {
            b2 = b2.max((h[r] - p[u]).abs());
        }
    }
    // (B3) on random pairs (x, y_-), (x, y') whose leaf point z stays in Ω.
    let mut b3 = 0.0f64;
    let mut b3_samples = 0;
    let mut tries = 0;
    while b3_samples < samples && tries < 200 * samples {
        tries += 1;
        let p: Vec<f64> = (0..omega.dim())
            .map(|i| rng.gen_range(omega.lo[i]..=omega.hi[i]))
            .collect();
        let q = q0.eval(&p)?;
        let y2: Vec<f64> = (n..omega.dim())
            .map(|i| rng.gen_range(omega.lo[i]..=omega.hi[i]))
            .collect();
        let mut pz: Vec<f64> = (0..n).map(|i| p[i] + q[i]).collect();
        pz.extend_from_slice(&y2);
        if !omega.contains(&pz) {
            continue;
        }
        b3_samples += 1;
        let mut px = p[..n].to_vec();
        px.extend_from_slice(&y2);
        let (hz, hx) = (fol.h.eval(&pz)?, fol.h.eval(&px)?);
        b3 = hz
            .iter()
            .zip(&hx)
            .fold(b3, |m, (a, b)| m.max((a - b).abs()));
    }
    let mut b4 = 0.0f64;
    let mut used = 0;
    let mut tries = 0;
    while used < samples && tries < 200 * samples {
        tries += 1;
        let p: Vec<f64> = (0..omega.dim())
            .map(|i| rng.gen_range(omega.lo[i]..=omega.hi[i]))
            .collect();
        let x = DVector::from_column_slice(&p[..n]);
        let q = DVector::from_vec(q0.eval(&p)?);
        let fx = map.eval(&x)?;
        let fxq = map.eval(&(&x + &q))?;
        let mut p2: Vec<f64> = fx.iter().copied().collect();
        p2.extend(fol.stable.iter().map(|&s| fxq[s]));
        if !omega.contains(&p2) {
            continue;
        }
        used += 1;
        let q2 = DVector::from_vec(q0.eval(&p2)?);
        b4 = b4.max((fxq - fx - q2).amax());
    }
    Ok(FoliationProperties {
        b1,
        b2,
        b3,
        b3_samples,
        b4,
        b4_samples: used,
    })
}

/// Maximum of `‖F^n(x + q_0) − F^n(x) − q_n‖∞` over random samples of `Ω` and
/// `n ≤ N`, with `q_n` interpolated from the grid.
pub fn verify_lp_equivalence(
    map: &MapModel,
    q: &SequenceFamily,
    samples: usize,
    seed: u64,
) -> Result<f64, LpError> {
    let omega = q.entries[0].bounds().clone();
    let n = map.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let p: Vec<f64> = (0..omega.dim())
            .map(|i| rng.gen_range(omega.lo[i]..=omega.hi[i]))
            .collect();
        let x = DVector::from_column_slice(&p[..n]);
        let q0 = DVector::from_vec(q.entries[0].eval(&p)?);
        let mut a = &x + &q0;
        let mut b = x.clone();
        for (k, qk) in q.entries.iter().enumerate() {
            if k > 0 {
                a = map.eval(&a)?;
                b = map.eval(&b)?;
            }
            let qn = DVector::from_vec(qk.eval(&p)?);
            worst = worst.max((&a - &b - qn).amax());
        }
    }
    Ok(worst)
}

/// Fitted Hölder exponent of `Dq_0` near the center of `Ω`, compared with a
/// predicted lower bound.
pub fn holder_check_dq0(
    fol: &FoliationResult,
    predicted: f64,
    seed: u64,
) -> Result<(HolderEstimate, f64), LpError> {
    let omega = fol.dq0.bounds();
    let center: Vec<f64> = omega
        .lo
        .iter()
        .zip(&omega.hi)
        .map(|(a, b)| 0.5 * (a + b))
        .collect();
    let radius = omega
        .lo
        .iter()
        .zip(&omega.hi)
        .map(|(a, b)| 0.5 * (b - a))
        .fold(f64::INFINITY, f64::min)
        * 0.9;
    let opts = HolderOptions::new(center, radius, seed);
    let est = holder_exponent(
        |p: &[f64]| fol.dq0.eval(p).map_err(VerifyError::from),
        &opts,
    )?;
    Ok((est.clone(), est.exponent - predicted))
}

/// Measured Lipschitz ratio of `T` between random families near `v*`
/// (diagnostic for the a-priori contraction factor).
pub fn measure_t_lipschitz(
    problem: &LpProblem,
    params: &LpParameters,
    x: &DVector<f64>,
    y: &DVector<f64>,
    pairs: usize,
    amplitude: f64,
    seed: u64,
) -> Result<f64, LpError> {
    let k = params.k_tail;
    let n = problem.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let weights: Vec<f64> = (0..=k).map(|i| params.gamma1.powi(i as i32)).collect();
    for _ in 0..pairs {
        let mut gen = || -> Vec<DVector<f64>> {
            (0..=k)
                .map(|i| {
                    DVector::from_fn(n, |_, _| rng.gen_range(-amplitude..=amplitude) * weights[i])
                })
                .collect()
        };
        let v = gen();
        let vt = gen();
        let tv = problem.operator_t_point(x, y, &v)?;
        let tvt = problem.operator_t_point(x, y, &vt)?;
        let num = (0..=k)
            .map(|i| (&tv[i] - &tvt[i]).amax() / weights[i])
            .fold(0.0, f64::max);
        let den = (0..=k)
            .map(|i| (&v[i] - &vt[i]).amax() / weights[i])
            .fold(0.0, f64::max);
        if den > 0.0 {
            worst = worst.max(num / den);
        }
    }
    Ok(worst)
}

/// Convenience: iterate a map `k` times (re-exported for residual checks).
pub fn iterate_map(map: &MapModel, x: &DVector<f64>, k: usize) -> Result<DVector<f64>, LpError> {
    Ok(iterate(map, x, k)?)
}
