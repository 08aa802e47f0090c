//! Maps, iterates, sampled functions and the smooth cutoff machinery.
//!
//! A [`MapModel`] bundles an evaluator with its derivative, its linear part
//! `Λ = DF(O)` and a domain box. Polynomial maps carry their exact symbolic
//! representation so later stages can compute Taylor jets. Maps are globalized
//! by [`bump_modify`], which multiplies the nonlinear part by a C^∞ radial
//! cutoff built from the kernel `q`.

mod bump;
mod grid;
mod map;
mod poly;

pub use bump::{
    bump_u, kernel_integral, kernel_q, smooth_step, smooth_step_derivative, RadialCutoff,
};
pub use grid::{BoxRegion, GridFunction, Interpolation};
pub use map::{
    bump_modify, fd_jacobian, iterate, iterate_derivative, sample_ball_sup, BumpModification,
    BumpModified, FnMap, InverseMap, MapEval, MapModel, PolyEval,
};
pub use poly::{monomials_of_degree, PolyMap, Polynomial};

use thiserror::Error;

/// Errors raised by map evaluation, iteration and grid handling.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum DynamicsError {
    /// A grid function was evaluated outside its box.
    #[error("point {point:?} lies outside the grid box [{lo:?}, {hi:?}]")]
    OutsideBox {
        /// The offending point.
        point: Vec<f64>,
        /// Lower box corner.
        lo: Vec<f64>,
        /// Upper box corner.
        hi: Vec<f64>,
    },
    /// An iterate left the map's domain box.
    #[error("iterate left the domain box at step {step}")]
    LeftDomain {
        /// Index of the first iterate outside the domain.
        step: usize,
    },
    /// Grid construction failed.
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    /// A value was NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),
    /// The map does not fix the origin.
    #[error("map does not fix the origin: |F(0)| = {0:e}")]
    NotFixed(f64),
    /// A user-supplied derivative disagrees with finite differences at the origin.
    #[error("supplied derivative disagrees with finite differences at the origin by {0:e}")]
    DerivativeMismatch(f64),
    /// The cutoff could not reach the requested smallness of `DF − Λ`.
    #[error("bump modification achieves eta = {achieved:e} > target {target:e}; shrink the radii")]
    EtaNotAchievable {
        /// Achieved supremum of `‖DF_mod − Λ‖`.
        achieved: f64,
        /// Requested bound.
        target: f64,
    },
    /// Invalid cutoff radii.
    #[error("invalid cutoff radii: {0}")]
    InvalidRadii(String),
    /// `u` is undefined at the origin.
    #[error("u is undefined at the origin")]
    OriginUndefined,
    /// Newton's method for the inverse map did not converge.
    #[error("inverse Newton iteration failed at {point:?} (residual {residual:e})")]
    InverseNewtonFailed {
        /// Target point.
        point: Vec<f64>,
        /// Final residual.
        residual: f64,
    },
    /// A linear system was singular.
    #[error("singular matrix: {0}")]
    Singular(String),
}
