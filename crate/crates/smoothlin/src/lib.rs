//! Numerical smooth linearization of maps near a hyperbolic fixed point.
//!
//! The toolkit checks the spectral band and gap conditions of a linear part,
//! evaluates the guaranteed Hölder exponent `β` of a `C^{1,β}` linearization,
//! constructs the conjugacy `Φ` with `Φ∘F = Λ∘Φ` from invariant foliations,
//! invariant graphs and iterate limits, and verifies the result empirically.
//!
//! Module map:
//! - [`spectral`]: band clustering, condition checks, adapted norms, block coordinates.
//! - [`exponents`]: closed-form Hölder exponents.
//! - [`dynamics`]: maps, iterates, grid functions, cutoffs.
//! - [`lp_foliation`]: Lyapunov–Perron solver and invariant foliations.
//! - [`chain`]: invertible transforms and their composition.
//! - [`linearize_contraction`]: the band-by-band cascade for contractions.
//! - [`linearize_hyperbolic`]: the full saddle pipeline.
//! - [`verify`]: residuals, Hölder estimation, diffeomorphism and sharpness checks.
//! - [`cli`]: configuration files, commands and reports.

pub mod chain;
pub mod cli;
pub mod dynamics;
pub mod exponents;
pub mod linearize_contraction;
pub mod linearize_hyperbolic;
pub mod lp_foliation;
pub mod spectral;
pub mod verify;
