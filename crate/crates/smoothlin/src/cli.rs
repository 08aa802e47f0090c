//! Batch front end: run configurations, the `analyze`, `foliate`,
//! `linearize`, `verify` and `sharpness` commands, and their reports.
//!
//! A configuration is a TOML document of `key = value` sections:
//!
//! ```toml
//! seed = 1
//! [map]
//! dim = 2
//! # coefficient, output index, exponents...
//! terms = [[0.5, 0, 1, 0], [1.0, 0, 1, 1], [2.0, 1, 0, 1]]
//! [grid]
//! report_radius = 0.01
//! ```
//!
//! or names a builtin (`[map] builtin = "saddle"`, or `--config builtin:saddle`
//! on the command line). Every value is validated before any computation.
//! Reports are `key = value` lines with floats printed to 17 significant
//! digits; the same configuration and seed give byte-identical reports.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use thiserror::Error;

use crate::chain::TransformChain;
use crate::dynamics::{bump_modify, BoxRegion, MapModel, PolyMap};
use crate::exponents::beta_overall;
use crate::linearize_contraction::{block_coordinates, ContractionParams};
use crate::linearize_hyperbolic::{linearize_hyperbolic, HyperbolicParams};
use crate::lp_foliation::{foliation_properties, stable_foliation, LpParameters, LpProblem};
use crate::spectral::{
    check_band_condition, check_dual_foliation_condition, check_foliation_condition,
    check_gap_condition, check_rs_condition, ConditionReport, LinearPart, Margins, SpectralBand,
    SpectrumDecomposition,
};
use crate::verify::{
    chain_derivative_holder, conjugacy_residual, diffeo_check, sharpness_experiment,
};

/// Exit status of a successful command.
pub const EXIT_OK: i32 = 0;
/// Exit status when a spectral condition fails (the theory does not apply).
pub const EXIT_CONDITION: i32 = 2;
/// Exit status of a numerical (solver) failure.
pub const EXIT_NUMERICAL: i32 = 3;
/// Exit status of a configuration error.
pub const EXIT_CONFIG: i32 = 4;

/// Margin of the lower-bound check `measured ≥ β − margin`.
pub const HOLDER_MARGIN: f64 = 0.1;

/// Names of the builtin configurations.
pub const BUILTINS: &[&str] = &[
    "dyadic_bands",
    "gap_without_rs",
    "clustered_gap",
    "linear1",
    "planar",
    "saddle",
    "saddle_quadratic",
];

/// Configuration errors.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ConfigError {
    /// The text is not valid TOML or has unknown keys or wrong types.
    #[error("line {line}, column {column}: {message}")]
    Parse {
        /// 1-based line.
        line: usize,
        /// 1-based column.
        column: usize,
        /// Parser message.
        message: String,
    },
    /// A value failed validation.
    #[error("field `{field}`: {message}")]
    Field {
        /// Dotted field name.
        field: String,
        /// What is wrong.
        message: String,
    },
    /// Unknown builtin name.
    #[error("unknown builtin `{0}` (known: dyadic_bands, gap_without_rs, clustered_gap, linear1, planar, saddle, saddle_quadratic)")]
    UnknownBuiltin(String),
    /// The configuration file cannot be read.
    #[error("cannot read {path}: {message}")]
    Read {
        /// Path.
        path: String,
        /// OS message.
        message: String,
    },
}

fn field(name: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field {
        field: name.to_string(),
        message: message.into(),
    }
}

/// Command failures, each with its exit status.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum CliError {
    /// Invalid configuration.
    #[error("configuration error: {0}")]
    Config(#[from] ConfigError),
    /// A spectral condition fails.
    #[error("condition failure: {0}")]
    Condition(String),
    /// A solver failed (the message carries the phase label).
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Output could not be written.
    #[error("cannot write {path}: {message}")]
    Output {
        /// Path.
        path: String,
        /// OS message.
        message: String,
    },
}

impl CliError {
    /// The process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Condition(_) => EXIT_CONDITION,
            Self::Numerical(_) | Self::Output { .. } => EXIT_NUMERICAL,
        }
    }
}

fn numerical(e: impl std::fmt::Display) -> CliError {
    CliError::Numerical(e.to_string())
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    #[serde(default)]
    map: RawMap,
    #[serde(default)]
    spectrum: RawSpectrum,
    #[serde(default)]
    analysis: RawAnalysis,
    #[serde(default)]
    cutoff: RawCutoff,
    #[serde(default)]
    lp: RawLp,
    #[serde(default)]
    cascade: RawCascade,
    #[serde(default)]
    grid: RawGrid,
    sharpness: Option<RawSharpness>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMap {
    builtin: Option<String>,
    dim: Option<usize>,
    terms: Option<Vec<Vec<f64>>>,
    matrix: Option<Vec<Vec<f64>>>,
    domain: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSpectrum {
    bands: Option<Vec<Vec<f64>>>,
    gap_threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawAnalysis {
    epsilon: Option<f64>,
    delta: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCutoff {
    r0: Option<f64>,
    r1: Option<f64>,
    eta_target: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum RawGamma {
    Value(f64),
    Word(String),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLp {
    gamma1: Option<RawGamma>,
    gamma2: Option<RawGamma>,
    n: Option<usize>,
    k_tail: Option<usize>,
    tol: Option<f64>,
    max_iter: Option<usize>,
    omega_radius: Option<f64>,
    resolution: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawCascade {
    kmax: Option<usize>,
    tol: Option<f64>,
    resolution: Option<usize>,
    jet_order: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    report_radius: Option<f64>,
    psi_resolution: Option<usize>,
    manifold_resolution: Option<usize>,
    check_samples: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSharpness {
    parameters: Vec<f64>,
    terms: Vec<Vec<f64>>,
    radius: Option<f64>,
}

/// One polynomial term `c · x^e` of output component `out`.
pub type Term = (f64, Vec<u32>, usize);

/// How the map is given.
#[derive(Clone, Debug, PartialEq)]
pub enum MapSpec {
    /// Polynomial terms.
    Polynomial {
        /// Dimension.
        dim: usize,
        /// Terms.
        terms: Vec<Term>,
    },
    /// A linear map.
    Matrix(DMatrix<f64>),
}

/// Cutoff radii (`None`: pipeline defaults) and the `η` ceiling.
#[derive(Clone, Debug, PartialEq)]
pub struct CutoffConfig {
    /// Inner radius.
    pub r0: Option<f64>,
    /// Outer radius.
    pub r1: Option<f64>,
    /// Largest acceptable `η`.
    pub eta_target: f64,
}

/// Lyapunov–Perron settings.
#[derive(Clone, Debug, PartialEq)]
pub struct LpConfig {
    /// Explicit `(γ₁, γ₂)`; `None` selects the geometric midpoints.
    pub gammas: Option<(f64, f64)>,
    /// Sequence length `N`.
    pub n_seq: usize,
    /// Tail truncation `K`.
    pub k_tail: usize,
    /// Picard tolerance.
    pub tol: f64,
    /// Picard iteration cap.
    pub max_iter: usize,
    /// Sup-radius of `Ω` for `foliate`.
    pub omega_radius: f64,
    /// Grid nodes per axis of `Ω` for `foliate`.
    pub resolution: usize,
}

/// Contraction-cascade settings.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeConfig {
    /// Iteration cap override.
    pub kmax: Option<usize>,
    /// Tolerance.
    pub tol: f64,
    /// Grid nodes per axis.
    pub resolution: usize,
    /// Taylor order of invariant-graph jets.
    pub jet_order: u32,
}

/// Grid and sampling settings.
#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    /// Sup-radius of the reporting box.
    pub report_radius: f64,
    /// Grid nodes per axis of `Ψ`.
    pub psi_resolution: usize,
    /// Grid nodes per axis of the manifold graphs.
    pub manifold_resolution: usize,
    /// Samples of the residual checks.
    pub check_samples: usize,
}

/// A one-parameter family `F_p = F + p · (terms)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SharpnessConfig {
    /// Parameter values.
    pub parameters: Vec<f64>,
    /// Terms scaled by the parameter.
    pub terms: Vec<Term>,
    /// Radius of the Hölder measurement ball.
    pub radius: f64,
}

/// A validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    /// Builtin name, if any.
    pub builtin: Option<String>,
    /// The map.
    pub map: MapSpec,
    /// Domain half-width of polynomial maps.
    pub domain: f64,
    /// Explicit spectral bands (otherwise clustered from the linear part).
    pub bands: Option<Vec<(f64, f64)>>,
    /// Relative gap threshold of the clustering.
    pub gap_threshold: f64,
    /// The `ε` of the exponent formulas.
    pub epsilon: f64,
    /// Margin `δ` of the conditions (`None`: exact envelopes).
    pub delta: Option<f64>,
    /// Cutoff settings.
    pub cutoff: CutoffConfig,
    /// Lyapunov–Perron settings.
    pub lp: LpConfig,
    /// Cascade settings.
    pub cascade: CascadeConfig,
    /// Grid settings.
    pub grid: GridConfig,
    /// Sharpness family.
    pub sharpness: Option<SharpnessConfig>,
    /// Seed of all sampled checks.
    pub seed: u64,
}

fn builtin_text(name: &str) -> Result<&'static str, ConfigError> {
    Ok(match name {
        "dyadic_bands" => {
            "[map]\nmatrix = [[0.063500, 0, 0, 0, 0, 0], [0, 0.125, 0, 0, 0, 0], [0, 0, 0.126, 0, 0, 0], \
             [0, 0, 0, 0.25, 0, 0], [0, 0, 0, 0, 0.251, 0], [0, 0, 0, 0, 0, 0.5]]\n\
             [spectrum]\nbands = [[0.0635, 0.125], [0.126, 0.25], [0.251, 0.5]]\n"
        }
        "gap_without_rs" => {
            "[map]\nmatrix = [[0.1, 0, 0, 0, 0, 0], [0, 0.16666666666666666, 0, 0, 0, 0], [0, 0, 2, 0, 0, 0], \
             [0, 0, 0, 3, 0, 0], [0, 0, 0, 0, 9, 0], [0, 0, 0, 0, 0, 10]]\n\
             [spectrum]\nbands = [[0.1, 0.16666666666666666], [2, 3], [9, 10]]\n"
        }
        "clustered_gap" => {
            "[map]\nmatrix = [[0.1, 0, 0, 0, 0], [0, 0.16666666666666666, 0, 0, 0], [0, 0, 2, 0, 0], \
             [0, 0, 0, 5, 0], [0, 0, 0, 0, 10]]\n"
        }
        "linear1" => "[map]\nmatrix = [[0.5]]\n",
        "planar" => "[map]\ndim = 2\nterms = [[0.2, 0, 1, 0], [1.0, 0, 0, 2], [0.5, 1, 0, 1]]\n[grid]\nreport_radius = 0.02\n",
        "saddle" => "[map]\ndim = 2\nterms = [[0.5, 0, 1, 0], [1.0, 0, 1, 1], [2.0, 1, 0, 1]]\n",
        "saddle_quadratic" => "[map]\ndim = 2\nterms = [[0.5, 0, 1, 0], [1.0, 0, 0, 2], [2.0, 1, 0, 1]]\n",
        other => return Err(ConfigError::UnknownBuiltin(other.to_string())),
    })
}

fn parse_raw(text: &str) -> Result<RawConfig, ConfigError> {
    toml::from_str(text).map_err(|e| {
        let (line, column) = match e.span() {
            Some(span) => {
                let before = &text[..span.start.min(text.len())];
                let line = before.matches('\n').count() + 1;
                let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
                (line, column)
            }
            None => (0, 0),
        };
        ConfigError::Parse {
            line,
            column,
            message: e.message().to_string(),
        }
    })
}

fn parse_terms(name: &str, rows: &[Vec<f64>], dim: usize) -> Result<Vec<Term>, ConfigError> {
    rows.iter()
        .enumerate()
        .map(|(k, row)| {
            let f = format!("{name}[{k}]");
            if row.len() != dim + 2 {
                return Err(field(
                    &f,
                    format!("expected coefficient, output index and {dim} exponents"),
                ));
            }
            let int = |v: f64, what: &str| {
                if v >= 0.0 && v.fract() == 0.0 && v < 64.0 {
                    Ok(v as usize)
                } else {
                    Err(field(
                        &f,
                        format!("{what} must be a small non-negative integer, got {v}"),
                    ))
                }
            };
            let out = int(row[1], "output index")?;
            if out >= dim {
                return Err(field(&f, format!("output index {out} >= dimension {dim}")));
            }
            let exps = row[2..]
                .iter()
                .map(|&e| int(e, "exponent").map(|e| e as u32))
                .collect::<Result<Vec<_>, _>>()?;
            if !row[0].is_finite() {
                return Err(field(&f, "coefficient must be finite"));
            }
            Ok((row[0], exps, out))
        })
        .collect()
}

fn positive(name: &str, v: f64) -> Result<f64, ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(field(name, format!("must be positive and finite, got {v}")))
    }
}

fn at_least(name: &str, v: usize, min: usize) -> Result<usize, ConfigError> {
    if v >= min {
        Ok(v)
    } else {
        Err(field(name, format!("must be at least {min}, got {v}")))
    }
}

impl RunConfig {
    /// Parses and validates a configuration text. A `[map] builtin` entry
    /// supplies the builtin's settings; explicit sections override them.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let raw = parse_raw(text)?;
        let base = match &raw.map.builtin {
            Some(name) => Some(parse_raw(builtin_text(name)?)?),
            None => None,
        };
        Self::validate(raw, base)
    }

    /// The builtin configuration `name`.
    pub fn builtin(name: &str) -> Result<Self, ConfigError> {
        Self::parse(&format!("[map]\nbuiltin = \"{name}\"\n"))
    }

    /// Loads `builtin:<name>` or a configuration file.
    pub fn load(spec: &str) -> Result<Self, ConfigError> {
        if let Some(name) = spec.strip_prefix("builtin:") {
            return Self::builtin(name);
        }
        let text = fs::read_to_string(spec).map_err(|e| ConfigError::Read {
            path: spec.to_string(),
            message: e.to_string(),
        })?;
        Self::parse(&text)
    }

    fn validate(raw: RawConfig, base: Option<RawConfig>) -> Result<Self, ConfigError> {
        let base = base.unwrap_or_default();
        macro_rules! pick {
            ($sec:ident . $key:ident) => {
                raw.$sec.$key.clone().or(base.$sec.$key.clone())
            };
        }
        let builtin = raw.map.builtin.clone();
        let (terms, matrix) = if raw.map.terms.is_some() || raw.map.matrix.is_some() {
            (raw.map.terms.clone(), raw.map.matrix.clone())
        } else {
            (base.map.terms.clone(), base.map.matrix.clone())
        };
        let map = match (terms, matrix) {
            (Some(_), Some(_)) => {
                return Err(field("map", "give either terms or matrix, not both"))
            }
            (None, None) => return Err(field("map", "a builtin, terms or matrix is required")),
            (Some(rows), None) => {
                let dim = pick!(map.dim).ok_or_else(|| field("map.dim", "required with terms"))?;
                let dim = at_least("map.dim", dim, 1)?;
                let terms = parse_terms("map.terms", &rows, dim)?;
                for (k, (_, e, _)) in terms.iter().enumerate() {
                    if e.iter().sum::<u32>() == 0 {
                        return Err(field(
                            &format!("map.terms[{k}]"),
                            "constant terms would move the fixed point",
                        ));
                    }
                }
                MapSpec::Polynomial { dim, terms }
            }
            (None, Some(rows)) => {
                let n = rows.len();
                if n == 0 || rows.iter().any(|r| r.len() != n) {
                    return Err(field("map.matrix", "must be a non-empty square matrix"));
                }
                if rows.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(field("map.matrix", "entries must be finite"));
                }
                MapSpec::Matrix(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
            }
        };
        let dim = match &map {
            MapSpec::Polynomial { dim, .. } => *dim,
            MapSpec::Matrix(m) => m.nrows(),
        };
        let domain = positive("map.domain", pick!(map.domain).unwrap_or(1.0))?;
        let bands = match pick!(spectrum.bands) {
            Some(rows) => {
                let mut out = Vec::with_capacity(rows.len());
                for (k, r) in rows.iter().enumerate() {
                    let f = format!("spectrum.bands[{k}]");
                    if r.len() != 2 || !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                        return Err(field(&f, "expected [lambda_minus, lambda_plus] with 0 < lambda_minus <= lambda_plus"));
                    }
                    out.push((r[0], r[1]));
                }
                SpectrumDecomposition::from_bands(
                    out.iter().map(|&(a, b)| SpectralBand::new(a, b)).collect(),
                )
                .map_err(|e| field("spectrum.bands", e.to_string()))?;
                Some(out)
            }
            None => None,
        };
        let gap_threshold = positive(
            "spectrum.gap_threshold",
            pick!(spectrum.gap_threshold).unwrap_or(0.2),
        )?;
        let epsilon = pick!(analysis.epsilon).unwrap_or(1e-3);
        if !(epsilon.is_finite() && epsilon >= 0.0) {
            return Err(field("analysis.epsilon", "must be finite and non-negative"));
        }
        let delta = pick!(analysis.delta)
            .map(|d| positive("analysis.delta", d))
            .transpose()?;
        let r0 = pick!(cutoff.r0)
            .map(|v| positive("cutoff.r0", v))
            .transpose()?;
        let r1 = pick!(cutoff.r1)
            .map(|v| positive("cutoff.r1", v))
            .transpose()?;
        if let (Some(a), Some(b)) = (r0, r1) {
            if a >= b {
                return Err(field("cutoff.r1", "must exceed cutoff.r0"));
            }
        }
        let eta_target = positive("cutoff.eta_target", pick!(cutoff.eta_target).unwrap_or(1.0))?;
        let gamma = |name: &str, g: Option<RawGamma>| -> Result<Option<f64>, ConfigError> {
            match g {
                None => Ok(None),
                Some(RawGamma::Word(w)) if w == "auto" => Ok(None),
                Some(RawGamma::Word(w)) => Err(field(
                    name,
                    format!("expected a number or \"auto\", got \"{w}\""),
                )),
                Some(RawGamma::Value(v)) => positive(name, v).map(Some),
            }
        };
        let g1 = gamma("lp.gamma1", raw.lp.gamma1.or(base.lp.gamma1))?;
        let g2 = gamma("lp.gamma2", raw.lp.gamma2.or(base.lp.gamma2))?;
        let gammas = match (g1, g2) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(field("lp.gamma2", "set both weights or leave both on auto")),
        };
        let n_seq = at_least("lp.n", raw.lp.n.or(base.lp.n).unwrap_or(8), 1)?;
        let k_tail = at_least(
            "lp.k_tail",
            raw.lp.k_tail.or(base.lp.k_tail).unwrap_or(32),
            n_seq,
        )?;
        let lp = LpConfig {
            gammas,
            n_seq,
            k_tail,
            tol: positive("lp.tol", raw.lp.tol.or(base.lp.tol).unwrap_or(1e-11))?,
            max_iter: at_least(
                "lp.max_iter",
                raw.lp.max_iter.or(base.lp.max_iter).unwrap_or(400),
                1,
            )?,
            omega_radius: positive(
                "lp.omega_radius",
                raw.lp.omega_radius.or(base.lp.omega_radius).unwrap_or(0.01),
            )?,
            resolution: at_least(
                "lp.resolution",
                raw.lp.resolution.or(base.lp.resolution).unwrap_or(9),
                3,
            )?,
        };
        let cascade = CascadeConfig {
            kmax: pick!(cascade.kmax),
            tol: positive("cascade.tol", pick!(cascade.tol).unwrap_or(1e-12))?,
            resolution: at_least(
                "cascade.resolution",
                pick!(cascade.resolution).unwrap_or(33),
                3,
            )?,
            jet_order: pick!(cascade.jet_order).unwrap_or(10),
        };
        let grid = GridConfig {
            report_radius: positive(
                "grid.report_radius",
                pick!(grid.report_radius).unwrap_or(0.01),
            )?,
            psi_resolution: at_least(
                "grid.psi_resolution",
                pick!(grid.psi_resolution).unwrap_or(33),
                3,
            )?,
            manifold_resolution: at_least(
                "grid.manifold_resolution",
                pick!(grid.manifold_resolution).unwrap_or(65),
                3,
            )?,
            check_samples: at_least(
                "grid.check_samples",
                pick!(grid.check_samples).unwrap_or(200),
                1,
            )?,
        };
        let sharpness = match raw.sharpness.or(base.sharpness) {
            None => None,
            Some(s) => {
                if !matches!(map, MapSpec::Polynomial { .. }) {
                    return Err(field("sharpness", "needs a map given by polynomial terms"));
                }
                if s.parameters.is_empty() || s.parameters.iter().any(|p| !p.is_finite()) {
                    return Err(field(
                        "sharpness.parameters",
                        "must be a non-empty list of finite numbers",
                    ));
                }
                Some(SharpnessConfig {
                    parameters: s.parameters,
                    terms: parse_terms("sharpness.terms", &s.terms, dim)?,
                    radius: positive("sharpness.radius", s.radius.unwrap_or(0.02))?,
                })
            }
        };
        Ok(Self {
            builtin,
            map,
            domain,
            bands,
            gap_threshold,
            epsilon,
            delta,
            cutoff: CutoffConfig { r0, r1, eta_target },
            lp,
            cascade,
            grid,
            sharpness,
            seed: raw.seed.or(base.seed).unwrap_or(1),
        })
    }

    /// Dimension of the map.
    pub fn dim(&self) -> usize {
        match &self.map {
            MapSpec::Polynomial { dim, .. } => *dim,
            MapSpec::Matrix(m) => m.nrows(),
        }
    }

    /// The map model, optionally with extra terms scaled by `p`.
    pub fn map_model(&self, extra: Option<(f64, &[Term])>) -> Result<MapModel, CliError> {
        match &self.map {
            MapSpec::Matrix(m) => Ok(MapModel::linear(m.clone())),
            MapSpec::Polynomial { dim, terms } => {
                let mut all = terms.clone();
                if let Some((p, more)) = extra {
                    all.extend(more.iter().map(|(c, e, o)| (c * p, e.clone(), *o)));
                }
                MapModel::polynomial(
                    PolyMap::from_terms(*dim, &all),
                    BoxRegion::symmetric(*dim, self.domain),
                )
                .map_err(|e| field("map", e.to_string()).into())
            }
        }
    }

    /// The linear part with the configured or clustered spectrum.
    pub fn linear_part(&self, map: &MapModel) -> Result<LinearPart, CliError> {
        let lam = map.linear_part();
        match &self.bands {
            Some(b) => {
                let dec = SpectrumDecomposition::from_bands(
                    b.iter().map(|&(a, c)| SpectralBand::new(a, c)).collect(),
                )
                .map_err(|e| field("spectrum.bands", e.to_string()))?;
                LinearPart::from_matrix_and_bands(lam, dec)
                    .map_err(|e| field("spectrum.bands", e.to_string()).into())
            }
            None => LinearPart::from_matrix(lam, self.gap_threshold, 1e-9)
                .map_err(|e| CliError::Condition(e.to_string())),
        }
    }

    fn margins(&self, dec: &SpectrumDecomposition) -> Result<Margins, CliError> {
        match self.delta {
            Some(d) => {
                Margins::new(dec, d).map_err(|e| field("analysis.delta", e.to_string()).into())
            }
            None => Ok(Margins::exact(dec)),
        }
    }

    fn hyperbolic_params(&self, seed: u64) -> HyperbolicParams {
        HyperbolicParams {
            report_radius: self.grid.report_radius,
            r0: self.cutoff.r0,
            r1: self.cutoff.r1,
            eta_target: self.cutoff.eta_target,
            manifold_resolution: self.grid.manifold_resolution,
            psi_resolution: self.grid.psi_resolution,
            k_tail: Some(self.lp.k_tail),
            lp_tol: self.lp.tol.min(1e-12),
            lp_max_iter: self.lp.max_iter,
            contraction: ContractionParams {
                report_radius: self.grid.report_radius,
                resolution: self.cascade.resolution,
                tol: self.cascade.tol,
                kmax: self.cascade.kmax,
                jet_order: self.cascade.jet_order,
                check_samples: self.grid.check_samples,
                seed,
                ..ContractionParams::default()
            },
            check_samples: self.grid.check_samples,
            seed,
            ..HyperbolicParams::default()
        }
    }
}

/// A `key = value` report with deterministic formatting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    lines: Vec<(String, String)>,
}

impl Report {
    /// Adds a float with 17 significant digits.
    pub fn num(&mut self, key: impl Into<String>, v: f64) {
        self.lines.push((key.into(), format!("{v:.16e}")));
    }

    /// Adds an integer.
    pub fn int(&mut self, key: impl Into<String>, v: usize) {
        self.lines.push((key.into(), v.to_string()));
    }

    /// Adds a text value.
    pub fn text(&mut self, key: impl Into<String>, v: impl Into<String>) {
        self.lines.push((key.into(), v.into()));
    }

    /// Adds `pass`/`fail`.
    pub fn flag(&mut self, key: impl Into<String>, v: bool) {
        self.text(key, if v { "pass" } else { "fail" });
    }

    /// Value of `key`, if present.
    pub fn get(&self, key: &str) -> Option<&str> {
        self.lines
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    /// All lines.
    pub fn lines(&self) -> &[(String, String)] {
        &self.lines
    }

    /// The report text.
    pub fn render(&self) -> String {
        self.lines
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

/// Result of a command: its report and exit status.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    /// The report written to `report.txt`.
    pub report: Report,
    /// Exit status.
    pub status: i32,
}

/// The commands.
#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    /// Spectrum, conditions and exponents.
    Analyze,
    /// Stable foliation by the Lyapunov–Perron solver.
    Foliate,
    /// Conjugacy construction and chain export.
    Linearize,
    /// Checks of a previously exported chain (default `<out>/chain`).
    Verify {
        /// Chain directory.
        chain: Option<PathBuf>,
    },
    /// Hölder exponents of `DΦ` over a parameter family.
    Sharpness,
}

impl Command {
    /// Command name.
    pub fn name(&self) -> &'static str {
        match self {
            Self::Analyze => "analyze",
            Self::Foliate => "foliate",
            Self::Linearize => "linearize",
            Self::Verify { .. } => "verify",
            Self::Sharpness => "sharpness",
        }
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for r in rows {
        w.write_record(r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Output {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Runs `command` with `config`, writing `report.txt` (and tables) to `out`.
/// The report is written for condition failures too; the returned status is
/// then [`EXIT_CONDITION`].
pub fn run(
    command: &Command,
    config: &RunConfig,
    out: &Path,
    seed: Option<u64>,
) -> Result<Outcome, CliError> {
    fs::create_dir_all(out).map_err(|e| CliError::Output {
        path: out.display().to_string(),
        message: e.to_string(),
    })?;
    let seed = seed.unwrap_or(config.seed);
    let mut report = Report::default();
    report.text("command", command.name());
    report.text("config", config.builtin.as_deref().unwrap_or("file"));
    report.int("seed", seed as usize);
    let status = match command {
        Command::Analyze => analyze(config, &mut report)?,
        Command::Foliate => foliate(config, out, seed, &mut report)?,
        Command::Linearize => linearize(config, out, seed, &mut report)?,
        Command::Verify { chain } => {
            let dir = chain.clone().unwrap_or_else(|| out.join("chain"));
            verify(config, &dir, seed, &mut report)?
        }
        Command::Sharpness => sharpness(config, out, seed, &mut report)?,
    };
    report.int("exit_status", status as usize);
    write_file(&out.join("report.txt"), &report.render())?;
    Ok(Outcome { report, status })
}

/// The `analyze` report without touching the file system (for embedding).
pub fn analyze_report(config: &RunConfig) -> Result<Outcome, CliError> {
    let mut report = Report::default();
    report.text("command", Command::Analyze.name());
    report.text("config", config.builtin.as_deref().unwrap_or("file"));
    report.int("seed", config.seed as usize);
    let status = analyze(config, &mut report)?;
    report.int("exit_status", status as usize);
    Ok(Outcome { report, status })
}

fn condition_lines(report: &mut Report, c: &ConditionReport) {
    report.flag(c.name, c.holds());
    report.num(format!("{}_min_slack", c.name), c.min_slack());
}

/// Writes the spectrum, conditions and exponents; returns whether the
/// conditions required by the construction hold (band condition, and the gap
/// condition for mixed spectra).
fn analysis(config: &RunConfig, lin: &LinearPart, report: &mut Report) -> Result<bool, CliError> {
    let dec = &lin.decomposition;
    report.int("dimension", lin.dim());
    report.int("bands", dec.m());
    report.int("contractive_bands", dec.d());
    for (i, b) in dec.bands().iter().enumerate() {
        report.num(format!("band{}_lambda_minus", i + 1), b.lambda_minus);
        report.num(format!("band{}_lambda_plus", i + 1), b.lambda_plus);
    }
    let margins = config.margins(dec)?;
    let band = check_band_condition(dec);
    condition_lines(report, &band);
    let mut ok = band.holds();
    if dec.is_mixed() {
        let gap = check_gap_condition(dec, &margins).map_err(numerical)?;
        condition_lines(report, &gap);
        ok &= gap.holds();
        condition_lines(report, &check_rs_condition(dec).map_err(numerical)?);
        condition_lines(
            report,
            &check_foliation_condition(dec, &margins).map_err(numerical)?,
        );
        condition_lines(
            report,
            &check_dual_foliation_condition(dec, &margins).map_err(numerical)?,
        );
    }
    report.flag("conditions", ok);
    if ok {
        // Exponents may be non-positive when the condition slack is below ε;
        // that is reported, not fatal: the conditions themselves still hold.
        match beta_overall(dec, config.epsilon) {
            Ok(ex) => {
                for (k, v) in ex.key_values() {
                    report.text(k, v);
                }
            }
            Err(e) => report.text("exponents_error", e.to_string()),
        }
    }
    Ok(ok)
}

fn analyze(config: &RunConfig, report: &mut Report) -> Result<i32, CliError> {
    let map = config.map_model(None)?;
    let lin = config.linear_part(&map)?;
    Ok(if analysis(config, &lin, report)? {
        EXIT_OK
    } else {
        EXIT_CONDITION
    })
}

fn foliate(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    report: &mut Report,
) -> Result<i32, CliError> {
    let map = config.map_model(None)?;
    let lin = config.linear_part(&map)?;
    if !analysis(config, &lin, report)? {
        return Ok(EXIT_CONDITION);
    }
    let dec = &lin.decomposition;
    if !dec.is_mixed() {
        report.text(
            "foliate_error",
            "the foliation needs both contracting and expanding bands",
        );
        return Ok(EXIT_CONDITION);
    }
    let n = lin.dim();
    let g = block_coordinates(&map, &lin).map_err(numerical)?;
    let g = g.with_domain(BoxRegion::symmetric(n, config.domain));
    let r0 = config.cutoff.r0.unwrap_or(2.0 * config.lp.omega_radius);
    let r1 = config.cutoff.r1.unwrap_or(2.0 * r0);
    let (gmod, bump) = bump_modify(&g, r0, r1, config.cutoff.eta_target)
        .map_err(|e| numerical(format!("cutoff: {e}")))?;
    let b = dec.bands();
    let (sp, um, up) = (
        b[dec.d() - 1].lambda_plus,
        b[dec.d()].lambda_minus,
        b[dec.m() - 1].lambda_plus,
    );
    let mut params = match config.lp.gammas {
        None => LpParameters::auto(sp, um, up).map_err(|e| numerical(format!("weights: {e}")))?,
        Some((gamma1, gamma2)) => LpParameters {
            gamma1,
            gamma2,
            ..LpParameters::auto(sp, um, up).map_err(numerical)?
        },
    };
    params.n_seq = config.lp.n_seq;
    params.k_tail = config.lp.k_tail;
    params.tol = config.lp.tol;
    params.max_iter = config.lp.max_iter;
    params
        .validate(sp, um, up)
        .map_err(|e| field("lp", e.to_string()))?;
    let (s, u) = (lin.stable_indices(), lin.unstable_indices());
    let ns = s.len();
    let problem = LpProblem::new(gmod.clone(), s, u, bump.eta).map_err(numerical)?;
    let omega = BoxRegion::symmetric(n + ns, config.lp.omega_radius);
    let res = vec![config.lp.resolution; n + ns];
    let fol = stable_foliation(&problem, &params, &omega, &res)
        .map_err(|e| numerical(format!("foliation: {e}")))?;
    let props =
        foliation_properties(&gmod, &fol, config.grid.check_samples, seed).map_err(numerical)?;
    report.num("cutoff_r0", r0);
    report.num("cutoff_r1", r1);
    report.num("eta", bump.eta);
    report.num("gamma1", params.gamma1);
    report.num("gamma2", params.gamma2);
    report.int("n_seq", params.n_seq);
    report.int("k_tail", params.k_tail);
    report.num("contraction_factor", fol.log.factor);
    report.int("picard_iterations", fol.log.iterations());
    report.num("tail_bound", fol.tail_bound);
    report.num("derivative_check", fol.derivative_check);
    report.num("b1_residual", props.b1);
    report.num("b2_residual", props.b2);
    report.num("b3_residual", props.b3);
    report.int("b3_samples", props.b3_samples);
    report.num("b4_residual", props.b4);
    report.int("b4_samples", props.b4_samples);
    let h = &fol.h;
    let mut header: Vec<String> = (0..n).map(|i| format!("x{}", i + 1)).collect();
    header.extend((0..ns).map(|i| format!("y{}", i + 1)));
    header.extend((0..h.codim()).map(|i| format!("h{}", i + 1)));
    let rows: Vec<Vec<String>> = (0..h.node_count())
        .map(|k| {
            h.node_coords(k)
                .into_iter()
                .chain(h.node_value(k).iter().copied())
                .map(fmt)
                .collect()
        })
        .collect();
    write_csv(
        &out.join("foliation.csv"),
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        &rows,
    )?;
    let log_rows: Vec<Vec<String>> = fol
        .log
        .combined()
        .iter()
        .enumerate()
        .map(|(i, _)| {
            let dv = fol.log.delta_v.get(i).copied().unwrap_or(0.0);
            let dw = fol.log.delta_w.get(i).copied().unwrap_or(0.0);
            vec![(i + 1).to_string(), fmt(dv), fmt(dw), fmt(fol.log.factor)]
        })
        .collect();
    write_csv(
        &out.join("convergence.csv"),
        &["iteration", "delta_v", "delta_w", "factor"],
        &log_rows,
    )?;
    Ok(EXIT_OK)
}

fn tensor_points(n: usize, r: f64, per_axis: usize) -> Vec<DVector<f64>> {
    let total = per_axis.pow(n as u32);
    (0..total)
        .map(|mut k| {
            DVector::from_fn(n, |_, _| {
                let i = k % per_axis;
                k /= per_axis;
                -r + 2.0 * r * i as f64 / (per_axis - 1) as f64
            })
        })
        .collect()
}

fn linearize(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    report: &mut Report,
) -> Result<i32, CliError> {
    let map = config.map_model(None)?;
    let lin = config.linear_part(&map)?;
    if !analysis(config, &lin, report)? {
        return Ok(EXIT_CONDITION);
    }
    let res =
        linearize_hyperbolic(&map, &lin, &config.hyperbolic_params(seed)).map_err(numerical)?;
    report.text("route", res.report.route.name());
    for (k, v) in res.report.key_values() {
        report.num(k, v);
    }
    res.chain
        .export(&out.join("chain"))
        .map_err(|e| CliError::Output {
            path: out.join("chain").display().to_string(),
            message: e.to_string(),
        })?;
    let n = map.dim();
    let per_axis = if n <= 2 {
        21
    } else if n <= 4 {
        5
    } else {
        3
    };
    let r = res.report.report_box.radius();
    let mut rows = Vec::new();
    for x in tensor_points(n, r, per_axis) {
        let y = res.chain.forward(&x).map_err(numerical)?;
        rows.push(x.iter().chain(y.iter()).copied().map(fmt).collect());
    }
    let mut header: Vec<String> = (0..n).map(|i| format!("x{}", i + 1)).collect();
    header.extend((0..n).map(|i| format!("phi{}", i + 1)));
    write_csv(
        &out.join("phi.csv"),
        &header.iter().map(String::as_str).collect::<Vec<_>>(),
        &rows,
    )?;
    Ok(EXIT_OK)
}

fn verify(
    config: &RunConfig,
    chain_dir: &Path,
    seed: u64,
    report: &mut Report,
) -> Result<i32, CliError> {
    let map = config.map_model(None)?;
    let lin = config.linear_part(&map)?;
    let ok = analysis(config, &lin, report)?;
    let chain = TransformChain::import(chain_dir).map_err(|e| ConfigError::Read {
        path: chain_dir.display().to_string(),
        message: e.to_string(),
    })?;
    if chain.dim() != map.dim() {
        return Err(field(
            "map",
            format!(
                "chain dimension {} differs from map dimension {}",
                chain.dim(),
                map.dim()
            ),
        )
        .into());
    }
    let r = config.grid.report_radius;
    let region = BoxRegion::symmetric(map.dim(), r);
    let res = conjugacy_residual(
        &map,
        &chain,
        &lin.lambda,
        &region,
        config.grid.check_samples,
        seed,
    )
    .map_err(numerical)?;
    report.num("conjugacy_residual_max", res.max);
    report.num("conjugacy_residual_mean", res.mean);
    report.num("inverse_residual_max", res.inverse_max);
    report.int("conjugacy_samples", res.samples);
    let d = diffeo_check(&chain, &region, config.grid.check_samples.min(100), seed)
        .map_err(numerical)?;
    report.num("diffeo_inverse_residual", d.inverse_residual);
    report.num("diffeo_derivative_residual", d.derivative_residual);
    report.num("diffeo_min_singular_value", d.min_singular_value);
    let est = chain_derivative_holder(&chain, &vec![0.0; map.dim()], r, seed).map_err(numerical)?;
    report.num("dphi_holder_exponent", est.exponent);
    report.num("dphi_holder_r_squared", est.r_squared);
    report.text(
        "dphi_holder_flat",
        if est.insufficient_variation {
            "true"
        } else {
            "false"
        },
    );
    if let (true, Ok(ex)) = (ok, beta_overall(&lin.decomposition, config.epsilon)) {
        report.flag(
            "holder_lower_bound",
            est.exponent >= ex.beta_overall - HOLDER_MARGIN,
        );
    }
    Ok(EXIT_OK)
}

fn sharpness(
    config: &RunConfig,
    out: &Path,
    seed: u64,
    report: &mut Report,
) -> Result<i32, CliError> {
    let sh = config
        .sharpness
        .as_ref()
        .ok_or_else(|| field("sharpness", "section required for this command"))?;
    let params = config.hyperbolic_params(seed);
    let mut family = Vec::new();
    let mut failed = Vec::new();
    for &p in &sh.parameters {
        let map = config.map_model(Some((p, &sh.terms)))?;
        let predicted = config
            .linear_part(&map)
            .map_err(|e| e.to_string())
            .and_then(|lin| {
                beta_overall(&lin.decomposition, config.epsilon).map_err(|e| e.to_string())
            });
        match predicted {
            Ok(rep) => family.push((p, map, rep.beta_overall)),
            Err(e) => failed.push((p, e)),
        }
    }
    let rows = sharpness_experiment(
        &family,
        |map| {
            let lin = config.linear_part(map).map_err(|e| e.to_string())?;
            linearize_hyperbolic(map, &lin, &params)
                .map(|r| r.chain)
                .map_err(|e| e.to_string())
        },
        sh.radius,
        seed,
    );
    let mut table = Vec::new();
    let mut all_hold = true;
    for row in &rows {
        let holds = row.lower_bound_holds(HOLDER_MARGIN);
        all_hold &= holds != Some(false);
        let (m, se, r2) = row
            .measured
            .as_ref()
            .map_or((f64::NAN, f64::NAN, f64::NAN), |e| {
                (e.exponent, e.stderr, e.r_squared)
            });
        table.push(vec![
            fmt(row.parameter),
            fmt(row.predicted),
            fmt(m),
            fmt(se),
            fmt(r2),
            holds.map_or("n/a".to_string(), |h| {
                if h {
                    "pass".into()
                } else {
                    "fail".into()
                }
            }),
            row.error.clone().unwrap_or_default(),
        ]);
    }
    for (p, e) in &failed {
        table.push(vec![
            fmt(*p),
            fmt(f64::NAN),
            fmt(f64::NAN),
            fmt(f64::NAN),
            fmt(f64::NAN),
            "n/a".into(),
            e.clone(),
        ]);
    }
    write_csv(
        &out.join("sharpness.csv"),
        &[
            "parameter",
            "predicted_beta",
            "measured",
            "stderr",
            "r_squared",
            "lower_bound",
            "error",
        ],
        &table,
    )?;
    report.int("members", sh.parameters.len());
    report.int(
        "failed_members",
        failed.len() + rows.iter().filter(|r| r.measured.is_none()).count(),
    );
    report.flag("lower_bound", all_hold);
    Ok(EXIT_OK)
}
