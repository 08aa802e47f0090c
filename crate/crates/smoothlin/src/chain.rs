//! Invertible near-identity transforms and their composition.
//!
//! A [`TransformChain`] is an ordered list of [`Transform`]s applied first to
//! last. Every transform provides a forward map, an inverse and a derivative;
//! grid-backed transforms can be exported to a directory of plain-text tables
//! and loaded back.

use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::dynamics::{DynamicsError, GridFunction, MapEval};

/// Maximum damped-Newton iterations for inverting a component replacement.
const NEWTON_MAX_ITER: usize = 50;
/// Absolute residual accepted on stagnation (absolute rounding noise of
/// interpolated grids near the origin).
const NEWTON_NOISE_FLOOR: f64 = 1e-18;

/// Errors of transform evaluation and (de)serialization.
#[derive(Debug, Clone, Error, PartialEq)]
pub enum ChainError {
    /// Evaluation failure in an underlying grid or map.
    #[error("transform '{label}': {source}")]
    Dynamics {
        /// Label of the failing transform.
        label: String,
        /// Underlying error.
        source: DynamicsError,
    },
    /// Newton's method for an inverse did not converge.
    #[error("inverse of transform '{label}' failed to converge (residual {residual:e})")]
    NewtonFailed {
        /// Label of the failing transform.
        label: String,
        /// Final residual.
        residual: f64,
    },
    /// File-system failure during export or import.
    #[error("i/o error: {0}")]
    Io(String),
    /// Malformed manifest or table.
    #[error("malformed chain export: {0}")]
    Format(String),
    /// The transform is closure-backed and cannot be exported.
    #[error("transform '{0}' is not exportable")]
    NotExportable(String),
}

/// The kinds of transforms used to assemble a conjugacy.
#[derive(Clone)]
pub enum TransformKind {
    /// `x ↦ Mx`.
    Linear {
        /// The matrix `M`.
        matrix: DMatrix<f64>,
        /// Its inverse.
        inverse: DMatrix<f64>,
    },
    /// `x_T ↦ x_T − g(x_S)` with disjoint index sets `T`, `S` (a graph straightening).
    GraphShift {
        /// Target indices `T`.
        target: Vec<usize>,
        /// Source indices `S`.
        source: Vec<usize>,
        /// Graph `g` over the `S` coordinates.
        graph: GridFunction,
    },
    /// `x_T ↦ ψ(x)` with all other components unchanged.
    ComponentReplace {
        /// Target indices `T`.
        target: Vec<usize>,
        /// `ψ` over the full coordinate vector.
        psi: GridFunction,
    },
    /// Block-diagonal product: each chain acts on its own index subset.
    Product {
        /// `(indices, chain)` pairs with disjoint index sets covering the space.
        blocks: Vec<(Vec<usize>, TransformChain)>,
    },
    /// Closure-backed transform (analytic oracles); not exportable.
    Analytic {
        /// Forward map.
        forward: Arc<dyn MapEval>,
        /// Inverse map.
        inverse: Arc<dyn MapEval>,
    },
}

impl fmt::Debug for TransformKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Linear { matrix, .. } => {
                f.debug_struct("Linear").field("matrix", matrix).finish()
            }
            Self::GraphShift { target, source, .. } => f
                .debug_struct("GraphShift")
                .field("target", target)
                .field("source", source)
                .finish(),
            Self::ComponentReplace { target, .. } => f
                .debug_struct("ComponentReplace")
                .field("target", target)
                .finish(),
            Self::Product { blocks } => f
                .debug_struct("Product")
                .field("blocks", &blocks.len())
                .finish(),
            Self::Analytic { .. } => f.write_str("Analytic"),
        }
    }
}

/// A labeled invertible transform.
#[derive(Clone, Debug)]
pub struct Transform {
    /// Which object the transform realizes (e.g. `Theta_1`, `Phi_2`, `Psi`).
    pub label: String,
    /// The transform itself.
    pub kind: TransformKind,
}

fn select(x: &DVector<f64>, idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

impl Transform {
    /// A labeled transform.
    pub fn new(label: impl Into<String>, kind: TransformKind) -> Self {
        Self {
            label: label.into(),
            kind,
        }
    }

    fn wrap(&self, e: DynamicsError) -> ChainError {
        ChainError::Dynamics {
            label: self.label.clone(),
            source: e,
        }
    }

    /// Forward evaluation.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, ChainError> {
        match &self.kind {
            TransformKind::Linear { matrix, .. } => Ok(matrix * x),
            TransformKind::GraphShift {
                target,
                source,
                graph,
            } => {
                let g = graph.eval(&select(x, source)).map_err(|e| self.wrap(e))?;
                let mut y = x.clone();
                for (k, &t) in target.iter().enumerate() {
                    y[t] -= g[k];
                }
                Ok(y)
            }
            TransformKind::ComponentReplace { target, psi } => {
                let p = psi.eval(x.as_slice()).map_err(|e| self.wrap(e))?;
                let mut y = x.clone();
                for (k, &t) in target.iter().enumerate() {
                    y[t] = p[k];
                }
                Ok(y)
            }
            TransformKind::Product { blocks } => {
                let mut y = x.clone();
                for (idx, chain) in blocks {
                    let sub = DVector::from_vec(select(x, idx));
                    let out = chain.forward(&sub)?;
                    for (k, &i) in idx.iter().enumerate() {
                        y[i] = out[k];
                    }
                }
                Ok(y)
            }
            TransformKind::Analytic { forward, .. } => forward.eval(x).map_err(|e| self.wrap(e)),
        }
    }

    /// Inverse evaluation.
    pub fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>, ChainError> {
        match &self.kind {
            TransformKind::Linear { inverse, .. } => Ok(inverse * y),
            TransformKind::GraphShift {
                target,
                source,
                graph,
            } => {
                let g = graph.eval(&select(y, source)).map_err(|e| self.wrap(e))?;
                let mut x = y.clone();
                for (k, &t) in target.iter().enumerate() {
                    x[t] += g[k];
                }
                Ok(x)
            }
            TransformKind::ComponentReplace { target, psi } => self.invert_replace(target, psi, y),
            TransformKind::Product { blocks } => {
                let mut x = y.clone();
                for (idx, chain) in blocks {
                    let sub = DVector::from_vec(select(y, idx));
                    let out = chain.inverse(&sub)?;
                    for (k, &i) in idx.iter().enumerate() {
                        x[i] = out[k];
                    }
                }
                Ok(x)
            }
            TransformKind::Analytic { inverse, .. } => inverse.eval(y).map_err(|e| self.wrap(e)),
        }
    }

    /// Derivative of the forward map.
    pub fn derivative(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ChainError> {
        let n = x.len();
        match &self.kind {
            TransformKind::Linear { matrix, .. } => Ok(matrix.clone()),
            TransformKind::GraphShift {
                target,
                source,
                graph,
            } => {
                let dg = graph
                    .derivative(&select(x, source))
                    .map_err(|e| self.wrap(e))?;
                let mut d = DMatrix::identity(n, n);
                for (k, &t) in target.iter().enumerate() {
                    for (j, &s) in source.iter().enumerate() {
                        d[(t, s)] -= dg[(k, j)];
                    }
                }
                Ok(d)
            }
            TransformKind::ComponentReplace { target, psi } => {
                let dp = psi.derivative(x.as_slice()).map_err(|e| self.wrap(e))?;
                let mut d = DMatrix::identity(n, n);
                for (k, &t) in target.iter().enumerate() {
                    for j in 0..n {
                        d[(t, j)] = dp[(k, j)];
                    }
                }
                Ok(d)
            }
            TransformKind::Product { blocks } => {
                let mut d = DMatrix::zeros(n, n);
                for (idx, chain) in blocks {
                    let sub = DVector::from_vec(select(x, idx));
                    let db = chain.derivative(&sub)?;
                    for (a, &i) in idx.iter().enumerate() {
                        for (b, &j) in idx.iter().enumerate() {
                            d[(i, j)] = db[(a, b)];
                        }
                    }
                }
                Ok(d)
            }
            TransformKind::Analytic { forward, .. } => {
                forward.jacobian(x).map_err(|e| self.wrap(e))
            }
        }
    }

    /// Damped Newton on `z ↦ ψ(x with x_T = z) = y_T`, seeded with `z = y_T`
    /// and halving the step whenever the residual does not decrease.
    fn invert_replace(
        &self,
        target: &[usize],
        psi: &GridFunction,
        y: &DVector<f64>,
    ) -> Result<DVector<f64>, ChainError> {
        let yt = DVector::from_vec(select(y, target));
        let mut x = y.clone();
        let residual = |x: &DVector<f64>| -> Result<DVector<f64>, ChainError> {
            Ok(DVector::from_vec(psi.eval(x.as_slice()).map_err(|e| self.wrap(e))?) - &yt)
        };
        let mut r = residual(&x)?;
        let mut rn = r.amax();
        let scale = y.amax().max(f64::MIN_POSITIVE);
        let tol = 16.0 * f64::EPSILON * scale;
        for _ in 0..NEWTON_MAX_ITER {
            if rn <= tol {
                return Ok(x);
            }
            let dp = psi.derivative(x.as_slice()).map_err(|e| self.wrap(e))?;
            let jt = DMatrix::from_fn(target.len(), target.len(), |a, b| dp[(a, target[b])]);
            let step = jt.lu().solve(&r).ok_or_else(|| ChainError::NewtonFailed {
                label: self.label.clone(),
                residual: rn,
            })?;
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let mut cand = x.clone();
                for (k, &i) in target.iter().enumerate() {
                    cand[i] -= t * step[k];
                }
                if let Ok(rc) = residual(&cand) {
                    let rcn = rc.amax();
                    if rcn < rn {
                        x = cand;
                        r = rc;
                        rn = rcn;
                        accepted = true;
                        break;
                    }
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        // Interpolated derivatives are only approximate; accept rounding-level
        // stagnation, relative to `|y|` or at the grids' absolute noise level.
        if rn <= (1e4 * tol).max(NEWTON_NOISE_FLOOR) {
            Ok(x)
        } else {
            Err(ChainError::NewtonFailed {
                label: self.label.clone(),
                residual: rn,
            })
        }
    }
}

/// Ordered transforms applied first to last: `Φ = T_k ∘ ⋯ ∘ T_1`.
#[derive(Clone, Debug)]
pub struct TransformChain {
    dim: usize,
    transforms: Vec<Transform>,
}

impl TransformChain {
    /// The identity chain on `ℝⁿ`.
    pub fn identity(dim: usize) -> Self {
        Self {
            dim,
            transforms: Vec::new(),
        }
    }

    /// Dimension.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Transforms in application order.
    pub fn transforms(&self) -> &[Transform] {
        &self.transforms
    }

    /// Appends a transform applied after the existing ones.
    pub fn push(&mut self, t: Transform) {
        self.transforms.push(t);
    }

    /// Appends every transform of `other` (applied after `self`).
    pub fn then(mut self, other: TransformChain) -> Self {
        self.transforms.extend(other.transforms);
        self
    }

    /// `Φ(x)`.
    pub fn forward(&self, x: &DVector<f64>) -> Result<DVector<f64>, ChainError> {
        let mut y = x.clone();
        for t in &self.transforms {
            y = t.forward(&y)?;
        }
        Ok(y)
    }

    /// `Φ⁻¹(y)`.
    pub fn inverse(&self, y: &DVector<f64>) -> Result<DVector<f64>, ChainError> {
        let mut x = y.clone();
        for t in self.transforms.iter().rev() {
            x = t.inverse(&x)?;
        }
        Ok(x)
    }

    /// `DΦ(x)` by the chain rule.
    pub fn derivative(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, ChainError> {
        let mut y = x.clone();
        let mut d = DMatrix::identity(self.dim, self.dim);
        for t in &self.transforms {
            d = t.derivative(&y)? * d;
            y = t.forward(&y)?;
        }
        Ok(d)
    }

    /// Writes `manifest.txt` and one grid table per grid-backed transform into `dir`.
    pub fn export(&self, dir: &Path) -> Result<(), ChainError> {
        fs::create_dir_all(dir).map_err(|e| ChainError::Io(e.to_string()))?;
        let mut manifest = format!("dim = {}\n", self.dim);
        let mut counter = 0usize;
        self.export_into(dir, "", &mut manifest, &mut counter)?;
        fs::write(dir.join("manifest.txt"), manifest).map_err(|e| ChainError::Io(e.to_string()))
    }

    fn export_into(
        &self,
        dir: &Path,
        indent: &str,
        manifest: &mut String,
        counter: &mut usize,
    ) -> Result<(), ChainError> {
        let join = |v: &[usize]| {
            v.iter()
                .map(|i| i.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        for t in &self.transforms {
            *counter += 1;
            let file = format!("t{:03}.csv", *counter);
            match &t.kind {
                TransformKind::Linear { matrix, inverse } => {
                    let flat = |m: &DMatrix<f64>| {
                        m.transpose()
                            .iter()
                            .map(|v| format!("{v:e}"))
                            .collect::<Vec<_>>()
                            .join(",")
                    };
                    manifest.push_str(&format!(
                        "{indent}linear | {} | {} | {}\n",
                        t.label,
                        flat(matrix),
                        flat(inverse)
                    ));
                }
                TransformKind::GraphShift {
                    target,
                    source,
                    graph,
                } => {
                    fs::write(dir.join(&file), graph.to_table())
                        .map_err(|e| ChainError::Io(e.to_string()))?;
                    manifest.push_str(&format!(
                        "{indent}graph_shift | {} | {} | {} | {file}\n",
                        t.label,
                        join(target),
                        join(source)
                    ));
                }
                TransformKind::ComponentReplace { target, psi } => {
                    fs::write(dir.join(&file), psi.to_table())
                        .map_err(|e| ChainError::Io(e.to_string()))?;
                    manifest.push_str(&format!(
                        "{indent}replace | {} | {} | {file}\n",
                        t.label,
                        join(target)
                    ));
                }
                TransformKind::Product { blocks } => {
                    manifest.push_str(&format!(
                        "{indent}product | {} | {}\n",
                        t.label,
                        blocks.len()
                    ));
                    for (idx, chain) in blocks {
                        manifest.push_str(&format!(
                            "{indent}  block | {} | {} | {}\n",
                            join(idx),
                            chain.dim,
                            chain.transforms.len()
                        ));
                        chain.export_into(dir, &format!("{indent}    "), manifest, counter)?;
                    }
                }
                TransformKind::Analytic { .. } => {
                    return Err(ChainError::NotExportable(t.label.clone()))
                }
            }
        }
        Ok(())
    }

    /// Loads a chain written by [`TransformChain::export`].
    pub fn import(dir: &Path) -> Result<Self, ChainError> {
        let text = fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| ChainError::Io(e.to_string()))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| ChainError::Format("empty manifest".into()))?;
        let dim = first
            .trim()
            .strip_prefix("dim = ")
            .and_then(|v| v.parse::<usize>().ok())
            .ok_or_else(|| ChainError::Format(format!("bad header '{first}'")))?;
        let rest: Vec<&str> = lines.collect();
        let mut pos = 0;
        let chain = Self::import_list(dir, dim, &rest, &mut pos, usize::MAX)?;
        if pos != rest.len() {
            return Err(ChainError::Format("trailing manifest lines".into()));
        }
        Ok(chain)
    }

    fn import_list(
        dir: &Path,
        dim: usize,
        lines: &[&str],
        pos: &mut usize,
        count: usize,
    ) -> Result<Self, ChainError> {
        let parse_idx = |s: &str| -> Result<Vec<usize>, ChainError> {
            s.split(',')
                .filter(|t| !t.trim().is_empty())
                .map(|t| {
                    t.trim()
                        .parse::<usize>()
                        .map_err(|e| ChainError::Format(e.to_string()))
                })
                .collect()
        };
        let load = |file: &str| -> Result<GridFunction, ChainError> {
            let text = fs::read_to_string(dir.join(file.trim()))
                .map_err(|e| ChainError::Io(e.to_string()))?;
            GridFunction::from_table(&text).map_err(|e| ChainError::Format(e.to_string()))
        };
        let mut chain = Self::identity(dim);
        while *pos < lines.len() && chain.transforms.len() < count {
            let line = lines[*pos];
            *pos += 1;
            let fields: Vec<&str> = line.split('|').map(str::trim).collect();
            let label = fields.get(1).copied().unwrap_or_default().to_string();
            let kind = match fields[0] {
                "linear" if fields.len() == 4 => {
                    let parse_m = |s: &str| -> Result<DMatrix<f64>, ChainError> {
                        let v: Vec<f64> = s
                            .split(',')
                            .map(|t| {
                                t.trim()
                                    .parse::<f64>()
                                    .map_err(|e| ChainError::Format(e.to_string()))
                            })
                            .collect::<Result<_, _>>()?;
                        if v.len() != dim * dim {
                            return Err(ChainError::Format("matrix size mismatch".into()));
                        }
                        Ok(DMatrix::from_row_slice(dim, dim, &v))
                    };
                    TransformKind::Linear {
                        matrix: parse_m(fields[2])?,
                        inverse: parse_m(fields[3])?,
                    }
                }
                "graph_shift" if fields.len() == 5 => TransformKind::GraphShift {
                    target: parse_idx(fields[2])?,
                    source: parse_idx(fields[3])?,
                    graph: load(fields[4])?,
                },
                "replace" if fields.len() == 4 => TransformKind::ComponentReplace {
                    target: parse_idx(fields[2])?,
                    psi: load(fields[3])?,
                },
                "product" if fields.len() == 3 => {
                    let nblocks: usize = fields[2]
                        .parse()
                        .map_err(|_| ChainError::Format(line.to_string()))?;
                    let mut blocks = Vec::with_capacity(nblocks);
                    for _ in 0..nblocks {
                        let bl = lines
                            .get(*pos)
                            .ok_or_else(|| ChainError::Format("missing block".into()))?;
                        *pos += 1;
                        let bf: Vec<&str> = bl.split('|').map(str::trim).collect();
                        if bf.len() != 4 || bf[0] != "block" {
                            return Err(ChainError::Format(format!("bad block line '{bl}'")));
                        }
                        let idx = parse_idx(bf[1])?;
                        let bdim: usize = bf[2]
                            .parse()
                            .map_err(|_| ChainError::Format(bl.to_string()))?;
                        let blen: usize = bf[3]
                            .parse()
                            .map_err(|_| ChainError::Format(bl.to_string()))?;
                        let sub = Self::import_list(dir, bdim, lines, pos, blen)?;
                        if sub.transforms.len() != blen {
                            return Err(ChainError::Format("truncated block".into()));
                        }
                        blocks.push((idx, sub));
                    }
                    TransformKind::Product { blocks }
                }
                _ => return Err(ChainError::Format(format!("unrecognized line '{line}'"))),
            };
            chain.push(Transform { label, kind });
        }
        Ok(chain)
    }
}

impl From<ChainError> for DynamicsError {
    fn from(e: ChainError) -> Self {
        match e {
            ChainError::Dynamics { source, .. } => source,
            ChainError::NewtonFailed { residual, .. } => DynamicsError::InverseNewtonFailed {
                point: Vec::new(),
                residual,
            },
            other => DynamicsError::NonFinite(other.to_string()),
        }
    }
}

/// The conjugated map `P ∘ G ∘ P⁻¹` of a map `G` by a transform chain `P`,
/// evaluated lazily through the chain.
pub struct ConjugatedMap {
    base: Arc<dyn MapEval>,
    chain: TransformChain,
}

impl ConjugatedMap {
    /// `P ∘ G ∘ P⁻¹` with `P = chain`.
    pub fn new(base: Arc<dyn MapEval>, chain: TransformChain) -> Self {
        Self { base, chain }
    }

    /// The chain `P`.
    pub fn chain(&self) -> &TransformChain {
        &self.chain
    }
}

impl MapEval for ConjugatedMap {
    fn dim(&self) -> usize {
        self.base.dim()
    }
    fn eval(&self, x: &DVector<f64>) -> Result<DVector<f64>, DynamicsError> {
        let z = self.chain.inverse(x)?;
        Ok(self.chain.forward(&self.base.eval(&z)?)?)
    }
    fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>, DynamicsError> {
        let z = self.chain.inverse(x)?;
        let gz = self.base.eval(&z)?;
        let dp_inv = self
            .chain
            .derivative(&z)?
            .try_inverse()
            .ok_or_else(|| DynamicsError::Singular("chain derivative".into()))?;
        Ok(self.chain.derivative(&gz)? * self.base.jacobian(&z)? * dp_inv)
    }
}
