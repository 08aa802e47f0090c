//! Dense tensor-product grids with multilinear or cubic interpolation.
//!
//! [`GridFunction`] is the numerical carrier for every sampled object in the
//! toolkit: foliation graphs, Lyapunov–Perron sequences, invariant graphs and
//! the per-band transforms. Values at nodes are stored exactly. Between nodes
//! the function is either
//!
//! * the multilinear interpolant (default); derivatives are then obtained from
//!   nodal finite differences (second order in the interior and on the
//!   boundary), interpolated multilinearly, so the derivative field is
//!   continuous and Lipschitz; or
//! * the tensor-product cubic Hermite interpolant with second-order
//!   finite-difference slopes ([`Interpolation::CubicHermite`]): `C¹`, exact on
//!   quadratics, third-order accurate, with its analytic derivative.

use std::fmt::Write as _;
use std::sync::OnceLock;

use nalgebra::DMatrix;

use super::DynamicsError;

/// Relative slack (in units of the axis width) accepted on box boundaries.
const BOUNDARY_SLACK: f64 = 1e-12;

/// An axis-aligned box `∏ [lo_i, hi_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxRegion {
    /// Lower corners.
    pub lo: Vec<f64>,
    /// Upper corners.
    pub hi: Vec<f64>,
}

impl BoxRegion {
    /// Builds a box from corners.
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        assert_eq!(lo.len(), hi.len(), "corner dimension mismatch");
        assert!(lo.iter().zip(&hi).all(|(a, b)| a <= b), "inverted box");
        Self { lo, hi }
    }

    /// The box `[-r, r]^n`.
    pub fn symmetric(n: usize, r: f64) -> Self {
        Self::new(vec![-r; n], vec![r; n])
    }

    /// The box `∏ [-r_i, r_i]`.
    pub fn symmetric_axes(r: &[f64]) -> Self {
        Self::new(r.iter().map(|v| -v).collect(), r.to_vec())
    }

    /// All of `ℝⁿ`.
    pub fn unbounded(n: usize) -> Self {
        Self::new(vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    /// Dimension.
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Whether `x` lies in the closed box.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Largest axis half-width.
    pub fn radius(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| 0.5 * (b - a))
            .fold(0.0, f64::max)
    }

    /// Nearest point of the box to `x`.
    pub fn project_point(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(v, (a, b))| v.clamp(*a, *b))
            .collect()
    }

    /// Sub-box on the given axes.
    pub fn project(&self, axes: &[usize]) -> Self {
        Self::new(
            axes.iter().map(|&i| self.lo[i]).collect(),
            axes.iter().map(|&i| self.hi[i]).collect(),
        )
    }

    /// Box scaled about the origin by `s`.
    pub fn scaled(&self, s: f64) -> Self {
        Self::new(
            self.lo.iter().map(|v| v * s).collect(),
            self.hi.iter().map(|v| v * s).collect(),
        )
    }

    /// Cartesian product with another box.
    pub fn product(&self, other: &Self) -> Self {
        let mut lo = self.lo.clone();
        lo.extend_from_slice(&other.lo);
        let mut hi = self.hi.clone();
        hi.extend_from_slice(&other.hi);
        Self::new(lo, hi)
    }
}

/// Interpolation scheme of a [`GridFunction`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    /// Multilinear interpolation.
    #[default]
    Multilinear,
    /// Tensor-product cubic Hermite interpolation with finite-difference slopes
    /// (falls back to linear on axes with two nodes).
    CubicHermite,
}

/// A vector-valued function sampled on a tensor grid.
#[derive(Debug)]
pub struct GridFunction {
    bounds: BoxRegion,
    res: Vec<usize>,
    codim: usize,
    values: Vec<f64>,
    strides: Vec<usize>,
    interp: Interpolation,
    deriv: OnceLock<Vec<f64>>,
}

impl Clone for GridFunction {
    fn clone(&self) -> Self {
        Self {
            bounds: self.bounds.clone(),
            res: self.res.clone(),
            codim: self.codim,
            values: self.values.clone(),
            strides: self.strides.clone(),
            interp: self.interp,
            deriv: OnceLock::new(),
        }
    }
}

impl PartialEq for GridFunction {
    fn eq(&self, other: &Self) -> bool {
        self.bounds == other.bounds
            && self.res == other.res
            && self.codim == other.codim
            && self.values == other.values
            && self.interp == other.interp
    }
}

impl GridFunction {
    /// Builds a grid function from node values (node-major, `codim` values per node;
    /// the last axis varies fastest).
    pub fn from_values(
        bounds: BoxRegion,
        res: Vec<usize>,
        codim: usize,
        values: Vec<f64>,
    ) -> Result<Self, DynamicsError> {
        if res.len() != bounds.dim() || res.iter().any(|&r| r < 2) {
            return Err(DynamicsError::InvalidGrid(format!(
                "resolution {res:?} invalid for a {}-dimensional box (need ≥2 nodes per axis)",
                bounds.dim()
            )));
        }
        if bounds.lo.iter().chain(&bounds.hi).any(|v| !v.is_finite()) {
            return Err(DynamicsError::InvalidGrid(
                "grid box must be bounded".into(),
            ));
        }
        let nodes: usize = res.iter().product();
        if values.len() != nodes * codim {
            return Err(DynamicsError::InvalidGrid(format!(
                "expected {} values, got {}",
                nodes * codim,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(DynamicsError::NonFinite(format!(
                "grid value {i} is not finite"
            )));
        }
        let mut strides = vec![0; res.len()];
        let mut s = 1;
        for ax in (0..res.len()).rev() {
            strides[ax] = s;
            s *= res[ax];
        }
        Ok(Self {
            bounds,
            res,
            codim,
            values,
            strides,
            interp: Interpolation::Multilinear,
            deriv: OnceLock::new(),
        })
    }

    /// Samples `f` at every node.
    pub fn sample<F>(
        bounds: BoxRegion,
        res: Vec<usize>,
        codim: usize,
        mut f: F,
    ) -> Result<Self, DynamicsError>
    where
        F: FnMut(&[f64]) -> Vec<f64>,
    {
        Self::try_sample(bounds, res, codim, |x| Ok(f(x)))
    }

    /// Samples a fallible `f` at every node; the first error aborts.
    pub fn try_sample<F, E>(
        bounds: BoxRegion,
        res: Vec<usize>,
        codim: usize,
        mut f: F,
    ) -> Result<Self, E>
    where
        F: FnMut(&[f64]) -> Result<Vec<f64>, E>,
        E: From<DynamicsError>,
    {
        let probe = Self::from_values(bounds.clone(), res.clone(), 0, Vec::new())?;
        let nodes = probe.node_count();
        let mut values = Vec::with_capacity(nodes * codim);
        let mut x = vec![0.0; bounds.dim()];
        for idx in 0..nodes {
            probe.node_coords_into(idx, &mut x);
            let v = f(&x)?;
            if v.len() != codim {
                return Err(DynamicsError::InvalidGrid(format!(
                    "sampled function returned {} components, expected {codim}",
                    v.len()
                ))
                .into());
            }
            values.extend_from_slice(&v);
        }
        Ok(Self::from_values(bounds, res, codim, values)?)
    }

    /// The same data with another interpolation scheme.
    pub fn with_interpolation(mut self, interp: Interpolation) -> Self {
        self.interp = interp;
        self
    }

    /// The interpolation scheme.
    pub fn interpolation(&self) -> Interpolation {
        self.interp
    }

    /// The box.
    pub fn bounds(&self) -> &BoxRegion {
        &self.bounds
    }

    /// Nodes per axis.
    pub fn resolution(&self) -> &[usize] {
        &self.res
    }

    /// Input dimension.
    pub fn dim(&self) -> usize {
        self.res.len()
    }

    /// Output dimension.
    pub fn codim(&self) -> usize {
        self.codim
    }

    /// Raw node values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Number of nodes.
    pub fn node_count(&self) -> usize {
        self.res.iter().product()
    }

    /// Grid step on axis `ax`.
    pub fn step(&self, ax: usize) -> f64 {
        (self.bounds.hi[ax] - self.bounds.lo[ax]) / (self.res[ax] - 1) as f64
    }

    /// Largest grid step over all axes.
    pub fn max_step(&self) -> f64 {
        (0..self.dim()).map(|a| self.step(a)).fold(0.0, f64::max)
    }

    /// Multi-index of a flat node index.
    pub fn node_multi_index(&self, mut idx: usize) -> Vec<usize> {
        let mut mi = vec![0; self.dim()];
        for ax in 0..self.dim() {
            mi[ax] = idx / self.strides[ax];
            idx %= self.strides[ax];
        }
        mi
    }

    /// Coordinates of node `idx`.
    pub fn node_coords(&self, idx: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        self.node_coords_into(idx, &mut x);
        x
    }

    fn node_coords_into(&self, mut idx: usize, x: &mut [f64]) {
        for ax in 0..self.dim() {
            let i = idx / self.strides[ax];
            idx %= self.strides[ax];
            x[ax] = self.axis_node(ax, i);
        }
    }

    fn axis_node(&self, ax: usize, i: usize) -> f64 {
        let (a, b) = (self.bounds.lo[ax], self.bounds.hi[ax]);
        if i + 1 == self.res[ax] {
            b
        } else {
            a + (b - a) * (i as f64) / ((self.res[ax] - 1) as f64)
        }
    }

    /// Stored value at node `idx`.
    pub fn node_value(&self, idx: usize) -> &[f64] {
        &self.values[idx * self.codim..(idx + 1) * self.codim]
    }

    /// Whether `x` lies in the box (with the boundary slack used by `eval`).
    pub fn covers(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && self.locate_all(x).is_some()
    }

    fn locate(&self, ax: usize, v: f64) -> Option<(usize, f64)> {
        let (a, b) = (self.bounds.lo[ax], self.bounds.hi[ax]);
        let w = b - a;
        if !(v >= a - BOUNDARY_SLACK * w && v <= b + BOUNDARY_SLACK * w) {
            return None;
        }
        let cells = self.res[ax] - 1;
        let s = ((v - a) / w * cells as f64).clamp(0.0, cells as f64);
        let mut i = s.floor() as usize;
        if i >= cells {
            i = cells - 1;
        }
        // Interpolation weight measured from the actual node coordinates so that
        // nodes are reproduced exactly.
        let x0 = self.axis_node(ax, i);
        let x1 = self.axis_node(ax, i + 1);
        let t = ((v - x0) / (x1 - x0)).clamp(0.0, 1.0);
        Some((i, t))
    }

    fn locate_all(&self, x: &[f64]) -> Option<Vec<(usize, f64)>> {
        (0..self.dim()).map(|ax| self.locate(ax, x[ax])).collect()
    }

    fn first_outside(&self, x: &[f64]) -> DynamicsError {
        DynamicsError::OutsideBox {
            point: x.to_vec(),
            lo: self.bounds.lo.clone(),
            hi: self.bounds.hi.clone(),
        }
    }

    /// Interpolated value at `x`.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        let mut out = vec![0.0; self.codim];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    /// Interpolated value at `x`, written into `out`.
    pub fn eval_into(&self, x: &[f64], out: &mut [f64]) -> Result<(), DynamicsError> {
        if x.len() != self.dim() {
            return Err(DynamicsError::InvalidGrid(format!(
                "point has dimension {}, grid has {}",
                x.len(),
                self.dim()
            )));
        }
        let cell = self.locate_all(x).ok_or_else(|| self.first_outside(x))?;
        match self.interp {
            Interpolation::Multilinear => {
                interpolate(&self.values, self.codim, &self.strides, &cell, out)
            }
            Interpolation::CubicHermite => self.hermite(&cell, None, out),
        }
        Ok(())
    }

    fn nodal_derivatives(&self) -> &[f64] {
        self.deriv.get_or_init(|| {
            let d = self.dim();
            let c = self.codim;
            let nodes = self.node_count();
            let mut out = vec![0.0; nodes * c * d];
            for idx in 0..nodes {
                let mi = self.node_multi_index(idx);
                for ax in 0..d {
                    let h = self.step(ax);
                    let n = self.res[ax];
                    let i = mi[ax];
                    let at = |j: usize| {
                        (idx as isize + (j as isize - i as isize) * self.strides[ax] as isize)
                            as usize
                    };
                    for k in 0..c {
                        let v = |j: usize| self.values[at(j) * c + k];
                        let der = if n == 2 {
                            (v(1) - v(0)) / h
                        } else if i == 0 {
                            (-3.0 * v(0) + 4.0 * v(1) - v(2)) / (2.0 * h)
                        } else if i == n - 1 {
                            (3.0 * v(n - 1) - 4.0 * v(n - 2) + v(n - 3)) / (2.0 * h)
                        } else {
                            (v(i + 1) - v(i - 1)) / (2.0 * h)
                        };
                        // Layout: node-major, then output row k, then axis column.
                        out[idx * c * d + k * d + ax] = der;
                    }
                }
            }
            out
        })
    }

    /// Derivative (codim × dim matrix) at `x`: interpolated nodal central
    /// differences for multilinear grids (second-order accurate on smooth data),
    /// the analytic derivative of the interpolant for cubic grids.
    pub fn derivative(&self, x: &[f64]) -> Result<DMatrix<f64>, DynamicsError> {
        if x.len() != self.dim() {
            return Err(self.first_outside(x));
        }
        let cell = self.locate_all(x).ok_or_else(|| self.first_outside(x))?;
        let d = self.dim();
        if self.interp == Interpolation::CubicHermite {
            let mut m = DMatrix::zeros(self.codim, d);
            let mut col = vec![0.0; self.codim];
            for ax in 0..d {
                self.hermite(&cell, Some(ax), &mut col);
                for (k, v) in col.iter().enumerate() {
                    m[(k, ax)] = *v;
                }
            }
            return Ok(m);
        }
        let mut flat = vec![0.0; self.codim * d];
        interpolate(
            self.nodal_derivatives(),
            self.codim * d,
            &self.strides,
            &cell,
            &mut flat,
        );
        Ok(DMatrix::from_row_slice(self.codim, d, &flat))
    }

    /// Tensor-product cubic Hermite interpolation (or its partial derivative
    /// along `deriv_axis`) on the located cell.
    fn hermite(&self, cell: &[(usize, f64)], deriv_axis: Option<usize>, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        let weights: Vec<Vec<(usize, f64)>> = cell
            .iter()
            .enumerate()
            .map(|(ax, &(i, t))| {
                let derivative = deriv_axis == Some(ax);
                let mut w = hermite_weights(i, t, self.res[ax], derivative);
                if derivative {
                    let h = self.step(ax);
                    w.iter_mut().for_each(|(_, c)| *c /= h);
                }
                w
            })
            .collect();
        let d = cell.len();
        let mut pos = vec![0usize; d];
        loop {
            let mut w = 1.0;
            let mut off = 0;
            for ax in 0..d {
                let (j, c) = weights[ax][pos[ax]];
                w *= c;
                off += j * self.strides[ax];
            }
            if w != 0.0 {
                for (k, o) in out.iter_mut().enumerate() {
                    *o += w * self.values[off * self.codim + k];
                }
            }
            let mut ax = 0;
            loop {
                if ax == d {
                    return;
                }
                pos[ax] += 1;
                if pos[ax] < weights[ax].len() {
                    break;
                }
                pos[ax] = 0;
                ax += 1;
            }
        }
    }

    /// Writes the grid as a text table: a header line with the box, the
    /// resolution and the codimension, then one row per node (coordinates then
    /// values). Floats use the shortest round-trip representation.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let _ = write!(
            s,
            "# lo={} hi={} res={} codim={}",
            join(&self.bounds.lo).replace(' ', ","),
            join(&self.bounds.hi).replace(' ', ","),
            self.res
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
            self.codim
        );
        if self.interp == Interpolation::CubicHermite {
            s.push_str(" interp=cubic");
        }
        s.push('\n');
        for idx in 0..self.node_count() {
            let mut row: Vec<String> = self
                .node_coords(idx)
                .iter()
                .map(|x| format!("{x:e}"))
                .collect();
            row.extend(self.node_value(idx).iter().map(|x| format!("{x:e}")));
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Parses the format written by [`GridFunction::to_table`].
    pub fn from_table(text: &str) -> Result<Self, DynamicsError> {
        let bad = |m: &str| DynamicsError::InvalidGrid(format!("grid table: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty"))?;
        let header = header
            .strip_prefix("# ")
            .ok_or_else(|| bad("missing header"))?;
        let mut lo = None;
        let mut hi = None;
        let mut res = None;
        let mut codim = None;
        let mut interp = Interpolation::Multilinear;
        for field in header.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| bad("malformed header"))?;
            let floats = || -> Result<Vec<f64>, DynamicsError> {
                v.split(',')
                    .map(|t| t.parse::<f64>().map_err(|_| bad("bad float in header")))
                    .collect()
            };
            match k {
                "lo" => lo = Some(floats()?),
                "hi" => hi = Some(floats()?),
                "res" => {
                    res = Some(
                        v.split(',')
                            .map(|t| t.parse::<usize>().map_err(|_| bad("bad resolution")))
                            .collect::<Result<Vec<_>, _>>()?,
                    )
                }
                "codim" => codim = Some(v.parse::<usize>().map_err(|_| bad("bad codim"))?),
                "interp" => {
                    interp = match v {
                        "linear" => Interpolation::Multilinear,
                        "cubic" => Interpolation::CubicHermite,
                        _ => return Err(bad("unknown interpolation")),
                    }
                }
                _ => return Err(bad("unknown header key")),
            }
        }
        let (lo, hi, res, codim) = (
            lo.ok_or_else(|| bad("lo missing"))?,
            hi.ok_or_else(|| bad("hi missing"))?,
            res.ok_or_else(|| bad("res missing"))?,
            codim.ok_or_else(|| bad("codim missing"))?,
        );
        let d = lo.len();
        let mut values = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let row: Vec<f64> = line
                .split(',')
                .map(|t| t.trim().parse::<f64>().map_err(|_| bad("bad float in row")))
                .collect::<Result<_, _>>()?;
            if row.len() != d + codim {
                return Err(bad("row width mismatch"));
            }
            values.extend_from_slice(&row[d..]);
        }
        Ok(
            Self::from_values(BoxRegion::new(lo, hi), res, codim, values)?
                .with_interpolation(interp),
        )
    }
}

/// Node weights of the 1D cubic Hermite interpolant (or of its derivative in
/// units of the local coordinate `t`) on cell `i` of an axis with `n` nodes.
fn hermite_weights(i: usize, t: f64, n: usize, derivative: bool) -> Vec<(usize, f64)> {
    if n == 2 {
        return if derivative {
            vec![(0, -1.0), (1, 1.0)]
        } else {
            vec![(0, 1.0 - t), (1, t)]
        };
    }
    let (h00, h10, h01, h11) = if derivative {
        (
            6.0 * t * t - 6.0 * t,
            3.0 * t * t - 4.0 * t + 1.0,
            -6.0 * t * t + 6.0 * t,
            3.0 * t * t - 2.0 * t,
        )
    } else {
        let (t2, t3) = (t * t, t * t * t);
        (
            2.0 * t3 - 3.0 * t2 + 1.0,
            t3 - 2.0 * t2 + t,
            -2.0 * t3 + 3.0 * t2,
            t3 - t2,
        )
    };
    // Slope times step at node j, as weights over nodes.
    let slope = |j: usize| -> [(usize, f64); 3] {
        if j == 0 {
            [(0, -1.5), (1, 2.0), (2, -0.5)]
        } else if j == n - 1 {
            [(n - 1, 1.5), (n - 2, -2.0), (n - 3, 0.5)]
        } else {
            [(j + 1, 0.5), (j - 1, -0.5), (j, 0.0)]
        }
    };
    let mut w = vec![(i, h00), (i + 1, h01)];
    w.extend(slope(i).iter().map(|&(j, c)| (j, c * h10)));
    w.extend(slope(i + 1).iter().map(|&(j, c)| (j, c * h11)));
    w
}

fn interpolate(
    values: &[f64],
    width: usize,
    strides: &[usize],
    cell: &[(usize, f64)],
    out: &mut [f64],
) {
    out.iter_mut().for_each(|o| *o = 0.0);
    let d = cell.len();
    let base: usize = cell.iter().zip(strides).map(|((i, _), s)| i * s).sum();
    for corner in 0..(1usize << d) {
        let mut w = 1.0;
        let mut off = base;
        for ax in 0..d {
            let t = cell[ax].1;
            if corner >> ax & 1 == 1 {
                w *= t;
                off += strides[ax];
            } else {
                w *= 1.0 - t;
            }
        }
        if w == 0.0 {
            continue;
        }
        let src = &values[off * width..(off + 1) * width];
        for (o, v) in out.iter_mut().zip(src) {
            *o += w * v;
        }
    }
}
