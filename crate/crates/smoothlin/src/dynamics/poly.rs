//! Sparse multivariate polynomials and polynomial maps.
//!
//! Polynomials are stored as a map from exponent vectors to coefficients.
//! They are used both as the analytic description of user maps (with exact
//! symbolic derivatives) and as the algebra in which Taylor jets of
//! invariant manifolds are computed.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

/// A real polynomial in `nvars` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: BTreeMap<Vec<u32>, f64>,
}

impl Polynomial {
    /// The zero polynomial in `nvars` variables.
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: BTreeMap::new(),
        }
    }

    /// The constant polynomial `c`.
    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(vec![0; nvars], c);
        p
    }

    /// The coordinate polynomial `x_i`.
    pub fn variable(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(e, 1.0);
        p
    }

    /// Number of variables.
    pub fn nvars(&self) -> usize {
        self.nvars
    }

    /// Iterator over `(exponents, coefficient)` pairs.
    pub fn terms(&self) -> impl Iterator<Item = (&Vec<u32>, &f64)> {
        self.terms.iter()
    }

    /// Adds `c · x^e` to the polynomial (dropping exact zeros).
    pub fn add_term(&mut self, e: Vec<u32>, c: f64) {
        assert_eq!(e.len(), self.nvars, "exponent length mismatch");
        let sum = self.terms.get(&e).copied().unwrap_or(0.0) + c;
        // Keep the representation canonical: no stored zeros.
        if sum == 0.0 {
            self.terms.remove(&e);
        } else {
            self.terms.insert(e, sum);
        }
    }

    /// Total degree (0 for the zero polynomial).
    pub fn degree(&self) -> u32 {
        self.terms.keys().map(|e| e.iter().sum()).max().unwrap_or(0)
    }

    /// Whether every coefficient vanishes.
    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Evaluates at `x`.
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(e, c)| c * monomial(x, e)).sum()
    }

    /// `p(x + d) − p(x)` evaluated without cancellation: every monomial
    /// difference is expanded by the telescoping identity
    /// `∏(x_i+d_i)^{e_i} − ∏x_i^{e_i} = Σ_i ∏_{j<i}(x_j+d_j)^{e_j}·[(x_i+d_i)^{e_i} − x_i^{e_i}]·∏_{j>i}x_j^{e_j}`
    /// with `(x+d)^e − x^e = d·Σ_{k<e}(x+d)^k x^{e−1−k}`.
    pub fn eval_difference(&self, x: &[f64], d: &[f64]) -> f64 {
        let n = self.nvars;
        let mut total = 0.0;
        for (e, c) in &self.terms {
            let mut acc = 0.0;
            for i in 0..n {
                if e[i] == 0 || d[i] == 0.0 {
                    continue;
                }
                let xi = x[i];
                let yi = x[i] + d[i];
                let mut diff = 0.0;
                for k in 0..e[i] {
                    diff += yi.powi(k as i32) * xi.powi((e[i] - 1 - k) as i32);
                }
                diff *= d[i];
                let mut prod = diff;
                for j in 0..n {
                    if j < i {
                        prod *= (x[j] + d[j]).powi(e[j] as i32);
                    } else if j > i {
                        prod *= x[j].powi(e[j] as i32);
                    }
                }
                acc += prod;
            }
            total += c * acc;
        }
        total
    }

    /// Gradient at `x`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.nvars];
        for (e, c) in &self.terms {
            for (i, gi) in g.iter_mut().enumerate() {
                if e[i] == 0 {
                    continue;
                }
                let mut d = e.clone();
                d[i] -= 1;
                *gi += c * f64::from(e[i]) * monomial(x, &d);
            }
        }
        g
    }

    /// Sum of two polynomials.
    pub fn add(&self, other: &Self) -> Self {
        let mut out = self.clone();
        for (e, c) in &other.terms {
            out.add_term(e.clone(), *c);
        }
        out
    }

    /// Scalar multiple.
    pub fn scale(&self, s: f64) -> Self {
        let mut out = Self::zero(self.nvars);
        if s != 0.0 {
            for (e, c) in &self.terms {
                out.terms.insert(e.clone(), c * s);
            }
        }
        out
    }

    /// Product truncated to total degree `max_deg`.
    pub fn mul_trunc(&self, other: &Self, max_deg: u32) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e1, c1) in &self.terms {
            let d1: u32 = e1.iter().sum();
            for (e2, c2) in &other.terms {
                let d2: u32 = e2.iter().sum();
                if d1 + d2 > max_deg {
                    continue;
                }
                let e: Vec<u32> = e1.iter().zip(e2).map(|(a, b)| a + b).collect();
                out.add_term(e, c1 * c2);
            }
        }
        out
    }

    /// Keeps only the terms of total degree ≤ `max_deg`.
    pub fn truncate(&self, max_deg: u32) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e.iter().sum::<u32>() <= max_deg {
                out.terms.insert(e.clone(), *c);
            }
        }
        out
    }

    /// Homogeneous part of total degree `deg`.
    pub fn homogeneous(&self, deg: u32) -> Self {
        let mut out = Self::zero(self.nvars);
        for (e, c) in &self.terms {
            if e.iter().sum::<u32>() == deg {
                out.terms.insert(e.clone(), *c);
            }
        }
        out
    }

    /// Coefficient of `x^e`.
    pub fn coeff(&self, e: &[u32]) -> f64 {
        self.terms.get(e).copied().unwrap_or(0.0)
    }

    /// Substitutes polynomials `subs[i]` (all in a common variable set) for the
    /// variables, truncating every intermediate product at `max_deg`.
    pub fn compose_trunc(&self, subs: &[Polynomial], max_deg: u32) -> Polynomial {
        assert_eq!(subs.len(), self.nvars, "substitution arity mismatch");
        let nv = subs.first().map_or(0, Polynomial::nvars);
        let mut out = Polynomial::zero(nv);
        // Cache of powers subs[i]^k.
        let mut powers: Vec<Vec<Polynomial>> = subs
            .iter()
            .map(|s| vec![Polynomial::constant(nv, 1.0), s.truncate(max_deg)])
            .collect();
        for (e, c) in &self.terms {
            let mut term = Polynomial::constant(nv, *c);
            for (i, &k) in e.iter().enumerate() {
                let k = k as usize;
                while powers[i].len() <= k {
                    let next = powers[i]
                        .last()
                        .expect("power cache is never empty")
                        .mul_trunc(&powers[i][1], max_deg);
                    powers[i].push(next);
                }
                term = term.mul_trunc(&powers[i][k], max_deg);
                if term.is_zero() {
                    break;
                }
            }
            out = out.add(&term);
        }
        out
    }
}

fn monomial(x: &[f64], e: &[u32]) -> f64 {
    let mut v = 1.0;
    for (xi, &k) in x.iter().zip(e) {
        if k > 0 {
            v *= xi.powi(k as i32);
        }
    }
    v
}

/// All exponent vectors in `nvars` variables with total degree exactly `deg`,
/// in a fixed (lexicographic) order.
pub fn monomials_of_degree(nvars: usize, deg: u32) -> Vec<Vec<u32>> {
    fn rec(nvars: usize, deg: u32, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if prefix.len() + 1 == nvars {
            prefix.push(deg);
            out.push(prefix.clone());
            prefix.pop();
            return;
        }
        for k in (0..=deg).rev() {
            prefix.push(k);
            rec(nvars, deg - k, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    if nvars == 0 {
        if deg == 0 {
            out.push(Vec::new());
        }
        return out;
    }
    rec(nvars, deg, &mut Vec::new(), &mut out);
    out
}

/// A polynomial map `ℝⁿ → ℝᵖ`, one polynomial per output component.
#[derive(Clone, Debug, PartialEq)]
pub struct PolyMap {
    comps: Vec<Polynomial>,
}

impl PolyMap {
    /// Builds a map from its component polynomials.
    pub fn new(comps: Vec<Polynomial>) -> Self {
        if let Some(first) = comps.first() {
            assert!(comps.iter().all(|c| c.nvars() == first.nvars()));
        }
        Self { comps }
    }

    /// Builds a square map from `(coefficient, exponents, output index)` triples.
    pub fn from_terms(n: usize, terms: &[(f64, Vec<u32>, usize)]) -> Self {
        let mut comps = vec![Polynomial::zero(n); n];
        for (c, e, out) in terms {
            comps[*out].add_term(e.clone(), *c);
        }
        Self { comps }
    }

    /// The linear map `x ↦ M x`.
    pub fn linear(m: &DMatrix<f64>) -> Self {
        let n = m.ncols();
        let comps = (0..m.nrows())
            .map(|i| {
                let mut p = Polynomial::zero(n);
                for j in 0..n {
                    if m[(i, j)] != 0.0 {
                        let mut e = vec![0; n];
                        e[j] = 1;
                        p.add_term(e, m[(i, j)]);
                    }
                }
                p
            })
            .collect();
        Self { comps }
    }

    /// Number of input variables.
    pub fn nvars(&self) -> usize {
        self.comps.first().map_or(0, Polynomial::nvars)
    }

    /// Number of output components.
    pub fn ncomps(&self) -> usize {
        self.comps.len()
    }

    /// Component polynomials.
    pub fn comps(&self) -> &[Polynomial] {
        &self.comps
    }

    /// Maximal total degree among components.
    pub fn degree(&self) -> u32 {
        self.comps.iter().map(Polynomial::degree).max().unwrap_or(0)
    }

    /// Evaluates the map.
    pub fn eval(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.comps.len(),
            self.comps.iter().map(|p| p.eval(x.as_slice())),
        )
    }

    /// `F(x + d) − F(x)` without cancellation (see [`Polynomial::eval_difference`]).
    pub fn eval_difference(&self, x: &DVector<f64>, d: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.comps.len(),
            self.comps
                .iter()
                .map(|p| p.eval_difference(x.as_slice(), d.as_slice())),
        )
    }

    /// Exact Jacobian matrix.
    pub fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(self.comps.len(), self.nvars());
        for (i, p) in self.comps.iter().enumerate() {
            for (k, g) in p.gradient(x.as_slice()).into_iter().enumerate() {
                j[(i, k)] = g;
            }
        }
        j
    }

    /// Linear part (coefficients of degree-one terms) as a matrix.
    pub fn linear_part(&self) -> DMatrix<f64> {
        let n = self.nvars();
        let mut m = DMatrix::zeros(self.comps.len(), n);
        for (i, p) in self.comps.iter().enumerate() {
            for j in 0..n {
                let mut e = vec![0; n];
                e[j] = 1;
                m[(i, j)] = p.coeff(&e);
            }
        }
        m
    }

    /// Value at the origin.
    pub fn constant_part(&self) -> Vec<f64> {
        let n = self.nvars();
        self.comps.iter().map(|p| p.coeff(&vec![0; n])).collect()
    }

    /// Composition `self ∘ inner`, truncated at `max_deg`.
    pub fn compose_trunc(&self, inner: &PolyMap, max_deg: u32) -> PolyMap {
        PolyMap {
            comps: self
                .comps
                .iter()
                .map(|p| p.compose_trunc(&inner.comps, max_deg))
                .collect(),
        }
    }

    /// Linear change of coordinates `x ↦ T⁻¹ F(T x)` (exact; degrees preserved).
    pub fn conjugate_linear(&self, t: &DMatrix<f64>, t_inv: &DMatrix<f64>) -> PolyMap {
        let deg = self.degree().max(1);
        let inner = PolyMap::linear(t);
        let mid = self.compose_trunc(&inner, deg);
        PolyMap::linear(t_inv).compose_trunc(&mid, deg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_expands_binomial() {
        // (x + y)^2 with x, y substituted by themselves.
        let mut p = Polynomial::zero(1);
        p.add_term(vec![2], 1.0);
        let mut s = Polynomial::zero(2);
        s.add_term(vec![1, 0], 1.0);
        s.add_term(vec![0, 1], 1.0);
        let q = p.compose_trunc(&[s], 4);
        assert_eq!(q.coeff(&[2, 0]), 1.0);
        assert_eq!(q.coeff(&[1, 1]), 2.0);
        assert_eq!(q.coeff(&[0, 2]), 1.0);
    }

    #[test]
    fn jacobian_matches_hand_derivative() {
        let f = PolyMap::from_terms(
            2,
            &[
                (0.2, vec![1, 0], 0),
                (1.0, vec![0, 2], 0),
                (0.5, vec![0, 1], 1),
            ],
        );
        let x = DVector::from_vec(vec![0.3, -0.7]);
        let j = f.jacobian(&x);
        assert_eq!(j[(0, 0)], 0.2);
        assert!((j[(0, 1)] + 1.4).abs() < 1e-15);
        assert_eq!(j[(1, 1)], 0.5);
        assert_eq!(f.linear_part()[(0, 0)], 0.2);
    }

    #[test]
    fn monomial_enumeration_counts() {
        assert_eq!(monomials_of_degree(2, 3).len(), 4);
        assert_eq!(monomials_of_degree(3, 2).len(), 6);
        assert_eq!(monomials_of_degree(1, 5), vec![vec![5]]);
    }
}
