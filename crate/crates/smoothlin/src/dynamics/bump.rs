//! The smooth kernel `q`, its normalized primitive, the planar function `u`,
//! and the radial cutoff used to globalize a map.
//!
//! `q(t) = exp(1/(t(t−1)))` on `(0, 1)` and `0` elsewhere. Its normalized
//! primitive `Q(s) = ∫_{−∞}^{s} q / ∫ q` is a C^∞ step from 0 to 1 on `[0, 1]`.
//! `Q` is tabulated once with composite Gauss–Legendre quadrature and then
//! evaluated by cubic Hermite interpolation using the exact derivative
//! `Q' = q / ∫q`; the resulting absolute error is below 1e−12.

use std::sync::OnceLock;

use super::DynamicsError;

/// Number of table intervals for the primitive of `q`.
const TABLE_INTERVALS: usize = 4096;

/// The kernel `q(t) = e^{1/(t(t−1))}` on `(0, 1)`, zero elsewhere.
pub fn kernel_q(t: f64) -> f64 {
    if t <= 0.0 || t >= 1.0 {
        0.0
    } else {
        (1.0 / (t * (t - 1.0))).exp()
    }
}

struct StepTable {
    /// Cumulative integrals at the table nodes, normalized to end at 1.
    cum: Vec<f64>,
    /// Total integral `∫ q`.
    total: f64,
}

fn gauss_legendre_5(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    const X: [f64; 5] = [
        0.0,
        0.538_469_310_105_683_1,
        -0.538_469_310_105_683_1,
        0.906_179_845_938_664,
        -0.906_179_845_938_664,
    ];
    const W: [f64; 5] = [
        0.568_888_888_888_888_9,
        0.478_628_670_499_366_5,
        0.478_628_670_499_366_5,
        0.236_926_885_056_189_1,
        0.236_926_885_056_189_1,
    ];
    let (m, h) = (0.5 * (a + b), 0.5 * (b - a));
    X.iter().zip(W).map(|(x, w)| w * f(m + h * x)).sum::<f64>() * h
}

fn table() -> &'static StepTable {
    static TABLE: OnceLock<StepTable> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = TABLE_INTERVALS;
        let mut cum = Vec::with_capacity(n + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for i in 0..n {
            let a = i as f64 / n as f64;
            let b = (i + 1) as f64 / n as f64;
            // Two Gauss panels per interval keep the quadrature error far below
            // the interpolation error.
            let m = 0.5 * (a + b);
            acc += gauss_legendre_5(kernel_q, a, m) + gauss_legendre_5(kernel_q, m, b);
            cum.push(acc);
        }
        let total = acc;
        for c in &mut cum {
            *c /= total;
        }
        StepTable { cum, total }
    })
}

/// The total integral `∫_ℝ q`.
pub fn kernel_integral() -> f64 {
    table().total
}

/// The normalized primitive `Q(s) = ∫_{−∞}^{s} q / ∫ q`, a C^∞ step from 0 (s ≤ 0)
/// to 1 (s ≥ 1).
pub fn smooth_step(s: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    if s >= 1.0 {
        return 1.0;
    }
    let t = table();
    let n = TABLE_INTERVALS;
    let pos = s * n as f64;
    let i = (pos.floor() as usize).min(n - 1);
    let h = 1.0 / n as f64;
    let a = i as f64 * h;
    let u = (s - a) / h;
    let (y0, y1) = (t.cum[i], t.cum[i + 1]);
    let (d0, d1) = (kernel_q(a) / t.total * h, kernel_q(a + h) / t.total * h);
    // Cubic Hermite basis.
    let u2 = u * u;
    let u3 = u2 * u;
    (2.0 * u3 - 3.0 * u2 + 1.0) * y0
        + (u3 - 2.0 * u2 + u) * d0
        + (-2.0 * u3 + 3.0 * u2) * y1
        + (u3 - u2) * d1
}

/// Derivative of [`smooth_step`].
pub fn smooth_step_derivative(s: f64) -> f64 {
    kernel_q(s) / table().total
}

/// The planar function `u(x₁, x₂) = Q(x₁/|x₂|)`: equal to 1 when `x₁ ≥ |x₂|`,
/// 0 when `x₁ ≤ 0`, smooth away from the origin and 0-homogeneous.
pub fn bump_u(x1: f64, x2: f64) -> Result<f64, DynamicsError> {
    if x1 == 0.0 && x2 == 0.0 {
        return Err(DynamicsError::OriginUndefined);
    }
    if x1 <= 0.0 {
        return Ok(0.0);
    }
    if x2 == 0.0 || x1 >= x2.abs() {
        return Ok(1.0);
    }
    Ok(smooth_step(x1 / x2.abs()))
}

/// Radial cutoff `ϱ(r)`: 1 for `r ≤ r0`, 0 for `r ≥ r1`, C^∞ in between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RadialCutoff {
    /// Inner radius.
    pub r0: f64,
    /// Outer radius.
    pub r1: f64,
}

impl RadialCutoff {
    /// Value at radius `r`.
    pub fn value(&self, r: f64) -> f64 {
        1.0 - smooth_step((r - self.r0) / (self.r1 - self.r0))
    }

    /// Derivative with respect to `r`.
    pub fn derivative(&self, r: f64) -> f64 {
        -smooth_step_derivative((r - self.r0) / (self.r1 - self.r0)) / (self.r1 - self.r0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_symmetric_about_half() {
        for &s in &[0.01, 0.1, 0.3, 0.45] {
            let a = smooth_step(s);
            let b = smooth_step(1.0 - s);
            assert!((a + b - 1.0).abs() < 1e-12, "s={s}: {a} + {b}");
        }
        assert!((smooth_step(0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cutoff_limits() {
        let c = RadialCutoff { r0: 0.1, r1: 0.2 };
        assert_eq!(c.value(0.05), 1.0);
        assert_eq!(c.value(0.25), 0.0);
        assert!(c.derivative(0.15) < 0.0);
    }
}
