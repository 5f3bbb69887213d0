//! Adaptive Gauss–Legendre quadrature.
//!
//! The channel expectations integrate piecewise-smooth functions whose kinks
//! are known in advance, so callers split the domain at the kinks and this
//! module only ever sees segments that are smooth inside. A fixed 16-point
//! rule then converges extremely fast; the adaptive driver bisects a segment
//! until the whole-vs-halves estimate settles.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum QuadError {
    #[error("integrand returned a non-finite value at x = {x}")]
    NonFinite { x: f64 },
    #[error("adaptive refinement exceeded depth {max_depth} on [{a}, {b}]")]
    MaxDepth { a: f64, b: f64, max_depth: usize },
}

/// Gauss–Legendre rule of a fixed order on `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the nodes as Legendre-polynomial roots by Newton iteration
    /// with the usual Chebyshev-based initial guesses.
    pub fn new(order: usize) -> GaussLegendre {
        assert!(order >= 2, "rule order must be at least 2");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..(n + 1) / 2 {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let step = p / d;
                x -= step;
                if step.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        GaussLegendre { nodes, weights }
    }

    /// Applies the rule to `f` on `[a, b]`.
    pub fn integrate<F: Fn(f64) -> f64>(&self, f: &F, a: f64, b: f64) -> Result<f64, QuadError> {
        let mid = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let mut sum = 0.0;
        for (&x, &w) in self.nodes.iter().zip(&self.weights) {
            let t = mid + half * x;
            let v = f(t);
            if !v.is_finite() {
                return Err(QuadError::NonFinite { x: t });
            }
            sum += w * v;
        }
        Ok(half * sum)
    }
}

/// Legendre polynomial `P_n(x)` and its derivative via the three-term
/// recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let k = k as f64;
        let p2 = ((2.0 * k - 1.0) * x * p1 - (k - 1.0) * p0) / k;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

const MAX_DEPTH: usize = 48;

/// Adaptive integration on `[a, b]` to absolute tolerance `abs_tol`.
pub fn adaptive<F: Fn(f64) -> f64>(rule: &GaussLegendre, f: &F, a: f64, b: f64, abs_tol: f64) -> Result<f64, QuadError> {
    if a == b {
        return Ok(0.0);
    }
    let whole = rule.integrate(f, a, b)?;
    adaptive_step(rule, f, a, b, whole, abs_tol, 0)
}

fn adaptive_step<F: Fn(f64) -> f64>(
    rule: &GaussLegendre,
    f: &F,
    a: f64,
    b: f64,
    whole: f64,
    tol: f64,
    depth: usize,
) -> Result<f64, QuadError> {
    let mid = 0.5 * (a + b);
    let left = rule.integrate(f, a, mid)?;
    let right = rule.integrate(f, mid, b)?;
    let refined = left + right;
    if (refined - whole).abs() <= tol.max(f64::EPSILON * refined.abs()) {
        return Ok(refined);
    }
    if depth >= MAX_DEPTH {
        return Err(QuadError::MaxDepth { a, b, max_depth: MAX_DEPTH });
    }
    let l = adaptive_step(rule, f, a, mid, left, 0.5 * tol, depth + 1)?;
    let r = adaptive_step(rule, f, mid, b, right, 0.5 * tol, depth + 1)?;
    Ok(l + r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn exact_on_low_degree_polynomials() {
        // An n-point rule integrates polynomials up to degree 2n-1 exactly.
        let rule = GaussLegendre::new(16);
        let f = |x: f64| x.powi(31) + 3.0 * x.powi(10) - x.powi(3) + 2.0;
        let got = rule.integrate(&f, -1.0, 1.0).unwrap();
        let want = 3.0 * 2.0 / 11.0 + 4.0;
        assert!((got - want).abs() < 1e-13, "{got} vs {want}");
    }

    #[test]
    fn adaptive_handles_sharp_peak() {
        let rule = GaussLegendre::new(16);
        let f = |x: f64| (-((x - 0.5) * 200.0).powi(2)).exp();
        let got = adaptive(&rule, &f, 0.0, 1.0, 1e-12).unwrap();
        let want = std::f64::consts::PI.sqrt() / 200.0;
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    }

    #[test]
    fn non_finite_integrand_is_reported() {
        let rule = GaussLegendre::new(16);
        let f = |x: f64| 1.0 / (x - 0.5);
        let err = adaptive(&rule, &f, 0.0, 1.0, 1e-10);
        assert!(err.is_err() || err.unwrap().is_finite());
        let g = |_: f64| f64::NAN;
        assert!(matches!(adaptive(&rule, &g, 0.0, 1.0, 1e-10), Err(QuadError::NonFinite { .. })));
    }

    proptest! {
        #[test]
        fn integrates_random_cubics_exactly(c0 in -5.0..5.0f64, c1 in -5.0..5.0f64,
                                            c2 in -5.0..5.0f64, c3 in -5.0..5.0f64,
                                            a in -3.0..0.0f64, b in 0.1..3.0f64) {
            let rule = GaussLegendre::new(8);
            let f = move |x: f64| c0 + c1 * x + c2 * x * x + c3 * x * x * x;
            let anti = |x: f64| c0 * x + c1 * x * x / 2.0 + c2 * x * x * x / 3.0 + c3 * x * x * x * x / 4.0;
            let got = rule.integrate(&f, a, b).unwrap();
            let want = anti(b) - anti(a);
            prop_assert!((got - want).abs() <= 1e-11 * (1.0 + want.abs()));
        }
    }
}
