//! Gauss rules (Golub–Welsch) and adaptive Simpson.

use nalgebra::{DMatrix, SymmetricEigen};

/// Nodes and weights of a one-dimensional rule.
#[derive(Clone, Debug)]
pub struct Rule {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl Rule {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(f64) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(x, w)| w * f(*x)).sum()
    }
}

fn golub_welsch(n: usize, off: impl Fn(usize) -> f64, mass: f64) -> Rule {
    assert!(n >= 1);
    let mut j = DMatrix::<f64>::zeros(n, n);
    for k in 1..n {
        let b = off(k);
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], mass * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    // symmetric weight functions: enforce exact mirror symmetry
    for i in 0..n / 2 {
        let m = n - 1 - i;
        let x = 0.5 * (pairs[m].0 - pairs[i].0);
        let w = 0.5 * (pairs[m].1 + pairs[i].1);
        pairs[i] = (-x, w);
        pairs[m] = (x, w);
    }
    if n % 2 == 1 {
        pairs[n / 2].0 = 0.0;
    }
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    Rule {
        nodes: pairs.iter().map(|p| p.0).collect(),
        weights: pairs.iter().map(|p| p.1 * mass / total).collect(),
    }
}

/// Gauss–Hermite rule for the standard normal weight (weights sum to 1).
pub fn gauss_hermite(n: usize) -> Rule {
    golub_welsch(n, |k| (k as f64).sqrt(), 1.0)
}

/// Gauss–Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> Rule {
    golub_welsch(n, |k| {
        let k = k as f64;
        k / (4.0 * k * k - 1.0).sqrt()
    }, 2.0)
}

/// Map a `[-1,1]` rule onto `[a,b]` and integrate.
pub fn integrate_on(rule: &Rule, a: f64, b: f64, f: impl Fn(f64) -> f64) -> f64 {
    let h = 0.5 * (b - a);
    let c = 0.5 * (a + b);
    h * rule.integrate(|u| f(c + h * u))
}

/// Composite 10-point Gauss–Legendre on `[a,b]`, doubling the panel count from 8 until two
/// successive values agree to `tol` (at most 2¹⁶ panels).
///
/// Equispaced rules such as Simpson's sample trigonometric integrands at their zeros and can
/// stop at a wrong value; the Legendre nodes are irrational and do not alias.
pub fn composite_legendre(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let rule = gauss_legendre(10);
    let sum = |panels: usize| {
        let h = (b - a) / panels as f64;
        (0..panels).map(|i| integrate_on(&rule, a + i as f64 * h, a + (i + 1) as f64 * h, f)).sum::<f64>()
    };
    let mut panels = 8;
    let mut prev = sum(panels);
    while panels < 1 << 16 {
        panels *= 2;
        let next = sum(panels);
        if (next - prev).abs() <= tol {
            return next;
        }
        prev = next;
    }
    prev
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hermite_moments_are_exact_for_polynomials() {
        let r = gauss_hermite(21);
        assert!((r.integrate(|_| 1.0) - 1.0).abs() < 1e-14);
        assert!(r.integrate(|z| z).abs() < 1e-14);
        assert!((r.integrate(|z| z * z) - 1.0).abs() < 1e-13);
        assert!((r.integrate(|z| z.powi(4)) - 3.0).abs() < 1e-12);
        assert!((r.integrate(|z| z.powi(8)) - 105.0).abs() < 1e-9);
        // E[cos z] = e^{-1/2}
        assert!((r.integrate(f64::cos) - (-0.5f64).exp()).abs() < 1e-14);
    }

    #[test]
    fn hermite_rule_is_mirror_symmetric() {
        for n in [2, 5, 20, 21] {
            let r = gauss_hermite(n);
            for i in 0..n {
                assert_eq!(r.nodes[i], -r.nodes[n - 1 - i]);
                assert_eq!(r.weights[i], r.weights[n - 1 - i]);
            }
        }
    }

    #[test]
    fn legendre_integrates_polynomials() {
        let r = gauss_legendre(6);
        assert!((r.integrate(|_| 1.0) - 2.0).abs() < 1e-14);
        assert!((r.integrate(|x| x.powi(10)) - 2.0 / 11.0).abs() < 1e-14);
        assert!((integrate_on(&r, 0.0, 2.0, |x| x * x) - 8.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn composite_legendre_reaches_tolerance() {
        let v = composite_legendre(&|x: f64| x.sin().powi(2), 0.0, 3.0, 1e-12);
        let exact = 1.5 - (6.0f64).sin() / 4.0;
        assert!((v - exact).abs() < 1e-10);
    }

    #[test]
    fn composite_legendre_does_not_alias_on_trig_products() {
        // sin²(2π·16 t) vanishes at every dyadic node up to 1/32
        let w = 2.0 * std::f64::consts::PI * 16.0;
        let v = composite_legendre(&|t: f64| (w * t).sin().powi(2), 0.0, 1.0, 1e-12);
        assert!((v - 0.5).abs() < 1e-10, "{v}");
    }
}
