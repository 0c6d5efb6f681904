//! Trigonometric basis of `L²([0,T])`, the ramp operator `Λ`, Fejér coefficients and the
//! smoothing operator `T_n`.

use std::f64::consts::PI;

use crate::error::Result;
use crate::path::GridPath;
use crate::quadrature::gauss_legendre;
use crate::regcalc::{forward_integral, IntegrandFn};

/// Basis function `e_ℓ` on `[0,T]` with its zero-mean primitive `E_ℓ`.
///
/// `e_0 = 1/√T`, `e_{2m−1} = √(2/T) sin(2mπt/T)`, `e_{2m} = √(2/T) cos(2mπt/T)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FourierBasis {
    pub horizon: f64,
    pub index: usize,
}

impl FourierBasis {
    pub fn new(horizon: f64, index: usize) -> Self {
        Self { horizon, index }
    }

    fn freq(&self) -> f64 {
        (self.index.div_ceil(2)) as f64
    }

    pub fn e(&self, t: f64) -> f64 {
        let tt = self.horizon;
        if self.index == 0 {
            return 1.0 / tt.sqrt();
        }
        let arg = 2.0 * self.freq() * PI * t / tt;
        let c = (2.0 / tt).sqrt();
        if self.index % 2 == 1 {
            c * arg.sin()
        } else {
            c * arg.cos()
        }
    }

    /// Derivative of `e_ℓ`.
    pub fn de(&self, t: f64) -> f64 {
        let tt = self.horizon;
        if self.index == 0 {
            return 0.0;
        }
        let w = 2.0 * self.freq() * PI / tt;
        let c = (2.0 / tt).sqrt();
        if self.index % 2 == 1 {
            c * w * (w * t).cos()
        } else {
            -c * w * (w * t).sin()
        }
    }

    /// Primitive `E_ℓ` with zero mean on `[0,T]`.
    pub fn primitive(&self, t: f64) -> f64 {
        let tt = self.horizon;
        if self.index == 0 {
            return t / tt.sqrt() - tt.sqrt() / 2.0;
        }
        let m = self.freq();
        let arg = 2.0 * m * PI * t / tt;
        let c = (tt / 2.0).sqrt() / (m * PI);
        if self.index % 2 == 1 {
            -c * arg.cos()
        } else {
            c * arg.sin()
        }
    }

    /// `E_ℓ` as a forward-integral integrand (`dE_ℓ = e_ℓ dt`).
    pub fn primitive_integrand(&self) -> IntegrandFn {
        let b = *self;
        IntegrandFn::smooth(move |t| b.primitive(t), move |t| b.e(t))
    }

    /// `e_ℓ` as an integrand.
    pub fn integrand(&self) -> IntegrandFn {
        let b = *self;
        IntegrandFn::smooth(move |t| b.e(t), move |t| b.de(t))
    }
}

/// `(Λx)(t) = x(T) t/T`.
pub fn lambda_op(x: &GridPath) -> GridPath {
    let g = *x.grid();
    let xt = x.terminal().to_vec();
    GridPath::from_fn(g, x.dim(), |t| xt.iter().map(|v| v * t / g.horizon()).collect())
}

/// `(x − Λx)_ℓ = −∫_[0,T] E_ℓ d⁻x`.
pub fn fejer_coefficient(x: &GridPath, index: usize) -> Result<Vec<f64>> {
    let b = FourierBasis::new(x.grid().horizon(), index);
    let v = forward_integral(&b.primitive_integrand(), x, x.grid().horizon())?;
    Ok(v.into_iter().map(|c| -c).collect())
}

/// `∫₀ᵀ (x − Λx) e_ℓ dt` by Gauss–Legendre on every cell; the cross-check for [`fejer_coefficient`].
pub fn fejer_coefficient_quadrature(x: &GridPath, index: usize) -> Vec<f64> {
    let g = *x.grid();
    let b = FourierBasis::new(g.horizon(), index);
    let rule = gauss_legendre(6);
    let d = x.dim();
    let xt = x.terminal().to_vec();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    for k in 0..g.steps() {
        let (a, c) = (g.node(k), g.node(k + 1));
        let h = 0.5 * (c - a);
        for (u, w) in rule.nodes.iter().zip(&rule.weights) {
            let s = 0.5 * (a + c) + h * u;
            x.eval_into(s, &mut buf);
            let e = b.e(s) * w * h;
            for i in 0..d {
                acc[i] += (buf[i] - xt[i] * s / g.horizon()) * e;
            }
        }
    }
    acc
}

/// Weight `(n+1−ℓ)/(n+1)` of index `ℓ` in the Cesàro mean `σ_n`.
pub fn fejer_weight(n: usize, index: usize) -> f64 {
    if index > n {
        0.0
    } else {
        (n + 1 - index) as f64 / (n + 1) as f64
    }
}

/// `σ_n(x − Λx)` on the grid of `x`.
pub fn fejer_mean(x: &GridPath, n: usize) -> Result<GridPath> {
    let g = *x.grid();
    let d = x.dim();
    let mut out = GridPath::zeros(g, d);
    for l in 0..=n {
        let c = fejer_coefficient(x, l)?;
        let b = FourierBasis::new(g.horizon(), l);
        let w = fejer_weight(n, l);
        for k in 0..=g.steps() {
            let e = w * b.e(g.node(k));
            let row = out.at_mut(k);
            for i in 0..d {
                row[i] += c[i] * e;
            }
        }
    }
    Ok(out)
}

/// `T_n x = x(T) e_{−1} + Σ_{ℓ=1}^n (n+1−ℓ)/(n+1) (x − Λx)_ℓ (e_ℓ − e_ℓ(0))`, `e_{−1}(t) = t/T`.
pub fn fejer_t_n(x: &GridPath, n: usize) -> Result<GridPath> {
    let coeffs = (1..=n).map(|l| fejer_coefficient(x, l)).collect::<Result<Vec<_>>>()?;
    let mut z = Vec::with_capacity((n + 1) * x.dim());
    z.extend_from_slice(x.terminal());
    for c in &coeffs {
        // reconstruction takes ∫E_ℓ d⁻x = −(x − Λx)_ℓ
        z.extend(c.iter().map(|v| -v));
    }
    Ok(reconstruct(x.grid(), x.dim(), n, &z))
}

/// The path `z_0 e_{−1} − Σ_{ℓ=1}^n (n+1−ℓ)/(n+1) z_ℓ (e_ℓ − e_ℓ(0))` on `grid`, with `z` stacked
/// as `n+1` blocks of length `d`.
pub fn reconstruct(grid: &crate::path::TimeGrid, d: usize, n: usize, z: &[f64]) -> GridPath {
    Reconstructor::new(*grid, d, n).apply(z)
}

/// Tabulated `(n+1−ℓ)/(n+1)·(e_ℓ − e_ℓ(0))` on a grid, for repeated reconstructions.
#[derive(Clone, Debug)]
pub struct Reconstructor {
    grid: crate::path::TimeGrid,
    dim: usize,
    n: usize,
    table: Vec<f64>,
}

impl Reconstructor {
    pub fn new(grid: crate::path::TimeGrid, dim: usize, n: usize) -> Self {
        let big_t = grid.horizon();
        let m = grid.steps() + 1;
        let mut table = vec![0.0; n * m];
        for l in 1..=n {
            let b = FourierBasis::new(big_t, l);
            let (e0, w) = (b.e(0.0), fejer_weight(n, l));
            for k in 0..m {
                table[(l - 1) * m + k] = w * (b.e(grid.node(k)) - e0);
            }
        }
        Self { grid, dim, n, table }
    }

    pub fn grid(&self) -> &crate::path::TimeGrid {
        &self.grid
    }

    /// `z₀·t/T − Σ_ℓ w_ℓ z_ℓ (e_ℓ − e_ℓ(0))`.
    pub fn apply(&self, z: &[f64]) -> GridPath {
        let mut out = GridPath::zeros(self.grid, self.dim);
        self.apply_into(z, &mut out);
        out
    }

    pub fn apply_into(&self, z: &[f64], out: &mut GridPath) {
        let d = self.dim;
        assert_eq!(z.len(), (self.n + 1) * d, "coefficient vector has wrong length");
        let big_t = self.grid.horizon();
        let m = self.grid.steps() + 1;
        for k in 0..m {
            let t = self.grid.node(k);
            let row = out.at_mut(k);
            for i in 0..d {
                row[i] = z[i] * t / big_t;
            }
            for l in 0..self.n {
                let f = self.table[l * m + k];
                let zl = &z[(l + 1) * d..(l + 2) * d];
                for i in 0..d {
                    row[i] -= zl[i] * f;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{simulate_semimartingale_rng, SemimartingaleSpec, TimeGrid};
    use crate::rng::stream_rng;
    use proptest::prelude::*;

    #[test]
    fn orthonormal_by_grid_quadrature() {
        let big_t = 1.7;
        let m = 10_000;
        let h = big_t / m as f64;
        let rule = gauss_legendre(4);
        for i in 0..=32 {
            for j in i..=32 {
                let (bi, bj) = (FourierBasis::new(big_t, i), FourierBasis::new(big_t, j));
                let mut s = 0.0;
                for k in 0..m {
                    let a = k as f64 * h;
                    for (u, w) in rule.nodes.iter().zip(&rule.weights) {
                        let t = a + 0.5 * h * (1.0 + u);
                        s += 0.5 * h * w * bi.e(t) * bj.e(t);
                    }
                }
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((s - target).abs() < 1e-8, "({i},{j}) {s}");
            }
        }
    }

    #[test]
    fn primitives_differentiate_to_basis() {
        let big_t = 2.0;
        for l in 0..12 {
            let b = FourierBasis::new(big_t, l);
            for &t in &[0.1, 0.77, 1.3, 1.95] {
                let h = 1e-5;
                let fd = (b.primitive(t + h) - b.primitive(t - h)) / (2.0 * h);
                assert!((fd - b.e(t)).abs() < 1e-7);
                let fd2 = (b.e(t + h) - b.e(t - h)) / (2.0 * h);
                assert!((fd2 - b.de(t)).abs() < 1e-5 * (1.0 + l as f64).powi(2));
            }
            let mean = crate::quadrature::integrate_on(&gauss_legendre(40), 0.0, big_t, |t| b.primitive(t));
            assert!(mean.abs() < 1e-12);
        }
    }

    #[test]
    fn lambda_examples() {
        let g = TimeGrid::new(1.0, 20).unwrap();
        assert_eq!(lambda_op(&GridPath::zeros(g, 1)), GridPath::zeros(g, 1));
        let ramp = GridPath::from_fn_1d(g, |s| s);
        let l = lambda_op(&ramp);
        for k in 0..=20 {
            assert!((l.at(k)[0] - ramp.at(k)[0]).abs() < 1e-15);
        }
        let c = lambda_op(&GridPath::constant(g, &[3.0]));
        assert!((c.at(10)[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn coefficient_examples() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        let ramp = GridPath::from_fn_1d(g, |s| 0.8 * s);
        for l in 0..10 {
            assert!(fejer_coefficient(&GridPath::zeros(g, 1), l).unwrap()[0].abs() < 1e-15);
            assert!(fejer_coefficient(&ramp, l).unwrap()[0].abs() < 1e-12);
        }
        // sin(2πs) = √(1/2) e_1, so its first coefficient is √(1/2) up to interpolation error
        let x = GridPath::from_fn_1d(g, |s| (2.0 * PI * s).sin());
        let c1 = fejer_coefficient(&x, 1).unwrap()[0];
        let q1 = fejer_coefficient_quadrature(&x, 1)[0];
        assert!((c1 - q1).abs() < 1e-12);
        assert!((c1 - 0.5f64.sqrt()).abs() < 1e-6, "{c1}");
    }

    #[test]
    fn t_n_examples() {
        let g = TimeGrid::new(1.0, 2000).unwrap();
        let ramp = GridPath::from_fn_1d(g, |s| -1.3 * s);
        for n in [0, 3, 16] {
            let t = fejer_t_n(&ramp, n).unwrap();
            for k in 0..=2000 {
                assert!((t.at(k)[0] - ramp.at(k)[0]).abs() < 1e-12);
            }
        }
        assert_eq!(fejer_t_n(&GridPath::zeros(g, 2), 5).unwrap(), GridPath::zeros(g, 2));
        let x = GridPath::from_fn_1d(g, |s| (2.0 * PI * s).sin());
        let t64 = fejer_t_n(&x, 64).unwrap();
        assert!(t64.sub(&x).unwrap().sup_norm() < 0.05);
        assert!((t64.terminal()[0] - x.terminal()[0]).abs() < 1e-12);
    }

    #[test]
    fn index_weighted_mean_is_not_a_contraction_in_general() {
        // the Cesàro mean over basis indices splits a sine/cosine pair when n is odd; its
        // Lebesgue constant exceeds one, e.g. for n = 3 on a sign-pattern input
        let g = TimeGrid::new(1.0, 4000).unwrap();
        let n = 3;
        let kernel = |t: f64, s: f64| {
            (0..=n)
                .map(|l| {
                    let b = FourierBasis::new(1.0, l);
                    fejer_weight(n, l) * b.e(t) * b.e(s)
                })
                .sum::<f64>()
        };
        let mut lebesgue = 0.0f64;
        for j in 0..200 {
            let t = j as f64 / 200.0;
            let mut l1 = 0.0;
            for k in 0..4000 {
                l1 += kernel(t, g.node(k) + 0.5 * g.dt()).abs() * g.dt();
            }
            lebesgue = lebesgue.max(l1);
        }
        assert!(lebesgue > 1.1, "{lebesgue}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn fejer_bounds_on_brownian_paths(seed in 0u64..10_000, n in 0usize..=256, scale in 0.1..5.0f64) {
            let g = TimeGrid::new(1.0, 512).unwrap();
            let bm = SemimartingaleSpec::brownian(vec![0.0]);
            let raw = simulate_semimartingale_rng(&bm, g, &mut stream_rng(seed, 0)).unwrap();
            let x = GridPath::from_fn_1d(g, |t| scale * raw.eval(t)[0]);
            let y = x.sub(&lambda_op(&x)).unwrap();
            let s = fejer_mean(&x, n.min(96)).unwrap();
            prop_assert!(s.sup_norm() <= y.sup_norm() * (1.0 + 1e-9));
            let t = fejer_t_n(&x, n).unwrap();
            prop_assert!(t.sup_norm() <= 5.0 * x.sup_norm());
        }

        #[test]
        fn coefficient_identity(seed in 0u64..10_000, l in 0usize..=64) {
            let g = TimeGrid::new(1.0, 400).unwrap();
            let bm = SemimartingaleSpec::brownian(vec![0.3, -0.2]);
            let x = simulate_semimartingale_rng(&bm, g, &mut stream_rng(seed, 1)).unwrap();
            let a = fejer_coefficient(&x, l).unwrap();
            let b = fejer_coefficient_quadrature(&x, l);
            for i in 0..2 {
                prop_assert!((a[i] - b[i]).abs() < 1e-6);
            }
        }
    }
}
