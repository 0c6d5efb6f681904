//! Calculus via regularization: forward integrals `∫ g d⁻f` against grid paths and the
//! ε-regularized mutual brackets.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::path::{GridPath, TimeGrid};
use crate::quadrature::{gauss_legendre, Rule};

type ScalarFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Deterministic integrand `g: [0,T] → R`.
///
/// With `bounded_variation` set, `dg` is either the supplied derivative or, when absent,
/// the difference measure of `g` on the integrator's grid.
#[derive(Clone)]
pub struct IntegrandFn {
    g: ScalarFn,
    derivative: Option<ScalarFn>,
    bounded_variation: bool,
}

impl std::fmt::Debug for IntegrandFn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("IntegrandFn")
            .field("bounded_variation", &self.bounded_variation)
            .field("has_derivative", &self.derivative.is_some())
            .finish()
    }
}

impl IntegrandFn {
    /// C¹ integrand with its derivative.
    pub fn smooth(
        g: impl Fn(f64) -> f64 + Send + Sync + 'static,
        dg: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { g: Arc::new(g), derivative: Some(Arc::new(dg)), bounded_variation: true }
    }

    /// Bounded-variation integrand whose measure is taken from grid differences.
    pub fn grid_bv(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { g: Arc::new(g), derivative: None, bounded_variation: true }
    }

    /// Integrand with no variation information; only the regularized integral accepts it.
    pub fn opaque(g: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { g: Arc::new(g), derivative: None, bounded_variation: false }
    }

    pub fn constant(c: f64) -> Self {
        Self::smooth(move |_| c, |_| 0.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        (self.g)(t)
    }

    pub fn derivative(&self, t: f64) -> Option<f64> {
        self.derivative.as_ref().map(|d| d(t))
    }

    pub fn is_bounded_variation(&self) -> bool {
        self.bounded_variation
    }
}

thread_local! {
    static GL4: Rule = gauss_legendre(4);
}

fn gl4(a: f64, b: f64, mut f: impl FnMut(f64, f64)) {
    GL4.with(|r| {
        let h = 0.5 * (b - a);
        let c = 0.5 * (a + b);
        for (u, w) in r.nodes.iter().zip(&r.weights) {
            f(c + h * u, h * w);
        }
    });
}

/// `∫_(0,t] f dg`, one entry per coordinate of `f`.
pub fn stieltjes(f: &GridPath, g: &IntegrandFn, t: f64) -> Result<Vec<f64>> {
    if !g.bounded_variation {
        return Err(Error::Contract("integrand has no derivative or difference measure".into()));
    }
    let grid = f.grid();
    check_time(grid, t)?;
    let d = f.dim();
    let mut acc = vec![0.0; d];
    let mut buf = vec![0.0; d];
    let (last, _) = grid.locate(t);
    for k in 0..=last {
        let a = grid.node(k);
        let b = grid.node(k + 1).min(t);
        if b <= a {
            break;
        }
        match &g.derivative {
            Some(dg) => gl4(a, b, |s, w| {
                f.eval_into(s, &mut buf);
                let gw = w * dg(s);
                for i in 0..d {
                    acc[i] += buf[i] * gw;
                }
            }),
            None => {
                f.eval_into(0.5 * (a + b), &mut buf);
                let dg = g.value(b) - g.value(a);
                for i in 0..d {
                    acc[i] += buf[i] * dg;
                }
            }
        }
    }
    Ok(acc)
}

fn check_time(grid: &TimeGrid, t: f64) -> Result<()> {
    let tol = 1e-12 * grid.horizon();
    if !(t >= -tol && t <= grid.horizon() + tol) {
        return Err(Error::Domain(format!("time {t} outside [0, {}]", grid.horizon())));
    }
    Ok(())
}

/// `∫_[0,t] g d⁻f` by parts: `g(t) f(t) − ∫_(0,t] f dg`. `t` may lie between nodes.
pub fn forward_integral(g: &IntegrandFn, f: &GridPath, t: f64) -> Result<Vec<f64>> {
    let s = stieltjes(f, g, t)?;
    let gt = g.value(t);
    let ft = f.eval(t);
    Ok(ft.iter().zip(&s).map(|(fv, sv)| gt * fv - sv).collect())
}

/// The ε-regularized forward integral with the boundary extensions (f frozen at `f(t)` on the
/// right and zero on the left of 0; g equal to `g(0)` on the left of 0 and zero on the right of t).
pub fn forward_integral_limit(g: &IntegrandFn, f: &GridPath, t: f64, eps: f64) -> Result<Vec<f64>> {
    let grid = f.grid();
    check_time(grid, t)?;
    if !(eps >= grid.dt() * (1.0 - 1e-9)) {
        return Err(Error::Resolution(format!("eps {eps} below grid step {}", grid.dt())));
    }
    let d = f.dim();
    let f_ext = |s: f64, out: &mut [f64]| {
        if s < 0.0 {
            out.iter_mut().for_each(|v| *v = 0.0);
        } else {
            f.eval_into(s.min(t), out);
        }
    };
    let g_ext = |s: f64| if s <= 0.0 { g.value(0.0) } else { g.value(s) };
    let mut breaks = vec![-eps, 0.0, t, t - eps];
    for k in 0..=grid.steps() {
        let n = grid.node(k);
        if n <= t {
            breaks.push(n);
        }
        if n - eps >= -eps && n - eps <= t {
            breaks.push(n - eps);
        }
    }
    breaks.retain(|b| *b >= -eps && *b <= t);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup_by(|a, b| (*a - *b).abs() < 1e-15);
    let mut acc = vec![0.0; d];
    let mut fa = vec![0.0; d];
    let mut fb = vec![0.0; d];
    for w in breaks.windows(2) {
        gl4(w[0], w[1], |s, wt| {
            f_ext(s + eps, &mut fa);
            f_ext(s, &mut fb);
            let gv = g_ext(s) * wt / eps;
            for i in 0..d {
                acc[i] += gv * (fa[i] - fb[i]);
            }
        });
    }
    Ok(acc)
}

/// Regularized covariation `t ↦ (1/ε)∫₀ᵗ ΔᵋXⁱ ΔᵋXʲ ds` sampled at the grid nodes.
#[derive(Clone, Debug)]
pub struct BracketEstimate {
    pub epsilon: f64,
    pub values: Vec<f64>,
}

impl BracketEstimate {
    pub fn terminal(&self) -> f64 {
        *self.values.last().unwrap()
    }
}

/// Mutual bracket of two scalar series on `grid`.
pub fn mutual_bracket(grid: &TimeGrid, xi: &[f64], xj: &[f64], eps: f64) -> Result<BracketEstimate> {
    let m = grid.steps();
    if xi.len() != m + 1 || xj.len() != m + 1 {
        return Err(Error::Domain("series length does not match grid".into()));
    }
    if !(eps >= grid.dt() * (1.0 - 1e-9)) {
        return Err(Error::Resolution(format!("eps {eps} below grid step {}", grid.dt())));
    }
    let big_t = grid.horizon();
    let dt = grid.dt();
    let interp = |x: &[f64], s: f64| {
        let (k, w) = grid.locate(s);
        x[k] + w * (x[k + 1] - x[k])
    };
    // left-point Riemann sum on the nodes; at eps = dt this is the discrete covariation
    let mut values = Vec::with_capacity(m + 1);
    values.push(0.0);
    let mut acc = 0.0;
    for k in 0..m {
        let s = grid.node(k);
        let u = (s + eps).min(big_t);
        acc += dt * (interp(xi, u) - xi[k]) * (interp(xj, u) - xj[k]);
        values.push(acc / eps);
    }
    Ok(BracketEstimate { epsilon: eps, values })
}

/// Bracket of coordinates `i`, `j` of one path.
pub fn path_bracket(x: &GridPath, i: usize, j: usize, eps: f64) -> Result<BracketEstimate> {
    mutual_bracket(x.grid(), &x.component(i), &x.component(j), eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{simulate_semimartingale_rng, SemimartingaleSpec};
    use crate::rng::par_streams;
    use proptest::prelude::*;

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::new(1.0, m).unwrap()
    }

    #[test]
    fn by_parts_examples() {
        let g = grid(100);
        let x = GridPath::from_fn_1d(g, |s| (4.0 * s).sin() + s);
        let one = IntegrandFn::constant(1.0);
        assert!((forward_integral(&one, &x, 1.0).unwrap()[0] - x.terminal()[0]).abs() < 1e-14);
        let ramp = GridPath::from_fn_1d(g, |s| s);
        let id = IntegrandFn::smooth(|s| s, |_| 1.0);
        assert!((forward_integral(&id, &ramp, 1.0).unwrap()[0] - 0.5).abs() < 1e-14);
        let id_grid = IntegrandFn::grid_bv(|s| s);
        assert!((forward_integral(&id_grid, &ramp, 1.0).unwrap()[0] - 0.5).abs() < 1e-14);
        let c = GridPath::constant(g, &[-1.5, 2.0]);
        let v = forward_integral(&one, &c, 0.37).unwrap();
        assert_eq!(v, vec![-1.5, 2.0]);
        assert!(matches!(forward_integral(&IntegrandFn::opaque(|s| s), &ramp, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn by_parts_matches_closed_form() {
        // g = cos, f(s) = s²: cos1·1 + ∫₀¹ s² sin s ds = 2cos1 + 2sin1 − 2
        let g = grid(2000);
        let f = GridPath::from_fn_1d(g, |s| s * s);
        let gi = IntegrandFn::smooth(f64::cos, |s| -s.sin());
        let exact = 2.0 * 1f64.cos() + 2.0 * 1f64.sin() - 2.0;
        let v = forward_integral(&gi, &f, 1.0).unwrap()[0];
        assert!((v - exact).abs() < 1e-7, "{v} vs {exact}");
    }

    #[test]
    fn off_grid_time_uses_partial_cell() {
        let g = grid(10);
        let ramp = GridPath::from_fn_1d(g, |s| s);
        let id = IntegrandFn::smooth(|s| s, |_| 1.0);
        // t² − t²/2
        let t = 0.437;
        assert!((forward_integral(&id, &ramp, t).unwrap()[0] - 0.5 * t * t).abs() < 1e-14);
    }

    #[test]
    fn regularized_limit_converges_linearly() {
        let g = grid(1000);
        let x = GridPath::from_fn_1d(g, |s| s * s + 0.5);
        // with g ≡ 1 the regularized integral telescopes to f(t) for every eps
        let one = IntegrandFn::constant(1.0);
        for eps in [0.1, 0.01, 0.001] {
            assert!((forward_integral_limit(&one, &x, 1.0, eps).unwrap()[0] - 1.5).abs() < 1e-12);
        }
        let gi = IntegrandFn::smooth(|s| (3.0 * s).cos(), |s| -3.0 * (3.0 * s).sin());
        let exact = forward_integral(&gi, &x, 1.0).unwrap()[0];
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.05, 0.01, 0.001] {
            let err = (forward_integral_limit(&gi, &x, 1.0, eps).unwrap()[0] - exact).abs();
            assert!(err < prev && err < 3.0 * eps, "eps {eps} err {err}");
            prev = err;
        }
        let c = GridPath::constant(g, &[0.8]);
        let v = forward_integral_limit(&one, &c, 0.6, 0.01).unwrap()[0];
        assert!((v - 0.8).abs() < 1e-12);
        assert!(matches!(forward_integral_limit(&one, &x, 1.0, 1e-4), Err(Error::Resolution(_))));
    }

    proptest! {
        #[test]
        fn regularization_agrees_with_by_parts(a in -2.0..2.0f64, b in -2.0..2.0f64, w in 0.5..6.0f64,
                                               c in -1.0..1.0f64, tk in 200usize..=400) {
            let g = TimeGrid::new(1.0, 400).unwrap();
            let x = GridPath::from_fn_1d(g, |s| a * (w * s).sin() + b * s * s + c);
            let gi = IntegrandFn::smooth(|s| (2.0 * s).cos() + s, |s| -2.0 * (2.0 * s).sin() + 1.0);
            let t = g.node(tk);
            let exact = forward_integral(&gi, &x, t).unwrap()[0];
            let scale = 1.0 + a.abs() * w + 2.0 * b.abs();
            for eps in [0.04, 0.02, 0.01] {
                let v = forward_integral_limit(&gi, &x, t, eps).unwrap()[0];
                prop_assert!((v - exact).abs() <= 6.0 * scale * eps, "eps {} diff {}", eps, (v - exact).abs());
            }
        }

        #[test]
        fn bracket_is_symmetric_and_bilinear(v in prop::collection::vec(-1.0..1.0f64, 33),
                                             u in prop::collection::vec(-1.0..1.0f64, 33),
                                             a in -2.0..2.0f64) {
            let g = TimeGrid::new(1.0, 32).unwrap();
            let eps = 3.0 * g.dt();
            let xy = mutual_bracket(&g, &v, &u, eps).unwrap();
            let yx = mutual_bracket(&g, &u, &v, eps).unwrap();
            let scaled: Vec<f64> = v.iter().map(|x| a * x).collect();
            let sy = mutual_bracket(&g, &scaled, &u, eps).unwrap();
            let vv = mutual_bracket(&g, &v, &v, eps).unwrap();
            for k in 0..=32 {
                prop_assert!((xy.values[k] - yx.values[k]).abs() < 1e-13);
                prop_assert!((sy.values[k] - a * xy.values[k]).abs() < 1e-12);
                prop_assert!(vv.values[k] >= -1e-15);
                if k > 0 { prop_assert!(vv.values[k] >= vv.values[k - 1] - 1e-15); }
            }
        }
    }

    fn mean_se(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, (var / n).sqrt())
    }

    #[test]
    fn brownian_brackets() {
        let g = grid(500);
        let bm = SemimartingaleSpec::brownian(vec![0.0, 0.0]);
        let eps = 2.0 * g.dt();
        let res = par_streams(31, 1000, |_, r| {
            let x = simulate_semimartingale_rng(&bm, g, r).unwrap();
            (path_bracket(&x, 0, 0, eps).unwrap().terminal(), path_bracket(&x, 0, 1, eps).unwrap().terminal())
        });
        let diag: Vec<f64> = res.iter().map(|p| p.0).collect();
        let cross: Vec<f64> = res.iter().map(|p| p.1).collect();
        let (m, se) = mean_se(&diag);
        // the last ε of increments is truncated at T: E = T − ε/2 + O(dt)
        assert!((m - (1.0 - eps / 2.0)).abs() < 3.0 * se + g.dt(), "{m} {se}");
        let (mc, sec) = mean_se(&cross);
        assert!(mc.abs() < 3.0 * sec);
    }

    #[test]
    fn smooth_path_bracket_vanishes() {
        let g = grid(1000);
        let x: Vec<f64> = (0..=1000).map(|k| (3.0 * g.node(k)).sin()).collect();
        let mut prev = f64::INFINITY;
        for eps in [0.1, 0.01, 0.001] {
            let b = mutual_bracket(&g, &x, &x, eps).unwrap().terminal();
            assert!(b < prev);
            prev = b;
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn bracket_ucp_distance_shrinks_with_eps() {
        let g = grid(1000);
        let bm = SemimartingaleSpec::brownian(vec![0.0]);
        let paths: Vec<GridPath> = par_streams(8, 200, |_, r| simulate_semimartingale_rng(&bm, g, r).unwrap());
        let sup_err = |eps: f64| {
            paths
                .iter()
                .map(|x| {
                    let b = path_bracket(x, 0, 0, eps).unwrap();
                    (0..=1000).map(|k| (b.values[k] - g.node(k)).abs()).fold(0.0, f64::max)
                })
                .sum::<f64>()
                / paths.len() as f64
        };
        let e1 = sup_err(0.1);
        let e2 = sup_err(0.01);
        let e3 = sup_err(0.002);
        assert!(e1 > e2 && e2 > e3, "{e1} {e2} {e3}");
    }
}
