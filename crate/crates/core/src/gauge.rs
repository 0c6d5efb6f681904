//! Smooth gauge function on the path space.
//!
//! `κ̂` smooths the stopped sup-distance to an anchor in the present value with a Gaussian
//! kernel, `χ̂` smooths `κ̂/(1+κ̂)` forward in time with the kernel `η` (the χ²₃ density),
//! `ρ∞ = |t−t₀|² + χ∞`, and `φ_ε` is a geometric series of gauges to a sequence of anchors.

use std::f64::consts::{E, PI};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::cylinder::{LiftedFunctional, PathwiseDerivs};
use crate::error::{Error, Result};
use crate::path::{GridPath, PathPoint, TimeGrid};
use crate::quadrature::{gauss_hermite, gauss_legendre, Rule};
use crate::rng::stream_rng;

/// Anchor `(t₀, x₀)`; the time is always a grid node.
pub type GaugeAnchor = PathPoint;

pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// `∫|z|ζ(z)dz` by radial Gauss–Legendre quadrature on `[0, 40]`, with the sphere area from the
/// recursion `S_k = 2π S_{k−2}/(k−1)`; no Gamma function involved.
pub fn c_zeta_quadrature(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("dimension must be ≥ 1".into()));
    }
    let mut area = if d % 2 == 1 { 2.0 } else { 2.0 * PI };
    let mut k = 2 - d % 2;
    while k < d {
        k += 2;
        area *= 2.0 * PI / (k as f64 - 2.0);
    }
    let gl = gauss_legendre(20);
    let norm = (2.0 * PI).powf(-(d as f64) / 2.0);
    let radial: f64 = (0..400)
        .map(|i| {
            let a = i as f64 * 0.1;
            crate::quadrature::integrate_on(&gl, a, a + 0.1, |r| r.powi(d as i32) * (-0.5 * r * r).exp())
        })
        .sum();
    Ok(area * norm * radial)
}

/// `∫|η′| = √(2/(πe))`.
pub fn eta_variation() -> f64 {
    (2.0 / (PI * E)).sqrt()
}

/// Bound on `|∂ⱽκ̂|`.
pub const KAPPA_V1_BOUND: f64 = 1.0;
/// Bound on `|∂ⱽⱽκ̂|`.
pub const KAPPA_V2_BOUND: f64 = SQRT_2_OVER_PI;
pub const CHI_V1_BOUND: f64 = 1.0;
pub const CHI_V2_BOUND: f64 = SQRT_2_OVER_PI + 2.0;

pub fn chi_h_bound() -> f64 {
    eta_variation()
}

pub fn phi_h_bound(horizon: f64) -> f64 {
    2.0 * (2.0 * horizon + eta_variation())
}

pub const PHI_V1_BOUND: f64 = 2.0;
pub const PHI_V2_BOUND: f64 = 2.0 * (SQRT_2_OVER_PI + 2.0);

fn std_pdf(x: f64) -> f64 {
    if x.is_infinite() {
        0.0
    } else {
        (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
    }
}

fn std_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

/// Standard Gaussian density on `R^d`.
pub fn zeta(z: &[f64]) -> f64 {
    let r2: f64 = z.iter().map(|v| v * v).sum();
    (2.0 * PI).powf(-0.5 * z.len() as f64) * (-0.5 * r2).exp()
}

/// `E|z| = √2 Γ((d+1)/2)/Γ(d/2)` for standard Gaussian `z ∈ R^d`.
pub fn c_zeta(d: usize) -> Result<f64> {
    if d == 0 {
        return Err(Error::Domain("dimension must be ≥ 1".into()));
    }
    let d = d as f64;
    Ok(std::f64::consts::SQRT_2 * (ln_gamma(0.5 * d + 0.5) - ln_gamma(0.5 * d)).exp())
}

/// `η(s) = √(s/2π) e^{−s/2}`.
pub fn eta(s: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("η needs s ≥ 0, got {s}")));
    }
    Ok((s / (2.0 * PI)).sqrt() * (-0.5 * s).exp())
}

/// `η′(s)`; `+∞` at `s = 0`.
pub fn eta_prime(s: f64) -> Result<f64> {
    if !(s >= 0.0) {
        return Err(Error::Domain(format!("η′ needs s ≥ 0, got {s}")));
    }
    if s == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok((-0.5 * s).exp() / (2.0 * PI).sqrt() * (0.5 / s.sqrt() - 0.5 * s.sqrt()))
}

/// `∫_s^∞ η` (survival function of χ²₃).
pub fn eta_tail(s: f64) -> f64 {
    if s <= 0.0 {
        return 1.0;
    }
    libm::erfc((0.5 * s).sqrt()) + (2.0 * s / PI).sqrt() * (-0.5 * s).exp()
}

/// How the Gaussian `z`-integral is computed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ZMethod {
    /// Closed form for `d = 1`, Gauss–Hermite for `d = 2`, Monte Carlo beyond.
    Auto,
    Exact,
    GaussHermite,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QuadratureConfig {
    pub z_method: ZMethod,
    pub gh_nodes: usize,
    pub mc_samples: usize,
    pub seed: u64,
    /// Truncation of the `η` integral.
    pub s_max: f64,
    pub s_panels: usize,
    pub s_nodes: usize,
}

impl Default for QuadratureConfig {
    fn default() -> Self {
        Self { z_method: ZMethod::Auto, gh_nodes: 21, mc_samples: 100_000, seed: 0, s_max: 40.0, s_panels: 24, s_nodes: 4 }
    }
}

impl QuadratureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gh_nodes < 2 || self.mc_samples < 2 || self.s_panels == 0 || self.s_nodes == 0 {
            return Err(Error::Input("quadrature counts must be positive (Gauss–Hermite ≥ 2)".into()));
        }
        if !(self.s_max >= 20.0) {
            return Err(Error::Input(format!("s_max = {} below 20", self.s_max)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ZTable {
    points: Vec<f64>,
    weights: Vec<f64>,
    abs_mean: f64,
}

impl ZTable {
    fn gh(d: usize, n: usize) -> Self {
        let r = gauss_hermite(n);
        let total = n.pow(d as u32);
        let mut points = Vec::with_capacity(total * d);
        let mut weights = Vec::with_capacity(total);
        for flat in 0..total {
            let mut f = flat;
            let mut w = 1.0;
            for _ in 0..d {
                points.push(r.nodes[f % n]);
                w *= r.weights[f % n];
                f /= n;
            }
            weights.push(w);
        }
        Self::finish(d, points, weights)
    }

    /// Antithetic pairs stored consecutively.
    fn mc(d: usize, samples: usize, seed: u64) -> Self {
        let pairs = (samples / 2).max(1);
        let mut rng = stream_rng(seed, 0);
        let mut points = Vec::with_capacity(2 * pairs * d);
        for _ in 0..pairs {
            let z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            points.extend(&z);
            points.extend(z.iter().map(|v| -v));
        }
        let weights = vec![1.0 / (2 * pairs) as f64; 2 * pairs];
        Self::finish(d, points, weights)
    }

    fn finish(d: usize, points: Vec<f64>, weights: Vec<f64>) -> Self {
        let abs_mean = points.chunks(d).zip(&weights).map(|(z, w)| w * crate::path::norm(z)).sum();
        Self { points, weights, abs_mean }
    }
}

/// Resolved `z`-rule for one dimension, with tables built once.
#[derive(Clone, Debug)]
pub struct GaugeQuad {
    dim: usize,
    cfg: QuadratureConfig,
    method: ZMethod,
    fine: Option<ZTable>,
    coarse: Option<ZTable>,
    s_rule: Rule,
}

impl GaugeQuad {
    pub fn new(dim: usize, cfg: QuadratureConfig) -> Result<Self> {
        cfg.validate()?;
        if dim == 0 {
            return Err(Error::Domain("dimension must be ≥ 1".into()));
        }
        let method = match cfg.z_method {
            ZMethod::Auto if dim == 1 => ZMethod::Exact,
            ZMethod::Auto if dim == 2 => ZMethod::GaussHermite,
            ZMethod::Auto => ZMethod::MonteCarlo,
            ZMethod::Exact if dim != 1 => {
                return Err(Error::Input("closed-form z-integral exists only for d = 1".into()))
            }
            m => m,
        };
        let (fine, coarse) = match method {
            ZMethod::GaussHermite => (Some(ZTable::gh(dim, cfg.gh_nodes)), Some(ZTable::gh(dim, cfg.gh_nodes - 1))),
            ZMethod::MonteCarlo => (Some(ZTable::mc(dim, cfg.mc_samples, cfg.seed)), None),
            _ => (None, None),
        };
        Ok(Self { dim, cfg, method, fine, coarse, s_rule: gauss_legendre(cfg.s_nodes) })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &QuadratureConfig {
        &self.cfg
    }

    pub fn method(&self) -> ZMethod {
        self.method
    }

    /// `E|z|` under the rule in use (exact for the closed form).
    pub fn abs_mean(&self) -> f64 {
        match &self.fine {
            Some(t) => t.abs_mean,
            None => SQRT_2_OVER_PI,
        }
    }
}

/// Decomposed sup-norm `max{P, max_{p∈S} |p − w|}` of the path difference after a jump `w`
/// at the present time.
#[derive(Clone, Debug)]
struct Geometry {
    dim: usize,
    prefix: f64,
    points: Vec<f64>,
    present: Vec<f64>,
}

impl Geometry {
    /// `x` is read as `x(·∧t_stop)` and evaluated at time `t ≥` (anything in `[0,T]`).
    fn new(anchor: &GaugeAnchor, t: f64, x: &GridPath, t_stop: f64) -> Result<Self> {
        let x0 = anchor.path();
        x.check_compatible(x0)?;
        let g = x.grid();
        let big_t = g.horizon();
        let tol = 1e-12 * big_t;
        if !(t >= -tol && t <= big_t + tol) {
            return Err(Error::Domain(format!("time {t} outside [0, {big_t}]")));
        }
        let t = t.clamp(0.0, big_t);
        let t0 = anchor.t();
        let d = x.dim();
        let xs = |s: f64| x.eval(s.min(t_stop));
        let x0s = |s: f64| x0.eval(s.min(t0));
        let dist = |a: &[f64], b: &[f64]| crate::path::norm(&a.iter().zip(b).map(|(p, q)| p - q).collect::<Vec<_>>());
        let mut prefix = 0.0f64;
        if t > tol {
            for j in 0..=g.steps() {
                let s = g.node(j);
                if s >= t - tol {
                    break;
                }
                prefix = prefix.max(dist(&xs(s), &x0s(s)));
            }
            if t_stop < t - tol {
                prefix = prefix.max(dist(&xs(t_stop), &x0s(t_stop)));
            }
            prefix = prefix.max(dist(&xs(t), &x0s(t)));
        }
        let present = xs(t);
        let mut points: Vec<f64> = present.iter().zip(x0s(t)).map(|(a, b)| a - b).collect();
        for j in 0..=g.steps() {
            let s = g.node(j);
            if s > t + tol && s <= t0 + tol {
                points.extend(present.iter().zip(x0.at(j)).map(|(a, b)| a - b));
            }
        }
        let points = reduce_points(d, points);
        Ok(Self { dim: d, prefix, points, present })
    }

    fn norm_at(&self, w: &[f64]) -> f64 {
        let mut best = self.prefix;
        for p in self.points.chunks(self.dim) {
            let r2: f64 = p.iter().zip(w).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.max(r2.sqrt());
        }
        best
    }
}

/// Keep only the points that can realize `max_p |p − w|`: extremes in `d = 1`, hull in `d = 2`.
fn reduce_points(d: usize, pts: Vec<f64>) -> Vec<f64> {
    match d {
        1 => {
            let lo = pts.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = pts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            vec![lo, hi]
        }
        2 => convex_hull(&pts),
        _ => pts,
    }
}

/// Andrew's monotone chain; input and output flattened `(x, y)` pairs.
fn convex_hull(flat: &[f64]) -> Vec<f64> {
    let mut p: Vec<(f64, f64)> = flat.chunks(2).map(|c| (c[0], c[1])).collect();
    p.sort_by(|a, b| a.partial_cmp(b).unwrap());
    p.dedup();
    if p.len() <= 2 {
        return p.iter().flat_map(|&(a, b)| [a, b]).collect();
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * p.len());
    for &q in &p {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    let lower = hull.len() + 1;
    for &q in p.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], q) <= 0.0 {
            hull.pop();
        }
        hull.push(q);
    }
    hull.pop();
    hull.iter().flat_map(|&(a, b)| [a, b]).collect()
}

/// `κ̂` with its gradient and Hessian in `y` (row-major) and an estimate of the `z`-quadrature error.
#[derive(Clone, Debug, PartialEq)]
pub struct KappaValue {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
    pub error: f64,
}

/// `E[f] , E[f z], E[f(z²−1)]` on the interval `(a,b)` for `f = α + βz`.
fn linear_piece(a: f64, b: f64, alpha: f64, beta: f64) -> [f64; 3] {
    if !(b > a) {
        return [0.0; 3];
    }
    let (pa, pb) = (std_pdf(a), std_pdf(b));
    let i0 = std_cdf(b) - std_cdf(a);
    let i1 = pa - pb;
    let apa = if a.is_finite() { a * pa } else { 0.0 };
    let bpb = if b.is_finite() { b * pb } else { 0.0 };
    let i2 = i0 + apa - bpb;
    let a3 = if a.is_finite() { (a * a + 2.0) * pa } else { 0.0 };
    let b3 = if b.is_finite() { (b * b + 2.0) * pb } else { 0.0 };
    let i3 = a3 - b3;
    [alpha * i0 + beta * i1, alpha * i1 + beta * i2, alpha * (i2 - i0) + beta * (i3 - i1)]
}

fn kappa_exact_1d(geom: &Geometry, u: f64) -> KappaValue {
    // f(z) = max(P, A − z, z − B)
    let a = geom.points[1] - u;
    let b = geom.points[0] - u;
    let m = geom.prefix.max(0.5 * (a - b));
    let (lo, hi) = (a - m, b + m);
    let mut acc = [0.0; 3];
    for piece in [
        linear_piece(f64::NEG_INFINITY, lo, a, -1.0),
        linear_piece(lo, hi, geom.prefix, 0.0),
        linear_piece(hi, f64::INFINITY, -b, 1.0),
    ] {
        for i in 0..3 {
            acc[i] += piece[i];
        }
    }
    KappaValue { value: acc[0] - SQRT_2_OVER_PI, gradient: vec![acc[1]], hessian: vec![acc[2]], error: 0.0 }
}

/// Rule sums of `N`, `N z`, `N(zzᵀ − I)` minus the same rule's `E|z|`; per-pair spreads for MC.
fn kappa_table(geom: &Geometry, u: &[f64], table: &ZTable, pairs: bool) -> (Vec<f64>, Option<Vec<f64>>) {
    let d = geom.dim;
    let len = 1 + d + d * d;
    let mut acc = vec![0.0; len];
    let mut sq = if pairs { Some(vec![0.0; len]) } else { None };
    let mut w = vec![0.0; d];
    let mut term = vec![0.0; len];
    let mut pair = vec![0.0; len];
    for (idx, (z, wt)) in table.points.chunks(d).zip(&table.weights).enumerate() {
        for i in 0..d {
            w[i] = u[i] + z[i];
        }
        let n = geom.norm_at(&w);
        term[0] = n;
        for i in 0..d {
            term[1 + i] = n * z[i];
            for j in 0..d {
                term[1 + d + i * d + j] = n * (z[i] * z[j] - if i == j { 1.0 } else { 0.0 });
            }
        }
        for k in 0..len {
            acc[k] += wt * term[k];
        }
        if let Some(sq) = sq.as_mut() {
            for k in 0..len {
                pair[k] += 0.5 * term[k];
            }
            if idx % 2 == 1 {
                for k in 0..len {
                    sq[k] += pair[k] * pair[k];
                    pair[k] = 0.0;
                }
            }
        }
    }
    acc[0] -= table.abs_mean;
    let spread = sq.map(|sq| {
        let m = (table.weights.len() / 2) as f64;
        (0..len)
            .map(|k| {
                let mean = if k == 0 { acc[0] + table.abs_mean } else { acc[k] };
                let var = (sq[k] / m - mean * mean).max(0.0) * m / (m - 1.0).max(1.0);
                (var / m).sqrt()
            })
            .collect()
    });
    (acc, spread)
}

fn kappa_from_geometry(geom: &Geometry, y: &[f64], quad: &GaugeQuad) -> Result<KappaValue> {
    let d = geom.dim;
    if y.len() != d || quad.dim != d {
        return Err(Error::Domain(format!("dimension mismatch: y {} path {} rule {}", y.len(), d, quad.dim)));
    }
    let u: Vec<f64> = y.iter().zip(&geom.present).map(|(a, b)| a - b).collect();
    let out = match quad.method {
        ZMethod::Exact => kappa_exact_1d(geom, u[0]),
        ZMethod::GaussHermite => {
            let (f, _) = kappa_table(geom, &u, quad.fine.as_ref().unwrap(), false);
            let (c, _) = kappa_table(geom, &u, quad.coarse.as_ref().unwrap(), false);
            let error = f.iter().zip(&c).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            KappaValue { value: f[0], gradient: f[1..1 + d].to_vec(), hessian: f[1 + d..].to_vec(), error }
        }
        _ => {
            let (f, s) = kappa_table(geom, &u, quad.fine.as_ref().unwrap(), true);
            let error = 3.0 * s.unwrap().into_iter().fold(0.0, f64::max);
            KappaValue { value: f[0], gradient: f[1..1 + d].to_vec(), hessian: f[1 + d..].to_vec(), error }
        }
    };
    if !out.value.is_finite() || out.gradient.iter().chain(&out.hessian).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite κ̂ quadrature".into()));
    }
    Ok(out)
}

/// `κ̂(t, x, y)` anchored at `anchor`; `x` is read as `x(·∧t)` and `t` may be any time in `[0,T]`.
pub fn kappa_hat(anchor: &GaugeAnchor, t: f64, x: &GridPath, y: &[f64], quad: &GaugeQuad) -> Result<KappaValue> {
    let geom = Geometry::new(anchor, t, x, t)?;
    kappa_from_geometry(&geom, y, quad)
}

/// `κ∞(t,x) = κ̂(t, x, x(t))`.
pub fn kappa_infty(anchor: &GaugeAnchor, p: &PathPoint, quad: &GaugeQuad) -> Result<f64> {
    Ok(kappa_hat(anchor, p.t(), p.path(), p.present(), quad)?.value)
}

/// `‖x(·∧t) − x₀(·∧t₀)‖∞` for any `t ∈ [0,T]`.
pub fn stopped_distance(anchor: &GaugeAnchor, t: f64, x: &GridPath) -> Result<f64> {
    let geom = Geometry::new(anchor, t, x, t)?;
    Ok(geom.norm_at(&vec![0.0; geom.dim]))
}

/// Value, pathwise derivatives and `z`-quadrature error estimate of a gauge quantity.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeValue {
    pub value: f64,
    pub derivs: PathwiseDerivs,
    pub error: f64,
}

/// `u`-breakpoints `√(node − t)` of the substituted `η` integral, thinned to at most `panels` panels.
fn s_breakpoints(grid: &TimeGrid, t: f64, s_end: f64, panels: usize) -> Vec<f64> {
    let tol = 1e-12 * grid.horizon();
    let mut b = vec![0.0];
    for j in 0..=grid.steps() {
        let s = grid.node(j) - t;
        if s > tol && s < s_end - tol {
            b.push(s.sqrt());
        }
    }
    b.push(s_end.sqrt());
    if b.len() > panels + 1 {
        let last = b.len() - 1;
        b = (0..=panels).map(|i| b[(i * last + panels / 2) / panels]).collect();
        b[0] = 0.0;
        b.dedup();
    }
    b
}

/// `χ̂(t, x, y) = ∫₀^∞ r(κ̂((t+s)∧T, x(·∧t), y)) η(s) ds` with `r(k) = k/(1+k)`, and its derivatives.
///
/// The integral is taken in `u = √s` on `[0, √(T−t)]`; beyond `T − t` the integrand is constant
/// and the remaining mass of `η` is added in closed form.
pub fn chi_hat(anchor: &GaugeAnchor, t: f64, x: &GridPath, y: &[f64], quad: &GaugeQuad) -> Result<GaugeValue> {
    let d = y.len();
    let big_t = x.grid().horizon();
    let t = t.clamp(0.0, big_t);
    let span = big_t - t;
    let cfg = quad.config();
    let s_end = span.min(cfg.s_max);
    let mut out = PathwiseDerivs::zeros(d);
    let mut value = 0.0;
    let mut error = 0.0f64;
    let mut add = |k: &KappaValue, weight: f64, hweight: f64, out: &mut PathwiseDerivs, value: &mut f64| {
        let r = k.value / (1.0 + k.value);
        let q = 1.0 / (1.0 + k.value);
        *value += weight * r;
        out.horizontal += hweight * r;
        for i in 0..d {
            out.vertical[i] += weight * k.gradient[i] * q * q;
            for j in 0..d {
                out.vertical2[i * d + j] +=
                    weight * (k.hessian[i * d + j] * q * q - 2.0 * k.gradient[i] * k.gradient[j] * q * q * q);
            }
        }
        error = error.max(k.error);
    };
    if s_end > 0.0 {
        let norm = 1.0 / (2.0 * PI).sqrt();
        let breaks = s_breakpoints(x.grid(), t, s_end, cfg.s_panels);
        for win in breaks.windows(2) {
            let (ua, ub) = (win[0], win[1]);
            let (h, c) = (0.5 * (ub - ua), 0.5 * (ua + ub));
            for (node, w) in quad.s_rule.nodes.iter().zip(&quad.s_rule.weights) {
                let u = c + h * node;
                let e = norm * (-0.5 * u * u).exp();
                let a = 2.0 * u * u * e;
                let b = (1.0 - u * u) * e;
                let geom = Geometry::new(anchor, (t + u * u).min(big_t), x, t)?;
                let k = kappa_from_geometry(&geom, y, quad)?;
                add(&k, h * w * a, -h * w * b, &mut out, &mut value);
            }
        }
    }
    if span <= cfg.s_max {
        let geom = Geometry::new(anchor, big_t, x, t)?;
        let k = kappa_from_geometry(&geom, y, quad)?;
        add(&k, eta_tail(span), eta(span)?, &mut out, &mut value);
    }
    Ok(GaugeValue { value, derivs: out, error })
}

/// `χ∞(t,x) = χ̂(t,x,x(t))`.
pub fn chi_infty(anchor: &GaugeAnchor, p: &PathPoint, quad: &GaugeQuad) -> Result<GaugeValue> {
    chi_hat(anchor, p.t(), p.path(), p.present(), quad)
}

/// `|t − t₀|² + χ̂(t,x,y)` with derivatives in the first pair.
pub fn rho_hat(anchor: &GaugeAnchor, t: f64, x: &GridPath, y: &[f64], quad: &GaugeQuad) -> Result<GaugeValue> {
    let mut g = chi_hat(anchor, t, x, y, quad)?;
    let dt = t - anchor.t();
    g.value += dt * dt;
    g.derivs.horizontal += 2.0 * dt;
    Ok(g)
}

/// `ρ∞((t,x),(t₀,x₀))`.
pub fn rho_infty(p: &PathPoint, anchor: &GaugeAnchor, quad: &GaugeQuad) -> Result<GaugeValue> {
    rho_hat(anchor, p.t(), p.path(), p.present(), quad)
}

/// Truncated `φ_ε` with a certified bound on the omitted tail.
#[derive(Clone, Debug, PartialEq)]
pub struct PhiValue {
    pub value: f64,
    pub derivs: PathwiseDerivs,
    pub error: f64,
    pub tail_bound: f64,
}

/// `Σ_{n<N} 2^{−n} ρ̂(a_n; t,x,y)`; optionally the last anchor is repeated forever, which adds
/// `2^{−N+1} ρ̂(a_{N−1}; ·)` and leaves no tail.
pub fn phi_hat(
    anchors: &[GaugeAnchor],
    t: f64,
    x: &GridPath,
    y: &[f64],
    quad: &GaugeQuad,
    repeat_last: bool,
) -> Result<PhiValue> {
    if anchors.is_empty() {
        return Err(Error::Domain("φ_ε needs at least one anchor".into()));
    }
    let mut out = PhiValue { value: 0.0, derivs: PathwiseDerivs::zeros(y.len()), error: 0.0, tail_bound: 0.0 };
    let n = anchors.len();
    for (i, a) in anchors.iter().enumerate() {
        let mut c = 0.5f64.powi(i as i32);
        if repeat_last && i == n - 1 {
            c *= 2.0;
        }
        let g = rho_hat(a, t, x, y, quad)?;
        out.value += c * g.value;
        out.derivs.scale_add(c, &g.derivs);
        out.error += c * g.error;
    }
    if !repeat_last {
        let big_t = x.grid().horizon();
        out.tail_bound = 2.0 * 0.5f64.powi(n as i32) * (big_t * big_t + 1.0);
    }
    Ok(out)
}

/// `φ_ε(t,x) = Σ 2^{−n} ρ∞((t,x),(t_n,x_n))` truncated after the given anchors.
pub fn phi_eps(anchors: &[GaugeAnchor], p: &PathPoint, quad: &GaugeQuad) -> Result<PhiValue> {
    phi_hat(anchors, p.t(), p.path(), p.present(), quad, false)
}

/// `ρ̂(anchor; ·)` as a lifted functional.
#[derive(Clone)]
pub struct RhoLift {
    pub anchor: GaugeAnchor,
    pub quad: Arc<GaugeQuad>,
}

impl LiftedFunctional for RhoLift {
    fn dim(&self) -> usize {
        self.quad.dim()
    }
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
        rho_hat(&self.anchor, t, x, y, &self.quad).expect("gauge evaluation").value
    }
    fn derivs(&self, t: f64, x: &GridPath, y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        Some(rho_hat(&self.anchor, t, x, y, &self.quad).map(|g| g.derivs))
    }
    fn name(&self) -> String {
        "rho".into()
    }
}

/// `φ̂` as a lifted functional.
#[derive(Clone)]
pub struct PhiLift {
    pub anchors: Vec<GaugeAnchor>,
    pub quad: Arc<GaugeQuad>,
    pub repeat_last: bool,
}

impl LiftedFunctional for PhiLift {
    fn dim(&self) -> usize {
        self.quad.dim()
    }
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
        phi_hat(&self.anchors, t, x, y, &self.quad, self.repeat_last).expect("gauge evaluation").value
    }
    fn derivs(&self, t: f64, x: &GridPath, y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        Some(phi_hat(&self.anchors, t, x, y, &self.quad, self.repeat_last).map(|g| g.derivs))
    }
    fn name(&self) -> String {
        "phi".into()
    }
}

fn check_a(a: f64) -> Result<()> {
    if !(a >= 0.0) {
        return Err(Error::Domain(format!("profile needs a ≥ 0, got {a}")));
    }
    Ok(())
}

/// `F_d(a) = E max{a,|z|} − E|z|`.
pub fn profile_f(d: usize, a: f64) -> Result<f64> {
    check_a(a)?;
    let c = c_zeta(d)?;
    if a == 0.0 {
        return Ok(0.0);
    }
    let (h, x) = (0.5 * d as f64, 0.5 * a * a);
    Ok(a * gamma_lr(h, x) - c * gamma_lr(h + 0.5, x))
}

/// `F_d′(a) = P(|z| ≤ a)`, the χ_d distribution function.
pub fn profile_f_prime(d: usize, a: f64) -> Result<f64> {
    check_a(a)?;
    if a == 0.0 {
        return Ok(0.0);
    }
    Ok(gamma_lr(0.5 * d as f64, 0.5 * a * a))
}

/// `F_d″(a)`, the χ_d density; `F₁″(0) = √(2/π)`.
pub fn profile_f_second(d: usize, a: f64) -> Result<f64> {
    check_a(a)?;
    let h = 0.5 * d as f64;
    if a == 0.0 {
        return Ok(if d == 1 { SQRT_2_OVER_PI } else { 0.0 });
    }
    Ok(((d as f64 - 1.0) * a.ln() - 0.5 * a * a - (h - 1.0) * 2f64.ln() - ln_gamma(h)).exp())
}

/// `H(a) = E[max{a,|z|}(|z|² − d)]`; `H(0) = E|z|` and `H(∞) = 0`.
pub fn profile_h(d: usize, a: f64) -> Result<f64> {
    check_a(a)?;
    let c = c_zeta(d)?;
    if a == 0.0 {
        return Ok(c);
    }
    let (h, x, df) = (0.5 * d as f64, 0.5 * a * a, d as f64);
    let low = a * df * (gamma_lr(h + 1.0, x) - gamma_lr(h, x));
    let high = c * ((df + 1.0) * gamma_lr(h + 1.5, x) - df * gamma_lr(h + 0.5, x));
    Ok(c + low - high)
}

/// Random `(anchor, point, y)` triple for gauge audits, mixing independent paths with time-shifted,
/// amplitude-shifted and offset copies of the anchor path.
#[derive(Clone, Debug)]
pub struct GaugeSample {
    pub anchor: GaugeAnchor,
    pub point: PathPoint,
    pub y: Vec<f64>,
}

pub fn sample_gauge_tuple<R: Rng>(grid: TimeGrid, d: usize, rng: &mut R) -> GaugeSample {
    let m = grid.steps();
    let brownian = |rng: &mut R, amp: f64| {
        let mut p = GridPath::zeros(grid, d);
        crate::path::extend_in_place(0, &mut p, rng, amp);
        p
    };
    let a0 = rng.random_range(0.05..2.5);
    let x0 = brownian(rng, a0);
    let x = match rng.random_range(0..5) {
        0 => {
            let a = rng.random_range(0.05..2.5);
            let mut p = brownian(rng, a);
            let off: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            for k in 0..=m {
                for i in 0..d {
                    p.at_mut(k)[i] += off[i];
                }
            }
            p
        }
        1 => {
            let shift = rng.random_range(0..=m / 4);
            GridPath::from_fn(grid, d, |t| x0.at(((t / grid.dt()).round() as usize).saturating_sub(shift)).to_vec())
        }
        2 => {
            let f = 1.0 + rng.random_range(-0.5..0.5);
            GridPath::from_fn(grid, d, |t| x0.eval(t).iter().map(|v| f * v).collect())
        }
        3 => {
            let off: Vec<f64> = (0..d).map(|_| rng.random_range(-0.3..0.3)).collect();
            GridPath::from_fn(grid, d, |t| x0.eval(t).iter().zip(&off).map(|(v, o)| v + o).collect())
        }
        _ => x0.clone(),
    };
    let k0 = rng.random_range(0..=m);
    let k = rng.random_range(0..=m);
    let anchor = PathPoint::at_node(k0, Arc::new(x0)).unwrap();
    let point = PathPoint::at_node(k, Arc::new(x)).unwrap();
    let sigma = if rng.random_bool(1.0 / 3.0) { 0.0 } else { rng.random_range(0.0..2.0) };
    let y = point.present().iter().map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
    GaugeSample { anchor, point, y }
}

/// Calibrated lower-bound constant and observed derivative maxima.
#[derive(Clone, Debug, PartialEq)]
pub struct GaugeDiagnostics {
    pub dim: usize,
    /// Shrunk infimum of `κ∞ / (‖·‖^{d+1} ∧ ‖·‖)`.
    pub alpha: f64,
    /// Largest `‖·‖ − κ∞` observed; compare with `E|z|` and `2E|z|`.
    pub lower_gap: f64,
    pub max_kappa_v1: f64,
    pub max_kappa_v2: f64,
    pub samples: usize,
}

/// `‖·‖^{d+1} ∧ ‖·‖`.
pub fn lower_profile(norm: f64, d: usize) -> f64 {
    norm.powi(d as i32 + 1).min(norm)
}

/// Estimate `α_d` as `shrink ×` the smallest observed ratio over `samples` random tuples.
pub fn calibrate_alpha(grid: TimeGrid, d: usize, samples: usize, seed: u64, shrink: f64, quad: &GaugeQuad) -> Result<GaugeDiagnostics> {
    let mut rng = stream_rng(seed, 0);
    let mut inf = f64::INFINITY;
    let mut diag = GaugeDiagnostics {
        dim: d,
        alpha: 0.0,
        lower_gap: f64::NEG_INFINITY,
        max_kappa_v1: 0.0,
        max_kappa_v2: 0.0,
        samples,
    };
    for _ in 0..samples {
        let s = sample_gauge_tuple(grid, d, &mut rng);
        let n = stopped_distance(&s.anchor, s.point.t(), s.point.path())?;
        let k = kappa_hat(&s.anchor, s.point.t(), s.point.path(), s.point.present(), quad)?;
        diag.lower_gap = diag.lower_gap.max(n - k.value);
        diag.max_kappa_v1 = k.gradient.iter().fold(diag.max_kappa_v1, |m, v| m.max(v.abs()));
        diag.max_kappa_v2 = k.hessian.iter().fold(diag.max_kappa_v2, |m, v| m.max(v.abs()));
        if n > 1e-9 {
            inf = inf.min(k.value / lower_profile(n, d));
        }
    }
    diag.alpha = (shrink * inf).clamp(f64::MIN_POSITIVE, 1.0);
    Ok(diag)
}

/// Largest observed magnitude of one derivative family against its constant.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub name: &'static str,
    pub bound: f64,
    pub observed: f64,
    /// `max(|∂| − bound − tol − quadrature error)` over the samples; ≤ 0 when the bound holds.
    pub worst_excess: f64,
}

impl BoundRow {
    fn new(name: &'static str, bound: f64) -> Self {
        Self { name, bound, observed: 0.0, worst_excess: f64::NEG_INFINITY }
    }

    fn push(&mut self, v: f64, slack: f64) {
        let v = v.abs();
        self.observed = self.observed.max(v);
        self.worst_excess = self.worst_excess.max(v - self.bound - slack);
    }

    fn merge(&mut self, o: &BoundRow) {
        self.observed = self.observed.max(o.observed);
        self.worst_excess = self.worst_excess.max(o.worst_excess);
    }

    pub fn holds(&self) -> bool {
        self.worst_excess <= 0.0
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, a| m.max(a.abs()))
}

/// Audit the derivative bounds of `κ̂`, `χ̂` and `φ̂` (three random anchors, last one repeated)
/// on `samples` random tuples. Entries are compared individually; the slack is `tol` plus the
/// reported quadrature error.
pub fn audit_bounds(grid: TimeGrid, d: usize, samples: usize, seed: u64, tol: f64, quad: &GaugeQuad) -> Result<Vec<BoundRow>> {
    if quad.dim() != d {
        return Err(Error::Domain(format!("quadrature dimension {} vs {d}", quad.dim())));
    }
    let big_t = grid.horizon();
    let template = vec![
        BoundRow::new("kappa_v1", KAPPA_V1_BOUND),
        BoundRow::new("kappa_v2", KAPPA_V2_BOUND),
        BoundRow::new("chi_h", chi_h_bound()),
        BoundRow::new("chi_v1", CHI_V1_BOUND),
        BoundRow::new("chi_v2", CHI_V2_BOUND),
        BoundRow::new("phi_h", phi_h_bound(big_t)),
        BoundRow::new("phi_v1", PHI_V1_BOUND),
        BoundRow::new("phi_v2", PHI_V2_BOUND),
    ];
    let per_sample = crate::rng::par_streams(seed, samples, |_, rng| -> Result<Vec<BoundRow>> {
        let mut rows = template.clone();
        let s = sample_gauge_tuple(grid, d, rng);
        let anchors = vec![
            s.anchor.clone(),
            sample_gauge_tuple(grid, d, rng).anchor,
            sample_gauge_tuple(grid, d, rng).anchor,
        ];
        let (t, x) = (s.point.t(), s.point.path());
        let k = kappa_hat(&s.anchor, t, x, &s.y, quad)?;
        let slack = tol + k.error;
        rows[0].push(max_abs(&k.gradient), slack);
        rows[1].push(max_abs(&k.hessian), slack);
        let c = chi_hat(&s.anchor, t, x, &s.y, quad)?;
        let slack = tol + c.error;
        rows[2].push(c.derivs.horizontal, slack);
        rows[3].push(max_abs(&c.derivs.vertical), slack);
        rows[4].push(max_abs(&c.derivs.vertical2), slack);
        let f = phi_hat(&anchors, t, x, &s.y, quad, true)?;
        let slack = tol + f.error;
        rows[5].push(f.derivs.horizontal, slack);
        rows[6].push(max_abs(&f.derivs.vertical), slack);
        rows[7].push(max_abs(&f.derivs.vertical2), slack);
        Ok(rows)
    });
    let mut rows = template;
    for r in per_sample {
        for (a, b) in rows.iter_mut().zip(&r?) {
            a.merge(b);
        }
    }
    Ok(rows)
}

/// Violation counts of the sandwich inequalities on a validation set.
#[derive(Clone, Debug, PartialEq)]
pub struct SandwichReport {
    pub dim: usize,
    pub samples: usize,
    pub alpha: f64,
    /// `κ∞ > ‖·‖`.
    pub kappa_upper: usize,
    /// `χ∞ > ‖·‖ ∧ 1`.
    pub chi_upper: usize,
    /// `κ∞ < ‖·‖ − 2C_ζ`.
    pub kappa_lower: usize,
    /// `κ∞ < ‖·‖ − C_ζ`; monitored only.
    pub kappa_lower_sharp: usize,
    /// `κ∞ < α (‖·‖^{d+1} ∧ ‖·‖)`.
    pub kappa_alpha: usize,
    /// `χ∞ < α (‖·‖^{d+1} ∧ ‖·‖)/(1 + ‖·‖)`.
    pub chi_alpha: usize,
    pub max_lower_gap: f64,
}

impl SandwichReport {
    /// Every asserted inequality held (the sharp `C_ζ` bound is not asserted).
    pub fn holds(&self) -> bool {
        self.kappa_upper + self.chi_upper + self.kappa_lower + self.kappa_alpha + self.chi_alpha == 0
    }
}

/// Check the upper bounds, the `2C_ζ` lower bound and the calibrated `α` lower bounds of `κ∞`
/// and `χ∞` on fresh random tuples. Each comparison allows `tol` plus the quadrature error.
pub fn validate_sandwich(grid: TimeGrid, d: usize, samples: usize, seed: u64, alpha: f64, tol: f64, quad: &GaugeQuad) -> Result<SandwichReport> {
    let cz = c_zeta(d)?;
    let per_sample = crate::rng::par_streams(seed, samples, |_, rng| -> Result<[f64; 7]> {
        let s = sample_gauge_tuple(grid, d, rng);
        let n = stopped_distance(&s.anchor, s.point.t(), s.point.path())?;
        let kv = kappa_hat(&s.anchor, s.point.t(), s.point.path(), s.point.present(), quad)?;
        let (k, kerr) = (kv.value, tol + kv.error);
        let c = chi_infty(&s.anchor, &s.point, quad)?;
        let cerr = tol + c.error;
        let f = lower_profile(n, d);
        let flag = |b: bool| if b { 1.0 } else { 0.0 };
        Ok([
            flag(k > n + kerr),
            flag(c.value > n.min(1.0) + cerr),
            flag(k < n - 2.0 * cz - kerr),
            flag(k < n - cz - kerr),
            flag(k < alpha * f - kerr),
            flag(c.value < alpha * f / (1.0 + n) - cerr),
            n - k,
        ])
    });
    let mut rep = SandwichReport {
        dim: d,
        samples,
        alpha,
        kappa_upper: 0,
        chi_upper: 0,
        kappa_lower: 0,
        kappa_lower_sharp: 0,
        kappa_alpha: 0,
        chi_alpha: 0,
        max_lower_gap: f64::NEG_INFINITY,
    };
    for r in per_sample {
        let r = r?;
        rep.kappa_upper += r[0] as usize;
        rep.chi_upper += r[1] as usize;
        rep.kappa_lower += r[2] as usize;
        rep.kappa_lower_sharp += r[3] as usize;
        rep.kappa_alpha += r[4] as usize;
        rep.chi_alpha += r[5] as usize;
        rep.max_lower_gap = rep.max_lower_gap.max(r[6]);
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylinder::fd_vertical;
    use crate::path::brownian_extension;
    use crate::quadrature::integrate_on;
    use proptest::prelude::*;

    fn quad(d: usize) -> GaugeQuad {
        GaugeQuad::new(d, QuadratureConfig::default()).unwrap()
    }

    fn grid() -> TimeGrid {
        TimeGrid::new(1.0, 40).unwrap()
    }

    fn zero_anchor(d: usize, k: usize) -> GaugeAnchor {
        PathPoint::at_node(k, Arc::new(GridPath::zeros(grid(), d))).unwrap()
    }

    #[test]
    fn zeta_and_c_zeta_values() {
        assert!((zeta(&[0.0]) - 0.398_942_280_4).abs() < 1e-10);
        assert!((zeta(&[0.0, 0.0]) - 0.159_154_943_1).abs() < 1e-10);
        assert_eq!(zeta(&[0.3, -1.2]), zeta(&[-0.3, 1.2]));
        assert!((c_zeta(1).unwrap() - 0.797_884_560_8).abs() < 1e-9);
        assert!((c_zeta(2).unwrap() - 1.253_314_137_3).abs() < 1e-9);
        assert!((c_zeta(3).unwrap() - 1.595_769_121_6).abs() < 1e-9);
        assert!(c_zeta(0).is_err());
        for d in 1..=3 {
            let t = ZTable::gh(d, 40);
            assert!((t.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn c_zeta_matches_radial_quadrature() {
        for d in 1..=6 {
            assert!((c_zeta(d).unwrap() - c_zeta_quadrature(d).unwrap()).abs() < 1e-10, "d={d}");
        }
        assert!(c_zeta_quadrature(0).is_err());
    }

    #[test]
    fn eta_integrals() {
        assert_eq!(eta(0.0).unwrap(), 0.0);
        assert!(eta(-1.0).is_err() && eta_prime(-0.5).is_err());
        let gl = gauss_legendre(20);
        // substitute s = u² to remove the square-root behaviour at 0
        let mass: f64 = (0..200)
            .map(|i| {
                let (a, b) = (i as f64 * 0.05, (i + 1) as f64 * 0.05);
                integrate_on(&gl, a, b, |u| 2.0 * u * eta(u * u).unwrap())
            })
            .sum();
        assert!((mass - 1.0).abs() < 1e-8);
        let var: f64 = (0..200)
            .map(|i| {
                let (a, b) = (i as f64 * 0.05, (i + 1) as f64 * 0.05);
                integrate_on(&gl, a, b, |u| if u == 0.0 { 0.0 } else { 2.0 * u * eta_prime(u * u).unwrap().abs() })
            })
            .sum();
        assert!((var - eta_variation()).abs() < 1e-6, "{var}");
        assert!((eta_variation() - 2.0 * eta(1.0).unwrap()).abs() < 1e-15);
        assert!((eta_variation() - 0.483_941_449_1).abs() < 1e-9);
        let tail = 1.0 - integrate_on(&gl, 0.0, 2f64.sqrt(), |u| 2.0 * u * eta(u * u).unwrap());
        assert!((eta_tail(2.0) - tail).abs() < 1e-12, "{} {tail}", eta_tail(2.0));
    }

    #[test]
    fn kappa_vanishes_at_anchor() {
        for d in [1, 2, 3] {
            let mut cfg = QuadratureConfig::default();
            cfg.mc_samples = 2000;
            let q = GaugeQuad::new(d, cfg).unwrap();
            let x0 = brownian_extension(0.0, &GridPath::zeros(grid(), d), 3).unwrap();
            let a = PathPoint::at_node(17, Arc::new(x0)).unwrap();
            let k = kappa_hat(&a, a.t(), a.path(), a.present(), &q).unwrap();
            assert!(k.value.abs() < 1e-14, "d={d} {}", k.value);
            let c = chi_infty(&a, &a, &q).unwrap();
            assert!(c.value.abs() < 1e-14);
            let r = rho_infty(&a, &a, &q).unwrap();
            assert!(r.value.abs() < 1e-14);
        }
    }

    #[test]
    fn kappa_one_dimensional_growth() {
        let q = quad(1);
        let a = zero_anchor(1, 0);
        let x = GridPath::zeros(grid(), 1);
        let mut prev = -1.0;
        for yv in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0] {
            let k = kappa_hat(&a, 0.0, &x, &[yv], &q).unwrap().value;
            assert!(k >= prev);
            assert!((k - kappa_hat(&a, 0.0, &x, &[-yv], &q).unwrap().value).abs() < 1e-15);
            prev = k;
        }
        let big = kappa_hat(&a, 0.0, &x, &[12.0], &q).unwrap().value;
        assert!((big - (12.0 - SQRT_2_OVER_PI)).abs() < 1e-9);
    }

    /// Dense composite Gauss–Legendre reference for `E[N(u+z)·(1, z, z²−1)] − E|z|` in `d = 1`.
    fn reference_1d(geom: &Geometry, u: f64) -> [f64; 3] {
        let gl = gauss_legendre(8);
        let mut acc = [0.0; 3];
        for i in 0..4000 {
            let (a, b) = (-10.0 + 0.005 * i as f64, -10.0 + 0.005 * (i + 1) as f64);
            for (k, m) in [|_: f64| 1.0, |z: f64| z, |z: f64| z * z - 1.0].iter().enumerate() {
                acc[k] += integrate_on(&gl, a, b, |z| geom.norm_at(&[u + z]) * m(z) * std_pdf(z));
            }
        }
        acc[0] -= SQRT_2_OVER_PI;
        acc
    }

    #[test]
    fn exact_rule_matches_dense_quadrature() {
        let exact = quad(1);
        let mut rng = stream_rng(5, 0);
        for _ in 0..15 {
            let s = sample_gauge_tuple(grid(), 1, &mut rng);
            let geom = Geometry::new(&s.anchor, s.point.t(), s.point.path(), s.point.t()).unwrap();
            let e = kappa_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &exact).unwrap();
            let r = reference_1d(&geom, s.y[0] - s.point.present()[0]);
            assert!((e.value - r[0]).abs() < 1e-6, "{e:?} {r:?}");
            assert!((e.gradient[0] - r[1]).abs() < 1e-6);
            assert!((e.hessian[0] - r[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn gauss_hermite_error_estimate_covers_monte_carlo_reference() {
        let gh = quad(2);
        let mut cfg = QuadratureConfig::default();
        cfg.z_method = ZMethod::MonteCarlo;
        cfg.mc_samples = 400_000;
        cfg.seed = 99;
        let mc = GaugeQuad::new(2, cfg).unwrap();
        let mut rng = stream_rng(17, 2);
        for _ in 0..10 {
            let s = sample_gauge_tuple(grid(), 2, &mut rng);
            let g = kappa_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &gh).unwrap();
            let m = kappa_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &mc).unwrap();
            let tol = g.error + m.error + 1e-6;
            assert!((g.value - m.value).abs() <= tol, "{g:?} {m:?}");
            for (a, b) in g.gradient.iter().chain(&g.hessian).zip(m.gradient.iter().chain(&m.hessian)) {
                assert!((a - b).abs() <= tol, "{g:?} {m:?}");
            }
        }
    }

    #[test]
    fn kappa_derivatives_match_fd() {
        struct K<'a>(&'a GaugeAnchor, &'a GaugeQuad);
        impl LiftedFunctional for K<'_> {
            fn dim(&self) -> usize {
                self.1.dim()
            }
            fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
                kappa_hat(self.0, t, x, y, self.1).unwrap().value
            }
        }
        let q = quad(1);
        let mut rng = stream_rng(17, 1);
        for _ in 0..20 {
            let s = sample_gauge_tuple(grid(), 1, &mut rng);
            let k = kappa_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &q).unwrap();
            let (g, h) = fd_vertical(&K(&s.anchor, &q), s.point.t(), s.point.path(), &s.y, 1e-4);
            assert!((k.gradient[0] - g[0]).abs() < 1e-7, "{k:?} {g:?}");
            assert!((k.hessian[0] - h[0]).abs() < 1e-5, "{k:?} {h:?}");
        }
    }

    #[test]
    fn chi_derivatives_match_fd() {
        let q = Arc::new(quad(1));
        let mut rng = stream_rng(23, 0);
        let mut checked = 0;
        while checked < 10 {
            let s = sample_gauge_tuple(grid(), 1, &mut rng);
            if s.point.node() >= grid().steps() {
                continue;
            }
            let lift = RhoLift { anchor: s.anchor.clone(), quad: q.clone() };
            let a = lift.derivs(s.point.t(), s.point.path(), s.point.present()).unwrap().unwrap();
            let f = crate::cylinder::fd_pathwise_derivs(&lift, s.point.t(), s.point.path(), Some(crate::cylinder::FdSteps { delta: 1e-6, h: 1e-4 }))
                .unwrap();
            let (h, v, v2) = a.max_gaps(&f);
            assert!(h < 2e-3 && v < 1e-5 && v2 < 1e-3, "{h} {v} {v2} {a:?} {f:?}");
            checked += 1;
        }
    }

    #[test]
    fn profile_values() {
        assert!((profile_f_prime(1, 1.0).unwrap() - 0.682_689_492_1).abs() < 1e-9);
        assert!((profile_h(1, 0.0).unwrap() - 0.797_884_560_8).abs() < 1e-9);
        for d in 1..=3 {
            assert_eq!(profile_f(d, 0.0).unwrap(), 0.0);
            assert!(profile_f(d, -1.0).is_err());
            let mut prev = profile_h(d, 0.0).unwrap();
            for i in 1..60 {
                let h = profile_h(d, 0.1 * i as f64).unwrap();
                assert!(h < prev, "d={d} a={}", 0.1 * i as f64);
                prev = h;
            }
            assert!(profile_h(d, 12.0).unwrap().abs() < 1e-9);
            for a in [0.3, 1.0, 2.5] {
                let e = 1e-5;
                let fd = (profile_f(d, a + e).unwrap() - profile_f(d, a - e).unwrap()) / (2.0 * e);
                assert!((fd - profile_f_prime(d, a).unwrap()).abs() < 1e-8);
                let fd2 = (profile_f_prime(d, a + e).unwrap() - profile_f_prime(d, a - e).unwrap()) / (2.0 * e);
                assert!((fd2 - profile_f_second(d, a).unwrap()).abs() < 1e-7);
            }
        }
        // second derivative at 0 for d = 1 from one-sided differences of F′
        let e = 1e-6;
        assert!(((profile_f_prime(1, e).unwrap()) / e - SQRT_2_OVER_PI).abs() < 1e-6);
    }

    #[test]
    fn profile_h_matches_one_dimensional_quadrature() {
        let gl = gauss_legendre(16);
        for a in [0.0, 0.7, 2.0] {
            let f = |z: f64| f64::max(a, z.abs()) * (z * z - 1.0) * std_pdf(z);
            let q: f64 = (0..160).map(|i| integrate_on(&gl, -8.0 + 0.1 * i as f64, -7.9 + 0.1 * i as f64, f)).sum();
            assert!((q - profile_h(1, a).unwrap()).abs() < 1e-9, "{a}: {q}");
        }
    }

    #[test]
    fn phi_sums_geometric_series() {
        let q = quad(1);
        let x = brownian_extension(0.0, &GridPath::zeros(grid(), 1), 9).unwrap();
        let a = PathPoint::at_node(10, Arc::new(x.clone())).unwrap();
        let p = PathPoint::at_node(25, Arc::new(GridPath::from_fn_1d(grid(), |t| t))).unwrap();
        let rho = rho_infty(&p, &a, &q).unwrap().value;
        let anchors = vec![a.clone(); 6];
        let phi = phi_eps(&anchors, &p, &q).unwrap();
        assert!((phi.value - 2.0 * rho * (1.0 - 0.5f64.powi(6))).abs() < 1e-12);
        assert!((phi.tail_bound - 0.5f64.powi(5) * 2.0).abs() < 1e-15);
        let full = phi_hat(&anchors, p.t(), p.path(), p.present(), &q, true).unwrap();
        assert!((full.value - 2.0 * rho).abs() < 1e-12);
        assert!(phi_eps(&[], &p, &q).is_err());
        assert_eq!(phi_eps(&[a.clone()], &a, &q).unwrap().value, 0.0);
    }

    #[test]
    fn hull_keeps_extreme_points() {
        let pts = vec![0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 1.0, 0.5, 0.5, 0.2, 0.7];
        let h = convex_hull(&pts);
        assert_eq!(h.len(), 8);
        let g = Geometry { dim: 2, prefix: 0.0, points: h, present: vec![0.0, 0.0] };
        let all = Geometry { dim: 2, prefix: 0.0, points: pts, present: vec![0.0, 0.0] };
        for w in [[0.3, 0.1], [-2.0, 0.4], [0.5, 0.5]] {
            assert_eq!(g.norm_at(&w), all.norm_at(&w));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = QuadratureConfig::default();
        c.s_max = 10.0;
        assert!(GaugeQuad::new(1, c).is_err());
        c = QuadratureConfig::default();
        c.z_method = ZMethod::Exact;
        assert!(GaugeQuad::new(2, c).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn sandwich_and_bounds_d1(seed in 0u64..10_000) {
            let q = quad(1);
            let mut rng = stream_rng(seed, 1);
            let s = sample_gauge_tuple(grid(), 1, &mut rng);
            let n = stopped_distance(&s.anchor, s.point.t(), s.point.path()).unwrap();
            let k = kappa_hat(&s.anchor, s.point.t(), s.point.path(), s.point.present(), &q).unwrap();
            prop_assert!(k.value <= n + 1e-12);
            prop_assert!(k.value >= n - 2.0 * c_zeta(1).unwrap() - 1e-12);
            prop_assert!(k.value >= -1e-15);
            let kh = kappa_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &q).unwrap();
            prop_assert!(kh.gradient[0].abs() <= KAPPA_V1_BOUND + 1e-12);
            prop_assert!(kh.hessian[0].abs() <= KAPPA_V2_BOUND + 1e-12);
            let c = chi_hat(&s.anchor, s.point.t(), s.point.path(), &s.y, &q).unwrap();
            prop_assert!(c.value >= -1e-15 && c.value < 1.0);
            prop_assert!(c.derivs.horizontal.abs() <= chi_h_bound() + 1e-9);
            prop_assert!(c.derivs.vertical[0].abs() <= CHI_V1_BOUND + 1e-9);
            prop_assert!(c.derivs.vertical2[0].abs() <= CHI_V2_BOUND + 1e-9);
            let ci = chi_infty(&s.anchor, &s.point, &q).unwrap();
            prop_assert!(ci.value <= n.min(1.0) + 1e-12);
        }
    }
}
