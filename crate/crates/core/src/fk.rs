//! Candidate solution `v(t,x) = E[ξ(W^{t,x})]`, its flow identity, the finite-dimensional
//! solution `V̂` for cylinder terminal conditions, PDE residuals and viscosity spot checks.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::cylinder::{
    cylinder_pathwise_derivs, eval_cylinder, fd_pathwise_derivs, CylinderSpec, LiftedFunctional, PathwiseDerivs,
    VDerivs, ValueEngine,
};
use crate::error::{Error, Result};
use crate::path::{extend_in_place, GridPath, PathPoint};
use crate::quadrature::{composite_legendre, gauss_hermite};
use crate::rng::{derive_seed, stream_rng};

/// Terminal condition `ξ` evaluated on grid paths.
pub trait TerminalFunctional: Send + Sync {
    fn eval(&self, x: &GridPath) -> f64;
    fn name(&self) -> String;
    /// `sup |ξ|` when bounded.
    fn bound(&self) -> Option<f64> {
        None
    }
    /// `(p, M)` with `|ξ(x)| ≤ M(1 + ‖x‖∞^p)`.
    fn growth(&self) -> Option<(f64, f64)> {
        None
    }
    /// Lipschitz constant in the sup norm.
    fn lipschitz(&self) -> Option<f64> {
        None
    }
    /// One draw of `ξ` for a path that is a standard Brownian motion after node `from`, observed
    /// at the nodes. Functionals that see between-node behaviour sample it here from `rng`.
    fn eval_extended(&self, x: &GridPath, _from: usize, _rng: &mut dyn RngCore) -> f64 {
        self.eval(x)
    }
}

/// Exact draw of `sup` of a Brownian bridge from `a` to `b` over a cell of variance `dt`.
pub fn bridge_max(a: f64, b: f64, dt: f64, rng: &mut dyn RngCore) -> f64 {
    let u = 1.0 - rng.random::<f64>();
    0.5 * (a + b + ((b - a) * (b - a) - 2.0 * dt * u.ln()).sqrt())
}

/// `Σ_i x_i(T)`.
#[derive(Clone, Copy, Debug)]
pub struct TerminalValue;

impl TerminalFunctional for TerminalValue {
    fn eval(&self, x: &GridPath) -> f64 {
        x.terminal().iter().sum()
    }
    fn name(&self) -> String {
        "terminal_value".into()
    }
    fn growth(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
}

/// `|x(T)|²`.
#[derive(Clone, Copy, Debug)]
pub struct TerminalSquare;

impl TerminalFunctional for TerminalSquare {
    fn eval(&self, x: &GridPath) -> f64 {
        x.terminal().iter().map(|v| v * v).sum()
    }
    fn name(&self) -> String {
        "terminal_square".into()
    }
    fn growth(&self) -> Option<(f64, f64)> {
        Some((2.0, 1.0))
    }
}

/// `sup_s x₁(s)`: the node maximum on a grid path; Brownian cells are bridge-sampled.
#[derive(Clone, Copy, Debug)]
pub struct RunningMax;

impl TerminalFunctional for RunningMax {
    fn eval(&self, x: &GridPath) -> f64 {
        let d = x.dim();
        x.values().iter().step_by(d).fold(f64::NEG_INFINITY, |m, v| m.max(*v))
    }
    fn eval_extended(&self, x: &GridPath, from: usize, rng: &mut dyn RngCore) -> f64 {
        let (d, m, dt) = (x.dim(), x.grid().steps(), x.grid().dt());
        let v = x.values();
        let mut best = v.iter().take((from + 1) * d).step_by(d).fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        for j in from..m {
            best = best.max(bridge_max(v[j * d], v[(j + 1) * d], dt, rng));
        }
        best
    }
    fn name(&self) -> String {
        "running_max".into()
    }
    fn growth(&self) -> Option<(f64, f64)> {
        Some((1.0, 1.0))
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }
}

/// `tanh(max_s x₁(s))`, bounded by 1.
#[derive(Clone, Copy, Debug)]
pub struct BoundedMax;

impl TerminalFunctional for BoundedMax {
    fn eval(&self, x: &GridPath) -> f64 {
        RunningMax.eval(x).tanh()
    }
    fn eval_extended(&self, x: &GridPath, from: usize, rng: &mut dyn RngCore) -> f64 {
        RunningMax.eval_extended(x, from, rng).tanh()
    }
    fn name(&self) -> String {
        "bounded_max".into()
    }
    fn bound(&self) -> Option<f64> {
        Some(1.0)
    }
    fn growth(&self) -> Option<(f64, f64)> {
        Some((0.0, 1.0))
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(1.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConstantFunctional(pub f64);

impl TerminalFunctional for ConstantFunctional {
    fn eval(&self, _x: &GridPath) -> f64 {
        self.0
    }
    fn name(&self) -> String {
        format!("constant:{}", self.0)
    }
    fn bound(&self) -> Option<f64> {
        Some(self.0.abs())
    }
    fn lipschitz(&self) -> Option<f64> {
        Some(0.0)
    }
}

impl TerminalFunctional for CylinderSpec {
    fn eval(&self, x: &GridPath) -> f64 {
        eval_cylinder(self, x).unwrap_or(f64::NAN)
    }
    fn name(&self) -> String {
        self.name().to_string()
    }
}

type PathFn = Arc<dyn Fn(&GridPath) -> f64 + Send + Sync>;

/// Functional given by a closure.
#[derive(Clone)]
pub struct ClosureFunctional {
    name: String,
    f: PathFn,
    bound: Option<f64>,
}

impl ClosureFunctional {
    pub fn new(name: impl Into<String>, f: impl Fn(&GridPath) -> f64 + Send + Sync + 'static) -> Self {
        Self { name: name.into(), f: Arc::new(f), bound: None }
    }

    pub fn bounded(mut self, b: f64) -> Self {
        self.bound = Some(b);
        self
    }
}

impl TerminalFunctional for ClosureFunctional {
    fn eval(&self, x: &GridPath) -> f64 {
        (self.f)(x)
    }
    fn name(&self) -> String {
        self.name.clone()
    }
    fn bound(&self) -> Option<f64> {
        self.bound
    }
}

/// Cylinder specification registered under `name` for paths of dimension `d`.
pub fn cylinder_by_name(name: &str, d: usize) -> Result<CylinderSpec> {
    match name {
        "cyl:linear" => Ok(CylinderSpec::linear(d)),
        "cyl:quadratic" => Ok(CylinderSpec::quadratic(d)),
        "cyl:exponential" => Ok(CylinderSpec::exponential(d)),
        "cyl:trig2" if d == 1 => Ok(CylinderSpec::trig2()),
        "cyl:trig2" => Err(Error::Input("cyl:trig2 is one-dimensional".into())),
        _ => Err(Error::Input(format!("unknown cylinder spec '{name}'"))),
    }
}

/// Terminal functional registered under `name`.
pub fn terminal_by_name(name: &str, d: usize) -> Result<Arc<dyn TerminalFunctional>> {
    if name.starts_with("cyl:") {
        return Ok(Arc::new(cylinder_by_name(name, d)?));
    }
    if let Some(c) = name.strip_prefix("constant:") {
        let c: f64 = c.parse().map_err(|_| Error::Input(format!("bad constant in '{name}'")))?;
        return Ok(Arc::new(ConstantFunctional(c)));
    }
    match name {
        "terminal_value" => Ok(Arc::new(TerminalValue)),
        "terminal_square" => Ok(Arc::new(TerminalSquare)),
        "running_max" => Ok(Arc::new(RunningMax)),
        "bounded_max" => Ok(Arc::new(BoundedMax)),
        _ => Err(Error::Input(format!("unknown terminal functional '{name}'"))),
    }
}

pub const TERMINAL_NAMES: &[&str] = &[
    "terminal_value",
    "terminal_square",
    "running_max",
    "bounded_max",
    "constant:<c>",
    "cyl:linear",
    "cyl:quadratic",
    "cyl:exponential",
    "cyl:trig2",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MCConfig {
    pub samples: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl MCConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self { samples, seed, antithetic: false }
    }

    pub fn antithetic(mut self, on: bool) -> Self {
        self.antithetic = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 || (self.antithetic && self.samples % 2 == 1) {
            return Err(Error::Input(format!(
                "sample count {} invalid (need ≥ 2, even when antithetic)",
                self.samples
            )));
        }
        Ok(())
    }
}

/// Sample mean with its standard error; `n` counts draws (pairs count twice).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MCEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n: usize,
    pub seed: u64,
}

impl MCEstimate {
    /// Estimate from i.i.d. values; `weight` draws stand behind each value.
    pub fn from_values(values: &[f64], weight: usize, seed: u64) -> Self {
        let m = values.len() as f64;
        let mean = values.iter().sum::<f64>() / m;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0)
        } else {
            0.0
        };
        Self { mean, stderr: (var / m).sqrt(), n: values.len() * weight, seed }
    }

    /// Count-weighted mean; standard errors pooled as for independent means.
    pub fn merge(&self, other: &MCEstimate) -> MCEstimate {
        let (a, b) = (self.n as f64, other.n as f64);
        let w = a / (a + b);
        let stderr = ((w * self.stderr).powi(2) + ((1.0 - w) * other.stderr).powi(2)).sqrt();
        MCEstimate { mean: w * self.mean + (1.0 - w) * other.mean, stderr, n: self.n + other.n, seed: self.seed }
    }

    /// Within `k` standard errors of `target`.
    pub fn within(&self, target: f64, k: f64) -> bool {
        (self.mean - target).abs() <= k * self.stderr
    }
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("{what}: non-finite value at sample {i}")));
    }
    Ok(())
}

/// Per-draw values of `ξ(W^{t,x})`, pair-averaged when antithetic; sample `i` uses stream `i`.
fn terminal_samples(xi: &dyn TerminalFunctional, k: usize, x: &GridPath, cfg: &MCConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let base = x.stopped_at_node(k);
    let draws = if cfg.antithetic { cfg.samples / 2 } else { cfg.samples };
    let values: Vec<f64> = (0..draws)
        .into_par_iter()
        .map_init(
            || base.clone(),
            |buf, i| {
                let mut rng = stream_rng(cfg.seed, i as u64);
                if cfg.antithetic {
                    let mut rng2 = rng.clone();
                    extend_in_place(k, buf, &mut rng, 1.0);
                    let a = xi.eval_extended(buf, k, &mut rng);
                    extend_in_place(k, buf, &mut rng2, -1.0);
                    0.5 * (a + xi.eval_extended(buf, k, &mut rng2))
                } else {
                    extend_in_place(k, buf, &mut rng, 1.0);
                    xi.eval_extended(buf, k, &mut rng)
                }
            },
        )
        .collect();
    check_finite(&values, "terminal functional")?;
    Ok(values)
}

/// `v(t,x) = E[ξ(W^{t,x})]` by Monte Carlo; `t` must be a grid node.
pub fn solve_v(xi: &dyn TerminalFunctional, t: f64, x: &GridPath, cfg: &MCConfig) -> Result<MCEstimate> {
    let k = x.grid().index_of(t)?;
    let values = terminal_samples(xi, k, x, cfg)?;
    Ok(MCEstimate::from_values(&values, if cfg.antithetic { 2 } else { 1 }, cfg.seed))
}

/// Residual `v(t,x) − E[v(t′, W^{t,x})]` of the flow identity.
#[derive(Clone, Copy, Debug)]
pub struct DppResidual {
    pub residual: MCEstimate,
    pub direct: MCEstimate,
    pub nested: MCEstimate,
    pub inner_samples: usize,
}

/// Nested Monte Carlo for the flow identity: `cfg.samples` outer paths, `inner` antithetic
/// inner draws per outer path.
pub fn check_dpp(
    xi: &dyn TerminalFunctional,
    t: f64,
    t_prime: f64,
    x: &GridPath,
    cfg: &MCConfig,
    inner: usize,
) -> Result<DppResidual> {
    let grid = *x.grid();
    let k = grid.index_of(t)?;
    let kp = grid.index_of(t_prime)?;
    if kp < k {
        return Err(Error::Domain(format!("t′ = {t_prime} precedes t = {t}")));
    }
    if inner < 2 || inner % 2 == 1 {
        return Err(Error::Input("inner sample count must be even and ≥ 2".into()));
    }
    let direct_cfg = MCConfig { seed: derive_seed(cfg.seed, 1), ..*cfg };
    let direct = solve_v(xi, t, x, &direct_cfg)?;
    if kp == k {
        // W^{t,x}(·∧t) = x(·∧t): the nested estimator is the direct one
        let zero = MCEstimate { mean: 0.0, stderr: 0.0, n: direct.n, seed: cfg.seed };
        return Ok(DppResidual { residual: zero, direct, nested: direct, inner_samples: inner });
    }
    cfg.validate()?;
    let outer_seed = derive_seed(cfg.seed, 2);
    let inner_seed = derive_seed(cfg.seed, 3);
    let bridge_seed = derive_seed(cfg.seed, 4);
    let base = x.stopped_at_node(k);
    let values: Vec<f64> = (0..cfg.samples)
        .into_par_iter()
        .map_init(
            || (base.clone(), base.clone()),
            |(outer, buf), j| {
                outer.values_mut().copy_from_slice(base.values());
                let mut rng = stream_rng(outer_seed, j as u64);
                extend_in_place(k, outer, &mut rng, 1.0);
                let stop = outer.stopped_at_node(kp);
                let mut irng = stream_rng(inner_seed, j as u64);
                // one bridge stream per outer path, so every inner draw sees the same
                // between-node behaviour on [t, t′]
                let brng = stream_rng(bridge_seed, j as u64);
                let mut acc = 0.0;
                for _ in 0..inner / 2 {
                    let mut mirror = irng.clone();
                    buf.values_mut().copy_from_slice(stop.values());
                    extend_in_place(kp, buf, &mut irng, 1.0);
                    acc += xi.eval_extended(buf, k, &mut brng.clone());
                    buf.values_mut().copy_from_slice(stop.values());
                    extend_in_place(kp, buf, &mut mirror, -1.0);
                    acc += xi.eval_extended(buf, k, &mut brng.clone());
                    irng = mirror;
                }
                acc / inner as f64
            },
        )
        .collect();
    check_finite(&values, "nested estimate")?;
    let nested = MCEstimate::from_values(&values, inner, outer_seed);
    let residual = MCEstimate {
        mean: direct.mean - nested.mean,
        stderr: (direct.stderr.powi(2) + nested.stderr.powi(2)).sqrt(),
        n: direct.n + nested.n,
        seed: cfg.seed,
    };
    Ok(DppResidual { residual, direct, nested, inner_samples: inner })
}

/// Integration backend for `V̂`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backend {
    /// Gauss–Hermite when `d(n+1) ≤ 3`, Monte Carlo otherwise.
    Auto,
    GaussHermite,
    MonteCarlo,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FiniteDimConfig {
    pub backend: Backend,
    pub gh_nodes: usize,
    /// Monte-Carlo draws (antithetic pairs count twice).
    pub mc_samples: usize,
    pub seed: u64,
    /// Absolute tolerance for the covariance integrals.
    pub covariance_tol: f64,
}

impl FiniteDimConfig {
    pub fn new(seed: u64) -> Self {
        Self { backend: Backend::Auto, gh_nodes: 20, mc_samples: 20_000, seed, covariance_tol: 1e-10 }
    }

    pub fn with_backend(mut self, b: Backend) -> Self {
        self.backend = b;
        self
    }

    pub fn with_mc_samples(mut self, n: usize) -> Self {
        self.mc_samples = n;
        self
    }
}

/// `V̂` and derivatives plus the Monte-Carlo standard error of the value (0 for quadrature).
#[derive(Clone, Debug)]
pub struct FiniteDimValue {
    pub derivs: VDerivs,
    pub stderr: f64,
    pub backend: Backend,
}

/// `C(t)_{lm} = ∫_t^T ψ_l ψ_m ds`.
pub fn covariance(spec: &CylinderSpec, t: f64, horizon: f64, tol: f64) -> DMatrix<f64> {
    let p = spec.psi();
    let n = p.len();
    let mut c = DMatrix::zeros(n, n);
    for l in 0..n {
        for m in 0..=l {
            let f = |s: f64| p[l].value(s) * p[m].value(s);
            let v = composite_legendre(&f, t, horizon, tol);
            c[(l, m)] = v;
            c[(m, l)] = v;
        }
    }
    c
}

/// Lower triangle with halved diagonal.
fn half_lower(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => m[(i, j)],
        std::cmp::Ordering::Equal => 0.5 * m[(i, j)],
        std::cmp::Ordering::Less => 0.0,
    })
}

/// `A ⊗ I_d` in the block layout `(ℓ, i) ↦ ℓd + i`.
fn kron_identity(a: &DMatrix<f64>, d: usize) -> DMatrix<f64> {
    let n = a.nrows();
    DMatrix::from_fn(n * d, n * d, |r, c| if r % d == c % d { a[(r / d, c / d)] } else { 0.0 })
}

struct Factor {
    l: DMatrix<f64>,
    dl: DMatrix<f64>,
    l_inv: DMatrix<f64>,
}

/// Cholesky factor of `Σ(t)` and its time derivative (from `C′ = −ψψᵀ`).
fn factor(spec: &CylinderSpec, t: f64, horizon: f64, tol: f64) -> Result<Factor> {
    let c = covariance(spec, t, horizon, tol);
    let chol = c
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numeric(format!("covariance at t = {t} is not positive definite")))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numeric("singular covariance factor".into()))?;
    let psi = nalgebra::DVector::from_vec(spec.psi_values(t));
    let dc = -(&psi * psi.transpose());
    let inner = &l_inv * dc * l_inv.transpose();
    let dl = &l * half_lower(&inner);
    let d = spec.dim();
    Ok(Factor { l: kron_identity(&l, d), dl: kron_identity(&dl, d), l_inv: kron_identity(&l_inv, d) })
}

/// Symmetric square root `V diag(√λ⁺) Vᵀ` of `Σ(t)`; enough for values when `Σ` is
/// numerically singular, which happens for many basis functions on a short interval.
fn value_factor(spec: &CylinderSpec, t: f64, horizon: f64, tol: f64) -> Factor {
    let c = covariance(spec, t, horizon, tol);
    let n = c.nrows();
    let l = match c.clone().cholesky() {
        Some(ch) => ch.l(),
        None => {
            let e = c.symmetric_eigen();
            let root = e.eigenvalues.map(|v| v.max(0.0).sqrt());
            &e.eigenvectors * DMatrix::from_diagonal(&root) * e.eigenvectors.transpose()
        }
    };
    let d = spec.dim();
    let zero = DMatrix::zeros(n * d, n * d);
    Factor { l: kron_identity(&l, d), dl: zero.clone(), l_inv: zero }
}

struct Acc {
    w: f64,
    val: f64,
    val_sq: f64,
    time: f64,
    grad: Vec<f64>,
    hess: Vec<f64>,
}

impl Acc {
    fn new(k: usize) -> Self {
        Self { w: 0.0, val: 0.0, val_sq: 0.0, time: 0.0, grad: vec![0.0; k], hess: vec![0.0; k * k] }
    }

    fn add(&mut self, o: &Acc) {
        self.w += o.w;
        self.val += o.val;
        self.val_sq += o.val_sq;
        self.time += o.time;
        for (a, b) in self.grad.iter_mut().zip(&o.grad) {
            *a += b;
        }
        for (a, b) in self.hess.iter_mut().zip(&o.hess) {
            *a += b;
        }
    }
}

struct Integrand<'a> {
    spec: &'a CylinderSpec,
    z: &'a [f64],
    f: &'a Factor,
    analytic: bool,
    derivs: bool,
    /// `L⁻ᵀL⁻¹`, `A = L⁻¹L′`, `tr A`
    ibp: Option<(DMatrix<f64>, DMatrix<f64>, f64)>,
}

impl Integrand<'_> {
    /// Add `w·(g, ∂ terms)` at standard normal point `xi`; returns `g`.
    fn accumulate(&self, xi: &[f64], w: f64, acc: &mut Acc) -> f64 {
        let k = xi.len();
        let xv = nalgebra::DVector::from_column_slice(xi);
        let shift = &self.f.l * &xv;
        let arg: Vec<f64> = self.z.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();
        let g = self.spec.g().value(&arg);
        acc.w += w;
        acc.val += w * g;
        if !self.derivs {
            return g;
        }
        if self.analytic {
            let gr = self.spec.g().gradient(&arg).unwrap();
            let h = self.spec.g().hessian(&arg).unwrap();
            let dshift = &self.f.dl * &xv;
            acc.time += w * gr.iter().zip(dshift.iter()).map(|(a, b)| a * b).sum::<f64>();
            for (a, b) in acc.grad.iter_mut().zip(&gr) {
                *a += w * b;
            }
            for (a, b) in acc.hess.iter_mut().zip(&h) {
                *a += w * b;
            }
        } else {
            let (lilt, a_mat, tr_a) = self.ibp.as_ref().unwrap();
            let a = self.f.l_inv.transpose() * &xv;
            let quad = xv.dot(&(a_mat * &xv));
            acc.time += w * g * (quad - tr_a);
            for i in 0..k {
                acc.grad[i] += w * g * a[i];
                for j in 0..k {
                    acc.hess[i * k + j] += w * g * (a[i] * a[j] - lilt[(i, j)]);
                }
            }
        }
        g
    }
}

/// `V̂(t,z) = E[g(z + ∫_t^T σ dW)]` with time derivative, gradient and Hessian.
///
/// Derivatives use `∇g`, `∇²g` when `g` supplies them and Gaussian integration-by-parts
/// weights otherwise.
pub fn finite_dim_v(
    spec: &CylinderSpec,
    horizon: f64,
    t: f64,
    z: &[f64],
    cfg: &FiniteDimConfig,
    with_derivs: bool,
) -> Result<FiniteDimValue> {
    let k = spec.arg_len();
    if z.len() != k {
        return Err(Error::Domain(format!("argument length {} vs {}", z.len(), k)));
    }
    if !(t <= horizon + 1e-12 * horizon) || t < 0.0 {
        return Err(Error::Domain(format!("t = {t} outside [0, {horizon}]")));
    }
    let g = spec.g();
    let analytic = g.gradient(z).is_some() && g.hessian(z).is_some();
    if horizon - t <= 1e-14 * horizon {
        let value = g.value(z);
        let (gradient, hessian, time) = if with_derivs {
            if !analytic {
                return Err(Error::Domain("derivatives of V̂ at the horizon need ∇g and ∇²g".into()));
            }
            let h = g.hessian(z).unwrap();
            let psi = spec.psi_values(horizon);
            let d = spec.dim();
            let mut time = 0.0;
            for (l, pl) in psi.iter().enumerate() {
                for (m, pm) in psi.iter().enumerate() {
                    for i in 0..d {
                        time -= 0.5 * pl * pm * h[(l * d + i) * k + m * d + i];
                    }
                }
            }
            (g.gradient(z).unwrap(), h, time)
        } else {
            (vec![0.0; k], vec![0.0; k * k], 0.0)
        };
        let derivs = VDerivs { value, time, gradient, hessian };
        return Ok(FiniteDimValue { derivs, stderr: 0.0, backend: Backend::GaussHermite });
    }
    let f = if with_derivs {
        factor(spec, t, horizon, cfg.covariance_tol)?
    } else {
        value_factor(spec, t, horizon, cfg.covariance_tol)
    };
    let ibp = if with_derivs && !analytic {
        let a = &f.l_inv * &f.dl;
        let tr = a.trace();
        Some((f.l_inv.transpose() * &f.l_inv, a, tr))
    } else {
        None
    };
    let integrand = Integrand { spec, z, f: &f, analytic, derivs: with_derivs, ibp };
    let backend = match cfg.backend {
        Backend::Auto if k <= 3 => Backend::GaussHermite,
        Backend::Auto => Backend::MonteCarlo,
        b => b,
    };
    let (acc, stderr) = match backend {
        Backend::GaussHermite => (gh_tensor(&integrand, k, cfg.gh_nodes), 0.0),
        _ => mc_integrate(&integrand, k, cfg)?,
    };
    if !acc.val.is_finite() {
        return Err(Error::Numeric("non-finite V̂".into()));
    }
    let s = 1.0 / acc.w;
    let mut hessian: Vec<f64> = acc.hess.iter().map(|v| v * s).collect();
    for i in 0..k {
        for j in 0..i {
            let m = 0.5 * (hessian[i * k + j] + hessian[j * k + i]);
            hessian[i * k + j] = m;
            hessian[j * k + i] = m;
        }
    }
    let derivs = VDerivs {
        value: acc.val * s,
        time: acc.time * s,
        gradient: acc.grad.iter().map(|v| v * s).collect(),
        hessian,
    };
    Ok(FiniteDimValue { derivs, stderr, backend })
}

fn gh_tensor(integrand: &Integrand<'_>, k: usize, nodes: usize) -> Acc {
    let rule = gauss_hermite(nodes);
    let total = nodes.pow(k as u32);
    let mut acc = Acc::new(k);
    let mut xi = vec![0.0; k];
    for flat in 0..total {
        let mut r = flat;
        let mut w = 1.0;
        for c in xi.iter_mut() {
            let j = r % nodes;
            r /= nodes;
            *c = rule.nodes[j];
            w *= rule.weights[j];
        }
        integrand.accumulate(&xi, w, &mut acc);
    }
    acc
}

const MC_CHUNK: usize = 512;

/// Antithetic Monte Carlo in fixed-size chunks, merged in chunk order.
fn mc_integrate(integrand: &Integrand<'_>, k: usize, cfg: &FiniteDimConfig) -> Result<(Acc, f64)> {
    let pairs = (cfg.mc_samples / 2).max(1);
    let chunks = pairs.div_ceil(MC_CHUNK);
    let parts: Vec<Acc> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(cfg.seed, c as u64);
            let mut acc = Acc::new(k);
            let mut xi = vec![0.0; k];
            let mut neg = vec![0.0; k];
            for _ in (c * MC_CHUNK)..((c + 1) * MC_CHUNK).min(pairs) {
                for (a, b) in xi.iter_mut().zip(neg.iter_mut()) {
                    *a = rng.sample(StandardNormal);
                    *b = -*a;
                }
                let g1 = integrand.accumulate(&xi, 0.5, &mut acc);
                let g2 = integrand.accumulate(&neg, 0.5, &mut acc);
                let pair = 0.5 * (g1 + g2);
                acc.val_sq += pair * pair;
            }
            acc
        })
        .collect();
    let mut acc = Acc::new(k);
    for p in &parts {
        acc.add(p);
    }
    let m = pairs as f64;
    let mean = acc.val / acc.w;
    let var = ((acc.val_sq / m - mean * mean) * m / (m - 1.0).max(1.0)).max(0.0);
    Ok((acc, (var / m).sqrt()))
}

/// `ValueEngine` backed by `finite_dim_v`.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDimEngine {
    pub horizon: f64,
    pub cfg: FiniteDimConfig,
}

impl FiniteDimEngine {
    pub fn new(horizon: f64, cfg: FiniteDimConfig) -> Self {
        Self { horizon, cfg }
    }
}

impl ValueEngine for FiniteDimEngine {
    fn value(&self, spec: &CylinderSpec, t: f64, z: &[f64]) -> Result<f64> {
        Ok(finite_dim_v(spec, self.horizon, t, z, &self.cfg, false)?.derivs.value)
    }
    fn derivs(&self, spec: &CylinderSpec, t: f64, z: &[f64]) -> Result<VDerivs> {
        Ok(finite_dim_v(spec, self.horizon, t, z, &self.cfg, true)?.derivs)
    }
}

/// `ℒv(t,x) = ∂ᴴv + ½ tr ∂ⱽⱽv` for the cylinder solution; zero up to quadrature error.
pub fn pde_residual(spec: &CylinderSpec, t: f64, x: &GridPath, cfg: &FiniteDimConfig) -> Result<f64> {
    let engine = FiniteDimEngine::new(x.grid().horizon(), *cfg);
    Ok(cylinder_pathwise_derivs(spec, &engine, t, x)?.heat_operator())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpotMode {
    Sub,
    Super,
}

#[derive(Clone, Debug)]
pub struct SpotcheckReport {
    pub mode: SpotMode,
    /// `max_q (u−φ)(q) − (u−φ)(p)` for `Sub`, the mirrored gap for `Super`; ≤ tol when certified.
    pub certificate_gap: f64,
    pub certified: bool,
    /// `−∂ᴴφ − ½ tr ∂ⱽⱽφ` at the point, when certified.
    pub value: Option<f64>,
    pub holds: Option<bool>,
    pub derivatives: Option<PathwiseDerivs>,
    pub hypothesis_assumed: bool,
    pub tolerance: f64,
    pub note: &'static str,
}

pub const SPOTCHECK_GAP_NOTE: &str =
    "extremum certified over the supplied finite space only, not over the whole path space";

/// Heat-case viscosity test at `point` against `phi`, with the extremum of `u − φ`
/// certified over `space`.
pub fn viscosity_spotcheck(
    u: &dyn Fn(&PathPoint) -> f64,
    phi: &dyn LiftedFunctional,
    point: &PathPoint,
    space: &[PathPoint],
    mode: SpotMode,
    tol: f64,
) -> Result<SpotcheckReport> {
    let diff = |p: &PathPoint| u(p) - phi.eval(p.t(), p.path(), p.present());
    let at = diff(point);
    let sign = if mode == SpotMode::Sub { 1.0 } else { -1.0 };
    let gap = space.iter().map(|q| sign * (diff(q) - at)).fold(f64::NEG_INFINITY, f64::max).max(0.0);
    let mut rep = SpotcheckReport {
        mode,
        certificate_gap: gap,
        certified: gap <= tol,
        value: None,
        holds: None,
        derivatives: None,
        hypothesis_assumed: false,
        tolerance: tol,
        note: SPOTCHECK_GAP_NOTE,
    };
    if !rep.certified {
        return Ok(rep);
    }
    let d = match phi.derivs(point.t(), point.path(), point.present()) {
        Some(r) => r?,
        None => {
            rep.hypothesis_assumed = true;
            fd_pathwise_derivs(phi, point.t(), point.path(), None)?
        }
    };
    let value = -d.horizontal - 0.5 * d.trace2();
    rep.value = Some(value);
    rep.holds = Some(match mode {
        SpotMode::Sub => value <= tol,
        SpotMode::Super => value >= -tol,
    });
    rep.derivatives = Some(d);
    Ok(rep)
}
