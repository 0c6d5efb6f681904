//! Cylinder terminal functionals `ξ(x) = g(∫ψ₀d⁻x, …, ∫ψₙd⁻x)`, their Fejér approximations,
//! lifted functionals `û(t,x,y)` and pathwise derivatives (analytic via the finite-dimensional
//! solution, or by finite differences).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::fk::TerminalFunctional;
use crate::fourier::{FourierBasis, Reconstructor};
use crate::path::{stop_path, GridPath, TimeGrid};
use crate::regcalc::{forward_integral, IntegrandFn};

/// Finite-dimensional function `g: R^{d(n+1)} → R`, optionally with derivatives
/// (Hessian row-major).
pub trait GFunction: Send + Sync {
    fn value(&self, z: &[f64]) -> f64;
    fn gradient(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }
    fn hessian(&self, _z: &[f64]) -> Option<Vec<f64>> {
        None
    }
}

type VecFn<T> = Arc<dyn Fn(&[f64]) -> T + Send + Sync>;

/// `g` given by closures for value, gradient and Hessian.
#[derive(Clone)]
pub struct SmoothG {
    value: VecFn<f64>,
    gradient: VecFn<Vec<f64>>,
    hessian: VecFn<Vec<f64>>,
}

impl SmoothG {
    pub fn new(
        value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        gradient: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
        hessian: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static,
    ) -> Self {
        Self { value: Arc::new(value), gradient: Arc::new(gradient), hessian: Arc::new(hessian) }
    }
}

impl GFunction for SmoothG {
    fn value(&self, z: &[f64]) -> f64 {
        (self.value)(z)
    }
    fn gradient(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some((self.gradient)(z))
    }
    fn hessian(&self, z: &[f64]) -> Option<Vec<f64>> {
        Some((self.hessian)(z))
    }
}

/// `ξ(x) = g(∫_[0,T] ψ₀ d⁻x, …, ∫_[0,T] ψₙ d⁻x)` for `d`-dimensional paths.
#[derive(Clone)]
pub struct CylinderSpec {
    name: String,
    dim: usize,
    psi: Vec<IntegrandFn>,
    g: Arc<dyn GFunction>,
}

impl std::fmt::Debug for CylinderSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CylinderSpec").field("name", &self.name).field("dim", &self.dim).field("n", &self.n()).finish()
    }
}

impl CylinderSpec {
    pub fn new(name: impl Into<String>, dim: usize, psi: Vec<IntegrandFn>, g: Arc<dyn GFunction>) -> Result<Self> {
        if dim == 0 || psi.is_empty() {
            return Err(Error::Domain("cylinder needs d ≥ 1 and at least one ψ".into()));
        }
        if psi.iter().any(|p| p.derivative(0.0).is_none()) {
            return Err(Error::Contract("every ψ must come with its derivative".into()));
        }
        Ok(Self { name: name.into(), dim, psi, g })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of ψ functions minus one.
    pub fn n(&self) -> usize {
        self.psi.len() - 1
    }

    /// Length `d(n+1)` of the argument of `g`.
    pub fn arg_len(&self) -> usize {
        self.dim * self.psi.len()
    }

    pub fn g(&self) -> &dyn GFunction {
        self.g.as_ref()
    }

    pub fn psi(&self) -> &[IntegrandFn] {
        &self.psi
    }

    pub fn psi_values(&self, t: f64) -> Vec<f64> {
        self.psi.iter().map(|p| p.value(t)).collect()
    }

    pub fn psi_derivatives(&self, t: f64) -> Vec<f64> {
        self.psi.iter().map(|p| p.derivative(t).unwrap()).collect()
    }

    /// `z(t,x) = (∫_[0,t] ψ_ℓ d⁻x)_ℓ`, blocks of length `d`.
    pub fn features(&self, x: &GridPath, t: f64) -> Result<Vec<f64>> {
        if x.dim() != self.dim {
            return Err(Error::Domain(format!("path dimension {} vs cylinder dimension {}", x.dim(), self.dim)));
        }
        let mut z = Vec::with_capacity(self.arg_len());
        for p in &self.psi {
            z.extend(forward_integral(p, x, t)?);
        }
        Ok(z)
    }

    /// `n = 0`, `ψ₀ ≡ 1`, `g(z) = Σ z_i`.
    pub fn linear(dim: usize) -> Self {
        let g = SmoothG::new(|z| z.iter().sum(), move |z| vec![1.0; z.len()], move |z| vec![0.0; z.len() * z.len()]);
        Self::new("cyl:linear", dim, vec![IntegrandFn::constant(1.0)], Arc::new(g)).unwrap()
    }

    /// `n = 0`, `ψ₀ ≡ 1`, `g(z) = |z|²`.
    pub fn quadratic(dim: usize) -> Self {
        let g = SmoothG::new(
            |z| z.iter().map(|v| v * v).sum(),
            |z| z.iter().map(|v| 2.0 * v).collect(),
            |z| {
                let k = z.len();
                let mut h = vec![0.0; k * k];
                for i in 0..k {
                    h[i * k + i] = 2.0;
                }
                h
            },
        );
        Self::new("cyl:quadratic", dim, vec![IntegrandFn::constant(1.0)], Arc::new(g)).unwrap()
    }

    /// `n = 0`, `ψ₀ ≡ 1`, `g(z) = exp(Σ z_i)`.
    pub fn exponential(dim: usize) -> Self {
        let g = SmoothG::new(
            |z| z.iter().sum::<f64>().exp(),
            |z| vec![z.iter().sum::<f64>().exp(); z.len()],
            |z| vec![z.iter().sum::<f64>().exp(); z.len() * z.len()],
        );
        Self::new("cyl:exponential", dim, vec![IntegrandFn::constant(1.0)], Arc::new(g)).unwrap()
    }

    /// One-dimensional, `n = 1`, `ψ₀ = cos t`, `ψ₁ = sin 2t`, `g(z) = cos z₀ · e^{z₁/2} + z₀ z₁`.
    pub fn trig2() -> Self {
        let g = SmoothG::new(
            |z| z[0].cos() * (0.5 * z[1]).exp() + z[0] * z[1],
            |z| {
                let e = (0.5 * z[1]).exp();
                vec![-z[0].sin() * e + z[1], 0.5 * z[0].cos() * e + z[0]]
            },
            |z| {
                let e = (0.5 * z[1]).exp();
                let off = -0.5 * z[0].sin() * e + 1.0;
                vec![-z[0].cos() * e, off, off, 0.25 * z[0].cos() * e]
            },
        );
        let psi = vec![
            IntegrandFn::smooth(f64::cos, |t| -t.sin()),
            IntegrandFn::smooth(|t| (2.0 * t).sin(), |t| 2.0 * (2.0 * t).cos()),
        ];
        Self::new("cyl:trig2", 1, psi, Arc::new(g)).unwrap()
    }
}

/// `g(∫ψ d⁻x)` over the whole horizon.
pub fn eval_cylinder(spec: &CylinderSpec, x: &GridPath) -> Result<f64> {
    let z = spec.features(x, x.grid().horizon())?;
    Ok(spec.g.value(&z))
}

/// `g̃_n(z) = ξ(z₀e₋₁ − Σ (n+1−ℓ)/(n+1) z_ℓ (e_ℓ − e_ℓ(0)))` on a fixed reconstruction grid.
pub struct ReconstructG {
    xi: Arc<dyn TerminalFunctional>,
    rec: Reconstructor,
}

impl GFunction for ReconstructG {
    fn value(&self, z: &[f64]) -> f64 {
        self.xi.eval(&self.rec.apply(z))
    }
}

/// `ξ̃_n = ξ ∘ T_n` with its cylinder representation (`ψ₀ ≡ 1`, `ψ_ℓ = E_ℓ`).
#[derive(Clone)]
pub struct CylinderApprox {
    pub spec: CylinderSpec,
    pub xi: Arc<dyn TerminalFunctional>,
    pub n: usize,
}

impl CylinderApprox {
    /// `ξ(T_n x)` through the cylinder representation.
    pub fn eval(&self, x: &GridPath) -> Result<f64> {
        eval_cylinder(&self.spec, x)
    }
}

pub fn cylinder_approx(xi: Arc<dyn TerminalFunctional>, n: usize, grid: TimeGrid, dim: usize) -> CylinderApprox {
    let mut psi = vec![IntegrandFn::constant(1.0)];
    psi.extend((1..=n).map(|l| FourierBasis::new(grid.horizon(), l).primitive_integrand()));
    let g = ReconstructG { xi: xi.clone(), rec: Reconstructor::new(grid, dim, n) };
    let spec = CylinderSpec::new(format!("approx:{}:{n}", xi.name()), dim, psi, Arc::new(g)).unwrap();
    CylinderApprox { spec, xi, n }
}

/// `∂ᴴu`, `∂ⱽu` and the symmetric `∂ⱽⱽu` (row-major `d x d`).
#[derive(Clone, Debug, PartialEq)]
pub struct PathwiseDerivs {
    pub horizontal: f64,
    pub vertical: Vec<f64>,
    pub vertical2: Vec<f64>,
}

impl PathwiseDerivs {
    pub fn zeros(d: usize) -> Self {
        Self { horizontal: 0.0, vertical: vec![0.0; d], vertical2: vec![0.0; d * d] }
    }

    pub fn dim(&self) -> usize {
        self.vertical.len()
    }

    pub fn v2(&self, i: usize, j: usize) -> f64 {
        self.vertical2[i * self.dim() + j]
    }

    pub fn trace2(&self) -> f64 {
        (0..self.dim()).map(|i| self.v2(i, i)).sum()
    }

    /// `∂ᴴu + ½ tr ∂ⱽⱽu`.
    pub fn heat_operator(&self) -> f64 {
        self.horizontal + 0.5 * self.trace2()
    }

    pub fn asymmetry(&self) -> f64 {
        let d = self.dim();
        let mut m = 0.0f64;
        for i in 0..d {
            for j in 0..d {
                m = m.max((self.v2(i, j) - self.v2(j, i)).abs());
            }
        }
        m
    }

    /// Largest componentwise gaps `(horizontal, vertical, vertical2)`.
    pub fn max_gaps(&self, other: &PathwiseDerivs) -> (f64, f64, f64) {
        let v = self.vertical.iter().zip(&other.vertical).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let v2 = self.vertical2.iter().zip(&other.vertical2).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ((self.horizontal - other.horizontal).abs(), v, v2)
    }

    pub fn scale_add(&mut self, c: f64, other: &PathwiseDerivs) {
        self.horizontal += c * other.horizontal;
        for (a, b) in self.vertical.iter_mut().zip(&other.vertical) {
            *a += c * b;
        }
        for (a, b) in self.vertical2.iter_mut().zip(&other.vertical2) {
            *a += c * b;
        }
    }
}

/// Non-anticipative map `û(t, x, y)` on paths times `R^d`.
///
/// `eval` may only read `x` on `[0,t]`; `t` is any real time in `[0,T]`.
/// `derivs`, when available, returns at `(t, x, y)` the right time-derivative of
/// `δ ↦ û(t+δ, x(·∧t), y)` and the first two derivatives in `y`.
pub trait LiftedFunctional: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64;
    fn derivs(&self, _t: f64, _x: &GridPath, _y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        None
    }
    fn name(&self) -> String {
        "lift".into()
    }
}

type LiftEval = Arc<dyn Fn(f64, &GridPath, &[f64]) -> f64 + Send + Sync>;
type LiftDerivs = Arc<dyn Fn(f64, &GridPath, &[f64]) -> PathwiseDerivs + Send + Sync>;

/// Lift built from closures.
#[derive(Clone)]
pub struct ClosureLift {
    name: String,
    dim: usize,
    eval: LiftEval,
    derivs: Option<LiftDerivs>,
}

impl ClosureLift {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        eval: impl Fn(f64, &GridPath, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self { name: name.into(), dim, eval: Arc::new(eval), derivs: None }
    }

    pub fn with_derivs(mut self, d: impl Fn(f64, &GridPath, &[f64]) -> PathwiseDerivs + Send + Sync + 'static) -> Self {
        self.derivs = Some(Arc::new(d));
        self
    }

    pub fn without_derivs(mut self) -> Self {
        self.derivs = None;
        self
    }
}

impl LiftedFunctional for ClosureLift {
    fn dim(&self) -> usize {
        self.dim
    }
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
        (self.eval)(t, x, y)
    }
    fn derivs(&self, t: f64, x: &GridPath, y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        self.derivs.as_ref().map(|d| Ok(d(t, x, y)))
    }
    fn name(&self) -> String {
        self.name.clone()
    }
}

/// `V̂(t,z)` with its time derivative, gradient and Hessian (row-major).
#[derive(Clone, Debug)]
pub struct VDerivs {
    pub value: f64,
    pub time: f64,
    pub gradient: Vec<f64>,
    pub hessian: Vec<f64>,
}

/// Evaluator of the finite-dimensional solution `V̂(t,z) = E[g(z + ∫_t^T σ dW)]`.
pub trait ValueEngine: Send + Sync {
    fn value(&self, spec: &CylinderSpec, t: f64, z: &[f64]) -> Result<f64>;
    fn derivs(&self, spec: &CylinderSpec, t: f64, z: &[f64]) -> Result<VDerivs>;
}

/// Chain `V̂` derivatives through `σ(t) = [ψ₀(t)I; …; ψₙ(t)I]`; `shift = y − x(t)`.
fn lift_derivs(spec: &CylinderSpec, t: f64, v: &VDerivs, shift: &[f64]) -> PathwiseDerivs {
    let d = spec.dim();
    let psi = spec.psi_values(t);
    let dpsi = spec.psi_derivatives(t);
    let k = spec.arg_len();
    let mut out = PathwiseDerivs::zeros(d);
    out.horizontal = v.time;
    for (l, dp) in dpsi.iter().enumerate() {
        for i in 0..d {
            out.horizontal += v.gradient[l * d + i] * dp * shift[i];
        }
    }
    for (l, p) in psi.iter().enumerate() {
        for i in 0..d {
            out.vertical[i] += p * v.gradient[l * d + i];
        }
    }
    for (l, pl) in psi.iter().enumerate() {
        for (m, pm) in psi.iter().enumerate() {
            for i in 0..d {
                for j in 0..d {
                    out.vertical2[i * d + j] += pl * pm * v.hessian[(l * d + i) * k + m * d + j];
                }
            }
        }
    }
    out
}

/// Analytic pathwise derivatives of `v(t,x) = V̂(t, z(t,x))` at `y = x(t)`.
pub fn cylinder_pathwise_derivs(spec: &CylinderSpec, engine: &dyn ValueEngine, t: f64, x: &GridPath) -> Result<PathwiseDerivs> {
    if t >= x.grid().horizon() - 1e-14 {
        return Err(Error::Domain("horizontal derivative is not defined at the horizon".into()));
    }
    let z = spec.features(x, t)?;
    let v = engine.derivs(spec, t, &z)?;
    Ok(lift_derivs(spec, t, &v, &vec![0.0; spec.dim()]))
}

/// Lift `v̂(t,x,y) = V̂(t, z(t,x) + σ(t)(y − x(t)))` of the cylinder solution.
#[derive(Clone)]
pub struct CylinderLift {
    pub spec: CylinderSpec,
    pub engine: Arc<dyn ValueEngine>,
}

impl CylinderLift {
    fn shifted_arg(&self, t: f64, x: &GridPath, y: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut z = self.spec.features(x, t)?;
        let xt = x.eval(t);
        let shift: Vec<f64> = y.iter().zip(&xt).map(|(a, b)| a - b).collect();
        let d = self.spec.dim();
        for (l, p) in self.spec.psi_values(t).iter().enumerate() {
            for i in 0..d {
                z[l * d + i] += p * shift[i];
            }
        }
        Ok((z, shift))
    }
}

impl LiftedFunctional for CylinderLift {
    fn dim(&self) -> usize {
        self.spec.dim()
    }
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
        let (z, _) = self.shifted_arg(t, x, y).expect("cylinder features");
        self.engine.value(&self.spec, t, &z).expect("cylinder value")
    }
    fn derivs(&self, t: f64, x: &GridPath, y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        Some((|| {
            let (z, shift) = self.shifted_arg(t, x, y)?;
            let v = self.engine.derivs(&self.spec, t, &z)?;
            Ok(lift_derivs(&self.spec, t, &v, &shift))
        })())
    }
    fn name(&self) -> String {
        format!("lift:{}", self.spec.name())
    }
}

/// Finite-difference steps: `delta` in time, `h` in the present value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdSteps {
    pub delta: f64,
    pub h: f64,
}

impl FdSteps {
    /// `δ = h = 10⁻⁴·max(1, ‖x‖∞)`.
    pub fn default_for(x: &GridPath) -> Self {
        let s = 1e-4 * x.sup_norm().max(1.0);
        Self { delta: s, h: s }
    }
}

fn check_steps(steps: FdSteps, t: f64, y: &[f64]) -> Result<()> {
    let ymax = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    if !(steps.delta > 1e-10 * t.abs().max(1.0)) || !(steps.h > 1e-10 * ymax) {
        return Err(Error::Tolerance(format!("steps {:?} below numeric resolution", steps)));
    }
    Ok(())
}

/// Vertical derivatives at `(t, x, y)` by central differences in `y`.
pub fn fd_vertical(u: &dyn LiftedFunctional, t: f64, x: &GridPath, y: &[f64], h: f64) -> (Vec<f64>, Vec<f64>) {
    let d = y.len();
    let f = |dy: &[(usize, f64)]| {
        let mut yy = y.to_vec();
        for (i, v) in dy {
            yy[*i] += v;
        }
        u.eval(t, x, &yy)
    };
    let f0 = f(&[]);
    let mut grad = vec![0.0; d];
    let mut hess = vec![0.0; d * d];
    for i in 0..d {
        let fp = f(&[(i, h)]);
        let fm = f(&[(i, -h)]);
        grad[i] = (fp - fm) / (2.0 * h);
        hess[i * d + i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let v = (f(&[(i, h), (j, h)]) - f(&[(i, h), (j, -h)]) - f(&[(i, -h), (j, h)]) + f(&[(i, -h), (j, -h)]))
                / (4.0 * h * h);
            hess[i * d + j] = v;
            hess[j * d + i] = v;
        }
    }
    (grad, hess)
}

/// Pathwise derivatives of `u(t,x) = û(t,x,x(t))` by finite differences; `t` is snapped to the grid.
pub fn fd_pathwise_derivs(u: &dyn LiftedFunctional, t: f64, x: &GridPath, steps: Option<FdSteps>) -> Result<PathwiseDerivs> {
    let k = x.grid().snap(t)?;
    let t = x.grid().node(k);
    let steps = steps.unwrap_or_else(|| FdSteps::default_for(x));
    let xs = stop_path(x, t)?;
    let y = xs.at(k).to_vec();
    check_steps(steps, t, &y)?;
    if t + steps.delta > x.grid().horizon() + 1e-14 {
        return Err(Error::Domain(format!("t + δ = {} exceeds the horizon", t + steps.delta)));
    }
    let horizontal = (u.eval(t + steps.delta, &xs, &y) - u.eval(t, &xs, &y)) / steps.delta;
    let (vertical, vertical2) = fd_vertical(u, t, &xs, &y, steps.h);
    Ok(PathwiseDerivs { horizontal, vertical, vertical2 })
}

/// Outcome of comparing two liftings of the same functional.
#[derive(Clone, Debug)]
pub struct ConsistencyReport {
    pub samples: usize,
    /// `max |û₁(t,x,x(t)) − û₂(t,x,x(t))|`.
    pub restriction_gap: f64,
    pub precondition_ok: bool,
    pub max_horizontal_gap: f64,
    pub max_vertical_gap: f64,
    pub max_vertical2_gap: f64,
    pub tolerance: f64,
    pub first_order_agree: bool,
    pub second_order_agree: bool,
}

impl ConsistencyReport {
    pub fn consistent(&self) -> bool {
        self.precondition_ok && self.first_order_agree && self.second_order_agree
    }
}

/// Compare finite-difference pathwise derivatives of two lifts at `y = x(t)` on every sample.
pub fn consistency_check(
    lift1: &dyn LiftedFunctional,
    lift2: &dyn LiftedFunctional,
    samples: &[(f64, GridPath)],
    tolerance: f64,
) -> Result<ConsistencyReport> {
    let mut rep = ConsistencyReport {
        samples: samples.len(),
        restriction_gap: 0.0,
        precondition_ok: true,
        max_horizontal_gap: 0.0,
        max_vertical_gap: 0.0,
        max_vertical2_gap: 0.0,
        tolerance,
        first_order_agree: true,
        second_order_agree: true,
    };
    for (t, x) in samples {
        let k = x.grid().snap(*t)?;
        let tk = x.grid().node(k);
        let y = x.at(k);
        let gap = (lift1.eval(tk, x, y) - lift2.eval(tk, x, y)).abs();
        rep.restriction_gap = rep.restriction_gap.max(gap);
    }
    let scale = samples.iter().map(|(_, x)| x.sup_norm()).fold(1.0, f64::max);
    if rep.restriction_gap > 1e-10 * scale * scale {
        rep.precondition_ok = false;
        return Ok(rep);
    }
    for (t, x) in samples {
        let a = fd_pathwise_derivs(lift1, *t, x, None)?;
        let b = fd_pathwise_derivs(lift2, *t, x, None)?;
        let (h, v, v2) = a.max_gaps(&b);
        rep.max_horizontal_gap = rep.max_horizontal_gap.max(h);
        rep.max_vertical_gap = rep.max_vertical_gap.max(v);
        rep.max_vertical2_gap = rep.max_vertical2_gap.max(v2);
    }
    rep.first_order_agree = rep.max_horizontal_gap <= tolerance && rep.max_vertical_gap <= tolerance;
    rep.second_order_agree = rep.max_vertical2_gap <= tolerance;
    Ok(rep)
}

/// `∫_0^t x(s) ds` for the piecewise-linear path (componentwise).
pub fn time_integral(x: &GridPath, t: f64) -> Vec<f64> {
    let g = x.grid();
    let d = x.dim();
    let dt = g.dt();
    let t = t.clamp(0.0, g.horizon());
    let (k, frac) = match g.index_of(t) {
        Ok(k) => (k, 0.0),
        Err(_) => g.locate(t),
    };
    let mut acc = vec![0.0; d];
    for j in 0..k {
        let (a, b) = (x.at(j), x.at(j + 1));
        for i in 0..d {
            acc[i] += 0.5 * dt * (a[i] + b[i]);
        }
    }
    if frac > 0.0 {
        let a = x.at(k);
        let end = x.eval(t);
        for i in 0..d {
            acc[i] += 0.5 * frac * dt * (a[i] + end[i]);
        }
    }
    acc
}

/// Example lifts used by the consistency and Itô checks.
pub mod lifts {
    use super::*;

    fn sq(v: &[f64]) -> f64 {
        v.iter().map(|a| a * a).sum()
    }

    fn identity(d: usize, c: f64) -> Vec<f64> {
        let mut m = vec![0.0; d * d];
        for i in 0..d {
            m[i * d + i] = c;
        }
        m
    }

    /// `|y|²`.
    pub fn square(d: usize) -> ClosureLift {
        ClosureLift::new("square", d, |_, _, y| sq(y)).with_derivs(move |_, _, y| PathwiseDerivs {
            horizontal: 0.0,
            vertical: y.iter().map(|v| 2.0 * v).collect(),
            vertical2: identity(y.len(), 2.0),
        })
    }

    /// `y·x(t) + y·(y − x(t))`, written out as given.
    pub fn square_split(d: usize) -> ClosureLift {
        ClosureLift::new("square_split", d, |t, x, y| {
            let xt = x.eval(t);
            y.iter().zip(&xt).map(|(a, b)| a * b + a * (a - b)).sum()
        })
    }

    /// `|y|² + Σ(y_i − x_i(t))³`: another C^{1,2} lift of `|x(t)|²`.
    pub fn square_cubic(d: usize) -> ClosureLift {
        ClosureLift::new("square_cubic", d, |t, x, y| {
            let xt = x.eval(t);
            sq(y) + y.iter().zip(&xt).map(|(a, b)| (a - b).powi(3)).sum::<f64>()
        })
        .with_derivs(|t, x, y| {
            let xt = x.eval(t);
            let d = y.len();
            let mut v2 = identity(d, 2.0);
            for i in 0..d {
                v2[i * d + i] += 6.0 * (y[i] - xt[i]);
            }
            PathwiseDerivs {
                horizontal: 0.0,
                vertical: y.iter().zip(&xt).map(|(a, b)| 2.0 * a + 3.0 * (a - b).powi(2)).collect(),
                vertical2: v2,
            }
        })
    }

    /// `|y|² + |y − x(t)|²`: same restriction, but the second vertical derivative differs.
    pub fn square_perturbed(d: usize) -> ClosureLift {
        ClosureLift::new("square_perturbed", d, |t, x, y| {
            let xt = x.eval(t);
            sq(y) + y.iter().zip(&xt).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        })
    }

    /// `Σ_i ∫_0^t x_i(s) ds`.
    pub fn time_integral_lift(d: usize) -> ClosureLift {
        ClosureLift::new("time_integral", d, |t, x, _| time_integral(x, t).iter().sum()).with_derivs(|t, x, y| {
            PathwiseDerivs {
                horizontal: x.eval(t).iter().sum(),
                vertical: vec![0.0; y.len()],
                vertical2: vec![0.0; y.len() * y.len()],
            }
        })
    }

    /// `Σ_i (∫_0^t x_i ds)·y_i`.
    pub fn integral_times_present(d: usize) -> ClosureLift {
        ClosureLift::new("integral_times_present", d, |t, x, y| {
            time_integral(x, t).iter().zip(y).map(|(a, b)| a * b).sum()
        })
        .with_derivs(|t, x, y| PathwiseDerivs {
            horizontal: x.eval(t).iter().zip(y).map(|(a, b)| a * b).sum(),
            vertical: time_integral(x, t),
            vertical2: vec![0.0; y.len() * y.len()],
        })
    }

    pub fn constant(d: usize, c: f64) -> ClosureLift {
        ClosureLift::new("constant", d, move |_, _, _| c).with_derivs(|_, _, y| PathwiseDerivs::zeros(y.len()))
    }

    /// Lift registered under `name`.
    pub fn by_name(name: &str, d: usize) -> Result<ClosureLift> {
        match name {
            "square" => Ok(square(d)),
            "square_split" => Ok(square_split(d)),
            "square_cubic" => Ok(square_cubic(d)),
            "square_perturbed" => Ok(square_perturbed(d)),
            "time_integral" => Ok(time_integral_lift(d)),
            "integral_times_present" => Ok(integral_times_present(d)),
            _ => Err(Error::Input(format!("unknown lift '{name}'"))),
        }
    }

    pub const NAMES: &[&str] =
        &["square", "square_split", "square_cubic", "square_perturbed", "time_integral", "integral_times_present"];
}

#[cfg(test)]
mod tests {
    use super::lifts::*;
    use super::*;
    use crate::fk::{FiniteDimConfig, FiniteDimEngine, RunningMax, TerminalValue};
    use crate::fourier::fejer_t_n;
    use crate::path::brownian_extension;
    use proptest::prelude::*;

    fn grid(m: usize) -> TimeGrid {
        TimeGrid::new(1.0, m).unwrap()
    }

    #[test]
    fn cylinder_examples() {
        let g = grid(100);
        let x = GridPath::from_fn_1d(g, |s| s);
        assert!((eval_cylinder(&CylinderSpec::linear(1), &x).unwrap() - 1.0).abs() < 1e-14);
        assert!((eval_cylinder(&CylinderSpec::quadratic(1), &x).unwrap() - 1.0).abs() < 1e-14);
        let w = brownian_extension(0.0, &GridPath::zeros(g, 1), 4).unwrap();
        assert!((eval_cylinder(&CylinderSpec::linear(1), &w).unwrap() - w.terminal()[0]).abs() < 1e-12);
        let c = SmoothG::new(|_| 2.5, |z| vec![0.0; z.len()], |z| vec![0.0; z.len() * z.len()]);
        let spec = CylinderSpec::new("c", 1, vec![IntegrandFn::constant(1.0)], Arc::new(c)).unwrap();
        assert_eq!(eval_cylinder(&spec, &w).unwrap(), 2.5);
    }

    #[test]
    fn cylinder_rejects_psi_without_derivative() {
        let g = Arc::new(SmoothG::new(|_| 0.0, |_| vec![0.0], |_| vec![0.0]));
        assert!(matches!(
            CylinderSpec::new("bad", 1, vec![IntegrandFn::grid_bv(|t| t)], g),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn approx_is_xi_of_t_n() {
        let g = grid(2000);
        let x = GridPath::from_fn_1d(g, |s| (2.0 * std::f64::consts::PI * s).sin());
        let max = cylinder_approx(Arc::new(RunningMax), 64, g, 1);
        let tn = fejer_t_n(&x, 64).unwrap();
        assert_eq!(max.eval(&x).unwrap(), RunningMax.eval(&tn));
        assert!((max.eval(&x).unwrap() - RunningMax.eval(&x)).abs() <= 0.05);
        let w = brownian_extension(0.0, &GridPath::zeros(g, 1), 8).unwrap();
        for n in [0, 3, 16] {
            let tv = cylinder_approx(Arc::new(TerminalValue), n, g, 1);
            assert!((tv.eval(&w).unwrap() - w.terminal()[0]).abs() < 1e-12);
            let c = cylinder_approx(Arc::new(crate::fk::ConstantFunctional(1.5)), n, g, 1);
            assert_eq!(c.eval(&w).unwrap(), 1.5);
        }
    }

    #[test]
    fn fd_examples() {
        let g = grid(100);
        let x = GridPath::from_fn_1d(g, |s| 1.0 + s * s);
        let d = fd_pathwise_derivs(&square(1), 0.5, &x, None).unwrap();
        let y = 1.25;
        assert!(d.horizontal.abs() < 1e-12);
        assert!((d.vertical[0] - 2.0 * y).abs() < 1e-8);
        assert!((d.vertical2[0] - 2.0).abs() < 1e-5);
        let d = fd_pathwise_derivs(&time_integral_lift(1), 0.5, &x, None).unwrap();
        assert!((d.horizontal - y).abs() < 1e-9);
        assert!(d.vertical[0].abs() < 1e-12 && d.vertical2[0].abs() < 1e-12);
        assert_eq!(fd_pathwise_derivs(&constant(1, 3.0), 0.5, &x, None).unwrap(), PathwiseDerivs::zeros(1));
        assert!(matches!(fd_pathwise_derivs(&square(1), 1.0, &x, None), Err(Error::Domain(_))));
        let tiny = FdSteps { delta: 1e-13, h: 1e-4 };
        assert!(matches!(fd_pathwise_derivs(&square(1), 0.5, &x, Some(tiny)), Err(Error::Tolerance(_))));
    }

    #[test]
    fn fd_vertical_bumps_leave_path_alone() {
        let g = grid(50);
        let x = GridPath::from_fn_1d(g, |s| s);
        let before = x.clone();
        fd_pathwise_derivs(&square_perturbed(1), 0.3, &x, None).unwrap();
        assert_eq!(x, before);
    }

    fn brownian_samples(n: usize, d: usize, seed: u64) -> Vec<(f64, GridPath)> {
        let g = grid(200);
        (0..n)
            .map(|i| {
                let w = brownian_extension(0.0, &GridPath::zeros(g, d), seed + i as u64).unwrap();
                (g.node(1 + (37 * i) % 190), w)
            })
            .collect()
    }

    #[test]
    fn consistency_examples() {
        let samples = brownian_samples(20, 1, 100);
        let rep = consistency_check(&square(1), &square_split(1), &samples, 1e-5).unwrap();
        assert!(rep.consistent(), "{rep:?}");
        let rep = consistency_check(&square(1), &square(1), &samples, 1e-5).unwrap();
        assert_eq!(rep.max_vertical_gap + rep.max_vertical2_gap + rep.max_horizontal_gap, 0.0);
        let rep = consistency_check(&square(1), &square_cubic(1), &samples, 1e-5).unwrap();
        assert!(rep.consistent(), "{rep:?}");
        let rep = consistency_check(&square(1), &square_perturbed(1), &samples, 1e-5).unwrap();
        assert!(rep.precondition_ok && rep.first_order_agree && !rep.second_order_agree, "{rep:?}");
        assert!((rep.max_vertical2_gap - 2.0).abs() < 1e-3);
        let rep = consistency_check(&square(1), &time_integral_lift(1), &samples, 1e-5).unwrap();
        assert!(!rep.precondition_ok);
    }

    #[test]
    fn analytic_lift_derivatives_match_fd() {
        let samples = brownian_samples(10, 1, 7);
        for (t, x) in &samples {
            let y = x.eval(*t);
            for lift in [square(1), square_cubic(1), time_integral_lift(1), integral_times_present(1)] {
                let a = lift.derivs(*t, &x.stopped_at_node(x.grid().snap(*t).unwrap()), &y).unwrap().unwrap();
                let f = fd_pathwise_derivs(&lift, *t, x, None).unwrap();
                let (h, v, v2) = a.max_gaps(&f);
                assert!(h < 1e-6 && v < 1e-7 && v2 < 1e-4, "{} {h} {v} {v2}", lift.name());
            }
        }
    }

    #[test]
    fn cylinder_lift_matches_fd_and_restricts() {
        let engine: Arc<dyn ValueEngine> = Arc::new(FiniteDimEngine::new(1.0, FiniteDimConfig::new(0)));
        let samples = brownian_samples(6, 1, 30);
        for spec in [CylinderSpec::quadratic(1), CylinderSpec::exponential(1), CylinderSpec::trig2()] {
            let lift = CylinderLift { spec: spec.clone(), engine: engine.clone() };
            for (t, x) in &samples {
                let a = cylinder_pathwise_derivs(&spec, engine.as_ref(), *t, x).unwrap();
                let f = fd_pathwise_derivs(&lift, *t, x, None).unwrap();
                let st = FdSteps::default_for(x);
                let f2 = fd_pathwise_derivs(&lift, *t, x, Some(FdSteps { delta: 2.0 * st.delta, ..st })).unwrap();
                let trunc = (f.horizontal - f2.horizontal).abs();
                let (h, v, v2) = a.max_gaps(&f);
                assert!(h <= 1e-4f64.max(2.0 * trunc), "{} h {h} trunc {trunc}", spec.name());
                assert!(v <= 1e-4 && v2 <= 1e-4, "{} {v} {v2}", spec.name());
                let y = x.eval(*t);
                let via_lift = lift.derivs(*t, x, &y).unwrap().unwrap();
                assert!(via_lift.max_gaps(&a).0 < 1e-12);
            }
            // lift at time T is the terminal functional
            let (_, x) = &samples[0];
            let v = lift.eval(1.0, x, x.terminal());
            assert!((v - eval_cylinder(&spec, x).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn vertical2_is_symmetric_in_two_dimensions() {
        let engine = FiniteDimEngine::new(1.0, FiniteDimConfig::new(0));
        let spec = CylinderSpec::exponential(2);
        let x = GridPath::zeros(grid(50), 2);
        let d = cylinder_pathwise_derivs(&spec, &engine, 0.4, &x).unwrap();
        assert_eq!(d.asymmetry(), 0.0);
        assert!(d.heat_operator().abs() < 1e-8);
    }

    #[test]
    fn time_integral_handles_partial_cells() {
        let g = grid(10);
        let x = GridPath::from_fn_1d(g, |s| s);
        assert!((time_integral(&x, 1.0)[0] - 0.5).abs() < 1e-14);
        assert!((time_integral(&x, 0.55)[0] - 0.55 * 0.55 / 2.0).abs() < 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lifts_are_non_anticipative(seed in 0u64..1000, k in 0usize..=100, y in -2.0f64..2.0) {
            let g = grid(100);
            let x = brownian_extension(0.0, &GridPath::zeros(g, 1), seed).unwrap();
            let t = g.node(k);
            let xs = stop_path(&x, t).unwrap();
            for name in lifts::NAMES {
                let l = lifts::by_name(name, 1).unwrap();
                prop_assert_eq!(l.eval(t, &x, &[y]), l.eval(t, &xs, &[y]));
            }
            let lift = CylinderLift {
                spec: CylinderSpec::trig2(),
                engine: Arc::new(FiniteDimEngine::new(1.0, FiniteDimConfig::new(0))),
            };
            let (a, b) = (lift.eval(t, &x, &[y]), lift.eval(t, &xs, &[y]));
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
