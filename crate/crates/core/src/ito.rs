//! Pathwise check of the functional Itô formula on simulated semimartingales, and delayed lifts.

use std::sync::Arc;

use crate::cylinder::{fd_pathwise_derivs, fd_vertical, FdSteps, LiftedFunctional, PathwiseDerivs};
use crate::error::{Error, Result};
use crate::fk::{MCConfig, MCEstimate};
use crate::path::{simulate_semimartingale_rng, GridPath, SemimartingaleSpec, TimeGrid};
use crate::regcalc::mutual_bracket;
use crate::rng::par_streams;

/// Quadratic covariation used against `∂ⱽⱽ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Covariation {
    /// Products of grid increments.
    Discrete,
    /// Regularized bracket estimator at window `eps`.
    Bracket(f64),
    /// `σσᵀ(t_k, X_k) Δt` from the simulated model.
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DerivativeSource {
    Analytic,
    /// Central differences; the `C^{1,2}` hypothesis is then assumed, not checked.
    FiniteDifference(Option<FdSteps>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItoConfig {
    pub mc: MCConfig,
    pub covariation: Covariation,
    pub derivatives: DerivativeSource,
    /// Number of paths whose full series are kept in the report.
    pub keep: usize,
}

impl ItoConfig {
    pub fn new(samples: usize, seed: u64) -> Self {
        Self { mc: MCConfig::new(samples, seed), covariation: Covariation::Discrete, derivatives: DerivativeSource::Analytic, keep: 4 }
    }

    pub fn with_covariation(mut self, c: Covariation) -> Self {
        self.covariation = c;
        self
    }

    pub fn with_derivatives(mut self, d: DerivativeSource) -> Self {
        self.derivatives = d;
        self
    }
}

#[derive(Clone, Debug)]
pub struct ItoReport {
    pub lift: String,
    pub dt: f64,
    pub samples: usize,
    /// `LHS(t_k) − RHS(t_k)` for the first `keep` paths; entry 0 is exactly 0.
    pub residuals: Vec<Vec<f64>>,
    /// `RHS(t_k)` for the same paths.
    pub rhs: Vec<Vec<f64>>,
    /// Mean of `|residual(T)|`.
    pub terminal_abs: MCEstimate,
    /// Mean of `residual(T)`.
    pub terminal_signed: MCEstimate,
    pub hypothesis_assumed: bool,
}

impl ItoReport {
    /// `mean |residual(T)| ≤ 3·stderr + c_disc·√Δt`.
    pub fn accepts(&self, c_disc: f64) -> bool {
        self.terminal_abs.mean <= 3.0 * self.terminal_abs.stderr + c_disc * self.dt.sqrt()
    }
}

struct PathOutcome {
    residual: Vec<f64>,
    rhs: Vec<f64>,
}

fn derivs_at(u: &dyn LiftedFunctional, x: &GridPath, k: usize, source: DerivativeSource) -> Result<PathwiseDerivs> {
    let g = x.grid();
    let t = g.node(k);
    match source {
        DerivativeSource::Analytic => u
            .derivs(t, x, x.at(k))
            .ok_or_else(|| Error::Contract(format!("lift '{}' has no analytic derivatives", u.name())))?,
        DerivativeSource::FiniteDifference(steps) => {
            if k < g.steps() {
                fd_pathwise_derivs(u, t, x, steps)
            } else {
                // no room to the right of T: reuse the last horizontal value
                let prev = fd_pathwise_derivs(u, g.node(k - 1), x, steps)?;
                let h = steps.unwrap_or_else(|| FdSteps::default_for(x)).h;
                let (vertical, vertical2) = fd_vertical(u, t, x, x.at(k), h);
                Ok(PathwiseDerivs { horizontal: prev.horizontal, vertical, vertical2 })
            }
        }
    }
}

fn verify_path(
    u: &dyn LiftedFunctional,
    spec: &SemimartingaleSpec,
    x: &GridPath,
    cfg: &ItoConfig,
) -> Result<PathOutcome> {
    let g = x.grid();
    let (m, d, dt) = (g.steps(), x.dim(), g.dt());
    let derivs: Vec<PathwiseDerivs> = (0..=m).map(|k| derivs_at(u, x, k, cfg.derivatives)).collect::<Result<_>>()?;
    let bracket: Option<Vec<Vec<f64>>> = match cfg.covariation {
        Covariation::Bracket(eps) => {
            let comps: Vec<Vec<f64>> = (0..d).map(|i| x.component(i)).collect();
            let mut out = Vec::with_capacity(d * d);
            for i in 0..d {
                for j in 0..d {
                    out.push(mutual_bracket(g, &comps[i], &comps[j], eps)?.values);
                }
            }
            Some(out)
        }
        _ => None,
    };
    let u0 = u.eval(0.0, x, x.at(0));
    let mut residual = vec![0.0; m + 1];
    let mut rhs = vec![0.0; m + 1];
    let mut acc = 0.0;
    let mut cov = vec![0.0; d * d];
    for k in 0..m {
        let (a, b) = (x.at(k), x.at(k + 1));
        let dk = &derivs[k];
        acc += 0.5 * dt * (dk.horizontal + derivs[k + 1].horizontal);
        for i in 0..d {
            acc += dk.vertical[i] * (b[i] - a[i]);
        }
        match cfg.covariation {
            Covariation::Discrete => {
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = (b[i] - a[i]) * (b[j] - a[j]);
                    }
                }
            }
            Covariation::Bracket(_) => {
                let br = bracket.as_ref().unwrap();
                for ij in 0..d * d {
                    cov[ij] = br[ij][k + 1] - br[ij][k];
                }
            }
            Covariation::Model => {
                let s = (spec.volatility)(g.node(k), a);
                for i in 0..d {
                    for j in 0..d {
                        cov[i * d + j] = (0..d).map(|l| s[i * d + l] * s[j * d + l]).sum::<f64>() * dt;
                    }
                }
            }
        }
        acc += 0.5 * dk.vertical2.iter().zip(&cov).map(|(h, c)| h * c).sum::<f64>();
        let t = g.node(k + 1);
        rhs[k + 1] = acc;
        residual[k + 1] = (u.eval(t, x, b) - u0) - acc;
    }
    if !residual[m].is_finite() {
        return Err(Error::Numeric("non-finite Itô residual".into()));
    }
    Ok(PathOutcome { residual, rhs })
}

/// Per path: `u(t,X) − u(0,X)` against trapezoid `∫∂ᴴ ds` + left-point `Σ∂ⱽ·ΔX` + `½Σ∂ⱽⱽ : Δ[X]`.
pub fn ito_verify(
    u: &dyn LiftedFunctional,
    spec: &SemimartingaleSpec,
    grid: TimeGrid,
    cfg: &ItoConfig,
) -> Result<ItoReport> {
    cfg.mc.validate()?;
    if cfg.mc.antithetic {
        return Err(Error::Input("antithetic sampling is not used by the Itô check".into()));
    }
    if spec.dim() != u.dim() {
        return Err(Error::Domain(format!("lift dimension {} vs process dimension {}", u.dim(), spec.dim())));
    }
    if cfg.derivatives == DerivativeSource::Analytic {
        let probe = GridPath::constant(grid, &spec.initial);
        if u.derivs(0.0, &probe, &spec.initial).is_none() {
            return Err(Error::Contract(format!("lift '{}' has no analytic derivatives", u.name())));
        }
    }
    let outcomes: Vec<Result<PathOutcome>> = par_streams(cfg.mc.seed, cfg.mc.samples, |_, rng| {
        let x = simulate_semimartingale_rng(spec, grid, rng)?;
        verify_path(u, spec, &x, cfg)
    });
    let mut abs = Vec::with_capacity(outcomes.len());
    let mut signed = Vec::with_capacity(outcomes.len());
    let mut residuals = Vec::new();
    let mut rhs = Vec::new();
    for (i, o) in outcomes.into_iter().enumerate() {
        let o = o?;
        let last = *o.residual.last().unwrap();
        abs.push(last.abs());
        signed.push(last);
        if i < cfg.keep {
            residuals.push(o.residual);
            rhs.push(o.rhs);
        }
    }
    Ok(ItoReport {
        lift: u.name(),
        dt: grid.dt(),
        samples: cfg.mc.samples,
        residuals,
        rhs,
        terminal_abs: MCEstimate::from_values(&abs, 1, cfg.mc.seed),
        terminal_signed: MCEstimate::from_values(&signed, 1, cfg.mc.seed),
        hypothesis_assumed: matches!(cfg.derivatives, DerivativeSource::FiniteDifference(_)),
    })
}

/// Least-squares slope of `log y` on `log x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 || xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Input("slope needs ≥ 2 positive pairs".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

#[derive(Clone, Debug)]
pub struct ConvergenceRow {
    pub dt: f64,
    pub mean_abs: f64,
    pub stderr: f64,
}

/// Mean `|residual(T)|` for each grid size, and the log-log slope against `Δt`.
pub fn ito_convergence(
    u: &dyn LiftedFunctional,
    spec: &SemimartingaleSpec,
    horizon: f64,
    steps: &[usize],
    cfg: &ItoConfig,
) -> Result<(Vec<ConvergenceRow>, f64)> {
    let rows = steps
        .iter()
        .map(|&m| {
            let r = ito_verify(u, spec, TimeGrid::new(horizon, m)?, cfg)?;
            Ok(ConvergenceRow { dt: r.dt, mean_abs: r.terminal_abs.mean, stderr: r.terminal_abs.stderr })
        })
        .collect::<Result<Vec<_>>>()?;
    let slope = loglog_slope(&rows.iter().map(|r| r.dt).collect::<Vec<_>>(), &rows.iter().map(|r| r.mean_abs).collect::<Vec<_>>())?;
    Ok((rows, slope))
}

/// `û(t, x(·∧s), y)` with `s` the last grid node at or before `(t − δ₀)∨0`.
#[derive(Clone)]
pub struct DelayedLift {
    inner: Arc<dyn LiftedFunctional>,
    delay: f64,
    grid: TimeGrid,
}

/// Delayed version of `u` with delay `delta0 ≥ Δt`.
pub fn delayed_lift(u: Arc<dyn LiftedFunctional>, delta0: f64, grid: TimeGrid) -> Result<DelayedLift> {
    if !(delta0 >= grid.dt() * (1.0 - 1e-9)) {
        return Err(Error::Resolution(format!("delay {delta0} below grid step {}", grid.dt())));
    }
    Ok(DelayedLift { inner: u, delay: delta0, grid })
}

impl DelayedLift {
    pub fn delay(&self) -> f64 {
        self.delay
    }

    fn freeze_node(&self, t: f64) -> usize {
        let s = (t - self.delay).max(0.0);
        ((s / self.grid.dt()) * (1.0 + 1e-12) + 1e-9).floor().min(self.grid.steps() as f64) as usize
    }

    /// The path `x(·∧s)` seen by the inner lift at time `t`.
    pub fn frozen(&self, t: f64, x: &GridPath) -> GridPath {
        x.stopped_at_node(self.freeze_node(t))
    }
}

impl LiftedFunctional for DelayedLift {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn eval(&self, t: f64, x: &GridPath, y: &[f64]) -> f64 {
        self.inner.eval(t, &self.frozen(t, x), y)
    }
    /// Inner derivatives at the frozen path; the freeze node is constant on `[t, t + Δt)`.
    fn derivs(&self, t: f64, x: &GridPath, y: &[f64]) -> Option<Result<PathwiseDerivs>> {
        self.inner.derivs(t, &self.frozen(t, x), y)
    }
    fn name(&self) -> String {
        format!("delayed({},{})", self.inner.name(), self.delay)
    }
}
