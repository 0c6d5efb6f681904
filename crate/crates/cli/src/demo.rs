//! Desk-scale run of the comparison argument on a finite search space.
//!
//! ξ_N is the Fejér cylinder approximation of ξ and v_N its finite-dimensional solution.
//! u is the Monte-Carlo candidate solution (or u − c).
//! G = e^{λt}(u − v_N) is maximized with the smooth variational principle.
//! The terminal-time branch is then checked exactly; the interior branch is checked against δℒφ_ε.

use std::sync::Arc;

use ppde_core::cylinder::{cylinder_approx, eval_cylinder, CylinderSpec};
use ppde_core::fk::{cylinder_by_name, finite_dim_v, solve_v, terminal_by_name, FiniteDimConfig, MCConfig, TerminalFunctional};
use ppde_core::gauge::{eta_variation, GaugeQuad, SQRT_2_OVER_PI};
use ppde_core::path::{extend_in_place, GridPath, PathPoint};
use ppde_core::rng::{derive_seed, stream_rng};
use ppde_core::vp::{smooth_vp, SearchSpace};
use rayon::prelude::*;

use crate::commands::{grid, rank_index, search_space};
use crate::config::ExperimentConfig;
use crate::error::{CliError, StageExt};
use crate::report::{num, Check, Outcome, Table};

/// `2(2T + √(2/(πe))) + d(√(2/π) + 2)`.
pub fn operator_bound(horizon: f64, d: usize) -> f64 {
    2.0 * (2.0 * horizon + eta_variation()) + d as f64 * (SQRT_2_OVER_PI + 2.0)
}

#[derive(Clone, Debug)]
struct PointValues {
    u: f64,
    u_se: f64,
    v_n: f64,
    v_n_se: f64,
    g: f64,
    sigma: f64,
}

/// One δ of the sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainRow {
    pub delta: f64,
    pub eps: f64,
    pub t_bar: f64,
    pub interior: bool,
    pub g_start: f64,
    /// `(G − δφ_ε)(p̄)`.
    pub perturbed: f64,
    pub phi: f64,
    pub l_phi: f64,
    /// `δ ℒφ_ε(p̄)`.
    pub rhs: f64,
    /// Interior branch: `λ(G − δφ_ε)(p̄)`; terminal branch: `(G − δφ_ε)(p̄)`.
    pub lhs: f64,
    /// Interior branch: `δℒφ_ε(p̄)`; terminal branch: `e^{λT}(ξ − ξ_N)(x̄)`.
    pub bound: f64,
    pub slack: f64,
    pub consistent: bool,
}

/// The random search space plus `extensions` Brownian continuations to `T` from each interior point.
pub fn demo_space(cfg: &ExperimentConfig) -> Result<SearchSpace, CliError> {
    let base = search_space(cfg)?;
    let steps = base.grid().steps();
    let seed = derive_seed(cfg.seed()?, 0x6578);
    let mut pts = base.points().to_vec();
    for (i, p) in base.points().iter().enumerate() {
        if p.node() == steps {
            continue;
        }
        for k in 0..cfg.extensions {
            let mut rng = stream_rng(seed, (i * cfg.extensions + k) as u64);
            let mut x: GridPath = p.path().clone();
            extend_in_place(p.node(), &mut x, &mut rng, 1.0);
            pts.push(PathPoint::at_node(steps, Arc::new(x)).stage("space")?);
        }
    }
    SearchSpace::new(pts).stage("space")
}

fn approximation(cfg: &ExperimentConfig, xi: &Arc<dyn TerminalFunctional>) -> Result<CylinderSpec, CliError> {
    if cfg.terminal.starts_with("cyl:") {
        cylinder_by_name(&cfg.terminal, cfg.dim).stage("I")
    } else {
        Ok(cylinder_approx(xi.clone(), cfg.n, grid(cfg)?, cfg.dim).spec)
    }
}

pub fn comparison_demo(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let seed = cfg.seed()?;
    let lambda = cfg.lambda;
    let horizon = cfg.horizon;
    let xi = terminal_by_name(&cfg.terminal, cfg.dim).stage("I")?;
    let spec = approximation(cfg, &xi)?;
    let space = demo_space(cfg)?;
    let steps = space.grid().steps();
    let quad = GaugeQuad::new(cfg.dim, cfg.quadrature()).stage("config")?;
    let fd = FiniteDimConfig { mc_samples: cfg.u_samples, ..cfg.finite_dim() };
    let offset = match cfg.mode.as_str() {
        "solution" => 0.0,
        "subsolution" => cfg.offset,
        m => return Err(CliError::Config(format!("unknown mode '{m}'"))),
    };

    // u, v_N and G on every point
    let u_seed = derive_seed(seed, 0x75);
    let vals: Vec<PointValues> = space
        .points()
        .par_iter()
        .enumerate()
        .map(|(i, p)| -> Result<PointValues, CliError> {
            if p.node() == steps {
                // u(T,·) = ξ − c and v_N(T,·) = ξ_N exactly
                let (u, v_n) = (xi.eval(p.path()) - offset, eval_cylinder(&spec, p.path()).stage("I")?);
                let scale = (lambda * horizon).exp();
                return Ok(PointValues { u, u_se: 0.0, v_n, v_n_se: 0.0, g: scale * (u - v_n), sigma: 0.0 });
            }
            let z = spec.features(p.path(), p.t()).stage("I")?;
            let fd_i = FiniteDimConfig { seed: derive_seed(fd.seed, i as u64), ..fd };
            let vn = finite_dim_v(&spec, horizon, p.t(), &z, &fd_i, false).stage("I")?;
            let mc = MCConfig::new(cfg.u_samples, derive_seed(u_seed, i as u64));
            let u = solve_v(xi.as_ref(), p.t(), p.path(), &mc).stage("II")?;
            let scale = (lambda * p.t()).exp();
            Ok(PointValues {
                u: u.mean - offset,
                u_se: u.stderr,
                v_n: vn.derivs.value,
                v_n_se: vn.stderr,
                g: scale * (u.mean - offset - vn.derivs.value),
                sigma: scale * u.stderr.hypot(vn.stderr),
            })
        })
        .collect::<Result<_, _>>()?;
    let g_values: Vec<f64> = vals.iter().map(|v| v.g).collect();

    let mut out = Outcome::default();
    let mut t = Table::new("values", &["index", "t", "x1_t", "u", "u_stderr", "v_n", "v_n_stderr", "g", "sigma_g"]);
    for (i, (p, v)) in space.points().iter().zip(&vals).enumerate() {
        t.push(vec![
            i.to_string(),
            num(p.t()),
            num(p.present()[0]),
            num(v.u),
            num(v.u_se),
            num(v.v_n),
            num(v.v_n_se),
            num(v.g),
            num(v.sigma),
        ]);
    }
    out.tables.push(t);

    // perturbed maximization and the chain, per δ
    let g = |p: &PathPoint| space.find(p).map_or(f64::NAN, |i| g_values[i]);
    // p0 must sit strictly before T
    let interior: Vec<f64> = space
        .points()
        .iter()
        .zip(&g_values)
        .map(|(p, &v)| if p.node() < steps { v } else { f64::NEG_INFINITY })
        .collect();
    if interior.iter().all(|v| *v == f64::NEG_INFINITY) {
        return Err(CliError::Stage {
            stage: "III",
            source: ppde_core::Error::Domain("search space has no point before the horizon".into()),
        });
    }
    let p0 = rank_index(&interior, cfg.p0_rank);
    let sup = g_values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let eps = (sup - g_values[p0]).max(cfg.eps);
    let bound_l = operator_bound(horizon, cfg.dim);
    let mut rows = Vec::new();
    for &delta in &cfg.deltas {
        rows.push(chain_row(&g, &space, &quad, &spec, xi.as_ref(), &vals, p0, eps, delta, lambda)?);
    }

    let mut t = Table::new(
        "chain",
        &["delta", "eps", "t_bar", "t_bar_below_T", "g_p0", "g_minus_delta_phi", "phi", "l_phi", "delta_l_phi", "lhs", "bound", "slack", "consistent"],
    );
    for r in &rows {
        t.push(vec![
            num(r.delta),
            num(r.eps),
            num(r.t_bar),
            r.interior.to_string(),
            num(r.g_start),
            num(r.perturbed),
            num(r.phi),
            num(r.l_phi),
            num(r.rhs),
            num(r.lhs),
            num(r.bound),
            num(r.slack),
            r.consistent.to_string(),
        ]);
    }
    out.tables.push(t);

    let consistent = rows.iter().all(|r| r.consistent);
    let l_ok = rows.iter().all(|r| r.l_phi.abs() <= bound_l);
    let mut by_delta = rows.clone();
    by_delta.sort_by(|a, b| b.delta.total_cmp(&a.delta));
    let monotone = by_delta.windows(2).all(|w| w[1].rhs.abs() < w[0].rhs.abs());
    let verdict = if consistent { "consistent" } else { "violated" };
    let mut t = Table::new("summary", &["quantity", "value"]);
    t.push(vec!["verdict".into(), verdict.into()]);
    t.push(vec!["sup_g".into(), num(sup)]);
    t.push(vec!["p0_index".into(), p0.to_string()]);
    t.push(vec!["space_size".into(), space.len().to_string()]);
    t.push(vec!["approximation".into(), spec.name().to_string()]);
    t.push(vec!["operator_bound".into(), num(bound_l)]);
    t.push(vec!["rhs_monotone".into(), monotone.to_string()]);
    out.tables.push(t);
    out.checks.push(Check::new("verdict", consistent, verdict));
    out.checks.push(Check::new("operator_bound", l_ok, format!("max |ℒφ| ≤ {bound_l:.4}")));
    out.checks.push(Check::new(
        "rhs_monotone",
        monotone,
        by_delta.iter().map(|r| format!("{:.3e}", r.rhs)).collect::<Vec<_>>().join(" > "),
    ));
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn chain_row(
    g: &(dyn Fn(&PathPoint) -> f64 + Sync),
    space: &SearchSpace,
    quad: &GaugeQuad,
    spec: &CylinderSpec,
    xi: &dyn TerminalFunctional,
    vals: &[PointValues],
    p0: usize,
    eps: f64,
    delta: f64,
    lambda: f64,
) -> Result<ChainRow, CliError> {
    let r = smooth_vp(g, eps, delta, space.get(p0), space, quad).stage("III")?;
    if !r.all_hold() {
        return Err(CliError::Stage {
            stage: "III",
            source: ppde_core::Error::Tolerance("variational principle items failed on the demo space".into()),
        });
    }
    let bar = r.limit();
    let horizon = bar.path().grid().horizon();
    let interior = bar.node() < bar.path().grid().steps();
    let f = &r.phi_at_limit;
    let l_phi = f.derivs.heat_operator();
    let perturbed = r.item_ii.perturbed_limit;
    let (lhs, bound, slack) = if interior {
        // interior: λ(G − δφ)(p̄) ≤ δℒφ(p̄), up to the noise in G
        (lambda * perturbed, delta * l_phi, 3.0 * lambda * vals[r.limit_index].sigma)
    } else {
        // at t̄ = T: G − δφ ≤ e^{λT}(ξ − ξ_N) since u(T,·) ≤ ξ and φ ≥ 0
        let x = bar.path();
        let b = (lambda * horizon).exp() * (xi.eval(x) - eval_cylinder(spec, x).stage("IV")?);
        (perturbed, b, 1e-12 * (1.0 + b.abs()))
    };
    Ok(ChainRow {
        delta,
        eps,
        t_bar: bar.t(),
        interior,
        g_start: r.item_ii.g_start,
        perturbed,
        phi: f.value,
        l_phi,
        rhs: delta * l_phi,
        lhs,
        bound,
        slack,
        consistent: r.item_ii.holds() && lhs <= bound + slack,
    })
}
