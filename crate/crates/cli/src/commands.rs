//! The single-module subcommands.

use std::sync::Arc;

use ppde_core::cylinder::{lifts, LiftedFunctional};
use ppde_core::fk::{check_dpp, cylinder_by_name, pde_residual, solve_v, terminal_by_name, MCConfig};
use ppde_core::fourier::{fejer_coefficient, fejer_coefficient_quadrature, fejer_t_n};
use ppde_core::gauge::{audit_bounds, c_zeta, c_zeta_quadrature, calibrate_alpha, validate_sandwich, GaugeQuad};
use ppde_core::ito::{ito_verify, Covariation, ItoConfig};
use ppde_core::path::{extend_in_place, GridPath, PathPoint, SemimartingaleSpec, TimeGrid};
use ppde_core::rng::{derive_seed, stream_rng, StreamRng};
use ppde_core::vp::{smooth_vp, SearchSpace, MAX_ITERATIONS};
use rand::Rng;

use crate::config::ExperimentConfig;
use crate::error::{CliError, StageExt};
use crate::report::{num, Check, Outcome, Table};

pub const CYLINDER_SPECS: &[&str] = &["cyl:linear", "cyl:quadratic", "cyl:exponential", "cyl:trig2"];

pub fn grid(cfg: &ExperimentConfig) -> Result<TimeGrid, CliError> {
    TimeGrid::new(cfg.horizon, cfg.steps).stage("config")
}

pub fn brownian_path(grid: TimeGrid, d: usize, scale: f64, rng: &mut StreamRng) -> GridPath {
    let mut p = GridPath::zeros(grid, d);
    extend_in_place(0, &mut p, rng, scale);
    p
}

fn read_path(file: &str) -> Result<GridPath, CliError> {
    let f = std::fs::File::open(file).map_err(|e| CliError::Io(file.into(), e))?;
    GridPath::read_csv(f).stage("input")
}

/// The configured path file, or the zero path on the configured grid.
pub fn input_path(cfg: &ExperimentConfig) -> Result<GridPath, CliError> {
    match &cfg.path {
        Some(f) => read_path(f),
        None => Ok(GridPath::zeros(grid(cfg)?, cfg.dim)),
    }
}

fn mc(cfg: &ExperimentConfig) -> Result<MCConfig, CliError> {
    Ok(MCConfig::new(cfg.samples, cfg.seed()?).antithetic(cfg.antithetic))
}

/// `v(t,x)` for the configured terminal functional, plus the flow identity when `t_prime` is set.
pub fn solve(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let x = input_path(cfg)?;
    let xi = terminal_by_name(&cfg.terminal, x.dim()).stage("input")?;
    let est = solve_v(xi.as_ref(), cfg.t, &x, &mc(cfg)?).stage("solve")?;
    let mut out = Outcome::default();
    let mut t = Table::new("estimate", &["terminal", "t", "mean", "stderr", "n", "seed"]);
    t.push(vec![xi.name(), num(cfg.t), num(est.mean), num(est.stderr), est.n.to_string(), est.seed.to_string()]);
    out.tables.push(t);
    out.checks.push(Check::new("finite", est.mean.is_finite() && est.stderr.is_finite(), format!("{} ± {}", est.mean, est.stderr)));
    if let Some(e) = cfg.expect {
        out.checks.push(Check::new(
            "expected_value",
            est.within(e, 3.0),
            format!("|{} − {e}| vs 3·{}", est.mean, est.stderr),
        ));
    }
    if let Some(tp) = cfg.t_prime {
        let r = check_dpp(xi.as_ref(), cfg.t, tp, &x, &mc(cfg)?, cfg.inner).stage("dpp")?;
        let mut t = Table::new("flow", &["t", "t_prime", "direct", "direct_stderr", "nested", "nested_stderr", "residual", "stderr"]);
        t.push(vec![
            num(cfg.t),
            num(tp),
            num(r.direct.mean),
            num(r.direct.stderr),
            num(r.nested.mean),
            num(r.nested.stderr),
            num(r.residual.mean),
            num(r.residual.stderr),
        ]);
        out.tables.push(t);
        out.checks.push(Check::new(
            "flow_identity",
            r.residual.mean.abs() <= 3.0 * r.residual.stderr,
            format!("|{}| vs 3·{}", r.residual.mean, r.residual.stderr),
        ));
    }
    Ok(out)
}

/// `ℒv` for cylinder specs at random `(t, x)`.
pub fn pde_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let g = grid(cfg)?;
    let names: Vec<&str> = if cfg.spec == "all" {
        CYLINDER_SPECS.iter().copied().filter(|n| cfg.dim == 1 || *n != "cyl:trig2").collect()
    } else {
        vec![cfg.spec.as_str()]
    };
    let fd = cfg.finite_dim();
    let seed = derive_seed(cfg.seed()?, 0x7064);
    let mut out = Outcome::default();
    let mut t = Table::new("residuals", &["spec", "t", "x_t", "residual"]);
    for (si, name) in names.iter().enumerate() {
        let spec = cylinder_by_name(name, cfg.dim).stage("input")?;
        let mut worst = 0.0f64;
        for i in 0..cfg.points {
            let mut rng = stream_rng(seed, (si * cfg.points + i) as u64);
            let x = brownian_path(g, cfg.dim, 1.0, &mut rng);
            let k = rng.random_range(0..g.steps());
            let r = pde_residual(&spec, g.node(k), &x, &fd).stage("pde")?;
            worst = worst.max(r.abs());
            t.push(vec![name.to_string(), num(g.node(k)), num(x.at(k)[0]), num(r)]);
        }
        out.checks.push(Check::new(format!("residual_{name}"), worst <= cfg.pde_tol, format!("max |ℒv| = {worst:.3e}")));
    }
    out.tables.push(t);
    Ok(out)
}

/// `C_ζ`, the derivative-bound audit and the sandwich inequalities.
pub fn gauge_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let seed = cfg.seed()?;
    let g = grid(cfg)?;
    let d = cfg.dim;
    let quad = GaugeQuad::new(d, cfg.quadrature()).stage("config")?;
    let mut out = Outcome::default();

    let mut t = Table::new("c_zeta", &["d", "closed_form", "quadrature", "gap"]);
    for dd in 1..=3 {
        let a = c_zeta(dd).stage("c_zeta")?;
        let b = c_zeta_quadrature(dd).stage("c_zeta")?;
        t.push(vec![dd.to_string(), num(a), num(b), num(a - b)]);
        out.checks.push(Check::new(format!("c_zeta_d{dd}"), (a - b).abs() <= cfg.c_zeta_tol, format!("gap {:.2e}", (a - b).abs())));
    }
    out.tables.push(t);

    let rows = audit_bounds(g, d, cfg.gauge_samples, derive_seed(seed, 0x6175), cfg.bound_tol, &quad).stage("audit")?;
    let mut t = Table::new("bounds", &["bound", "constant", "observed_max", "worst_excess", "pass"]);
    for r in &rows {
        t.push(vec![r.name.into(), num(r.bound), num(r.observed), num(r.worst_excess), r.holds().to_string()]);
        out.checks.push(Check::new(format!("bound_{}", r.name), r.holds(), format!("{:.6} ≤ {:.6}", r.observed, r.bound)));
    }
    out.tables.push(t);

    let diag = calibrate_alpha(g, d, cfg.calib_samples, derive_seed(seed, 0x6361), cfg.alpha_shrink, &quad).stage("calibrate")?;
    let rep = validate_sandwich(g, d, cfg.calib_samples, derive_seed(seed, 0x7661), diag.alpha, 1e-9, &quad).stage("sandwich")?;
    let cz = c_zeta(d).stage("c_zeta")?;
    let mut t = Table::new("sandwich", &["quantity", "value"]);
    for (k, v) in [
        ("alpha", diag.alpha),
        ("calibration_lower_gap", diag.lower_gap),
        ("validation_lower_gap", rep.max_lower_gap),
        ("c_zeta", cz),
        ("kappa_upper_violations", rep.kappa_upper as f64),
        ("chi_upper_violations", rep.chi_upper as f64),
        ("kappa_lower_2c_violations", rep.kappa_lower as f64),
        ("kappa_lower_c_violations", rep.kappa_lower_sharp as f64),
        ("kappa_alpha_violations", rep.kappa_alpha as f64),
        ("chi_alpha_violations", rep.chi_alpha as f64),
    ] {
        t.push(vec![k.into(), num(v)]);
    }
    out.tables.push(t);
    out.checks.push(Check::new("upper_bounds", rep.kappa_upper + rep.chi_upper == 0, format!("{} + {} violations", rep.kappa_upper, rep.chi_upper)));
    out.checks.push(Check::new("lower_bound_2c", rep.kappa_lower == 0, format!("max gap {:.6} vs 2C = {:.6}", rep.max_lower_gap, 2.0 * cz)));
    out.checks.push(Check::new(
        "alpha_lower_bounds",
        rep.kappa_alpha + rep.chi_alpha == 0,
        format!("alpha {:.4}: {} + {} violations", diag.alpha, rep.kappa_alpha, rep.chi_alpha),
    ));
    Ok(out)
}

pub fn semimartingale(preset: &str, d: usize) -> Result<SemimartingaleSpec, CliError> {
    let x0 = vec![0.0; d];
    match preset {
        "brownian" => Ok(SemimartingaleSpec::brownian(x0)),
        "drifted" => Ok(SemimartingaleSpec::drifted(vec![0.5; d], 0.8, x0)),
        "state_dependent" => Ok(SemimartingaleSpec::state_dependent(1.0, 0.7, x0)),
        _ => Err(CliError::Config(format!("unknown semimartingale preset '{preset}'"))),
    }
}

pub fn covariation(name: &str) -> Result<Covariation, CliError> {
    match name {
        "discrete" => Ok(Covariation::Discrete),
        "model" => Ok(Covariation::Model),
        _ => match name.strip_prefix("bracket:").map(str::parse::<f64>) {
            Some(Ok(eps)) => Ok(Covariation::Bracket(eps)),
            _ => Err(CliError::Config(format!("unknown covariation '{name}'"))),
        },
    }
}

/// `C_disc = max_Δt mean|residual(T)| / √Δt` for the `y²` lift on Brownian paths against the
/// model covariation, with the sweep rows and their log-log slope.
pub fn calibrate_c_disc(cfg: &ExperimentConfig) -> Result<(f64, Table, f64), CliError> {
    let spec = SemimartingaleSpec::brownian(vec![0.0; cfg.dim]);
    let ic = ItoConfig::new(cfg.samples, derive_seed(cfg.seed()?, 0x6364)).with_covariation(Covariation::Model);
    let lift = lifts::square(cfg.dim);
    let (rows, slope) = ppde_core::ito::ito_convergence(&lift, &spec, cfg.horizon, &cfg.sweep, &ic).stage("ito")?;
    let mut t = Table::new("sweep", &["dt", "mean_abs_residual", "stderr", "slope"]);
    let mut c = 0.0f64;
    for r in &rows {
        c = c.max(r.mean_abs / r.dt.sqrt());
        t.push(vec![num(r.dt), num(r.mean_abs), num(r.stderr), num(slope)]);
    }
    Ok((c, t, slope))
}

pub fn ito_check(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let lift = lifts::by_name(&cfg.lift, cfg.dim).stage("input")?;
    let spec = semimartingale(&cfg.preset, cfg.dim)?;
    let ic = ItoConfig::new(cfg.samples, cfg.seed()?).with_covariation(covariation(&cfg.covariation)?);
    let rep = ito_verify(&lift, &spec, grid(cfg)?, &ic).stage("ito")?;
    let (c_disc, sweep, slope) = calibrate_c_disc(cfg)?;
    let mut out = Outcome::default();
    let mut t = Table::new("residual", &["lift", "dt", "mean_abs_residual", "stderr", "c_disc", "hypothesis_assumed"]);
    t.push(vec![
        lift.name(),
        num(rep.dt),
        num(rep.terminal_abs.mean),
        num(rep.terminal_abs.stderr),
        num(c_disc),
        rep.hypothesis_assumed.to_string(),
    ]);
    out.tables.push(t);
    let mut t = Table::new("paths", &["path", "k", "residual", "rhs"]);
    for (p, (res, rhs)) in rep.residuals.iter().zip(&rep.rhs).enumerate() {
        for (k, (a, b)) in res.iter().zip(rhs).enumerate() {
            t.push(vec![p.to_string(), k.to_string(), num(*a), num(*b)]);
        }
    }
    out.tables.push(t);
    out.tables.push(sweep);
    out.checks.push(Check::new(
        "terminal_residual",
        rep.accepts(c_disc),
        format!("{:.3e} vs 3·{:.3e} + {c_disc:.3}·√{}", rep.terminal_abs.mean, rep.terminal_abs.stderr, rep.dt),
    ));
    out.checks.push(Check::new("dt_slope", slope >= cfg.slope_min, format!("slope {slope:.3} ≥ {}", cfg.slope_min)));
    Ok(out)
}

/// Candidate points: every `stride`-th node of each path, times on `[0, T]`.
pub fn grid_points(paths: &[Arc<GridPath>], stride: usize) -> Result<Vec<PathPoint>, CliError> {
    let mut pts = Vec::new();
    for p in paths {
        let m = p.grid().steps();
        let mut k = 0;
        while k <= m {
            pts.push(PathPoint::at_node(k, p.clone()).stage("space")?);
            k += stride;
        }
        if (m % stride) != 0 {
            pts.push(PathPoint::at_node(m, p.clone()).stage("space")?);
        }
    }
    Ok(pts)
}

/// Read `path_id,t,x1,...,xd` rows; each id forms one path on a shared uniform grid.
pub fn read_dictionary(file: &str) -> Result<Vec<Arc<GridPath>>, CliError> {
    let mut rd = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(file)?;
    let header = rd.headers()?.clone();
    if header.len() < 3 || &header[0] != "path_id" || &header[1] != "t" {
        return Err(CliError::Config(format!("{file}: header must be path_id,t,x1,...")));
    }
    let mut groups: Vec<(String, String)> = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let id = rec[0].to_string();
        let line = rec.iter().skip(1).collect::<Vec<_>>().join(",");
        match groups.last_mut() {
            Some((last, body)) if *last == id => {
                body.push('\n');
                body.push_str(&line);
            }
            _ => groups.push((id, line)),
        }
    }
    let dims: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut out = Vec::new();
    for (_, body) in groups {
        let text = format!("{}\n{body}\n", dims.join(","));
        let p = GridPath::read_csv(text.as_bytes()).stage("input")?;
        if let Some(first) = out.first() {
            let first: &Arc<GridPath> = first;
            first.check_compatible(&p).stage("input")?;
        }
        out.push(Arc::new(p));
    }
    if out.is_empty() {
        return Err(CliError::Config(format!("{file}: no paths")));
    }
    Ok(out)
}

/// Dictionary paths, or enough random Brownian paths for about `space_size` points.
pub fn search_space(cfg: &ExperimentConfig) -> Result<SearchSpace, CliError> {
    let paths = match &cfg.dictionary {
        Some(f) => read_dictionary(f)?,
        None => {
            let g = grid(cfg)?;
            let per_path = g.steps().div_ceil(cfg.stride) + 1;
            let n = cfg.space_size.div_ceil(per_path).max(1);
            let seed = derive_seed(cfg.seed()?, 0x7370);
            (0..n).map(|i| Arc::new(brownian_path(g, cfg.dim, 1.0, &mut stream_rng(seed, i as u64)))).collect()
        }
    };
    SearchSpace::new(grid_points(&paths, cfg.stride)?).stage("space")
}

/// Index of the point of the given rank in decreasing `values` (ties to the lower index).
pub fn rank_index(values: &[f64], rank: usize) -> usize {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order[rank.min(values.len() - 1)]
}

/// Smooth variational principle with `G(t,x) = ξ(x(·∧t))`.
pub fn vp_run(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let space = search_space(cfg)?;
    let xi = terminal_by_name(&cfg.terminal, space.dim()).stage("input")?;
    let quad = GaugeQuad::new(space.dim(), cfg.quadrature()).stage("config")?;
    let g = |p: &PathPoint| xi.eval(&p.path().stopped_at_node(p.node()));
    let values: Vec<f64> = space.points().iter().map(g).collect();
    let p0i = rank_index(&values, cfg.p0_rank);
    let sup = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let eps = cfg.eps.max(sup - values[p0i]);
    let r = smooth_vp(&g, eps, cfg.delta, space.get(p0i), &space, &quad).stage("vp")?;
    let mut out = Outcome::default();
    let d = space.dim();
    let mut header = vec!["n", "index", "t"];
    let names: Vec<String> = (1..=d).map(|i| format!("x{i}")).collect();
    header.extend(names.iter().map(String::as_str));
    let mut t = Table::new("anchors", &header);
    for (n, (a, i)) in r.anchors.iter().zip(&r.anchor_indices).enumerate() {
        let mut row = vec![n.to_string(), i.map_or("-".into(), |i| i.to_string()), num(a.t())];
        row.extend(a.present().iter().map(|v| num(*v)));
        t.push(row);
    }
    out.tables.push(t);
    let mut t = Table::new("items", &["item", "n", "lhs", "rhs", "holds"]);
    for it in &r.item_i {
        t.push(vec!["i_forward".into(), it.n.to_string(), num(it.forward), num(it.bound), it.forward_holds().to_string()]);
        t.push(vec!["i_reverse".into(), it.n.to_string(), num(it.reverse), num(it.bound), it.reverse_holds().to_string()]);
    }
    t.push(vec!["ii".into(), "-".into(), num(r.item_ii.g_start), num(r.item_ii.perturbed_limit), r.item_ii.holds().to_string()]);
    t.push(vec!["iii".into(), "-".into(), num(r.item_iii.margin), num(0.0), r.item_iii.holds().to_string()]);
    out.tables.push(t);
    let mut t = Table::new("limit", &["index", "t", "iterations", "eps", "delta", "space_size", "phi", "phi_h", "phi_v1_max", "phi_v2_max"]);
    let f = &r.phi_at_limit;
    let amax = |v: &[f64]| v.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    t.push(vec![
        r.limit_index.to_string(),
        num(r.limit().t()),
        r.iterations.to_string(),
        num(eps),
        num(cfg.delta),
        space.len().to_string(),
        num(f.value),
        num(f.derivs.horizontal),
        num(amax(&f.derivs.vertical)),
        num(amax(&f.derivs.vertical2)),
    ]);
    out.tables.push(t);
    out.checks.push(Check::new("item_i", r.item_i_holds(), format!("{} anchors", r.anchors.len())));
    out.checks.push(Check::new("item_ii", r.item_ii.holds(), format!("{} ≤ {}", r.item_ii.g_start, r.item_ii.perturbed_limit)));
    out.checks.push(Check::new("item_iii", r.item_iii.holds(), format!("margin {:.3e}", r.item_iii.margin)));
    out.checks.push(Check::new("terminates", r.iterations <= MAX_ITERATIONS, format!("{} iterations", r.iterations)));
    out.checks.push(Check::new("phi_bounds", r.phi_bounds_hold(cfg.bound_tol), String::new()));
    Ok(out)
}

/// The configured path, or `sin(2πs/T)` (phase-shifted per coordinate).
pub fn approx_path(cfg: &ExperimentConfig) -> Result<GridPath, CliError> {
    match &cfg.path {
        Some(f) => read_path(f),
        None => {
            let g = grid(cfg)?;
            let w = 2.0 * std::f64::consts::PI / cfg.horizon;
            Ok(GridPath::from_fn(g, cfg.dim, |s| (0..cfg.dim).map(|i| (w * s + i as f64).sin() - (i as f64).sin()).collect()))
        }
    }
}

/// `T_n` on the configured path: error sweep, growth ratio and coefficient cross-check.
pub fn approx(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let x = approx_path(cfg)?;
    let norm = x.sup_norm().max(f64::MIN_POSITIVE);
    let mut ns = cfg.fejer_sweep.clone();
    if !ns.contains(&cfg.n) {
        ns.push(cfg.n);
    }
    ns.sort_unstable();
    let mut out = Outcome::default();
    let mut t = Table::new("sweep", &["n", "sup_error", "growth_ratio"]);
    let mut growth = 0.0f64;
    let mut at_n = f64::NAN;
    for &n in &ns {
        let tn = fejer_t_n(&x, n).stage("approx")?;
        let err = tn.sub(&x).stage("approx")?.sup_norm();
        let ratio = tn.sup_norm() / norm;
        growth = growth.max(ratio);
        if n == cfg.n {
            at_n = err;
        }
        t.push(vec![n.to_string(), num(err), num(ratio)]);
    }
    out.tables.push(t);
    let mut t = Table::new("coefficients", &["index", "forward_integral", "quadrature", "gap"]);
    let mut gap = 0.0f64;
    for l in 0..=cfg.n {
        let a = fejer_coefficient(&x, l).stage("approx")?;
        let b = fejer_coefficient_quadrature(&x, l);
        for (u, v) in a.iter().zip(&b) {
            gap = gap.max((u - v).abs());
        }
        t.push(vec![l.to_string(), num(a[0]), num(b[0]), num((a[0] - b[0]).abs())]);
    }
    out.tables.push(t);
    out.checks.push(Check::new("approximation", at_n < cfg.approx_tol, format!("‖T_{} x − x‖ = {at_n:.4e}", cfg.n)));
    out.checks.push(Check::new("growth", growth <= cfg.growth_factor, format!("max ‖T_n x‖/‖x‖ = {growth:.4}")));
    out.checks.push(Check::new("coefficient_identity", gap <= cfg.coeff_tol, format!("max gap {gap:.3e}")));
    Ok(out)
}
