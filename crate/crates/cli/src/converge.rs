//! Convergence tables: Fejér error in n, Monte-Carlo error in N, Itô residual in Δt.

use ppde_core::fk::{solve_v, terminal_by_name, MCConfig};
use ppde_core::fourier::fejer_t_n;

use crate::commands::{approx_path, calibrate_c_disc, input_path};
use crate::config::ExperimentConfig;
use crate::error::{CliError, StageExt};
use crate::report::{num, Check, Outcome, Table};

pub fn convergence_study(cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    let mut out = Outcome::default();

    let x = approx_path(cfg)?;
    let mut t = Table::new("fejer", &["n", "sup_error"]);
    let mut errs = Vec::new();
    for &n in &cfg.fejer_sweep {
        let e = fejer_t_n(&x, n).stage("fejer")?.sub(&x).stage("fejer")?.sup_norm();
        errs.push(e);
        t.push(vec![n.to_string(), num(e)]);
    }
    out.tables.push(t);
    let fejer_ok = errs.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12));
    out.checks.push(Check::new(
        "fejer_nonincreasing",
        fejer_ok,
        errs.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" ≥ "),
    ));

    let path = input_path(cfg)?;
    let xi = terminal_by_name(&cfg.terminal, path.dim()).stage("mc")?;
    let mut t = Table::new("monte_carlo", &["n", "mean", "stderr", "stderr_sqrt_n"]);
    let mut scaled = Vec::new();
    for &n in &cfg.mc_sweep {
        let e = solve_v(xi.as_ref(), cfg.t, &path, &MCConfig::new(n, cfg.seed()?)).stage("mc")?;
        let s = e.stderr * (n as f64).sqrt();
        scaled.push(s);
        t.push(vec![n.to_string(), num(e.mean), num(e.stderr), num(s)]);
    }
    out.tables.push(t);
    let (lo, hi) = scaled.iter().fold((f64::INFINITY, 0.0f64), |(a, b), s| (a.min(*s), b.max(*s)));
    out.checks.push(Check::new("mc_clt_scaling", hi <= cfg.clt_ratio * lo, format!("stderr·√N in [{lo:.4}, {hi:.4}]")));

    let (c_disc, sweep, slope) = calibrate_c_disc(cfg)?;
    out.tables.push(sweep);
    out.checks.push(Check::new("ito_slope", slope >= cfg.slope_min, format!("slope {slope:.3}, C_disc {c_disc:.3}")));
    Ok(out)
}
