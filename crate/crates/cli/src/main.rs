use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ppde_cli::{run, CliError, Command, ExperimentConfig};

#[derive(Parser, Debug)]
#[command(name = "ppde", about = "Path-dependent heat equation experiments; every output is CSV")]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    /// Flat key = value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for CSV files.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Any config key, as KEY=VALUE; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    samples: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    terminal: Option<String>,
    #[arg(long, global = true)]
    lift: Option<String>,
    #[arg(long, global = true)]
    eps: Option<f64>,
    #[arg(long, global = true)]
    delta: Option<f64>,
    #[arg(long, global = true)]
    lambda: Option<f64>,
    #[arg(long, global = true)]
    n: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Sub {
    /// Monte-Carlo value v(t,x) of a terminal functional.
    Solve,
    /// Heat-operator residual of cylinder solutions.
    PdeCheck,
    /// Gauge constants, derivative bounds and sandwich inequalities.
    GaugeCheck,
    /// Functional Itô formula residuals and Δt sweep.
    ItoCheck,
    /// Smooth variational principle on a finite path space.
    VpRun,
    /// Fejér approximation T_n.
    Approx,
    /// Comparison pipeline with the inequality chain and δ sweep.
    ComparisonDemo,
    /// Convergence tables.
    Converge,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Solve => Command::Solve,
            Sub::PdeCheck => Command::PdeCheck,
            Sub::GaugeCheck => Command::GaugeCheck,
            Sub::ItoCheck => Command::ItoCheck,
            Sub::VpRun => Command::VpRun,
            Sub::Approx => Command::Approx,
            Sub::ComparisonDemo => Command::ComparisonDemo,
            Sub::Converge => Command::Converge,
        }
    }
}

fn build_config(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for kv in &cli.set {
        cfg.apply(kv)?;
    }
    let typed = [
        ("seed", cli.seed.map(|v| v.to_string())),
        ("dim", cli.d.map(|v| v.to_string())),
        ("samples", cli.samples.map(|v| v.to_string())),
        ("steps", cli.steps.map(|v| v.to_string())),
        ("terminal", cli.terminal.clone()),
        ("lift", cli.lift.clone()),
        ("eps", cli.eps.map(|v| v.to_string())),
        ("delta", cli.delta.map(|v| v.to_string())),
        ("lambda", cli.lambda.map(|v| v.to_string())),
        ("n", cli.n.map(|v| v.to_string())),
    ];
    for (k, v) in typed {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command: Command = cli.command.into();
    let result = build_config(&cli).and_then(|cfg| {
        let outcome = run(command, &cfg)?;
        let files = outcome.write(&cli.out, command.name(), &cfg.hash(), cfg.seed()?)?;
        Ok((outcome, files))
    });
    match result {
        Ok((outcome, files)) => {
            // a closed stdout must not turn a finished run into a failure
            let mut so = std::io::stdout().lock();
            if let Some(est) = outcome.table("estimate") {
                let r = &est.rows[0];
                let _ = writeln!(so, "v({}) = {} ± {}", r[1], r[2], r[3]);
            }
            for c in &outcome.checks {
                let _ = writeln!(so, "{} {} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for f in files {
                let _ = writeln!(so, "wrote {}", f.display());
            }
            if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
