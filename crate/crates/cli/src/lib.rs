//! Experiment runner: configuration, subcommands and CSV reports.

pub mod commands;
pub mod config;
pub mod converge;
pub mod demo;
pub mod error;
pub mod report;

pub use config::ExperimentConfig;
pub use error::CliError;
pub use report::{Check, Outcome, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Solve,
    PdeCheck,
    GaugeCheck,
    ItoCheck,
    VpRun,
    Approx,
    ComparisonDemo,
    Converge,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::PdeCheck => "pde-check",
            Command::GaugeCheck => "gauge-check",
            Command::ItoCheck => "ito-check",
            Command::VpRun => "vp-run",
            Command::Approx => "approx",
            Command::ComparisonDemo => "comparison-demo",
            Command::Converge => "converge",
        }
    }
}

/// Validate the configuration and run one subcommand.
pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<Outcome, CliError> {
    cfg.validate()?;
    match command {
        Command::Solve => commands::solve(cfg),
        Command::PdeCheck => commands::pde_check(cfg),
        Command::GaugeCheck => commands::gauge_check(cfg),
        Command::ItoCheck => commands::ito_check(cfg),
        Command::VpRun => commands::vp_run(cfg),
        Command::Approx => commands::approx(cfg),
        Command::ComparisonDemo => demo::comparison_demo(cfg),
        Command::Converge => converge::convergence_study(cfg),
    }
}
