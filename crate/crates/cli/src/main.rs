//! `mla`: solve, validate and report market clearing runs.

mod report;
mod run;
mod svg;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mla_market::model::load_scenario_file;
use mla_market::synthetic::{reference_scenario, DEFAULT_SEED};
use mla_market::transport::{connect_agent, CoordinatorConfig};
use mla_market::{Scenario, SolverOptions};

#[derive(Parser)]
#[command(
    name = "mla",
    version,
    about = "Macro load area market clearing by exchange ADMM"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Clear every slot and write a run directory.
    Solve(SolveArgs),
    /// Compare ADMM against the bisection oracle slot by slot.
    Oracle(OracleArgs),
    /// Produce plots, a profile table and bills from a run directory.
    Report(ReportArgs),
    /// Serve one agent of a scenario against a remote coordinator.
    ServeAgent(ServeAgentArgs),
    /// Write the seeded reference scenario as TOML.
    Generate(GenerateArgs),
}

#[derive(Args, Clone)]
struct ScenarioArgs {
    /// Scenario TOML file. Without it the seeded reference scenario is used.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Seed of the reference scenario (ignored with --scenario).
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

impl ScenarioArgs {
    fn load(&self) -> Result<Scenario> {
        match &self.scenario {
            Some(path) => load_scenario_file(path)
                .with_context(|| format!("loading scenario {}", path.display())),
            None => Ok(reference_scenario(self.seed)),
        }
    }
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Initial penalty, €cent/kWh per MW.
    #[arg(long)]
    rho0: Option<f64>,
    #[arg(long)]
    eps_abs: Option<f64>,
    #[arg(long)]
    eps_rel: Option<f64>,
    #[arg(long)]
    max_iter: Option<usize>,
}

impl SolverArgs {
    fn apply(&self, base: &SolverOptions) -> Result<SolverOptions> {
        let mut o = base.clone();
        if let Some(v) = self.rho0 {
            o.rho_initial = v;
        }
        if let Some(v) = self.eps_abs {
            o.eps_abs = v;
        }
        if let Some(v) = self.eps_rel {
            o.eps_rel = v;
        }
        if let Some(v) = self.max_iter {
            o.max_iterations = v;
        }
        o.validate().context("solver options")?;
        Ok(o)
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Inprocess,
    Tcp,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Run directory to create or overwrite.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "inprocess")]
    mode: Mode,
    /// Coordinator address in tcp mode.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: SocketAddr,
    /// In tcp mode, wait for agents started separately with `serve-agent`
    /// instead of spawning them.
    #[arg(long)]
    external_agents: bool,
    /// Seconds allowed for all agents to connect and register.
    #[arg(long, default_value_t = 10.0)]
    registration_timeout: f64,
}

#[derive(Args)]
struct OracleArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[command(flatten)]
    solver: SolverArgs,
    /// Output CSV file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory written by `solve`.
    #[arg(long)]
    out: PathBuf,
    /// Slot whose price trace is plotted.
    #[arg(long, default_value_t = 0)]
    slot: usize,
}

#[derive(Args)]
struct ServeAgentArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    connect: SocketAddr,
    #[arg(long)]
    agent_id: String,
    /// Seconds to keep retrying the initial connection.
    #[arg(long, default_value_t = 30.0)]
    connect_timeout: f64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn seconds(v: f64, flag: &str) -> Result<Duration> {
    Duration::try_from_secs_f64(v)
        .with_context(|| format!("{flag} must be a non-negative number of seconds"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Solve(a) => {
            let scenario = a.scenario.load()?;
            let options = a.solver.apply(&scenario.solver)?;
            let config = CoordinatorConfig {
                registration_timeout: seconds(a.registration_timeout, "--registration-timeout")?,
                ..CoordinatorConfig::default()
            };
            let mode = match (a.mode, a.external_agents) {
                (Mode::Inprocess, false) => run::SolveMode::InProcess,
                (Mode::Inprocess, true) => anyhow::bail!("--external-agents requires --mode tcp"),
                (Mode::Tcp, false) => run::SolveMode::Tcp(a.listen),
                (Mode::Tcp, true) => run::SolveMode::TcpExternal(a.listen),
            };
            let summary = run::solve(&scenario, &options, mode, &config, &a.out)?;
            print!("{}", summary.text);
            if summary.all_converged {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: {} slot(s) did not converge", summary.failed_slots);
                Ok(ExitCode::from(2))
            }
        }
        Command::Oracle(a) => {
            let scenario = a.scenario.load()?;
            let options = a.solver.apply(&scenario.solver)?;
            let text = run::oracle(&scenario, &options, &a.out)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Report(a) => {
            let text = report::report(&a.out, a.slot)?;
            print!("{text}");
            Ok(ExitCode::SUCCESS)
        }
        Command::ServeAgent(a) => {
            let scenario = a.scenario.load()?;
            let spec = scenario
                .agent_spec(&a.agent_id)
                .with_context(|| format!("unknown agent id `{}`", a.agent_id))?;
            let timeout = seconds(a.connect_timeout, "--connect-timeout")?;
            let summary = connect_agent(a.connect, &spec, timeout)
                .with_context(|| format!("agent `{}`", a.agent_id))?;
            println!(
                "agent {} completed {} slot(s), {} primal messages",
                summary.agent_id,
                summary.slots_completed,
                summary.primal_messages.values().sum::<usize>()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Generate(a) => {
            reference_scenario(a.seed)
                .save(&a.out)
                .with_context(|| format!("writing {}", a.out.display()))?;
            Ok(ExitCode::SUCCESS)
        }
    }
}
