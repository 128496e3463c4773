use std::fmt::Write as _;
use std::fs;
use std::net::{SocketAddr, TcpListener};
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use mla_market::admm::solve_slot;
use mla_market::oracle::{clear_by_bisection, BALANCE_TOLERANCE_KW};
use mla_market::transport::{run_session, serve_tcp, CoordinatorConfig, Endpoint};
use mla_market::{HorizonResult, Scenario, SolverOptions};

pub const SCENARIO_FILE: &str = "scenario.toml";
pub const RESULTS_FILE: &str = "results.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

pub const RESULTS_FIXED_COLUMNS: [&str; 6] = [
    "slot",
    "price_cent_per_kwh",
    "iterations",
    "converged",
    "primal_residual",
    "dual_residual",
];
pub const TRACE_COLUMNS: [&str; 8] = [
    "slot",
    "iter",
    "lambda",
    "rho",
    "primal_norm",
    "dual_norm",
    "eps_pri",
    "eps_dual",
];

pub enum SolveMode {
    InProcess,
    /// Loopback agents spawned by this process.
    Tcp(SocketAddr),
    /// Agents started elsewhere with `serve-agent`.
    TcpExternal(SocketAddr),
}

pub struct SolveSummary {
    pub text: String,
    pub all_converged: bool,
    pub failed_slots: usize,
}

fn median(mut v: Vec<usize>) -> f64 {
    v.sort_unstable();
    let n = v.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        v[n / 2] as f64
    } else {
        (v[n / 2 - 1] + v[n / 2]) as f64 / 2.0
    }
}

pub fn solve(
    scenario: &Scenario,
    options: &SolverOptions,
    mode: SolveMode,
    config: &CoordinatorConfig,
    out: &Path,
) -> Result<SolveSummary> {
    let start = Instant::now();
    let (result, mode_name) = match mode {
        SolveMode::InProcess => (
            run_session(Endpoint::InProcess, scenario, options, config)?.0,
            "inprocess".to_string(),
        ),
        SolveMode::Tcp(addr) => (
            run_session(Endpoint::Tcp(addr), scenario, options, config)?.0,
            "tcp".to_string(),
        ),
        SolveMode::TcpExternal(addr) => {
            let listener = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
            eprintln!(
                "listening on {} for {} agents",
                listener.local_addr()?,
                scenario.n_agents()
            );
            (
                serve_tcp(&listener, scenario, options, config)?,
                "tcp (external agents)".to_string(),
            )
        }
    };
    let elapsed = start.elapsed();

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut saved = scenario.clone();
    saved.solver = options.clone();
    saved.save(&out.join(SCENARIO_FILE))?;
    write_results(&result, &out.join(RESULTS_FILE))?;
    write_trace(&result, &out.join(TRACE_FILE))?;

    let iterations: Vec<usize> = result.slots.iter().map(|s| s.iterations).collect();
    let failed: Vec<usize> = result
        .slots
        .iter()
        .filter(|s| !s.converged)
        .map(|s| s.slot)
        .collect();
    let worst_balance = result
        .slots
        .iter()
        .map(|s| (s.imbalance().abs(), s.eps_pri))
        .fold((0.0f64, 0.0f64), |acc, x| if x.0 > acc.0 { x } else { acc });
    let mut text = String::new();
    writeln!(text, "mode: {mode_name}")?;
    writeln!(
        text,
        "options: rho0={} per MW, eps_abs={}, eps_rel={}, max_iter={}",
        options.rho_initial, options.eps_abs, options.eps_rel, options.max_iterations
    )?;
    writeln!(text, "agents: {}", result.agent_ids.len())?;
    writeln!(
        text,
        "slots: {} ({} converged)",
        result.slots.len(),
        result.slots.len() - failed.len()
    )?;
    if !failed.is_empty() {
        writeln!(text, "not converged: {failed:?}")?;
    }
    writeln!(
        text,
        "iterations: median {}, max {}",
        median(iterations.clone()),
        iterations.iter().max().copied().unwrap_or(0)
    )?;
    writeln!(
        text,
        "largest |generation - consumption|: {:.6} kW (eps_pri there {:.6})",
        worst_balance.0, worst_balance.1
    )?;
    writeln!(text, "wall time: {:.3} s", elapsed.as_secs_f64())?;
    fs::write(out.join(SUMMARY_FILE), &text)?;
    Ok(SolveSummary {
        text,
        all_converged: failed.is_empty(),
        failed_slots: failed.len(),
    })
}

fn write_results(result: &HorizonResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = RESULTS_FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(result.agent_ids.iter().cloned());
    w.write_record(&header)?;
    for s in &result.slots {
        let mut row = vec![
            s.slot.to_string(),
            s.clearing_price.to_string(),
            s.iterations.to_string(),
            u8::from(s.converged).to_string(),
            s.primal_residual.to_string(),
            s.dual_residual.to_string(),
        ];
        row.extend(s.allocation.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_trace(result: &HorizonResult, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(TRACE_COLUMNS)?;
    for s in &result.slots {
        for e in &s.trace {
            w.write_record([
                s.slot.to_string(),
                e.iter.to_string(),
                e.lambda.to_string(),
                e.rho.to_string(),
                e.primal_norm.to_string(),
                e.dual_norm.to_string(),
                e.eps_pri.to_string(),
                e.eps_dual.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the side-by-side comparison and returns a short summary.
pub fn oracle(scenario: &Scenario, options: &SolverOptions, out: &Path) -> Result<String> {
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut w =
        csv::Writer::from_path(out).with_context(|| format!("creating {}", out.display()))?;
    w.write_record([
        "slot",
        "admm_price",
        "oracle_price",
        "price_deviation",
        "max_allocation_deviation_kw",
        "admm_converged",
        "status",
    ])?;
    let (mut max_price, mut max_alloc, mut failures) = (0.0f64, 0.0f64, 0usize);
    for t in 0..scenario.slot_count() {
        let admm = solve_slot(scenario, t, options);
        let exact = clear_by_bisection(scenario, t, BALANCE_TOLERANCE_KW);
        match (admm, exact) {
            (Ok(a), Ok(o)) => {
                let dp = (a.clearing_price - o.price).abs();
                let da = a
                    .allocation
                    .iter()
                    .zip(&o.allocation)
                    .map(|(x, y)| (x - y).abs())
                    .fold(0.0, f64::max);
                max_price = max_price.max(dp);
                max_alloc = max_alloc.max(da);
                w.write_record([
                    t.to_string(),
                    a.clearing_price.to_string(),
                    o.price.to_string(),
                    dp.to_string(),
                    da.to_string(),
                    u8::from(a.converged).to_string(),
                    "ok".into(),
                ])?;
            }
            (a, o) => {
                failures += 1;
                let status = [
                    a.err().map(|e| format!("admm: {e}")),
                    o.err().map(|e| format!("oracle: {e}")),
                ]
                .into_iter()
                .flatten()
                .collect::<Vec<_>>()
                .join("; ");
                w.write_record([
                    t.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    status,
                ])?;
            }
        }
    }
    w.flush()?;
    let mut text = String::new();
    writeln!(text, "slots compared: {}", scenario.slot_count() - failures)?;
    if failures > 0 {
        writeln!(text, "slots failed: {failures} (see status column)")?;
    }
    writeln!(text, "max price deviation: {max_price:e} cent/kWh")?;
    writeln!(text, "max allocation deviation: {max_alloc:e} kW")?;
    Ok(text)
}
