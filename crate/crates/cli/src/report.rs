use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use mla_market::admm::solve_horizon;
use mla_market::agents::lac_utility;
use mla_market::model::load_scenario_file;
use mla_market::synthetic::grid_only_variant;
use mla_market::Scenario;

use crate::run::{RESULTS_FILE, RESULTS_FIXED_COLUMNS, SCENARIO_FILE, TRACE_COLUMNS, TRACE_FILE};
use crate::svg::{line_chart, Series};

const CENT_PER_EUR: f64 = 100.0;

/// Daily bill of one consumer under one supply variant.
#[derive(Debug, Clone, PartialEq)]
pub struct BillReport {
    pub lac: String,
    pub variant: &'static str,
    /// Σ_t λ(t)·x(t)·Δt, €.
    pub bill_eur: f64,
}

/// Market outcome read back from a run directory.
struct Run {
    scenario: Scenario,
    prices: Vec<f64>,
    /// `[slot][agent]` net injection, kW.
    powers: Vec<Vec<f64>>,
    /// `(iter, lambda)` for the requested slot.
    trace: Vec<(f64, f64)>,
}

fn parse_f64(field: &str, what: &str, line: usize) -> Result<f64> {
    field
        .parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .with_context(|| format!("{what}: line {line}: `{field}` is not a finite number"))
}

fn load_run(dir: &Path, slot: usize) -> Result<Run> {
    ensure!(
        dir.is_dir(),
        "run directory {} does not exist",
        dir.display()
    );
    for f in [SCENARIO_FILE, RESULTS_FILE, TRACE_FILE] {
        ensure!(
            dir.join(f).is_file(),
            "{} is missing {f}; run `solve` first",
            dir.display()
        );
    }
    let scenario: Scenario = load_scenario_file(&dir.join(SCENARIO_FILE))?;
    let ids = scenario.agent_ids();
    let slots = scenario.slot_count();
    ensure!(
        slot < slots,
        "--slot {slot} out of range (scenario has {slots} slots)"
    );

    let mut rdr = csv::Reader::from_path(dir.join(RESULTS_FILE))?;
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let expected: Vec<String> = RESULTS_FIXED_COLUMNS
        .iter()
        .map(|s| s.to_string())
        .chain(ids.iter().cloned())
        .collect();
    ensure!(
        header == expected,
        "{RESULTS_FILE}: header does not match the scenario's agents"
    );
    let mut prices = vec![f64::NAN; slots];
    let mut powers = vec![Vec::new(); slots];
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{RESULTS_FILE}: line {}", i + 2))?;
        let t: usize = rec[0]
            .parse()
            .with_context(|| format!("{RESULTS_FILE}: line {}: bad slot", i + 2))?;
        ensure!(
            t < slots && powers[t].is_empty(),
            "{RESULTS_FILE}: slot {t} repeated or out of range"
        );
        prices[t] = parse_f64(&rec[1], RESULTS_FILE, i + 2)?;
        powers[t] = rec
            .iter()
            .skip(RESULTS_FIXED_COLUMNS.len())
            .map(|v| parse_f64(v, RESULTS_FILE, i + 2))
            .collect::<Result<_>>()?;
    }
    if let Some(t) = powers.iter().position(Vec::is_empty) {
        bail!("{RESULTS_FILE}: slot {t} missing");
    }

    let mut rdr = csv::Reader::from_path(dir.join(TRACE_FILE))?;
    ensure!(
        rdr.headers()?.iter().eq(TRACE_COLUMNS.iter().copied()),
        "{TRACE_FILE}: unexpected header"
    );
    let mut trace = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("{TRACE_FILE}: line {}", i + 2))?;
        if rec[0].parse::<usize>().ok() == Some(slot) {
            trace.push((
                parse_f64(&rec[1], TRACE_FILE, i + 2)?,
                parse_f64(&rec[2], TRACE_FILE, i + 2)?,
            ));
        }
    }
    ensure!(!trace.is_empty(), "{TRACE_FILE}: no rows for slot {slot}");
    Ok(Run {
        scenario,
        prices,
        powers,
        trace,
    })
}

/// Consumer surplus over one slot, €cent: Δt·(U(x) − λ·x).
fn surplus(scenario: &Scenario, lac: usize, t: usize, price: f64, x: f64) -> Result<f64> {
    let l = &scenario.lacs[lac];
    let u = lac_utility(x, l.u_max[t], l.k_sensitivity, l.desired_power[t])?;
    Ok(scenario.time_grid.slot_duration_hours * (u - price * x))
}

/// Reads a run directory and writes plots, the profile table and the bill
/// comparison next to it. Nothing is written unless every input is valid.
pub fn report(dir: &Path, slot: usize) -> Result<String> {
    let run = load_run(dir, slot)?;
    let s = &run.scenario;
    let dt = s.time_grid.slot_duration_hours;
    let n_lacs = s.lacs.len();
    let slots = s.slot_count();
    let ids = s.agent_ids();

    let variant = grid_only_variant(s);
    let grid_only = solve_horizon(&variant, &s.solver).context("solving the grid-only variant")?;
    let tariff: Vec<f64> = variant
        .grids()
        .next()
        .map(|g| g.tariff.clone())
        .unwrap_or_default();

    let mut bills =
        String::from("lac,with_der_eur,grid_only_eur,grid_only_closed_form_eur,saving_eur\n");
    let mut surplus_csv = String::from("lac,slot,with_der_cent,grid_only_cent\n");
    let mut reports = Vec::new();
    let (mut total_der, mut total_grid, mut total_closed) = (0.0, 0.0, 0.0);
    let mut surplus_violations = 0usize;
    for r in 0..n_lacs {
        let l = &s.lacs[r];
        let mut der = 0.0;
        let mut grid = 0.0;
        let mut closed = 0.0;
        for t in 0..slots {
            let x_der = -run.powers[t][r];
            let x_grid = grid_only.lac_consumption[r][t];
            let price_grid = grid_only.slots[t].clearing_price;
            der += run.prices[t] * x_der * dt;
            grid += price_grid * x_grid * dt;
            let anchored = l.desired_power[t].clamp(l.min_power[t], l.max_power[t]);
            closed += tariff[t] * anchored * dt;
            let a = surplus(s, r, t, run.prices[t], x_der)?;
            let b = surplus(&variant, r, t, price_grid, x_grid)?;
            if a < b {
                surplus_violations += 1;
            }
            writeln!(surplus_csv, "{},{t},{a},{b}", l.id)?;
        }
        let (der, grid, closed) = (
            der / CENT_PER_EUR,
            grid / CENT_PER_EUR,
            closed / CENT_PER_EUR,
        );
        writeln!(bills, "{},{der},{grid},{closed},{}", l.id, grid - der)?;
        reports.push(BillReport {
            lac: l.id.clone(),
            variant: "with-DER",
            bill_eur: der,
        });
        reports.push(BillReport {
            lac: l.id.clone(),
            variant: "grid-only",
            bill_eur: grid,
        });
        total_der += der;
        total_grid += grid;
        total_closed += closed;
    }
    writeln!(
        bills,
        "TOTAL,{total_der},{total_grid},{total_closed},{}",
        total_grid - total_der
    )?;

    let mut profile = String::from("slot,consumption_kw");
    for id in &ids[n_lacs..] {
        write!(profile, ",{id}_kw")?;
    }
    profile.push_str(",imbalance_kw\n");
    for t in 0..slots {
        let consumption: f64 = run.powers[t][..n_lacs].iter().map(|p| -p).sum();
        write!(profile, "{t},{consumption}")?;
        for p in &run.powers[t][n_lacs..] {
            write!(profile, ",{p}")?;
        }
        writeln!(profile, ",{}", run.powers[t].iter().sum::<f64>())?;
    }

    let mut price_series = vec![Series {
        label: "clearing price",
        color: "#1f77b4",
        points: run
            .prices
            .iter()
            .enumerate()
            .map(|(t, &p)| (t as f64, p))
            .collect(),
    }];
    if !tariff.is_empty() && s.grids().next().is_some() {
        price_series.push(Series {
            label: "grid tariff",
            color: "#d62728",
            points: tariff
                .iter()
                .enumerate()
                .map(|(t, &p)| (t as f64, p))
                .collect(),
        });
    }
    let prices_svg = line_chart(
        "Clearing price per slot",
        "slot",
        "€cent/kWh",
        &price_series,
    );
    let trace_svg = line_chart(
        &format!("Price iterates, slot {slot}"),
        "iteration",
        "€cent/kWh",
        &[Series {
            label: "lambda",
            color: "#2ca02c",
            points: run.trace.clone(),
        }],
    );

    let trace_name = format!("trace_slot{slot}.svg");
    let files = [
        ("prices.svg", prices_svg),
        ("profile.csv", profile),
        (trace_name.as_str(), trace_svg),
        ("bills.csv", bills),
        ("surplus.csv", surplus_csv),
    ];
    for (name, body) in &files {
        fs::write(dir.join(name), body).with_context(|| format!("writing {name}"))?;
    }

    let mut text = String::new();
    writeln!(
        text,
        "daily bill, all consumers: with DER {total_der:.4} €, grid only {total_grid:.4} €"
    )?;
    writeln!(text, "grid only, closed form: {total_closed:.4} €")?;
    let der_reports = reports.iter().filter(|b| b.variant == "with-DER");
    let worst = der_reports
        .zip(reports.iter().filter(|b| b.variant == "grid-only"))
        .map(|(d, g)| (d.bill_eur - g.bill_eur, d.lac.as_str()))
        .fold(
            (f64::NEG_INFINITY, ""),
            |a, b| if b.0 > a.0 { b } else { a },
        );
    writeln!(
        text,
        "largest per-consumer bill increase with DER: {:.6} € ({})",
        worst.0, worst.1
    )?;
    writeln!(
        text,
        "slot-consumer pairs with lower surplus under DER: {surplus_violations}"
    )?;
    writeln!(
        text,
        "wrote {}",
        files.iter().map(|f| f.0).collect::<Vec<_>>().join(", ")
    )?;
    Ok(text)
}
