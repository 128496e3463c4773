//! Domain types, scenario ingestion and validation.
//!
//! Units used everywhere in the crate:
//!
//! * power in kW, signed as a net injection (generators `+`, consumers `-`);
//! * prices and tariffs in €cent/kWh;
//! * TPP cost coefficients `alpha`/`beta` in the MW-denominated form of the
//!   scenario file (`alpha * c_MW^2 + beta * c_MW`, so marginal cost in
//!   €cent/kWh is `beta + 2 * alpha * c_MW`); `gamma` in €cent per slot;
//! * `SolverOptions::rho_initial` in €cent/kWh per MW. The solver converts it
//!   to the per-kW penalty used internally.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::calibrate_umax;
use crate::scalar::Scalar;

pub const KW_PER_MW: f64 = 1000.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("scenario document does not match the schema: {0}")]
    Schema(String),
    #[error("invalid value at `{path}`: {reason}")]
    Invalid { path: String, reason: String },
    #[error("slot {slot} is infeasible: {detail}")]
    Infeasible { slot: usize, detail: String },
    #[error("could not serialize scenario: {0}")]
    Serialize(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(path: impl Into<String>, reason: impl Into<String>) -> ModelError {
    ModelError::Invalid {
        path: path.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct TimeGrid<T> {
    pub slot_count: usize,
    pub slot_duration_hours: T,
}

impl<T: Scalar> TimeGrid<T> {
    pub fn horizon_hours(&self) -> T {
        T::lit(self.slot_count as f64) * self.slot_duration_hours
    }
}

/// Elastic consumer (load area controller). All per-slot vectors have one
/// entry per slot of the time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct LacSpec<T> {
    pub id: String,
    /// Desired consumption `x_pr(t)`, kW.
    pub desired_power: Vec<T>,
    /// Lower consumption bound, kW. Zero when omitted.
    #[serde(default)]
    pub min_power: Vec<T>,
    /// Upper consumption bound, kW.
    pub max_power: Vec<T>,
    /// Price sensitivity `K` of the exponential utility.
    pub k_sensitivity: T,
    /// Forecast price `λ̃(t)` the utility is calibrated against, €cent/kWh.
    pub forecast_price: Vec<T>,
    /// Utility scale per slot. Calibrated from the forecast price when omitted.
    #[serde(default)]
    pub u_max: Vec<T>,
}

/// Fuel-fed plant with quadratic cost and a forced minimum output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct TppSpec<T> {
    pub id: String,
    pub alpha: T,
    pub beta: T,
    #[serde(default)]
    pub gamma: T,
    pub min_gen: Vec<T>,
    pub max_gen: Vec<T>,
}

impl<T: Scalar> TppSpec<T> {
    /// Quadratic coefficient per kW², such that marginal cost in €cent/kWh is
    /// `beta + 2 * alpha_per_kw() * c_kw`.
    pub fn alpha_per_kw(&self) -> T {
        self.alpha / T::lit(KW_PER_MW)
    }

    pub fn marginal_cost(&self, c_kw: T) -> T {
        self.beta + T::lit(2.0) * self.alpha_per_kw() * c_kw
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct PvSpec<T> {
    pub id: String,
    /// Available injection per slot, kW.
    pub availability: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct GridSpec<T> {
    pub id: String,
    /// Energy tariff `κ(t)`, €cent/kWh.
    pub tariff: Vec<T>,
    /// Maximum withdrawal from the grid, kW.
    pub max_draw: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", bound = "T: Scalar")]
pub enum GeneratorSpec<T> {
    Tpp(TppSpec<T>),
    Pv(PvSpec<T>),
    Grid(GridSpec<T>),
}

impl<T> GeneratorSpec<T> {
    pub fn id(&self) -> &str {
        match self {
            GeneratorSpec::Tpp(g) => &g.id,
            GeneratorSpec::Pv(g) => &g.id,
            GeneratorSpec::Grid(g) => &g.id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default, bound = "T: Scalar")]
pub struct SolverOptions<T> {
    /// Initial penalty, €cent/kWh per MW.
    pub rho_initial: T,
    pub eps_abs: T,
    pub eps_rel: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        Self {
            rho_initial: T::one(),
            eps_abs: T::lit(1e-4),
            eps_rel: T::lit(1e-5),
            max_iterations: 500,
        }
    }
}

impl<T: Scalar> SolverOptions<T> {
    /// Initial penalty in the per-kW unit the agents work in.
    pub fn rho_initial_per_kw(&self) -> T {
        self.rho_initial / T::lit(KW_PER_MW)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        for (name, v) in [
            ("rho_initial", self.rho_initial),
            ("eps_abs", self.eps_abs),
            ("eps_rel", self.eps_rel),
        ] {
            if !(v.is_finite() && v > T::zero()) {
                return Err(invalid(format!("solver.{name}"), "must be finite and > 0"));
            }
        }
        if self.max_iterations == 0 {
            return Err(invalid("solver.max_iterations", "must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound = "T: Scalar")]
pub struct Scenario<T> {
    pub time_grid: TimeGrid<T>,
    pub lacs: Vec<LacSpec<T>>,
    pub generators: Vec<GeneratorSpec<T>>,
    #[serde(default)]
    pub solver: SolverOptions<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AgentKind {
    Lac,
    Tpp,
    Pv,
    Grid,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Lac => "lac",
            AgentKind::Tpp => "tpp",
            AgentKind::Pv => "pv",
            AgentKind::Grid => "grid",
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lac" => Ok(AgentKind::Lac),
            "tpp" => Ok(AgentKind::Tpp),
            "pv" => Ok(AgentKind::Pv),
            "grid" => Ok(AgentKind::Grid),
            other => Err(format!("unknown agent kind `{other}`")),
        }
    }
}

/// Signed net injection in kW: generators report `c >= 0`, consumers report
/// `-x <= 0`, so market balance reads `Σ p_i = 0`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct NetPower<T>(pub T);

impl<T: Scalar> NetPower<T> {
    pub fn kw(self) -> T {
        self.0
    }

    /// Consumption of a LAC reporting this net power.
    pub fn consumption(self) -> T {
        -self.0
    }
}

/// Borrowed view of one market participant.
#[derive(Debug, Clone, Copy)]
pub enum Agent<'a, T> {
    Lac(&'a LacSpec<T>),
    Tpp(&'a TppSpec<T>),
    Pv(&'a PvSpec<T>),
    Grid(&'a GridSpec<T>),
}

impl<'a, T: Scalar> Agent<'a, T> {
    pub fn id(&self) -> &'a str {
        match *self {
            Agent::Lac(a) => &a.id,
            Agent::Tpp(a) => &a.id,
            Agent::Pv(a) => &a.id,
            Agent::Grid(a) => &a.id,
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            Agent::Lac(_) => AgentKind::Lac,
            Agent::Tpp(_) => AgentKind::Tpp,
            Agent::Pv(_) => AgentKind::Pv,
            Agent::Grid(_) => AgentKind::Grid,
        }
    }

    /// Feasible interval of the signed net injection in slot `t`.
    pub fn net_box(&self, t: usize) -> (T, T) {
        match *self {
            Agent::Lac(a) => (-a.max_power[t], -a.min_power[t]),
            Agent::Tpp(g) => (g.min_gen[t], g.max_gen[t]),
            Agent::Pv(g) => (T::zero(), g.availability[t]),
            Agent::Grid(g) => (T::zero(), g.max_draw[t]),
        }
    }

    pub fn is_generator(&self) -> bool {
        !matches!(self, Agent::Lac(_))
    }
}

impl<'a, T> From<&'a GeneratorSpec<T>> for Agent<'a, T> {
    fn from(g: &'a GeneratorSpec<T>) -> Self {
        match g {
            GeneratorSpec::Tpp(s) => Agent::Tpp(s),
            GeneratorSpec::Pv(s) => Agent::Pv(s),
            GeneratorSpec::Grid(s) => Agent::Grid(s),
        }
    }
}

/// Owned participant description, e.g. for a remote agent process that only
/// knows its own parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum AgentSpec<T> {
    Lac(LacSpec<T>),
    Generator(GeneratorSpec<T>),
}

impl<T: Scalar> AgentSpec<T> {
    pub fn view(&self) -> Agent<'_, T> {
        match self {
            AgentSpec::Lac(l) => Agent::Lac(l),
            AgentSpec::Generator(g) => g.into(),
        }
    }
}

impl<T: Scalar> Scenario<T> {
    pub fn slot_count(&self) -> usize {
        self.time_grid.slot_count
    }

    pub fn n_agents(&self) -> usize {
        self.lacs.len() + self.generators.len()
    }

    /// Participants in the fixed coordinator order: LACs first, then generators.
    pub fn agents(&self) -> impl Iterator<Item = Agent<'_, T>> + '_ {
        self.lacs
            .iter()
            .map(Agent::Lac)
            .chain(self.generators.iter().map(Agent::from))
    }

    pub fn agent_ids(&self) -> Vec<String> {
        self.agents().map(|a| a.id().to_string()).collect()
    }

    pub fn agent_spec(&self, id: &str) -> Option<AgentSpec<T>> {
        if let Some(l) = self.lacs.iter().find(|l| l.id == id) {
            return Some(AgentSpec::Lac(l.clone()));
        }
        self.generators
            .iter()
            .find(|g| g.id() == id)
            .map(|g| AgentSpec::Generator(g.clone()))
    }

    pub fn grids(&self) -> impl Iterator<Item = &GridSpec<T>> + '_ {
        self.generators.iter().filter_map(|g| match g {
            GeneratorSpec::Grid(s) => Some(s),
            _ => None,
        })
    }

    /// Fills defaulted fields: zero lower bounds and calibrated utility scales.
    fn complete_defaults(&mut self) {
        let slots = self.slot_count();
        for lac in &mut self.lacs {
            if lac.min_power.is_empty() {
                lac.min_power = vec![T::zero(); slots];
            }
            if lac.u_max.is_empty()
                && lac.forecast_price.len() == slots
                && lac.desired_power.len() == slots
            {
                lac.u_max = (0..slots)
                    .map(|t| {
                        calibrate_umax(
                            lac.forecast_price[t],
                            lac.k_sensitivity,
                            lac.desired_power[t],
                        )
                    })
                    .collect();
            }
        }
    }

    /// Checks every structural and numeric invariant, then per-slot feasibility.
    pub fn validate(&self) -> Result<(), ModelError> {
        let slots = self.time_grid.slot_count;
        if slots == 0 {
            return Err(invalid("time_grid.slot_count", "must be >= 1"));
        }
        let dt = self.time_grid.slot_duration_hours;
        if !(dt.is_finite() && dt > T::zero()) {
            return Err(invalid(
                "time_grid.slot_duration_hours",
                "must be finite and > 0",
            ));
        }
        if self.lacs.is_empty() {
            return Err(invalid("lacs", "at least one consumer is required"));
        }
        if self.generators.is_empty() {
            return Err(invalid("generators", "at least one generator is required"));
        }
        self.solver.validate()?;

        let mut seen = HashSet::new();
        for (i, agent) in self.agents().enumerate() {
            let id = agent.id();
            let path = if i < self.lacs.len() {
                format!("lacs[{i}].id")
            } else {
                format!("generators[{}].id", i - self.lacs.len())
            };
            check_id(&path, id)?;
            if !seen.insert(id) {
                return Err(invalid(path, format!("duplicate agent id `{id}`")));
            }
        }

        for (i, lac) in self.lacs.iter().enumerate() {
            let p = format!("lacs[{i}]");
            let k = lac.k_sensitivity;
            if !(k.is_finite() && k > T::zero()) {
                return Err(invalid(
                    format!("{p}.k_sensitivity"),
                    "must be finite and > 0",
                ));
            }
            let desired = per_slot(&p, "desired_power", &lac.desired_power, slots)?;
            let lo = per_slot(&p, "min_power", &lac.min_power, slots)?;
            let hi = per_slot(&p, "max_power", &lac.max_power, slots)?;
            let price = per_slot(&p, "forecast_price", &lac.forecast_price, slots)?;
            let umax = per_slot(&p, "u_max", &lac.u_max, slots)?;
            for t in 0..slots {
                let at = |field: &str| format!("{p}.{field}[{t}]");
                if lo[t] < T::zero() {
                    return Err(invalid(at("min_power"), "must be >= 0"));
                }
                if desired[t] <= T::zero() {
                    return Err(invalid(at("desired_power"), "must be > 0"));
                }
                if lo[t] > desired[t] || desired[t] > hi[t] {
                    return Err(invalid(
                        at("desired_power"),
                        format!(
                            "bounds violated: need min_power <= desired_power <= max_power, got {} <= {} <= {}",
                            lo[t], desired[t], hi[t]
                        ),
                    ));
                }
                if price[t] <= T::zero() {
                    return Err(invalid(at("forecast_price"), "must be > 0"));
                }
                if umax[t] <= T::zero() {
                    return Err(invalid(at("u_max"), "must be > 0"));
                }
            }
        }

        for (i, gen) in self.generators.iter().enumerate() {
            let p = format!("generators[{i}]");
            match gen {
                GeneratorSpec::Tpp(g) => {
                    for (name, v) in [("alpha", g.alpha), ("beta", g.beta), ("gamma", g.gamma)] {
                        if !v.is_finite() {
                            return Err(invalid(format!("{p}.{name}"), "must be finite"));
                        }
                    }
                    if g.alpha < T::zero() {
                        return Err(invalid(format!("{p}.alpha"), "must be >= 0"));
                    }
                    let lo = per_slot(&p, "min_gen", &g.min_gen, slots)?;
                    let hi = per_slot(&p, "max_gen", &g.max_gen, slots)?;
                    for t in 0..slots {
                        if lo[t] < T::zero() || lo[t] > hi[t] {
                            return Err(invalid(
                                format!("{p}.min_gen[{t}]"),
                                format!(
                                    "need 0 <= min_gen <= max_gen, got {} and {}",
                                    lo[t], hi[t]
                                ),
                            ));
                        }
                    }
                }
                GeneratorSpec::Pv(g) => {
                    let avail = per_slot(&p, "availability", &g.availability, slots)?;
                    if let Some(t) = avail.iter().position(|&a| a < T::zero()) {
                        return Err(invalid(format!("{p}.availability[{t}]"), "must be >= 0"));
                    }
                }
                GeneratorSpec::Grid(g) => {
                    let tariff = per_slot(&p, "tariff", &g.tariff, slots)?;
                    let draw = per_slot(&p, "max_draw", &g.max_draw, slots)?;
                    for t in 0..slots {
                        if tariff[t] <= T::zero() {
                            return Err(invalid(format!("{p}.tariff[{t}]"), "must be > 0"));
                        }
                        if draw[t] <= T::zero() {
                            return Err(invalid(format!("{p}.max_draw[{t}]"), "must be > 0"));
                        }
                    }
                }
            }
        }

        for t in 0..slots {
            if !validate_feasibility(self, t) {
                let (dlo, dhi) = demand_interval(self, t);
                let (slo, shi) = supply_interval(self, t);
                return Err(ModelError::Infeasible {
                    slot: t,
                    detail: format!(
                        "demand range [{dlo}, {dhi}] kW does not meet supply range [{slo}, {shi}] kW"
                    ),
                });
            }
        }
        Ok(())
    }

    /// Serializes to the scenario document format.
    pub fn to_toml_string(&self) -> Result<String, ModelError> {
        toml::to_string(self).map_err(|e| ModelError::Serialize(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let text = self.to_toml_string()?;
        std::fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn check_id(path: &str, id: &str) -> Result<(), ModelError> {
    if id.is_empty() {
        return Err(invalid(path, "must not be empty"));
    }
    if id
        .chars()
        .any(|c| c.is_whitespace() || c.is_control() || c == '=' || c == '"')
    {
        return Err(invalid(path, "must not contain whitespace, `=` or `\"`"));
    }
    Ok(())
}

fn per_slot<'v, T: Scalar>(
    parent: &str,
    field: &str,
    values: &'v [T],
    slots: usize,
) -> Result<&'v [T], ModelError> {
    if values.len() != slots {
        return Err(invalid(
            format!("{parent}.{field}"),
            format!("expected {slots} per-slot values, got {}", values.len()),
        ));
    }
    if let Some(t) = values.iter().position(|v| !v.is_finite()) {
        return Err(invalid(format!("{parent}.{field}[{t}]"), "must be finite"));
    }
    Ok(values)
}

/// Parses and validates a scenario document (TOML), filling defaulted fields.
pub fn load_scenario<T: Scalar>(source: &str) -> Result<Scenario<T>, ModelError> {
    let mut scenario: Scenario<T> =
        toml::from_str(source).map_err(|e| ModelError::Schema(e.to_string()))?;
    scenario.complete_defaults();
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario_file<T: Scalar>(path: &Path) -> Result<Scenario<T>, ModelError> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_scenario(&text)
}

/// Total consumption range `[Σ m_r, Σ M_r]` in slot `t`, kW.
pub fn demand_interval<T: Scalar>(scenario: &Scenario<T>, t: usize) -> (T, T) {
    scenario
        .lacs
        .iter()
        .fold((T::zero(), T::zero()), |(lo, hi), l| {
            (lo + l.min_power[t], hi + l.max_power[t])
        })
}

/// Total injection range `[Σ c_min, Σ c_max]` in slot `t`, kW.
pub fn supply_interval<T: Scalar>(scenario: &Scenario<T>, t: usize) -> (T, T) {
    scenario
        .generators
        .iter()
        .map(Agent::from)
        .fold((T::zero(), T::zero()), |(lo, hi), g| {
            let (a, b) = g.net_box(t);
            (lo + a, hi + b)
        })
}

/// Whether some allocation within every agent's bounds balances slot `t`.
/// Out-of-range slots are reported as infeasible.
pub fn validate_feasibility<T: Scalar>(scenario: &Scenario<T>, t: usize) -> bool {
    if t >= scenario.slot_count() {
        return false;
    }
    let (dlo, dhi) = demand_interval(scenario, t);
    let (slo, shi) = supply_interval(scenario, t);
    dlo <= shi && slo <= dhi
}
