//! Independent equilibrium computation used to validate the ADMM fixed point:
//! bisection on the scalar price of the aggregate excess-supply curve, and an
//! exhaustive welfare search for tiny instances.
//!
//! Nothing here calls the penalized best response; supply and demand come
//! from the unpenalized marginal conditions directly.

use thiserror::Error;

use crate::agents::{lac_demand, surplus_rate, AgentError};
use crate::model::{validate_feasibility, Agent, GeneratorSpec, Scenario};
use crate::scalar::{clamp, ordered_sum, Scalar};

pub const PRICE_TOLERANCE: f64 = 1e-6;
pub const BALANCE_TOLERANCE_KW: f64 = 1e-3;
pub const BRUTE_FORCE_MAX_AGENTS: usize = 3;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("slot {slot} is infeasible or out of range")]
    Infeasible { slot: usize },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error("excess supply has no sign change on [{lo}, {hi}] €cent/kWh")]
    NoSignChange { lo: f64, hi: f64 },
    #[error("bisection stopped at price {price} with excess supply {excess} kW")]
    BalanceNotReached { price: f64, excess: f64 },
    #[error("brute force supports at most {BRUTE_FORCE_MAX_AGENTS} agents, got {0}")]
    TooManyAgents(usize),
    #[error("grid step must be > 0")]
    InvalidStep,
    #[error("no balanced allocation on the discretized boxes")]
    EmptyGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingResult<T> {
    pub price: T,
    /// Net injection per agent in coordinator order, kW.
    pub allocation: Vec<T>,
    pub excess_supply_at_price: T,
}

/// Unpenalized response of one agent at price `λ`. Price-indifferent linear
/// suppliers resolve to their lower bound.
fn response_at<T: Scalar>(agent: Agent<'_, T>, t: usize, lambda: T) -> Result<T, OracleError> {
    let (lo, hi) = agent.net_box(t);
    Ok(match agent {
        Agent::Lac(l) => -lac_demand(l, t, lambda)?,
        Agent::Tpp(g) => {
            let a = g.alpha_per_kw();
            if a > T::zero() {
                clamp((lambda - g.beta) / (T::lit(2.0) * a), lo, hi)
            } else if lambda > g.beta {
                hi
            } else {
                lo
            }
        }
        Agent::Pv(_) => {
            if lambda > T::zero() {
                hi
            } else {
                lo
            }
        }
        Agent::Grid(g) => {
            if lambda > g.tariff[t] {
                hi
            } else {
                lo
            }
        }
    })
}

/// Whether the agent's supply is interval-valued at price `λ`.
fn indifferent_at<T: Scalar>(agent: Agent<'_, T>, t: usize, lambda: T) -> bool {
    match agent {
        Agent::Grid(g) => g.tariff[t] == lambda,
        Agent::Tpp(g) => g.alpha == T::zero() && g.beta == lambda,
        Agent::Pv(_) => lambda == T::zero(),
        Agent::Lac(_) => false,
    }
}

/// Aggregate generation minus aggregate consumption at price `λ > 0`, kW.
/// Nondecreasing in `λ`.
pub fn excess_supply<T: Scalar>(
    scenario: &Scenario<T>,
    t: usize,
    lambda: T,
) -> Result<T, OracleError> {
    if lambda.is_nan() || lambda <= T::zero() {
        return Err(AgentError::Domain(format!("price must be > 0, got {lambda}")).into());
    }
    if t >= scenario.slot_count() {
        return Err(OracleError::Infeasible { slot: t });
    }
    let responses = scenario
        .agents()
        .map(|a| response_at(a, t, lambda))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ordered_sum(&responses))
}

/// Allocation at a kink price where some suppliers are indifferent: everyone
/// else takes their unique response, the indifferent suppliers absorb the
/// residual in coordinator order. `None` if the residual does not fit.
fn clear_at_kink<T: Scalar>(
    scenario: &Scenario<T>,
    t: usize,
    price: T,
    tol_kw: T,
) -> Result<Option<Vec<T>>, OracleError> {
    let agents: Vec<_> = scenario.agents().collect();
    let mut allocation = Vec::with_capacity(agents.len());
    for a in &agents {
        let p = if indifferent_at(*a, t, price) {
            a.net_box(t).0
        } else if price > T::zero() {
            response_at(*a, t, price)?
        } else {
            // Zero price: consumers saturate, plants sit at their floor.
            match a {
                Agent::Lac(_) => a.net_box(t).0,
                Agent::Tpp(g) if g.beta >= T::zero() => a.net_box(t).0,
                _ => response_at(*a, t, T::epsilon())?,
            }
        };
        allocation.push(p);
    }
    let mut residual = -ordered_sum(&allocation);
    if residual < -tol_kw {
        return Ok(None);
    }
    for (i, a) in agents.iter().enumerate() {
        if residual <= T::zero() {
            break;
        }
        if indifferent_at(*a, t, price) {
            let (lo, hi) = a.net_box(t);
            let take = residual.min(hi - lo);
            allocation[i] = lo + take;
            residual -= take;
        }
    }
    if residual > tol_kw {
        return Ok(None);
    }
    Ok(Some(allocation))
}

fn bracket_top<T: Scalar>(scenario: &Scenario<T>, t: usize) -> T {
    let mut top = T::zero();
    for g in &scenario.generators {
        match g {
            GeneratorSpec::Grid(s) => top = top.max(s.tariff[t]),
            GeneratorSpec::Tpp(s) => top = top.max(s.marginal_cost(s.max_gen[t])),
            GeneratorSpec::Pv(_) => {}
        }
    }
    for l in &scenario.lacs {
        top = top.max(l.forecast_price[t]);
    }
    T::lit(2.0) * top.max(T::one())
}

/// Clearing price and allocation of slot `t`. Price-indifferent linear
/// suppliers (grid at its tariff, PV at zero price) take the balancing residual.
pub fn clear_by_bisection<T: Scalar>(
    scenario: &Scenario<T>,
    t: usize,
    tol_kw: T,
) -> Result<ClearingResult<T>, OracleError> {
    if !validate_feasibility(scenario, t) {
        return Err(OracleError::Infeasible { slot: t });
    }
    let finish = |price: T, allocation: Vec<T>| ClearingResult {
        price,
        excess_supply_at_price: ordered_sum(&allocation),
        allocation,
    };

    let mut kinks: Vec<T> = scenario
        .agents()
        .filter_map(|a| match a {
            Agent::Grid(g) => Some(g.tariff[t]),
            Agent::Tpp(g) if g.alpha == T::zero() => Some(g.beta),
            _ => None,
        })
        .filter(|k| *k > T::zero())
        .collect();
    kinks.sort_by(|a, b| a.partial_cmp(b).expect("finite tariffs"));
    kinks.dedup();
    for &k in &kinks {
        if let Some(alloc) = clear_at_kink(scenario, t, k, tol_kw)? {
            return Ok(finish(k, alloc));
        }
    }
    if let Some(alloc) = clear_at_kink(scenario, t, T::zero(), tol_kw)? {
        return Ok(finish(T::zero(), alloc));
    }

    let mut lo = T::lit(PRICE_TOLERANCE);
    let mut hi = bracket_top(scenario, t);
    let mut shrink = 0;
    while excess_supply(scenario, t, lo)? >= T::zero() {
        shrink += 1;
        if shrink > 20 || lo < T::min_positive_value() * T::lit(1e6) {
            return Err(OracleError::NoSignChange {
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        lo *= T::lit(1e-3);
    }
    let mut grow = 0;
    while excess_supply(scenario, t, hi)? < T::zero() {
        // Consumption falls to its floor as the price grows, so feasibility
        // guarantees a sign change eventually.
        grow += 1;
        if grow > 60 {
            return Err(OracleError::NoSignChange {
                lo: lo.to_f64_lossy(),
                hi: hi.to_f64_lossy(),
            });
        }
        hi *= T::lit(2.0);
    }

    let price_tol = T::lit(PRICE_TOLERANCE).min(T::lit(1e-3) * tol_kw.max(T::epsilon()));
    let mut mid = lo + (hi - lo) / T::lit(2.0);
    for _ in 0..300 {
        mid = lo + (hi - lo) / T::lit(2.0);
        let es = excess_supply(scenario, t, mid)?;
        if es.abs() <= tol_kw && hi - lo <= price_tol {
            break;
        }
        if es < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= T::epsilon() * hi {
            break;
        }
    }
    let allocation = scenario
        .agents()
        .map(|a| response_at(a, t, mid))
        .collect::<Result<Vec<_>, _>>()?;
    let result = finish(mid, allocation);
    if result.excess_supply_at_price.abs() > tol_kw {
        return Err(OracleError::BalanceNotReached {
            price: mid.to_f64_lossy(),
            excess: result.excess_supply_at_price.to_f64_lossy(),
        });
    }
    Ok(result)
}

/// Slot welfare `Σ U_r(x_r) - Σ C_l(c_l)` over the slot, €cent.
pub fn slot_welfare<T: Scalar>(scenario: &Scenario<T>, t: usize, allocation: &[T]) -> T {
    let dt = scenario.time_grid.slot_duration_hours;
    let mut w = T::zero();
    for (a, &p) in scenario.agents().zip(allocation) {
        w += dt * surplus_rate(a, t, p);
        if let Agent::Tpp(g) = a {
            w -= g.gamma;
        }
    }
    w
}

/// Upper bound on `|f_i'|` over the agent's box, €cent/kWh.
pub fn max_marginal<T: Scalar>(agent: Agent<'_, T>, t: usize) -> T {
    let (lo, hi) = agent.net_box(t);
    let d = |p: T| crate::agents::marginal_surplus(agent, t, p).abs();
    d(lo).max(d(hi))
}

fn grid_points<T: Scalar>(lo: T, hi: T, step: T) -> Vec<T> {
    let n = ((hi - lo) / step).floor().to_usize().unwrap_or(0);
    let mut pts: Vec<T> = (0..=n).map(|j| lo + T::lit(j as f64) * step).collect();
    if pts.last().is_some_and(|&l| l < hi) {
        pts.push(hi);
    }
    pts
}

/// Exhaustive welfare maximization over balanced allocations with every
/// agent but the last on a `step`-spaced grid (the last one balances).
pub fn brute_force_welfare<T: Scalar>(
    scenario: &Scenario<T>,
    t: usize,
    grid_step_kw: T,
) -> Result<Vec<T>, OracleError> {
    let n = scenario.n_agents();
    if n > BRUTE_FORCE_MAX_AGENTS {
        return Err(OracleError::TooManyAgents(n));
    }
    if grid_step_kw.is_nan() || grid_step_kw <= T::zero() {
        return Err(OracleError::InvalidStep);
    }
    if t >= scenario.slot_count() {
        return Err(OracleError::Infeasible { slot: t });
    }
    let agents: Vec<_> = scenario.agents().collect();
    let boxes: Vec<(T, T)> = agents.iter().map(|a| a.net_box(t)).collect();
    let slack = T::lit(1e-9) * T::one().max(boxes[n - 1].1.abs()).max(boxes[n - 1].0.abs());
    let fits = |p: T| p >= boxes[n - 1].0 - slack && p <= boxes[n - 1].1 + slack;

    let mut best: Option<(T, Vec<T>)> = None;
    let mut consider = |mut alloc: Vec<T>| {
        let last = alloc[n - 1];
        alloc[n - 1] = clamp(last, boxes[n - 1].0, boxes[n - 1].1);
        let w = slot_welfare(scenario, t, &alloc);
        if best.as_ref().is_none_or(|(bw, _)| w > *bw) {
            best = Some((w, alloc));
        }
    };
    match n {
        1 => {
            if fits(T::zero()) {
                consider(vec![T::zero()]);
            }
        }
        2 => {
            for p0 in grid_points(boxes[0].0, boxes[0].1, grid_step_kw) {
                if fits(-p0) {
                    consider(vec![p0, -p0]);
                }
            }
        }
        _ => {
            let g1 = grid_points(boxes[1].0, boxes[1].1, grid_step_kw);
            for p0 in grid_points(boxes[0].0, boxes[0].1, grid_step_kw) {
                for &p1 in &g1 {
                    let p2 = -(p0 + p1);
                    if fits(p2) {
                        consider(vec![p0, p1, p2]);
                    }
                }
            }
        }
    }
    best.map(|(_, a)| a).ok_or(OracleError::EmptyGrid)
}
