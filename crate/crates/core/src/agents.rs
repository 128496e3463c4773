//! Per-agent economics: utility and cost curves, utility calibration, and the
//! penalized best response each participant computes locally.
//!
//! Every participant maximizes its surplus `f_i(p) + λ p` over its own box,
//! where `f_i(p) = U(-p)` for a consumer and `-C(p)` for a generator. Inside the
//! exchange iteration a proximal term `-(ρ/2)(p - v)^2` is added around the
//! anchor `v`, which makes the subproblem strictly concave for `ρ > 0`.

use thiserror::Error;

use crate::model::{Agent, GeneratorSpec, LacSpec, NetPower};
use crate::scalar::{clamp, Scalar};

const LAC_MAX_ITERATIONS: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("power {value} kW outside the feasible box [{lo}, {hi}]")]
    OutOfBox { value: f64, lo: f64, hi: f64 },
    #[error("slot {slot} outside the agent's horizon of {slots} slots")]
    SlotOutOfRange { slot: usize, slots: usize },
    #[error("consumer best response did not converge after {0} iterations")]
    NonConvergence(usize),
}

/// `u_max * (1 - exp(-x / (K x_pr)))`.
pub fn lac_utility<T: Scalar>(x: T, u_max: T, k_sensitivity: T, x_pr: T) -> Result<T, AgentError> {
    if x_pr == T::zero() {
        return Err(AgentError::Domain("desired power must be non-zero".into()));
    }
    let scale = k_sensitivity * x_pr;
    Ok(u_max * (T::one() - (-x / scale).exp()))
}

/// Derivative of [`lac_utility`] with respect to consumption.
pub fn lac_marginal_utility<T: Scalar>(x: T, u_max: T, k_sensitivity: T, x_pr: T) -> T {
    let scale = k_sensitivity * x_pr;
    u_max / scale * (-x / scale).exp()
}

/// Utility scale for which the unpenalized optimum at the forecast price is
/// exactly the desired consumption: `λ̃ K x_pr e^{1/K}`.
pub fn calibrate_umax<T: Scalar>(forecast_price: T, k_sensitivity: T, x_pr: T) -> T {
    forecast_price * k_sensitivity * x_pr * (T::one() / k_sensitivity).exp()
}

/// Price response of a calibrated consumer, `x_pr (1 + K ln(λ̃/λ))`, clipped
/// to `[m, M]`.
pub fn lac_demand_at_price<T: Scalar>(
    lambda: T,
    forecast_price: T,
    k_sensitivity: T,
    x_pr: T,
    bounds: (T, T),
) -> Result<T, AgentError> {
    if lambda.is_nan() || lambda <= T::zero() {
        return Err(AgentError::Domain(format!(
            "price must be > 0, got {lambda}"
        )));
    }
    let x = x_pr * (T::one() + k_sensitivity * (forecast_price / lambda).ln());
    Ok(clamp(x, bounds.0, bounds.1))
}

/// Unpenalized consumption at price `λ > 0` expressed through `u_max`, so it is
/// also correct for user-supplied utility scales.
pub fn lac_demand<T: Scalar>(lac: &LacSpec<T>, t: usize, lambda: T) -> Result<T, AgentError> {
    if lambda.is_nan() || lambda <= T::zero() {
        return Err(AgentError::Domain(format!(
            "price must be > 0, got {lambda}"
        )));
    }
    let scale = lac.k_sensitivity * lac.desired_power[t];
    let x = scale * (lac.u_max[t] / (scale * lambda)).ln();
    Ok(clamp(x, lac.min_power[t], lac.max_power[t]))
}

/// Generation cost over one slot, €cent. `c` in kW, `slot_hours` = Δt.
pub fn production_cost<T: Scalar>(
    generator: &GeneratorSpec<T>,
    c: T,
    t: usize,
    slot_hours: T,
) -> Result<T, AgentError> {
    let (lo, hi) = Agent::from(generator).net_box(t);
    if !(c >= lo && c <= hi) {
        return Err(AgentError::OutOfBox {
            value: c.to_f64_lossy(),
            lo: lo.to_f64_lossy(),
            hi: hi.to_f64_lossy(),
        });
    }
    Ok(match generator {
        GeneratorSpec::Tpp(g) => slot_hours * (g.alpha_per_kw() * c * c + g.beta * c) + g.gamma,
        GeneratorSpec::Pv(_) => T::zero(),
        GeneratorSpec::Grid(g) => slot_hours * g.tariff[t] * c,
    })
}

/// Strictly positive proximal weight, €cent/kWh per kW.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Penalty<T>(T);

impl<T: Scalar> Penalty<T> {
    pub fn new(rho: T) -> Result<Self, AgentError> {
        if rho.is_finite() && rho > T::zero() {
            Ok(Penalty(rho))
        } else {
            Err(AgentError::Domain(format!(
                "penalty must be finite and > 0, got {rho}"
            )))
        }
    }

    pub fn get(self) -> T {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BestResponseInput<T> {
    /// Broadcast price, €cent/kWh.
    pub lambda: T,
    pub rho: Penalty<T>,
    /// Proximal anchor `p_i^k - p̄^k`, kW (signed net injection).
    pub anchor: T,
    pub slot: usize,
}

/// Surplus rate `f_i(p)` in €cent/h at net injection `p`, excluding any fixed
/// cost term.
pub fn surplus_rate<T: Scalar>(agent: Agent<'_, T>, t: usize, p: T) -> T {
    match agent {
        Agent::Lac(l) => {
            let scale = l.k_sensitivity * l.desired_power[t];
            l.u_max[t] * (T::one() - (p / scale).exp())
        }
        Agent::Tpp(g) => -(g.alpha_per_kw() * p * p + g.beta * p),
        Agent::Pv(_) => T::zero(),
        Agent::Grid(g) => -g.tariff[t] * p,
    }
}

/// `f_i'(p)`, the negative marginal cost (or marginal utility, with the sign of
/// the injection convention).
pub fn marginal_surplus<T: Scalar>(agent: Agent<'_, T>, t: usize, p: T) -> T {
    match agent {
        Agent::Lac(l) => -lac_marginal_utility(-p, l.u_max[t], l.k_sensitivity, l.desired_power[t]),
        Agent::Tpp(g) => -g.marginal_cost(p),
        Agent::Pv(_) => T::zero(),
        Agent::Grid(g) => -g.tariff[t],
    }
}

fn slots_of<T>(agent: Agent<'_, T>) -> usize {
    match agent {
        Agent::Lac(l) => l.desired_power.len(),
        Agent::Tpp(g) => g.min_gen.len(),
        Agent::Pv(g) => g.availability.len(),
        Agent::Grid(g) => g.tariff.len(),
    }
}

/// Maximizer over the agent's box of `f_i(p) + λ p - (ρ/2)(p - anchor)^2`.
pub fn best_response<T: Scalar>(
    agent: Agent<'_, T>,
    input: BestResponseInput<T>,
) -> Result<NetPower<T>, AgentError> {
    let t = input.slot;
    let slots = slots_of(agent);
    if t >= slots {
        return Err(AgentError::SlotOutOfRange { slot: t, slots });
    }
    let lambda = input.lambda;
    let rho = input.rho.get();
    let v = input.anchor;
    let (lo, hi) = agent.net_box(t);
    let p = match agent {
        Agent::Tpp(g) => {
            let a = g.alpha_per_kw();
            let c = (lambda - g.beta + rho * v) / (T::lit(2.0) * a + rho);
            clamp(c, lo, hi)
        }
        Agent::Pv(_) => clamp(v + lambda / rho, lo, hi),
        Agent::Grid(g) => clamp(v + (lambda - g.tariff[t]) / rho, lo, hi),
        Agent::Lac(l) => -lac_penalized_consumption(l, t, lambda, rho, -v)?,
    };
    Ok(NetPower(p))
}

/// Solves `U'(x) - λ - ρ (x - x_anchor) = 0` on `[m, M]` by Newton steps
/// safeguarded with a shrinking bracket. The left side is strictly
/// decreasing in `x`, so the root is unique or the optimum sits on a bound.
fn lac_penalized_consumption<T: Scalar>(
    lac: &LacSpec<T>,
    t: usize,
    lambda: T,
    rho: T,
    x_anchor: T,
) -> Result<T, AgentError> {
    let (m, big_m) = (lac.min_power[t], lac.max_power[t]);
    let (u_max, k, x_pr) = (lac.u_max[t], lac.k_sensitivity, lac.desired_power[t]);
    let scale = k * x_pr;
    let g = |x: T| lac_marginal_utility(x, u_max, k, x_pr) - lambda - rho * (x - x_anchor);

    if big_m <= m {
        return Ok(m);
    }
    if g(m) <= T::zero() {
        return Ok(m);
    }
    if g(big_m) >= T::zero() {
        return Ok(big_m);
    }

    let tol = T::lit(1e-10).max(T::lit(4.0) * T::epsilon()) * T::one().max(big_m);
    let (mut lo, mut hi) = (m, big_m);
    let mut x = clamp(x_anchor, lo, hi);
    for _ in 0..LAC_MAX_ITERATIONS {
        let gx = g(x);
        if gx == T::zero() {
            return Ok(x);
        }
        if gx > T::zero() {
            lo = x;
        } else {
            hi = x;
        }
        let slope = -lac_marginal_utility(x, u_max, k, x_pr) / scale - rho;
        let newton = x - gx / slope;
        if newton > lo && newton < hi {
            // Quadratic convergence: a step below tolerance leaves an error far below it.
            if (newton - x).abs() < tol {
                return Ok(newton);
            }
            x = newton;
        } else {
            x = lo + (hi - lo) / T::lit(2.0);
            if hi - lo < T::lit(4.0) * T::epsilon() * T::one().max(big_m) {
                return Ok(x);
            }
        }
    }
    Err(AgentError::NonConvergence(LAC_MAX_ITERATIONS))
}
