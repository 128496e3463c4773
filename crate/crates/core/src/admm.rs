//! Exchange ADMM coordinator: per-slot price iteration, residuals, stopping
//! test, residual-balancing penalty update and the horizon driver.
//!
//! One iteration of slot `t`, with `N` agents:
//!
//! ```text
//! p_i^{k+1} = best_response_i(λ^k, ρ^k, anchor = p_i^k - p̄^k)
//! p̄^{k+1}   = (1/N) Σ_i p_i^{k+1}
//! λ^{k+1}   = λ^k - ρ^k p̄^{k+1}          (excess injection lowers the price)
//! ‖r‖       = √N |p̄^{k+1}|
//! ‖s‖       = ρ^k ‖(p_i^{k+1} - p_i^k) - (p̄^{k+1} - p̄^k)‖
//! ```
//!
//! The loop stops once `‖r‖ < ε_pri` and `‖s‖ < ε_dual`; otherwise ρ is doubled
//! or halved when one residual dominates the other by a factor of ten.
//!
//! The coordinator state machine ([`SlotSolver`]) is shared by the in-process
//! driver here and the message-passing coordinator in [`crate::transport`], so
//! both produce bitwise identical iterates.

use rayon::prelude::*;
use thiserror::Error;

use crate::agents::{best_response, AgentError, BestResponseInput, Penalty};
use crate::model::{validate_feasibility, Agent, ModelError, Scenario, SolverOptions};
use crate::scalar::{ordered_sum, Scalar};

#[derive(Debug, Error)]
pub enum AdmmError {
    #[error("slot {slot} is infeasible or out of range")]
    Infeasible { slot: usize },
    #[error("invalid solver options: {0}")]
    Options(#[from] ModelError),
    #[error("agent `{agent}` failed in slot {slot}: {source}")]
    Agent {
        agent: String,
        slot: usize,
        #[source]
        source: AgentError,
    },
    #[error("expected {expected} agent powers, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("{} slot(s) failed: {}", .0.len(), describe_failures(.0))]
    Horizon(Vec<(usize, AdmmError)>),
}

fn describe_failures(failures: &[(usize, AdmmError)]) -> String {
    failures
        .iter()
        .map(|(t, e)| format!("slot {t}: {e}"))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Coordinator state after `iter` completed iterations of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationState<T> {
    pub iter: usize,
    /// Price broadcast for the next iteration, €cent/kWh.
    pub lambda: T,
    /// Penalty for the next iteration, €cent/kWh per kW.
    pub rho: T,
    /// Net injections `p_i`, kW, in coordinator agent order.
    pub powers: Vec<T>,
    pub mean_power: T,
    pub primal_residual_norm: T,
    pub dual_residual_norm: T,
}

impl<T: Scalar> IterationState<T> {
    pub fn initial(n_agents: usize, lambda: T, rho: T) -> Self {
        Self {
            iter: 0,
            lambda,
            rho,
            powers: vec![T::zero(); n_agents],
            mean_power: T::zero(),
            primal_residual_norm: T::zero(),
            dual_residual_norm: T::zero(),
        }
    }
}

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceEntry<T> {
    /// Number of completed iterations, starting at 1.
    pub iter: usize,
    /// Price after this iteration's dual update.
    pub lambda: T,
    /// Penalty used during this iteration.
    pub rho: T,
    pub primal_norm: T,
    pub dual_norm: T,
    pub eps_pri: T,
    pub eps_dual: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlotResult<T> {
    pub slot: usize,
    pub clearing_price: T,
    /// Net injection per agent, kW.
    pub allocation: Vec<T>,
    pub iterations: usize,
    pub converged: bool,
    pub primal_residual: T,
    pub dual_residual: T,
    pub eps_pri: T,
    pub eps_dual: T,
    pub trace: Vec<TraceEntry<T>>,
}

impl<T: Scalar> SlotResult<T> {
    /// `Σ_i p_i`, i.e. generation minus consumption, kW.
    pub fn imbalance(&self) -> T {
        ordered_sum(&self.allocation)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonResult<T> {
    pub agent_ids: Vec<String>,
    pub slots: Vec<SlotResult<T>>,
    /// `[lac][slot]` consumption, kW (positive).
    pub lac_consumption: Vec<Vec<T>>,
    /// `[generator][slot]` injection, kW.
    pub generator_injection: Vec<Vec<T>>,
}

impl<T: Scalar> HorizonResult<T> {
    pub fn from_slots(scenario: &Scenario<T>, slots: Vec<SlotResult<T>>) -> Self {
        let n_lacs = scenario.lacs.len();
        let lac_consumption = (0..n_lacs)
            .map(|i| slots.iter().map(|s| -s.allocation[i]).collect())
            .collect();
        let generator_injection = (0..scenario.generators.len())
            .map(|g| slots.iter().map(|s| s.allocation[n_lacs + g]).collect())
            .collect();
        Self {
            agent_ids: scenario.agent_ids(),
            slots,
            lac_consumption,
            generator_injection,
        }
    }

    pub fn all_converged(&self) -> bool {
        self.slots.iter().all(|s| s.converged)
    }
}

/// Norms of the primal residual `√N |p̄'|` and the dual residual
/// `ρ ‖Δp - Δp̄‖` between `prev` and the new iterate.
pub fn compute_residuals<T: Scalar>(
    prev: &IterationState<T>,
    next_powers: &[T],
    next_mean: T,
) -> Result<(T, T), AdmmError> {
    let n = prev.powers.len();
    if next_powers.len() != n {
        return Err(AdmmError::DimensionMismatch {
            expected: n,
            got: next_powers.len(),
        });
    }
    let sqrt_n = T::lit(n as f64).sqrt();
    let primal = sqrt_n * next_mean.abs();
    let d_mean = next_mean - prev.mean_power;
    let sq = prev
        .powers
        .iter()
        .zip(next_powers)
        .fold(T::zero(), |acc, (&old, &new)| {
            let d = (new - old) - d_mean;
            acc + d * d
        });
    Ok((primal, prev.rho * sq.sqrt()))
}

/// `ε_pri = √N ε_abs + ε_rel max_i |p_i|` and
/// `ε_dual = √N ε_abs + ε_rel N |λ|` (the N multipliers are equal).
pub fn stopping_thresholds<T: Scalar>(
    n_agents: usize,
    powers: &[T],
    lambda: T,
    options: &SolverOptions<T>,
) -> (T, T) {
    let n = T::lit(n_agents as f64);
    let base = n.sqrt() * options.eps_abs;
    let max_power = powers.iter().fold(T::zero(), |m, p| m.max(p.abs()));
    (
        base + options.eps_rel * max_power,
        base + options.eps_rel * n * lambda.abs(),
    )
}

/// Residual balancing: double ρ when the primal residual dominates by more
/// than 10x, halve it when the dual residual does.
pub fn update_rho<T: Scalar>(rho: T, primal_norm: T, dual_norm: T) -> T {
    let ten = T::lit(10.0);
    if primal_norm > ten * dual_norm {
        rho * T::lit(2.0)
    } else if primal_norm < dual_norm / ten {
        rho / T::lit(2.0)
    } else {
        rho
    }
}

/// Price the iteration starts from: the grid tariff when there is a grid,
/// otherwise the mean forecast price of the consumers.
pub fn initial_price<T: Scalar>(scenario: &Scenario<T>, t: usize) -> T {
    if let Some(g) = scenario.grids().next() {
        return g.tariff[t];
    }
    let sum = scenario
        .lacs
        .iter()
        .fold(T::zero(), |acc, l| acc + l.forecast_price[t]);
    sum / T::lit(scenario.lacs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Continue,
    Converged,
    Exhausted,
}

/// Coordinator side of one slot: owns λ, ρ and the last iterate, and turns a
/// vector of agent responses into the next broadcast.
#[derive(Debug, Clone)]
pub struct SlotSolver<T> {
    slot: usize,
    options: SolverOptions<T>,
    state: IterationState<T>,
    trace: Vec<TraceEntry<T>>,
    eps: (T, T),
    finished: Option<StepOutcome>,
}

impl<T: Scalar> SlotSolver<T> {
    pub fn new(
        scenario: &Scenario<T>,
        t: usize,
        options: &SolverOptions<T>,
    ) -> Result<Self, AdmmError> {
        options.validate()?;
        if !validate_feasibility(scenario, t) {
            return Err(AdmmError::Infeasible { slot: t });
        }
        let state = IterationState::initial(
            scenario.n_agents(),
            initial_price(scenario, t),
            options.rho_initial_per_kw(),
        );
        Ok(Self {
            slot: t,
            options: options.clone(),
            state,
            trace: Vec::new(),
            eps: (T::zero(), T::zero()),
            finished: None,
        })
    }

    pub fn slot(&self) -> usize {
        self.slot
    }

    pub fn state(&self) -> &IterationState<T> {
        &self.state
    }

    pub fn penalty(&self) -> Penalty<T> {
        Penalty::new(self.state.rho).expect("penalty stays positive under doubling/halving")
    }

    /// Proximal anchor of agent `i` for the next best response.
    pub fn anchor(&self, i: usize) -> T {
        self.state.powers[i] - self.state.mean_power
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    /// Consumes the agents' responses to the current broadcast.
    pub fn absorb(&mut self, powers: Vec<T>) -> Result<StepOutcome, AdmmError> {
        if let Some(done) = self.finished {
            return Ok(done);
        }
        let n = self.state.powers.len();
        if powers.len() != n {
            return Err(AdmmError::DimensionMismatch {
                expected: n,
                got: powers.len(),
            });
        }
        let mean = ordered_sum(&powers) / T::lit(n as f64);
        let (primal, dual) = compute_residuals(&self.state, &powers, mean)?;
        let rho = self.state.rho;
        let lambda = self.state.lambda - rho * mean;
        let (eps_pri, eps_dual) = stopping_thresholds(n, &powers, lambda, &self.options);
        let iter = self.state.iter + 1;
        self.trace.push(TraceEntry {
            iter,
            lambda,
            rho,
            primal_norm: primal,
            dual_norm: dual,
            eps_pri,
            eps_dual,
        });
        let converged = primal < eps_pri && dual < eps_dual;
        let next_rho = if converged {
            rho
        } else {
            update_rho(rho, primal, dual)
        };
        self.state = IterationState {
            iter,
            lambda,
            rho: next_rho,
            powers,
            mean_power: mean,
            primal_residual_norm: primal,
            dual_residual_norm: dual,
        };
        self.eps = (eps_pri, eps_dual);
        let outcome = if converged {
            StepOutcome::Converged
        } else if iter >= self.options.max_iterations {
            StepOutcome::Exhausted
        } else {
            StepOutcome::Continue
        };
        if outcome != StepOutcome::Continue {
            self.finished = Some(outcome);
        }
        Ok(outcome)
    }

    pub fn into_result(self) -> SlotResult<T> {
        SlotResult {
            slot: self.slot,
            clearing_price: self.state.lambda,
            allocation: self.state.powers,
            iterations: self.state.iter,
            converged: self.finished == Some(StepOutcome::Converged),
            primal_residual: self.state.primal_residual_norm,
            dual_residual: self.state.dual_residual_norm,
            eps_pri: self.eps.0,
            eps_dual: self.eps.1,
            trace: self.trace,
        }
    }
}

/// Runs the exchange iteration for slot `t` with direct calls to every
/// agent's best response. Running out of iterations is reported through
/// `converged = false`, not as an error.
pub fn solve_slot<T: Scalar>(
    scenario: &Scenario<T>,
    t: usize,
    options: &SolverOptions<T>,
) -> Result<SlotResult<T>, AdmmError> {
    let agents: Vec<Agent<'_, T>> = scenario.agents().collect();
    let mut solver = SlotSolver::new(scenario, t, options)?;
    loop {
        let lambda = solver.state().lambda;
        let rho = solver.penalty();
        let powers = agents
            .iter()
            .enumerate()
            .map(|(i, agent)| {
                let input = BestResponseInput {
                    lambda,
                    rho,
                    anchor: solver.anchor(i),
                    slot: t,
                };
                best_response(*agent, input)
                    .map(|p| p.kw())
                    .map_err(|source| AdmmError::Agent {
                        agent: agent.id().to_string(),
                        slot: t,
                        source,
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if solver.absorb(powers)? != StepOutcome::Continue {
            break;
        }
    }
    Ok(solver.into_result())
}

/// Solves every slot independently (in parallel); the result does not depend
/// on evaluation order.
pub fn solve_horizon<T: Scalar>(
    scenario: &Scenario<T>,
    options: &SolverOptions<T>,
) -> Result<HorizonResult<T>, AdmmError> {
    options.validate()?;
    let outcomes: Vec<Result<SlotResult<T>, AdmmError>> = (0..scenario.slot_count())
        .into_par_iter()
        .map(|t| solve_slot(scenario, t, options))
        .collect();
    let mut slots = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (t, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(r) => slots.push(r),
            Err(e) => failures.push((t, e)),
        }
    }
    if !failures.is_empty() {
        return Err(AdmmError::Horizon(failures));
    }
    Ok(HorizonResult::from_slots(scenario, slots))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::calibrate_umax;
    use crate::model::{GeneratorSpec, GridSpec, LacSpec, TimeGrid};

    fn state(powers: Vec<f64>, rho: f64) -> IterationState<f64> {
        let mean = powers.iter().sum::<f64>() / powers.len() as f64;
        IterationState {
            iter: 1,
            lambda: 10.0,
            rho,
            powers,
            mean_power: mean,
            primal_residual_norm: 0.0,
            dual_residual_norm: 0.0,
        }
    }

    #[test]
    fn residual_examples() {
        let prev = state(vec![0.0, 0.0], 1.0);
        let (r, _) = compute_residuals(&prev, &[3.0, -3.0], 0.0).unwrap();
        assert_eq!(r, 0.0);
        let still = state(vec![4.0, -1.0, 2.0], 0.7);
        let (_, s) = compute_residuals(&still, &[4.0, -1.0, 2.0], still.mean_power).unwrap();
        assert_eq!(s, 0.0);
        let (r, s) = compute_residuals(&prev, &[3.0, -1.0], 1.0).unwrap();
        assert!((r - 2f64.sqrt()).abs() <= 1e-12);
        // Δp - Δp̄ = (2, -2), ρ = 1.
        assert!((s - 8f64.sqrt()).abs() <= 1e-12);
        assert!(compute_residuals(&prev, &[1.0], 1.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        let opts = SolverOptions {
            rho_initial: 1.0,
            eps_abs: 1e-4,
            eps_rel: 1e-5,
            max_iterations: 10,
        };
        let (pri, _) = stopping_thresholds(2, &[1.0, -0.5], 3.0, &opts);
        assert!((pri - (2f64.sqrt() * 1e-4 + 1e-5)).abs() <= 1e-12);
        assert!((pri - 1.5142e-4).abs() <= 1e-8);
        let zero_rel = SolverOptions {
            eps_rel: 0.0,
            ..opts.clone()
        };
        let (a, b) = stopping_thresholds(5, &[10.0, -3.0], 12.0, &zero_rel);
        assert_eq!(a, 5f64.sqrt() * 1e-4);
        assert_eq!(b, 5f64.sqrt() * 1e-4);
        let (_, dual) = stopping_thresholds(4, &[1.0], 0.0, &opts);
        assert_eq!(dual, 2.0 * 1e-4);
        let (_, dual) = stopping_thresholds(4, &[1.0], -2.0, &opts);
        assert!((dual - (2e-4 + 1e-5 * 4.0 * 2.0)).abs() <= 1e-15);
    }

    #[test]
    fn rho_update_branches() {
        assert_eq!(update_rho(1.0, 1.0, 0.05), 2.0);
        assert_eq!(update_rho(1.0, 0.01, 1.0), 0.5);
        assert_eq!(update_rho(1.0, 0.3, 0.3), 1.0);
        // Boundaries are strict.
        assert_eq!(update_rho(1.0, 1.0, 0.1), 1.0);
        assert_eq!(update_rho(1.0, 0.1, 1.0), 1.0);
        assert_eq!(update_rho(1.0, 0.0, 0.0), 1.0);
    }

    fn lac_grid(x_pr: f64, kappa: f64) -> Scenario<f64> {
        Scenario {
            time_grid: TimeGrid {
                slot_count: 1,
                slot_duration_hours: 1.0,
            },
            lacs: vec![LacSpec {
                id: "lac".into(),
                desired_power: vec![x_pr],
                min_power: vec![0.0],
                max_power: vec![200.0],
                k_sensitivity: 0.217,
                forecast_price: vec![kappa],
                u_max: vec![calibrate_umax(kappa, 0.217, x_pr)],
            }],
            generators: vec![GeneratorSpec::Grid(GridSpec {
                id: "grid".into(),
                tariff: vec![kappa],
                max_draw: vec![2000.0],
            })],
            solver: SolverOptions::default(),
        }
    }

    #[test]
    fn two_agent_slot_clears_at_tariff() {
        let s = lac_grid(120.0, 9.87);
        let r = solve_slot(&s, 0, &s.solver).unwrap();
        assert!(r.converged);
        assert!(
            (r.clearing_price - 9.87).abs() <= 1e-3,
            "{}",
            r.clearing_price
        );
        assert!((r.allocation[0] + 120.0).abs() <= 1e-2);
        assert!(r.imbalance().abs() <= r.eps_pri);
        assert_eq!(r.iterations, r.trace.len());
    }

    #[test]
    fn exhausted_slot_is_reported_not_raised() {
        let s = lac_grid(120.0, 9.87);
        let opts = SolverOptions {
            max_iterations: 1,
            eps_abs: 1e-12,
            eps_rel: 1e-12,
            ..s.solver.clone()
        };
        let r = solve_slot(&s, 0, &opts).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }

    #[test]
    fn infeasible_or_out_of_range_slot_errors() {
        let s = lac_grid(120.0, 9.87);
        assert!(matches!(
            solve_slot(&s, 3, &s.solver),
            Err(AdmmError::Infeasible { slot: 3 })
        ));
    }

    #[test]
    fn absorb_rejects_wrong_width() {
        let s = lac_grid(120.0, 9.87);
        let mut solver = SlotSolver::new(&s, 0, &s.solver).unwrap();
        assert!(solver.absorb(vec![1.0]).is_err());
    }

    #[test]
    fn penalty_ratio_is_a_power_of_two_step() {
        let s = lac_grid(150.0, 18.21);
        let r = solve_slot(&s, 0, &s.solver).unwrap();
        for w in r.trace.windows(2) {
            let ratio = w[1].rho / w[0].rho;
            assert!(ratio == 0.5 || ratio == 1.0 || ratio == 2.0, "{ratio}");
        }
    }
}
