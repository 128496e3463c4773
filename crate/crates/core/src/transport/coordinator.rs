use std::collections::HashMap;
use std::time::{Duration, Instant};

use super::{codes, Link, Message, TransportError};
use crate::admm::{AdmmError, HorizonResult, SlotSolver, StepOutcome};
use crate::model::{AgentKind, Scenario, SolverOptions};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoordinatorConfig {
    /// Time allowed for every agent to connect and register.
    pub registration_timeout: Duration,
    /// Time allowed for one agent to answer one broadcast.
    pub reply_timeout: Duration,
}

impl Default for CoordinatorConfig {
    fn default() -> Self {
        Self {
            registration_timeout: Duration::from_secs(10),
            reply_timeout: Duration::from_secs(30),
        }
    }
}

struct Peer {
    id: String,
    link: Box<dyn Link>,
}

fn violation(agent: &str, detail: impl Into<String>) -> TransportError {
    TransportError::ProtocolViolation {
        agent: agent.to_string(),
        detail: detail.into(),
    }
}

/// Waits for one `REG` per link and returns the links in coordinator agent
/// order.
fn register(
    links: Vec<Box<dyn Link>>,
    scenario: &Scenario<f64>,
    timeout: Duration,
) -> Result<Vec<Peer>, TransportError> {
    let expected: HashMap<String, AgentKind> = scenario
        .agents()
        .map(|a| (a.id().to_string(), a.kind()))
        .collect();
    let deadline = Instant::now() + timeout;
    let mut seen: HashMap<String, Box<dyn Link>> = HashMap::new();
    for mut link in links {
        let left = deadline.saturating_duration_since(Instant::now());
        let msg = match link.recv(Some(left)) {
            Ok(m) => m,
            Err(TransportError::Timeout(_) | TransportError::Disconnected { .. }) => {
                let mut missing: Vec<String> = expected
                    .keys()
                    .filter(|id| !seen.contains_key(*id))
                    .cloned()
                    .collect();
                missing.sort();
                return Err(TransportError::RegistrationTimeout { missing });
            }
            Err(e) => return Err(e),
        };
        let Message::Register {
            agent_id,
            agent_kind,
        } = msg
        else {
            return Err(violation(
                "unregistered peer",
                format!("expected REG, got {msg:?}"),
            ));
        };
        let reject = |link: &mut Box<dyn Link>, detail: String| {
            let _ = link.send(&Message::Error {
                code: codes::PROTOCOL,
                detail: detail.clone(),
            });
            violation(&agent_id, detail)
        };
        match expected.get(&agent_id) {
            None => return Err(reject(&mut link, "unknown agent id".into())),
            Some(&k) if k != agent_kind => {
                return Err(reject(
                    &mut link,
                    format!("registered as {agent_kind}, scenario says {k}"),
                ))
            }
            Some(_) if seen.contains_key(&agent_id) => {
                return Err(reject(&mut link, "duplicate registration".into()))
            }
            Some(_) => {
                seen.insert(agent_id, link);
            }
        }
    }
    let mut peers = Vec::with_capacity(expected.len());
    let mut missing = Vec::new();
    for id in scenario.agent_ids() {
        match seen.remove(&id) {
            Some(link) => peers.push(Peer { id, link }),
            None => missing.push(id),
        }
    }
    if !missing.is_empty() {
        return Err(TransportError::RegistrationTimeout { missing });
    }
    Ok(peers)
}

fn collect_primal(
    peer: &mut Peer,
    slot: usize,
    iter: usize,
    timeout: Duration,
) -> Result<f64, TransportError> {
    let msg = peer.link.recv(Some(timeout)).map_err(|e| match e {
        TransportError::Disconnected { .. } => TransportError::Disconnected {
            agent: Some(peer.id.clone()),
            slot: Some(slot),
        },
        TransportError::Timeout(_) => {
            TransportError::Timeout(format!("`{}` in slot {slot}, iteration {iter}", peer.id))
        }
        TransportError::Wire(w) => violation(&peer.id, w.to_string()),
        other => other,
    })?;
    match msg {
        Message::Primal {
            agent_id,
            slot: s,
            iter: k,
            power,
        } => {
            if agent_id != peer.id {
                Err(violation(&peer.id, format!("PRIM carries id `{agent_id}`")))
            } else if s != slot || k != iter {
                Err(violation(
                    &peer.id,
                    format!(
                        "PRIM for slot {s} iteration {k}, expected slot {slot} iteration {iter}"
                    ),
                ))
            } else {
                Ok(power)
            }
        }
        Message::Error { code, detail } => Err(TransportError::Reported {
            agent: peer.id.clone(),
            code,
            detail,
        }),
        other => Err(violation(&peer.id, format!("expected PRIM, got {other:?}"))),
    }
}

/// Registers every agent of `scenario` over `links` (one link per agent, in
/// any order), then clears the slots one after another. Numerically the
/// outcome is identical to [`crate::admm::solve_horizon`].
pub fn run_coordinator(
    links: Vec<Box<dyn Link>>,
    scenario: &Scenario<f64>,
    options: &SolverOptions<f64>,
    config: &CoordinatorConfig,
) -> Result<HorizonResult<f64>, TransportError> {
    options.validate().map_err(AdmmError::from)?;
    let mut peers = register(links, scenario, config.registration_timeout)?;
    let mut slots = Vec::with_capacity(scenario.slot_count());
    for t in 0..scenario.slot_count() {
        let mut solver = SlotSolver::new(scenario, t, options)?;
        loop {
            let state = solver.state();
            let broadcast = Message::Iterate {
                slot: t,
                iter: state.iter,
                lambda: state.lambda,
                rho: state.rho,
                mean_power: state.mean_power,
            };
            for peer in peers.iter_mut() {
                peer.link.send(&broadcast).map_err(|e| match e {
                    TransportError::Disconnected { .. } => TransportError::Disconnected {
                        agent: Some(peer.id.clone()),
                        slot: Some(t),
                    },
                    other => other,
                })?;
            }
            let iter = state.iter;
            let powers = peers
                .iter_mut()
                .map(|p| collect_primal(p, t, iter, config.reply_timeout))
                .collect::<Result<Vec<_>, _>>()?;
            if solver.absorb(powers)? != StepOutcome::Continue {
                break;
            }
        }
        let result = solver.into_result();
        let done = Message::Done {
            slot: t,
            clearing_price: result.clearing_price,
            converged: result.converged,
        };
        for peer in peers.iter_mut() {
            peer.link.send(&done)?;
        }
        slots.push(result);
    }
    Ok(HorizonResult::from_slots(scenario, slots))
}
