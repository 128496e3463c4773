use std::collections::BTreeMap;

use super::{codes, encode_message, Link, Message, TransportError};
use crate::agents::{best_response, BestResponseInput, Penalty};
use crate::model::AgentSpec;

/// What one agent did during a session.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AgentSummary {
    pub agent_id: String,
    /// Slots for which `DONE` arrived.
    pub slots_completed: usize,
    /// Number of `PRIM` messages sent, per slot.
    pub primal_messages: BTreeMap<usize, usize>,
    /// Every line this agent sent, without the newline.
    pub transcript: Vec<String>,
}

struct Outbox<'l> {
    link: &'l mut dyn Link,
    summary: AgentSummary,
}

impl Outbox<'_> {
    fn send(&mut self, m: Message) -> Result<(), TransportError> {
        let line = encode_message(&m)?;
        self.link.send(&m)?;
        self.summary
            .transcript
            .push(String::from_utf8_lossy(&line[..line.len() - 1]).into_owned());
        Ok(())
    }

    fn fail(&mut self, code: u32, err: TransportError) -> TransportError {
        let _ = self.send(Message::Error {
            code,
            detail: err.to_string(),
        });
        err
    }
}

fn violation(id: &str, detail: String) -> TransportError {
    TransportError::ProtocolViolation {
        agent: format!("coordinator (seen by `{id}`)"),
        detail,
    }
}

/// Serves one agent until the coordinator closes the link after a completed
/// slot. The agent remembers its own last response; the proximal anchor is
/// that response minus the broadcast mean.
pub fn run_agent(
    link: &mut dyn Link,
    spec: &AgentSpec<f64>,
) -> Result<AgentSummary, TransportError> {
    let agent = spec.view();
    let id = agent.id().to_string();
    let mut out = Outbox {
        link,
        summary: AgentSummary {
            agent_id: id.clone(),
            ..AgentSummary::default()
        },
    };
    out.send(Message::Register {
        agent_id: id.clone(),
        agent_kind: agent.kind(),
    })?;
    // (slot, iteration expected next, previous power)
    let mut current: Option<(usize, usize, f64)> = None;
    loop {
        let msg = match out.link.recv(None) {
            Ok(m) => m,
            Err(TransportError::Disconnected { .. }) => {
                return match current {
                    None => Ok(out.summary),
                    Some((slot, _, _)) => Err(TransportError::Disconnected {
                        agent: Some(id),
                        slot: Some(slot),
                    }),
                };
            }
            Err(TransportError::Wire(w)) => {
                return Err(out.fail(codes::PROTOCOL, violation(&id, w.to_string())))
            }
            Err(e) => return Err(e),
        };
        match msg {
            Message::Iterate {
                slot,
                iter,
                lambda,
                rho,
                mean_power,
            } => {
                let prev = match current {
                    _ if iter == 0 => 0.0,
                    Some((s, k, p)) if s == slot && k == iter => p,
                    _ => {
                        let detail = format!("out-of-sequence ITER slot {slot} iteration {iter}");
                        return Err(out.fail(codes::PROTOCOL, violation(&id, detail)));
                    }
                };
                let rho = match Penalty::new(rho) {
                    Ok(r) => r,
                    Err(e) => return Err(out.fail(codes::BAD_PENALTY, e.into())),
                };
                let input = BestResponseInput {
                    lambda,
                    rho,
                    anchor: prev - mean_power,
                    slot,
                };
                let power = match best_response(agent, input) {
                    Ok(p) => p.kw(),
                    Err(e) => return Err(out.fail(codes::LOCAL_SOLVE, e.into())),
                };
                out.send(Message::Primal {
                    agent_id: id.clone(),
                    slot,
                    iter,
                    power,
                })?;
                *out.summary.primal_messages.entry(slot).or_default() += 1;
                current = Some((slot, iter + 1, power));
            }
            Message::Done { slot, .. } => {
                if current.is_some_and(|(s, _, _)| s != slot) {
                    let detail = format!("DONE for slot {slot} while another slot is open");
                    return Err(out.fail(codes::PROTOCOL, violation(&id, detail)));
                }
                out.summary.slots_completed += 1;
                current = None;
            }
            Message::Error { code, detail } => {
                return Err(TransportError::Reported {
                    agent: "coordinator".into(),
                    code,
                    detail,
                })
            }
            other => {
                let detail = format!("unexpected {other:?}");
                return Err(out.fail(codes::PROTOCOL, violation(&id, detail)));
            }
        }
    }
}
