use std::net::SocketAddr;
use std::thread;
use std::time::Duration;

use mla_market::admm::solve_horizon;
use mla_market::model::{AgentKind, SolverOptions};
use mla_market::synthetic::{reference_scenario, DEFAULT_SEED};
use mla_market::transport::{
    channel_pair, codes, run_agent, run_coordinator, run_in_process, run_tcp_session, ChannelLink,
    CoordinatorConfig, Link, Message, TransportError,
};
use mla_market::Scenario;

fn small_scenario() -> Scenario {
    let mut s = reference_scenario(DEFAULT_SEED);
    s.time_grid.slot_count = 3;
    for l in &mut s.lacs {
        for v in [
            &mut l.desired_power,
            &mut l.min_power,
            &mut l.max_power,
            &mut l.forecast_price,
            &mut l.u_max,
        ] {
            v.truncate(3);
        }
    }
    s.lacs.truncate(4);
    s.generators.retain(|g| g.id() == "grid");
    if let mla_market::model::GeneratorSpec::Grid(g) = &mut s.generators[0] {
        g.tariff.truncate(3);
        g.max_draw.truncate(3);
    }
    s.validate().unwrap();
    s
}

fn quick() -> CoordinatorConfig {
    CoordinatorConfig {
        registration_timeout: Duration::from_millis(300),
        reply_timeout: Duration::from_millis(300),
    }
}

#[test]
fn in_process_matches_direct_solver_bitwise() {
    let s = reference_scenario(DEFAULT_SEED);
    let opts = SolverOptions::default();
    let direct = solve_horizon(&s, &opts).unwrap();
    let (via_links, summaries) = run_in_process(&s, &opts, &CoordinatorConfig::default()).unwrap();
    assert_eq!(direct, via_links);
    for summary in &summaries {
        assert_eq!(summary.slots_completed, s.slot_count());
        for slot in &direct.slots {
            assert_eq!(summary.primal_messages[&slot.slot], slot.iterations);
        }
    }
}

#[test]
fn tcp_matches_in_process() {
    let s = small_scenario();
    let opts = SolverOptions::default();
    let (a, _) = run_in_process(&s, &opts, &CoordinatorConfig::default()).unwrap();
    let addr: SocketAddr = "127.0.0.1:0".parse().unwrap();
    let (b, _) = run_tcp_session(addr, &s, &opts, &CoordinatorConfig::default()).unwrap();
    assert_eq!(a, b);
}

#[test]
fn agent_transcript_holds_only_its_own_data() {
    let s = small_scenario();
    let (_, summaries) =
        run_in_process(&s, &SolverOptions::default(), &CoordinatorConfig::default()).unwrap();
    let ids = s.agent_ids();
    for summary in &summaries {
        for line in &summary.transcript {
            for other in ids.iter().filter(|id| **id != summary.agent_id) {
                assert!(!line.contains(&format!("id={other} ")), "{line}");
            }
            assert!(
                !line.contains("u_max") && !line.contains("desired") && !line.contains("alpha")
            );
        }
        let prims = summary
            .transcript
            .iter()
            .filter(|l| l.starts_with("PRIM "))
            .count();
        assert_eq!(prims, summary.primal_messages.values().sum::<usize>());
    }
}

/// Runs the coordinator with the given links in a thread.
fn coordinator(
    links: Vec<ChannelLink>,
    s: &Scenario,
) -> thread::JoinHandle<Result<mla_market::HorizonResult, TransportError>> {
    let s = s.clone();
    thread::spawn(move || {
        let links = links
            .into_iter()
            .map(|l| Box::new(l) as Box<dyn Link>)
            .collect();
        run_coordinator(links, &s, &SolverOptions::default(), &quick())
    })
}

/// Starts honest agents for all but the last agent id; returns the last
/// agent's raw link for scripted misbehaviour.
fn rig(
    s: &Scenario,
) -> (
    thread::JoinHandle<Result<mla_market::HorizonResult, TransportError>>,
    ChannelLink,
    String,
) {
    let ids = s.agent_ids();
    let mut coord_ends = Vec::new();
    let mut rogue = None;
    for (i, id) in ids.iter().enumerate() {
        let (c, mut a) = channel_pair();
        coord_ends.push(c);
        if i + 1 == ids.len() {
            rogue = Some(a);
        } else {
            let spec = s.agent_spec(id).unwrap();
            thread::spawn(move || run_agent(&mut a, &spec));
        }
    }
    (
        coordinator(coord_ends, s),
        rogue.unwrap(),
        ids.last().unwrap().clone(),
    )
}

#[test]
fn missing_registration_times_out_and_names_agent() {
    let s = small_scenario();
    let (handle, _silent, last) = rig(&s);
    match handle.join().unwrap() {
        Err(TransportError::RegistrationTimeout { missing }) => assert_eq!(missing, vec![last]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_kind_is_rejected() {
    let s = small_scenario();
    let (handle, mut rogue, last) = rig(&s);
    rogue
        .send(&Message::Register {
            agent_id: last.clone(),
            agent_kind: AgentKind::Pv,
        })
        .unwrap();
    match handle.join().unwrap() {
        Err(TransportError::ProtocolViolation { agent, .. }) => assert_eq!(agent, last),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_iteration_echo_names_agent() {
    let s = small_scenario();
    let (handle, mut rogue, last) = rig(&s);
    rogue
        .send(&Message::Register {
            agent_id: last.clone(),
            agent_kind: AgentKind::Grid,
        })
        .unwrap();
    let Message::Iterate { slot, iter, .. } = rogue.recv(Some(Duration::from_secs(2))).unwrap()
    else {
        panic!()
    };
    rogue
        .send(&Message::Primal {
            agent_id: last.clone(),
            slot,
            iter: iter + 1,
            power: 0.0,
        })
        .unwrap();
    match handle.join().unwrap() {
        Err(TransportError::ProtocolViolation { agent, detail }) => {
            assert_eq!(agent, last);
            assert!(detail.contains("iteration"), "{detail}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn malformed_and_non_finite_replies_are_violations() {
    for raw in [&b"PRIM id=grid slot=0 iter=0 power=NaN\n"[..], b"garbage\n"] {
        let s = small_scenario();
        let (handle, mut rogue, last) = rig(&s);
        rogue
            .send(&Message::Register {
                agent_id: last.clone(),
                agent_kind: AgentKind::Grid,
            })
            .unwrap();
        rogue.recv(Some(Duration::from_secs(2))).unwrap();
        rogue.send_raw(raw.to_vec()).unwrap();
        match handle.join().unwrap() {
            Err(TransportError::ProtocolViolation { agent, .. }) => assert_eq!(agent, last),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn silent_agent_times_out_mid_slot() {
    let s = small_scenario();
    let (handle, mut rogue, last) = rig(&s);
    rogue
        .send(&Message::Register {
            agent_id: last.clone(),
            agent_kind: AgentKind::Grid,
        })
        .unwrap();
    match handle.join().unwrap() {
        Err(TransportError::Timeout(what)) => assert!(what.contains(&last), "{what}"),
        other => panic!("{other:?}"),
    }
    drop(rogue);
}

#[test]
fn disconnect_mid_slot_is_reported() {
    let s = small_scenario();
    let (handle, mut rogue, last) = rig(&s);
    rogue
        .send(&Message::Register {
            agent_id: last.clone(),
            agent_kind: AgentKind::Grid,
        })
        .unwrap();
    rogue.recv(Some(Duration::from_secs(2))).unwrap();
    drop(rogue);
    match handle.join().unwrap() {
        Err(TransportError::Disconnected { agent, slot }) => {
            assert_eq!(agent.as_deref(), Some(last.as_str()));
            assert_eq!(slot, Some(0));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn agent_rejects_non_positive_penalty() {
    let s = small_scenario();
    let spec = s.agent_spec("lac01").unwrap();
    let (mut coord, mut a) = channel_pair();
    let h = thread::spawn(move || run_agent(&mut a, &spec));
    assert!(matches!(
        coord.recv(Some(Duration::from_secs(2))).unwrap(),
        Message::Register { .. }
    ));
    coord
        .send(&Message::Iterate {
            slot: 0,
            iter: 0,
            lambda: 10.0,
            rho: 0.0,
            mean_power: 0.0,
        })
        .unwrap();
    match coord.recv(Some(Duration::from_secs(2))).unwrap() {
        Message::Error { code, .. } => assert_eq!(code, codes::BAD_PENALTY),
        other => panic!("{other:?}"),
    }
    assert!(h.join().unwrap().is_err());
}

#[test]
fn agent_eof_mid_slot_is_an_error() {
    let s = small_scenario();
    let spec = s.agent_spec("lac01").unwrap();
    let (mut coord, mut a) = channel_pair();
    let h = thread::spawn(move || run_agent(&mut a, &spec));
    coord.recv(Some(Duration::from_secs(2))).unwrap();
    coord
        .send(&Message::Iterate {
            slot: 0,
            iter: 0,
            lambda: 10.0,
            rho: 1e-3,
            mean_power: 0.0,
        })
        .unwrap();
    assert!(matches!(
        coord.recv(Some(Duration::from_secs(2))).unwrap(),
        Message::Primal { .. }
    ));
    drop(coord);
    assert!(matches!(
        h.join().unwrap(),
        Err(TransportError::Disconnected { slot: Some(0), .. })
    ));
}
