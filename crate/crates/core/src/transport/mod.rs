//! Message passing between the coordinator and the agents.
//!
//! Each agent holds its own specification and computes its best response
//! locally. Only prices, penalties, mean power and the agent's own net power
//! cross a link. Links carry newline-terminated text lines (see [`wire`]),
//! either over in-process channels or TCP.

mod agent;
mod coordinator;
pub mod wire;

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

pub use agent::{run_agent, AgentSummary};
pub use coordinator::{run_coordinator, CoordinatorConfig};
pub use wire::{decode_message, encode_message, Message, WireError};

use crate::admm::{AdmmError, HorizonResult};
use crate::agents::AgentError;
use crate::model::{AgentSpec, Scenario, SolverOptions};

/// `ERR` codes.
pub mod codes {
    pub const PROTOCOL: u32 = 1;
    pub const BAD_PENALTY: u32 = 2;
    pub const LOCAL_SOLVE: u32 = 3;
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("timed out waiting for {0}")]
    Timeout(String),
    #[error("registration timed out; missing agents: {}", .missing.join(", "))]
    RegistrationTimeout { missing: Vec<String> },
    #[error("link to {} closed{}", .agent.as_deref().unwrap_or("peer"), .slot.map(|t| format!(" during slot {t}")).unwrap_or_default())]
    Disconnected {
        agent: Option<String>,
        slot: Option<usize>,
    },
    #[error("protocol violation by `{agent}`: {detail}")]
    ProtocolViolation { agent: String, detail: String },
    #[error("`{agent}` reported error {code}: {detail}")]
    Reported {
        agent: String,
        code: u32,
        detail: String,
    },
    #[error("solver: {0}")]
    Solver(#[from] AdmmError),
    #[error("local best response: {0}")]
    Agent(#[from] AgentError),
    #[error("agent thread panicked")]
    Panic,
}

/// A bidirectional, line-framed connection.
pub trait Link: Send {
    fn send(&mut self, message: &Message) -> Result<(), TransportError>;

    /// Waits for the next message. `None` blocks indefinitely. A closed peer
    /// yields [`TransportError::Disconnected`].
    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, TransportError>;
}

/// In-process link over a pair of channels carrying encoded lines.
#[derive(Debug)]
pub struct ChannelLink {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected ends.
pub fn channel_pair() -> (ChannelLink, ChannelLink) {
    let (a_tx, b_rx) = mpsc::channel();
    let (b_tx, a_rx) = mpsc::channel();
    (
        ChannelLink { tx: a_tx, rx: a_rx },
        ChannelLink { tx: b_tx, rx: b_rx },
    )
}

impl ChannelLink {
    /// Sends raw bytes, bypassing the encoder. Used to exercise malformed input.
    pub fn send_raw(&mut self, bytes: Vec<u8>) -> Result<(), TransportError> {
        self.tx
            .send(bytes)
            .map_err(|_| TransportError::Disconnected {
                agent: None,
                slot: None,
            })
    }
}

impl Link for ChannelLink {
    fn send(&mut self, message: &Message) -> Result<(), TransportError> {
        let bytes = encode_message(message)?;
        self.send_raw(bytes)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, TransportError> {
        let bytes = match timeout {
            None => self.rx.recv().map_err(|_| TransportError::Disconnected {
                agent: None,
                slot: None,
            })?,
            Some(d) => self.rx.recv_timeout(d).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout("message".into()),
                RecvTimeoutError::Disconnected => TransportError::Disconnected {
                    agent: None,
                    slot: None,
                },
            })?,
        };
        Ok(decode_message(&bytes)?)
    }
}

/// Link over a TCP stream. A partially received line survives a timeout and
/// is completed by the next call.
#[derive(Debug)]
pub struct TcpLink {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pending: Vec<u8>,
}

impl TcpLink {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(Self {
            reader: BufReader::new(stream),
            writer,
            pending: Vec::new(),
        })
    }

    pub fn peer_addr(&self) -> io::Result<SocketAddr> {
        self.writer.peer_addr()
    }
}

impl Link for TcpLink {
    fn send(&mut self, message: &Message) -> Result<(), TransportError> {
        let bytes = encode_message(message)?;
        self.writer.write_all(&bytes).map_err(|e| match e.kind() {
            io::ErrorKind::BrokenPipe | io::ErrorKind::ConnectionReset => {
                TransportError::Disconnected {
                    agent: None,
                    slot: None,
                }
            }
            _ => TransportError::Io(e),
        })
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Message, TransportError> {
        let deadline = timeout.map(|d| Instant::now() + d);
        loop {
            let wait = match deadline {
                None => None,
                Some(end) => {
                    let left = end.saturating_duration_since(Instant::now());
                    if left.is_zero() {
                        return Err(TransportError::Timeout("message".into()));
                    }
                    Some(left)
                }
            };
            self.reader.get_ref().set_read_timeout(wait)?;
            match self.reader.read_until(b'\n', &mut self.pending) {
                Ok(0) => {
                    return Err(TransportError::Disconnected {
                        agent: None,
                        slot: None,
                    })
                }
                Ok(_) if self.pending.ends_with(b"\n") => {
                    let line = std::mem::take(&mut self.pending);
                    return Ok(decode_message(&line)?);
                }
                // EOF in the middle of a line.
                Ok(_) => {
                    return Err(TransportError::Disconnected {
                        agent: None,
                        slot: None,
                    })
                }
                Err(e)
                    if matches!(
                        e.kind(),
                        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                    ) =>
                {
                    continue
                }
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) if e.kind() == io::ErrorKind::ConnectionReset => {
                    return Err(TransportError::Disconnected {
                        agent: None,
                        slot: None,
                    })
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

/// Where the agents of a session live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Endpoint {
    InProcess,
    /// Loopback TCP; port 0 picks a free port.
    Tcp(SocketAddr),
}

fn join_agents(
    handles: Vec<thread::JoinHandle<Result<AgentSummary, TransportError>>>,
) -> Result<Vec<AgentSummary>, TransportError> {
    handles
        .into_iter()
        .map(|h| h.join().map_err(|_| TransportError::Panic)?)
        .collect()
}

/// Runs the coordinator and one thread per agent, connected by channels.
pub fn run_in_process(
    scenario: &Scenario<f64>,
    options: &SolverOptions<f64>,
    config: &CoordinatorConfig,
) -> Result<(HorizonResult<f64>, Vec<AgentSummary>), TransportError> {
    let mut links: Vec<Box<dyn Link>> = Vec::new();
    let mut handles = Vec::new();
    for id in scenario.agent_ids() {
        let spec = scenario
            .agent_spec(&id)
            .expect("id comes from the scenario");
        let (coord_end, mut agent_end) = channel_pair();
        links.push(Box::new(coord_end));
        handles.push(thread::spawn(move || run_agent(&mut agent_end, &spec)));
    }
    let result = run_coordinator(links, scenario, options, config);
    let summaries = join_agents(handles);
    let result = result?;
    Ok((result, summaries?))
}

/// Accepts `count` connections on `listener` before `deadline`.
pub fn accept_links(
    listener: &TcpListener,
    count: usize,
    timeout: Duration,
) -> Result<Vec<Box<dyn Link>>, TransportError> {
    let deadline = Instant::now() + timeout;
    listener.set_nonblocking(true)?;
    let mut links: Vec<Box<dyn Link>> = Vec::with_capacity(count);
    while links.len() < count {
        match listener.accept() {
            Ok((stream, _)) => {
                stream.set_nonblocking(false)?;
                links.push(Box::new(TcpLink::new(stream)?));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    listener.set_nonblocking(false)?;
                    return Err(TransportError::Timeout(format!(
                        "{} of {count} agent connections",
                        count - links.len()
                    )));
                }
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => return Err(e.into()),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(links)
}

/// Coordinator side of a TCP session with externally started agents.
pub fn serve_tcp(
    listener: &TcpListener,
    scenario: &Scenario<f64>,
    options: &SolverOptions<f64>,
    config: &CoordinatorConfig,
) -> Result<HorizonResult<f64>, TransportError> {
    let links = accept_links(listener, scenario.n_agents(), config.registration_timeout)?;
    run_coordinator(links, scenario, options, config)
}

/// Connects to a coordinator, retrying until `timeout`, and serves one agent.
pub fn connect_agent(
    addr: SocketAddr,
    spec: &AgentSpec<f64>,
    timeout: Duration,
) -> Result<AgentSummary, TransportError> {
    let deadline = Instant::now() + timeout;
    let stream = loop {
        match TcpStream::connect(addr) {
            Ok(s) => break s,
            Err(e) if Instant::now() < deadline => {
                let _ = e;
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e.into()),
        }
    };
    let mut link = TcpLink::new(stream)?;
    run_agent(&mut link, spec)
}

/// Binds `addr`, starts one agent thread per agent connecting over loopback
/// TCP, and runs the coordinator.
pub fn run_tcp_session(
    addr: SocketAddr,
    scenario: &Scenario<f64>,
    options: &SolverOptions<f64>,
    config: &CoordinatorConfig,
) -> Result<(HorizonResult<f64>, Vec<AgentSummary>), TransportError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let handles: Vec<_> = scenario
        .agent_ids()
        .into_iter()
        .map(|id| {
            let spec = scenario
                .agent_spec(&id)
                .expect("id comes from the scenario");
            let timeout = config.registration_timeout;
            thread::spawn(move || connect_agent(local, &spec, timeout))
        })
        .collect();
    let result = serve_tcp(&listener, scenario, options, config);
    drop(listener);
    let summaries = join_agents(handles);
    let result = result?;
    Ok((result, summaries?))
}

/// Runs a full session on the given endpoint.
pub fn run_session(
    endpoint: Endpoint,
    scenario: &Scenario<f64>,
    options: &SolverOptions<f64>,
    config: &CoordinatorConfig,
) -> Result<(HorizonResult<f64>, Vec<AgentSummary>), TransportError> {
    match endpoint {
        Endpoint::InProcess => run_in_process(scenario, options, config),
        Endpoint::Tcp(addr) => run_tcp_session(addr, scenario, options, config),
    }
}
