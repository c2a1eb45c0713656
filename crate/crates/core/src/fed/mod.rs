//! Federated training over horizontally partitioned data.
//!
//! A server drives synchronous rounds, one block per round: every client
//! extracts a candidate block from its residuals and reports its selected
//! hyperparameters and ranks, the server harmonises ranks, clients fit and
//! send block parameters, the server aligns and averages them, and clients
//! deflate their residuals with the averaged block.

mod aggregate;
mod client;
pub mod message;
mod server;
pub mod transport;

use std::net::TcpListener;
use std::sync::Arc;
use std::sync::Mutex;

pub use aggregate::{
    aggregate_block, aggregation_weights, align_block, fedavg_reference, harmonize_ranks, truncate_to_ranks,
};
pub use client::{client_ace_report, client_deflate, client_local_block, run_client, ClientState};
pub use message::{AceReport, BlockParams, BlockUpdate, Body, DeflateAck, HyperAssign, Kind, Message};
pub use server::{serve, ServerState};
pub use transport::{
    accept_clients, in_process_pair, Connection, Direction, FrameLog, InProcessConnection, RecordedFrame,
    RecordingConnection, TcpConnection, TransportConfig,
};

use crate::bttr::{BttrModel, FitConfig};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

/// Transport used by [`run_federation`] to connect simulated clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    InProcess,
    /// Real sockets on 127.0.0.1 with an ephemeral port.
    TcpLoopback,
}

/// Everything produced by a simulated federated run.
#[derive(Debug, Clone)]
pub struct FederationRun {
    pub model: BttrModel,
    pub server: ServerState,
    /// Final state of every client, in client-id order.
    pub clients: Vec<ClientState>,
    /// Every frame the server sent or received, in server order.
    pub frames: Vec<RecordedFrame>,
}

/// Trains a global model over `clients`, one thread per client, and returns
/// the model. Client `i` gets id `i`.
pub fn run_federated_fit(clients: &[(Tensor, Matrix)], cfg: &FitConfig, transport: Transport) -> Result<BttrModel> {
    run_federation(clients, cfg, transport, &TransportConfig::default()).map(|r| r.model)
}

/// [`run_federated_fit`] returning the full run record.
pub fn run_federation(
    clients: &[(Tensor, Matrix)],
    cfg: &FitConfig,
    transport: Transport,
    tcfg: &TransportConfig,
) -> Result<FederationRun> {
    cfg.validate()?;
    if clients.is_empty() {
        return Err(Error::invalid("a federation needs at least one client"));
    }
    let states: Vec<ClientState> = clients
        .iter()
        .enumerate()
        .map(|(i, (x, y))| ClientState::new(i as u32, x.clone(), y.clone()))
        .collect::<Result<_>>()?;
    let log = FrameLog::default();

    match transport {
        Transport::InProcess => {
            let mut server_ends = Vec::new();
            let mut client_ends = Vec::new();
            for s in &states {
                let (a, b) = in_process_pair();
                server_ends.push(RecordingConnection::new(a, format!("client-{}", s.client_id), log.clone()));
                client_ends.push(b);
            }
            drive(states, client_ends, log, |_| Ok(server_ends), cfg, tcfg)
        }
        Transport::TcpLoopback => {
            let listener = TcpListener::bind("127.0.0.1:0")?;
            let addr = listener.local_addr()?;
            let mut client_ends = Vec::new();
            for _ in &states {
                client_ends.push(Deferred(addr));
            }
            let n = states.len();
            drive(
                states,
                client_ends,
                log.clone(),
                move |_| {
                    let conns = accept_clients(&listener, n, tcfg)?;
                    Ok(conns.into_iter().map(|c| RecordingConnection::new(c, "tcp", log.clone())).collect())
                },
                cfg,
                tcfg,
            )
        }
    }
}

/// A client end that connects lazily inside its own thread.
struct Deferred(std::net::SocketAddr);

trait ClientEnd: Send {
    fn open(self, tcfg: &TransportConfig) -> Result<Box<dyn Connection>>;
}

impl ClientEnd for InProcessConnection {
    fn open(self, _: &TransportConfig) -> Result<Box<dyn Connection>> {
        Ok(Box::new(self))
    }
}

impl ClientEnd for Deferred {
    fn open(self, tcfg: &TransportConfig) -> Result<Box<dyn Connection>> {
        Ok(Box::new(TcpConnection::connect(self.0, tcfg)?))
    }
}

fn drive<E: ClientEnd, S: Connection>(
    states: Vec<ClientState>,
    client_ends: Vec<E>,
    log: FrameLog,
    server_ends: impl FnOnce(()) -> Result<Vec<S>>,
    cfg: &FitConfig,
    tcfg: &TransportConfig,
) -> Result<FederationRun> {
    let finished: Arc<Mutex<Vec<ClientState>>> = Arc::default();
    let outcome = std::thread::scope(|scope| {
        let mut handles = Vec::new();
        for (mut state, end) in states.into_iter().zip(client_ends) {
            let finished = finished.clone();
            handles.push(scope.spawn(move || {
                let result = end.open(tcfg).and_then(|mut conn| run_client(&mut conn, &mut state, tcfg));
                if let Err(e) = &result {
                    log::warn!("client {} stopped: {e}", state.client_id);
                }
                finished.lock().expect("client list poisoned").push(state);
            }));
        }
        let result = server_ends(()).and_then(|conns| serve(conns, cfg, tcfg));
        // Dropping the server ends (inside serve) releases clients still waiting.
        for h in handles {
            h.join().expect("client thread panicked");
        }
        result
    });
    let (model, server) = outcome?;
    let mut clients = std::mem::take(&mut *finished.lock().expect("client list poisoned"));
    clients.sort_by_key(|c| c.client_id);
    let frames = std::mem::take(&mut *log.lock().expect("frame log poisoned"));
    Ok(FederationRun { model, server, clients, frames })
}
