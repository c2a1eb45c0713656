//! Hub of a federated fit: synchronous rounds over a fixed roster.

use super::aggregate::{aggregate_block, aggregation_weights, harmonize_ranks, mean_scalar, mean_tensor};
use super::message::{AceReport, BlockParams, Body, DeflateAck, Message};
use super::transport::{Connection, TransportConfig};
use crate::bttr::{Block, BttrModel, FitConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bookkeeping of the server across rounds.
#[derive(Debug, Clone, Default)]
pub struct ServerState {
    /// Next round to run (equals the number of finished rounds at the end).
    pub round: u32,
    pub global_blocks: Vec<Block>,
    /// Harmonised ranks of modes 2..N for every recorded block.
    pub target_ranks: Vec<Vec<usize>>,
    /// `(client_id, sample_count)` of clients still taking part.
    pub client_roster: Vec<(u32, usize)>,
    /// Clients dropped after repeated failures.
    pub excluded: Vec<u32>,
    /// Pooled `(‖E‖, ‖F‖)` before the first block and after every block.
    pub trace: Vec<(f64, f64)>,
}

struct Peer<C> {
    id: u32,
    samples: usize,
    conn: C,
    norms: (f64, f64),
}

enum RoundOutcome {
    Recorded,
    Stop,
}

/// Failure of a round before the global block went out. An empty client list
/// marks a failure that retrying cannot fix.
struct RoundFailure {
    clients: Vec<usize>,
    error: Error,
}

impl RoundFailure {
    fn fatal(error: Error) -> RoundFailure {
        RoundFailure { clients: Vec::new(), error }
    }
}

/// Receives the next message of the wanted shape from `peer`, dropping stale
/// or out-of-phase frames.
fn recv_matching<C: Connection, T>(
    peer: &mut Peer<C>,
    round: u32,
    tcfg: &TransportConfig,
    mut pick: impl FnMut(Body) -> Option<Result<T>>,
) -> Result<T> {
    loop {
        let msg = peer.conn.recv(tcfg.round_timeout)?;
        if msg.client_id != peer.id {
            return Err(Error::Protocol(format!("client {} sent a frame as client {}", peer.id, msg.client_id)));
        }
        if msg.round != round {
            log::debug!("dropping frame of round {} from client {}", msg.round, peer.id);
            continue;
        }
        let kind = msg.body.kind();
        match pick(msg.body) {
            Some(r) => return r,
            None => log::debug!("dropping out-of-phase {kind:?} from client {}", peer.id),
        }
    }
}

/// Per-client reply that is either usable or a client-reported failure.
enum Reply<T> {
    Ok(T),
    Declined(String),
}

fn pooled(norms: impl Iterator<Item = (f64, f64)>) -> (f64, f64) {
    let (e, f) = norms.fold((0.0, 0.0), |(e, f), (a, b)| (e + a * a, f + b * b));
    (e.sqrt(), f.sqrt())
}

struct Server<'a, C> {
    peers: Vec<Peer<C>>,
    feature_shape: Vec<usize>,
    responses: usize,
    cfg: &'a FitConfig,
    tcfg: &'a TransportConfig,
    state: ServerState,
}

impl<'a, C: Connection> Server<'a, C> {
    fn handshake(conns: Vec<C>, cfg: &'a FitConfig, tcfg: &'a TransportConfig) -> Result<Self> {
        if conns.is_empty() {
            return Err(Error::invalid("a federation needs at least one client"));
        }
        let mut peers = Vec::with_capacity(conns.len());
        let mut shape: Option<(Vec<usize>, usize)> = None;
        for mut conn in conns {
            let msg = conn.recv(tcfg.round_timeout)?;
            let Body::ClientHello { sample_count, feature_shape, responses } = msg.body else {
                return Err(Error::Protocol(format!("expected HELLO, got {:?}", msg.body.kind())));
            };
            match &shape {
                None => shape = Some((feature_shape, responses)),
                Some((s, m)) if *s == feature_shape && *m == responses => {}
                Some((s, m)) => {
                    return Err(Error::Protocol(format!(
                        "client {} has features {feature_shape:?} and {responses} responses, expected {s:?} and {m}",
                        msg.client_id
                    )));
                }
            }
            if sample_count == 0 {
                return Err(Error::Protocol(format!("client {} has no samples", msg.client_id)));
            }
            peers.push(Peer { id: msg.client_id, samples: sample_count as usize, conn, norms: (0.0, 0.0) });
        }
        peers.sort_by_key(|p| p.id);
        if peers.windows(2).any(|w| w[0].id == w[1].id) {
            return Err(Error::Protocol("duplicate client ids".into()));
        }
        let (feature_shape, responses) = shape.expect("at least one client");
        let state = ServerState {
            client_roster: peers.iter().map(|p| (p.id, p.samples)).collect(),
            ..ServerState::default()
        };
        Ok(Server { peers, feature_shape, responses, cfg, tcfg, state })
    }

    fn send_to(&mut self, i: usize, round: u32, body: Body) -> Result<()> {
        let peer = &mut self.peers[i];
        peer.conn.send(&Message::new(round, peer.id, body))
    }

    fn run_round(&mut self, round: u32, attempt: u32) -> std::result::Result<RoundOutcome, RoundFailure> {
        let n = self.peers.len();
        let mut failed = Vec::new();

        for i in 0..n {
            let body = Body::RoundStart {
                attempt,
                epsilon: self.cfg.epsilon,
                snr_values: self.cfg.grid.snr_values().to_vec(),
                tau_values: self.cfg.grid.tau_values().to_vec(),
            };
            if let Err(e) = self.send_to(i, round, body) {
                log::warn!("client {}: {e}", self.peers[i].id);
                failed.push(i);
            }
        }
        let mut reports: Vec<(usize, AceReport)> = Vec::new();
        for i in 0..n {
            if failed.contains(&i) {
                continue;
            }
            let reply = recv_matching(&mut self.peers[i], round, self.tcfg, |b| match b {
                Body::AceReport(r) if r.attempt == attempt => Some(Ok(Reply::Ok(r))),
                Body::Error { message, .. } => Some(Ok(Reply::Declined(message))),
                _ => None,
            });
            match reply {
                Ok(Reply::Ok(r)) => reports.push((i, r)),
                Ok(Reply::Declined(m)) => log::warn!("client {} sits out round {round}: {m}", self.peers[i].id),
                Err(e) => {
                    log::warn!("client {}: {e}", self.peers[i].id);
                    failed.push(i);
                }
            }
        }
        if !failed.is_empty() {
            return Err(RoundFailure { clients: failed, error: Error::Protocol("clients failed to report".into()) });
        }
        for (i, r) in &reports {
            self.peers[*i].norms = (r.e_norm, r.f_norm);
        }
        if self.state.trace.is_empty() {
            self.state.trace.push(pooled(reports.iter().map(|(_, r)| (r.e_norm, r.f_norm))));
        }

        let active: Vec<(usize, AceReport)> = reports.into_iter().filter(|(_, r)| !r.skip).collect();
        if active.is_empty() {
            return self.nothing_to_do(round);
        }
        let only: Vec<AceReport> = active.iter().map(|(_, r)| r.clone()).collect();
        let (target, assignments) = harmonize_ranks(&only, self.cfg.epsilon).map_err(RoundFailure::fatal)?;
        for ((i, _), a) in active.iter().zip(assignments) {
            if let Err(e) = self.send_to(*i, round, Body::HyperAssign(a)) {
                log::warn!("client {}: {e}", self.peers[*i].id);
                failed.push(*i);
            }
        }
        let mut updates: Vec<(usize, Block)> = Vec::new();
        for (i, _) in &active {
            if failed.contains(i) {
                continue;
            }
            let reply = recv_matching(&mut self.peers[*i], round, self.tcfg, |b| match b {
                Body::BlockUpdate(u) => Some(Ok(Reply::Ok(u))),
                Body::Error { message, .. } => Some(Ok(Reply::Declined(message))),
                _ => None,
            });
            match reply {
                Ok(Reply::Ok(u)) => {
                    if u.sample_count as usize != self.peers[*i].samples {
                        log::warn!("client {} changed its sample count", self.peers[*i].id);
                        failed.push(*i);
                    } else {
                        updates.push((*i, u.params.into_block()));
                    }
                }
                Ok(Reply::Declined(m)) => log::warn!("client {} sits out round {round}: {m}", self.peers[*i].id),
                Err(e) => {
                    log::warn!("client {}: {e}", self.peers[*i].id);
                    failed.push(*i);
                }
            }
        }
        if !failed.is_empty() {
            return Err(RoundFailure { clients: failed, error: Error::Protocol("clients failed to send updates".into()) });
        }
        if updates.is_empty() {
            return self.nothing_to_do(round);
        }
        let weighted: Vec<(Block, u64)> =
            updates.iter().map(|(i, b)| (b.clone(), self.peers[*i].samples as u64)).collect();
        let global = aggregate_block(&weighted).map_err(RoundFailure::fatal)?;

        // From here on failures exclude the client instead of restarting.
        let params = BlockParams::from_block(&global);
        let mut dropped = Vec::new();
        let mut acks: Vec<(usize, DeflateAck)> = Vec::new();
        for (i, _) in &updates {
            if let Err(e) = self.send_to(*i, round, Body::GlobalBlock(params.clone())) {
                log::warn!("client {}: {e}", self.peers[*i].id);
                dropped.push(*i);
            }
        }
        for (i, _) in &updates {
            if dropped.contains(i) {
                continue;
            }
            let reply = recv_matching(&mut self.peers[*i], round, self.tcfg, |b| match b {
                Body::DeflateAck(a) => Some(Ok(Reply::Ok(a))),
                Body::Error { message, .. } => Some(Ok(Reply::Declined(message))),
                _ => None,
            });
            match reply {
                Ok(Reply::Ok(a)) if a.core.shape() == global.core.shape() => acks.push((*i, a)),
                Ok(Reply::Ok(_)) => dropped.push(*i),
                Ok(Reply::Declined(m)) => {
                    log::warn!("client {} could not deflate: {m}", self.peers[*i].id);
                    dropped.push(*i);
                }
                Err(e) => {
                    log::warn!("client {}: {e}", self.peers[*i].id);
                    dropped.push(*i);
                }
            }
        }
        if acks.is_empty() {
            return Err(RoundFailure::fatal(Error::Protocol(format!("no client acknowledged block {round}"))));
        }

        let counts: Vec<u64> = acks.iter().map(|(i, _)| self.peers[*i].samples as u64).collect();
        let weights = aggregation_weights(&counts).map_err(RoundFailure::fatal)?;
        let cores: Vec<&Tensor> = acks.iter().map(|(_, a)| &a.core).collect();
        let wcores: Vec<&Tensor> = acks.iter().map(|(_, a)| &a.weight_core).collect();
        let ds: Vec<f64> = acks.iter().map(|(_, a)| a.d).collect();
        let recorded = Block {
            core: mean_tensor(&cores, &weights),
            weight_core: mean_tensor(&wcores, &weights),
            factors: global.factors,
            q: global.q,
            d: mean_scalar(&ds, &weights),
            t: None,
        };
        for (i, a) in &acks {
            self.peers[*i].norms = (a.e_norm, a.f_norm);
        }
        self.exclude(&dropped);
        self.state.trace.push(pooled(self.peers.iter().map(|p| p.norms)));
        self.state.global_blocks.push(recorded);
        self.state.target_ranks.push(target);
        Ok(RoundOutcome::Recorded)
    }

    fn nothing_to_do(&self, round: u32) -> std::result::Result<RoundOutcome, RoundFailure> {
        if round == 0 {
            Err(RoundFailure::fatal(Error::AceFailed("no client could extract a first block".into())))
        } else {
            Ok(RoundOutcome::Stop)
        }
    }

    fn exclude(&mut self, indices: &[usize]) {
        if indices.is_empty() {
            return;
        }
        let mut k = 0;
        self.peers.retain(|p| {
            let drop = indices.contains(&k);
            k += 1;
            if drop {
                log::warn!("excluding client {}", p.id);
                self.state.excluded.push(p.id);
            }
            !drop
        });
        self.state.client_roster = self.peers.iter().map(|p| (p.id, p.samples)).collect();
    }

    fn run(mut self) -> Result<(BttrModel, ServerState)> {
        self.cfg.validate()?;
        let mut attempt = 0u32;
        let mut retried = false;
        while (self.state.round as usize) < self.cfg.max_blocks {
            let round = self.state.round;
            match self.run_round(round, attempt) {
                Ok(RoundOutcome::Recorded) => {
                    self.state.round += 1;
                    attempt = 0;
                    retried = false;
                }
                Ok(RoundOutcome::Stop) => break,
                Err(f) if f.clients.is_empty() => {
                    self.abort(round, &f.error);
                    return Err(f.error);
                }
                Err(f) => {
                    attempt += 1;
                    if retried {
                        self.exclude(&f.clients);
                        retried = false;
                        if self.peers.is_empty() {
                            return Err(Error::Protocol("every client dropped out".into()));
                        }
                    } else {
                        log::warn!("round {round} failed ({}); retrying", f.error);
                        retried = true;
                    }
                }
            }
            if self.peers.is_empty() {
                return Err(Error::Protocol("every client dropped out".into()));
            }
        }

        let mut model =
            BttrModel::from_blocks(self.state.global_blocks.clone(), self.feature_shape.clone(), self.responses)?;
        if self.cfg.keep_trace {
            model = model.with_trace(self.state.trace.clone());
        }
        let bytes = model.to_bytes();
        let round = self.state.round;
        for i in 0..self.peers.len() {
            if let Err(e) = self.send_to(i, round, Body::Done { model: bytes.clone() }) {
                log::warn!("client {}: {e}", self.peers[i].id);
            }
        }
        Ok((model, self.state))
    }

    fn abort(&mut self, round: u32, err: &Error) {
        for i in 0..self.peers.len() {
            let _ = self.send_to(i, round, Body::Error { code: super::message::codes::PROTOCOL, message: err.to_string() });
        }
    }
}

/// Runs the server side of a federated fit over already-open connections.
///
/// Rounds are synchronous. A client that fails before the global block is
/// broadcast triggers one retry of the round; failing again excludes it.
/// Failures after the broadcast exclude the client straight away.
pub fn serve<C: Connection>(conns: Vec<C>, cfg: &FitConfig, tcfg: &TransportConfig) -> Result<(BttrModel, ServerState)> {
    cfg.validate()?;
    Server::handshake(conns, cfg, tcfg)?.run()
}
