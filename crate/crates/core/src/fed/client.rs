//! Client side of a federated fit. Only block parameters and residual norms
//! ever leave a client; scores and residuals stay local.

use super::aggregate::truncate_to_ranks;
use super::message::{codes, AceReport, BlockParams, BlockUpdate, Body, DeflateAck, HyperAssign, Message};
use super::transport::{Connection, TransportConfig};
use crate::bttr::{check_training_pair, deflate, project_block, Block, BttrModel};
use crate::error::{Error, Result};
use crate::sparse_tucker::{ace, f_mpstd, HyperGrid};
use crate::tensor::{Matrix, Tensor};

/// Local data and residuals of one client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: u32,
    pub e_residual: Tensor,
    pub f_residual: Matrix,
    pub sample_count: usize,
    /// Blocks this client has deflated, with local scores and coefficients.
    pub local_blocks: Vec<Block>,
}

impl ClientState {
    pub fn new(client_id: u32, x: Tensor, y: Matrix) -> Result<ClientState> {
        check_training_pair(&x, &y)?;
        let sample_count = x.shape()[0];
        Ok(ClientState { client_id, e_residual: x, f_residual: y, sample_count, local_blocks: Vec::new() })
    }

    pub fn residual_norms(&self) -> (f64, f64) {
        (self.e_residual.frobenius_norm(), self.f_residual.frobenius_norm())
    }

    pub fn feature_shape(&self) -> &[usize] {
        &self.e_residual.shape()[1..]
    }

    pub fn responses(&self) -> usize {
        self.f_residual.cols()
    }

    /// Residuals are small enough to stop. The first block is always
    /// attempted.
    fn below_epsilon(&self, epsilon: f64) -> bool {
        let (e, f) = self.residual_norms();
        !self.local_blocks.is_empty() && (e <= epsilon || f <= epsilon)
    }
}

/// Runs component extraction on the current residuals, or reports a skip.
pub fn client_ace_report(state: &ClientState, attempt: u32, epsilon: f64, grid: &HyperGrid) -> Result<AceReport> {
    let (e_norm, f_norm) = state.residual_norms();
    if state.below_epsilon(epsilon) {
        return Ok(AceReport { attempt, skip: true, snr: 0.0, tau: 0.0, bic: 0.0, ranks: Vec::new(), e_norm, f_norm });
    }
    let a = ace(&state.e_residual, &state.f_residual, grid)?;
    Ok(AceReport {
        attempt,
        skip: false,
        snr: a.snr_star,
        tau: a.tau_star,
        bic: a.bic,
        ranks: a.ranks(),
        e_norm,
        f_norm,
    })
}

/// Fits the block at the assigned hyperparameters and truncates it to the
/// target ranks. Returns `None` when the residuals are already below epsilon.
pub fn client_local_block(state: &ClientState, assignment: &HyperAssign) -> Result<Option<BlockUpdate>> {
    if assignment.target_ranks.len() != state.feature_shape().len() {
        return Err(Error::Protocol(format!(
            "{} target ranks for {} feature modes",
            assignment.target_ranks.len(),
            state.feature_shape().len()
        )));
    }
    if let Some((i, _)) =
        assignment.target_ranks.iter().zip(state.feature_shape()).enumerate().find(|(_, (r, ext))| r > ext)
    {
        return Err(Error::Protocol(format!("target rank for mode {} exceeds its extent", i + 2)));
    }
    if state.below_epsilon(assignment.epsilon) {
        return Ok(None);
    }
    let fit = f_mpstd(&state.e_residual, &state.f_residual, assignment.snr, assignment.tau)?;
    let fit = truncate_to_ranks(&fit, &assignment.target_ranks)?;
    let block = project_block(&state.e_residual, &state.f_residual, &fit.factors, &fit.core, &fit.q)?;
    Ok(Some(BlockUpdate { sample_count: state.sample_count as u64, params: BlockParams::from_block(&block) }))
}

/// Deflates the local residuals with the global block: the score is
/// recomputed locally, the loadings are global and the coefficient is local.
pub fn client_deflate(state: &mut ClientState, global: &BlockParams) -> Result<DeflateAck> {
    let shape = state.feature_shape();
    if global.factors.len() != shape.len() || global.factors.iter().zip(shape).any(|(p, &ext)| p.rows() != ext) {
        return Err(Error::shape("global block does not match the local feature shape"));
    }
    if global.q.rows() != state.responses() {
        return Err(Error::shape("global loadings do not match the local responses"));
    }
    if global.weight_core.data().iter().all(|&v| v == 0.0) {
        let (e_norm, f_norm) = state.residual_norms();
        let zeros = Tensor::zeros(global.weight_core.shape().to_vec())?;
        return Ok(DeflateAck { d: 0.0, core: zeros.clone(), weight_core: zeros, e_norm, f_norm });
    }
    let step = deflate(&state.e_residual, &state.f_residual, &global.factors, &global.weight_core, &global.q)?;
    state.e_residual = step.e_next;
    state.f_residual = step.f_next;
    let ack = DeflateAck {
        d: step.block.d,
        core: step.block.core.clone(),
        weight_core: step.block.weight_core.clone(),
        e_norm: 0.0,
        f_norm: 0.0,
    };
    state.local_blocks.push(step.block);
    let (e_norm, f_norm) = state.residual_norms();
    Ok(DeflateAck { e_norm, f_norm, ..ack })
}

fn error_body(code: u32, err: &Error) -> Body {
    Body::Error { code, message: err.to_string() }
}

/// Serves one connection until the server sends `DONE`, returning the
/// global model it carries.
pub fn run_client<C: Connection>(conn: &mut C, state: &mut ClientState, tcfg: &TransportConfig) -> Result<BttrModel> {
    let id = state.client_id;
    conn.send(&Message::new(
        0,
        id,
        Body::ClientHello {
            sample_count: state.sample_count as u64,
            feature_shape: state.feature_shape().to_vec(),
            responses: state.responses(),
        },
    ))?;
    loop {
        let msg = conn.recv(tcfg.client_idle_timeout)?;
        if msg.client_id != id {
            return Err(Error::Protocol(format!("message for client {} reached client {id}", msg.client_id)));
        }
        let round = msg.round;
        let reply = match msg.body {
            Body::RoundStart { attempt, epsilon, snr_values, tau_values } => {
                let report = HyperGrid::new(snr_values, tau_values)
                    .and_then(|grid| client_ace_report(state, attempt, epsilon, &grid));
                match report {
                    Ok(r) => Body::AceReport(r),
                    Err(e) => {
                        log::warn!("client {id}: extraction failed in round {round}: {e}");
                        error_body(codes::DECOMPOSITION, &e)
                    }
                }
            }
            Body::HyperAssign(a) => match client_local_block(state, &a) {
                Ok(Some(u)) => Body::BlockUpdate(u),
                Ok(None) => error_body(codes::DECOMPOSITION, &Error::invalid("residuals already below epsilon")),
                Err(e) if e.is_protocol() => error_body(codes::BAD_ASSIGNMENT, &e),
                Err(e) => error_body(codes::DECOMPOSITION, &e),
            },
            Body::GlobalBlock(p) => match client_deflate(state, &p) {
                Ok(ack) => Body::DeflateAck(ack),
                Err(e) => error_body(codes::PROTOCOL, &e),
            },
            Body::Done { model } => return BttrModel::from_bytes(&model),
            Body::Error { message, .. } => return Err(Error::Protocol(format!("server aborted: {message}"))),
            other => {
                return Err(Error::Protocol(format!("client {id} received unexpected {:?}", other.kind())));
            }
        };
        conn.send(&Message::new(round, id, reply))?;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bttr::{fit, FitConfig};
    use crate::metrics::pearson_r;
    use crate::tensor::outer;

    fn grid() -> HyperGrid {
        HyperGrid::new(vec![10.0, 40.0], vec![95.0, 100.0]).unwrap()
    }

    fn wave(n: usize, f: f64, p: f64) -> Vec<f64> {
        (0..n).map(|i| (f * i as f64 + p).sin()).collect()
    }

    fn planted() -> (Tensor, Matrix, Vec<f64>) {
        let t = wave(30, 0.7, 0.3);
        let x = outer(&[&t, &wave(4, 1.3, 0.1), &wave(3, 0.5, 1.0)]).unwrap();
        let noise = wave(x.len(), 2.9, 0.0);
        let x = Tensor::new(x.shape().to_vec(), x.data().iter().zip(&noise).map(|(a, b)| a + 0.01 * b).collect())
            .unwrap();
        let y = Matrix::column(t.iter().map(|v| 3.0 * v).collect()).unwrap();
        (x, y, t)
    }

    #[test]
    fn planted_client_recovers_score() {
        let (x, y, t) = planted();
        let mut state = ClientState::new(0, x, y).unwrap();
        let report = client_ace_report(&state, 0, 1e-8, &grid()).unwrap();
        assert!(!report.skip);
        let assign = HyperAssign { snr: report.snr, tau: report.tau, target_ranks: report.ranks, epsilon: 1e-8 };
        let update = client_local_block(&state, &assign).unwrap().unwrap();
        let ack = client_deflate(&mut state, &update.params).unwrap();
        assert!(update.params.d > 0.0);
        assert!(ack.d > 0.0);
        let local_t = state.local_blocks[0].t.as_ref().unwrap();
        assert!(pearson_r(&local_t.col(0), &t).unwrap().abs() > 0.99);
    }

    #[test]
    fn own_block_deflation_matches_centralised_fit() {
        let (x, y, _) = planted();
        let central = fit(&x, &y, &FitConfig::new(1, 1e-8, grid()).unwrap()).unwrap();
        let mut state = ClientState::new(0, x.clone(), y.clone()).unwrap();
        let report = client_ace_report(&state, 0, 1e-8, &grid()).unwrap();
        let assign = HyperAssign { snr: report.snr, tau: report.tau, target_ranks: report.ranks, epsilon: 1e-8 };
        let update = client_local_block(&state, &assign).unwrap().unwrap();
        client_deflate(&mut state, &update.params).unwrap();
        let ours = &state.local_blocks[0];
        let theirs = &central.blocks()[0];
        assert!(ours.core.max_abs_diff(&theirs.core) <= 1e-10);
        assert!((ours.d - theirs.d).abs() <= 1e-10);
        assert!(ours.t.as_ref().unwrap().max_abs_diff(theirs.t.as_ref().unwrap()) <= 1e-10);
        let trace = central.residual_trace().unwrap();
        assert!((state.residual_norms().1 - trace[1].1).abs() <= 1e-10);
    }

    #[test]
    fn skips_below_epsilon_and_rejects_bad_assignments() {
        let (x, y, _) = planted();
        let mut state = ClientState::new(0, x, y).unwrap();
        let report = client_ace_report(&state, 0, 1e-8, &grid()).unwrap();
        let bad = HyperAssign { snr: report.snr, tau: report.tau, target_ranks: vec![5, 1], epsilon: 1e-8 };
        assert!(client_local_block(&state, &bad).unwrap_err().is_protocol());

        let assign = HyperAssign { snr: report.snr, tau: report.tau, target_ranks: report.ranks, epsilon: 1e-8 };
        let update = client_local_block(&state, &assign).unwrap().unwrap();
        let before = state.residual_norms();
        client_deflate(&mut state, &update.params).unwrap();
        assert!(state.residual_norms().1 <= before.1);
        let huge = HyperAssign { epsilon: 1e9, ..assign };
        assert!(client_local_block(&state, &huge).unwrap().is_none());
        assert!(client_ace_report(&state, 0, 1e9, &grid()).unwrap().skip);
    }

    #[test]
    fn zero_global_core_leaves_residuals() {
        let (x, y, _) = planted();
        let mut state = ClientState::new(0, x, y).unwrap();
        let before = state.residual_norms();
        let zero = BlockParams {
            core: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            weight_core: Tensor::zeros(vec![1, 1, 1]).unwrap(),
            factors: vec![Matrix::new(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap(), Matrix::new(3, 1, vec![1.0, 0.0, 0.0]).unwrap()],
            q: Matrix::column(vec![1.0]).unwrap(),
            d: 0.0,
        };
        let ack = client_deflate(&mut state, &zero).unwrap();
        assert_eq!((ack.e_norm, ack.f_norm), before);
        assert_eq!(state.residual_norms(), before);
    }
}
