//! Protocol messages and their wire encoding.
//!
//! A frame is `"FBTP"`, version byte `0x01`, kind byte, little-endian `u32`
//! payload length, then the payload. Every payload starts with the round
//! (`u32`) and the client id (`u32`). Arrays are preceded by a `u32` element
//! count and shapes precede data.

use crate::bttr::Block;
use crate::codec::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tensor};

pub const FRAME_MAGIC: &[u8; 4] = b"FBTP";
pub const PROTOCOL_VERSION: u8 = 1;
pub const HEADER_LEN: usize = 10;
/// Upper bound on a payload; anything larger is treated as a corrupt frame.
pub const MAX_PAYLOAD: usize = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Kind {
    Hello = 1,
    AceReport = 2,
    HyperAssign = 3,
    BlockUpdate = 4,
    GlobalBlock = 5,
    DeflateAck = 6,
    Done = 7,
    Error = 8,
}

impl Kind {
    fn from_byte(b: u8) -> Result<Kind> {
        Ok(match b {
            1 => Kind::Hello,
            2 => Kind::AceReport,
            3 => Kind::HyperAssign,
            4 => Kind::BlockUpdate,
            5 => Kind::GlobalBlock,
            6 => Kind::DeflateAck,
            7 => Kind::Done,
            8 => Kind::Error,
            _ => return Err(Error::Protocol(format!("unknown message kind {b}"))),
        })
    }
}

/// A client's result of local component extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct AceReport {
    /// Echo of the round-start attempt counter; stale reports are dropped.
    pub attempt: u32,
    /// Residuals are at or below epsilon; the client sits this round out.
    pub skip: bool,
    pub snr: f64,
    pub tau: f64,
    pub bic: f64,
    /// Ranks of modes 2..N.
    pub ranks: Vec<usize>,
    pub e_norm: f64,
    pub f_norm: f64,
}

/// Hyperparameters and target ranks assigned to one client.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperAssign {
    pub snr: f64,
    pub tau: f64,
    pub target_ranks: Vec<usize>,
    pub epsilon: f64,
}

/// Block parameters without any sample-indexed quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub core: Tensor,
    pub weight_core: Tensor,
    pub factors: Vec<Matrix>,
    pub q: Matrix,
    pub d: f64,
}

impl BlockParams {
    /// Drops the score vector.
    pub fn from_block(b: &Block) -> BlockParams {
        BlockParams {
            core: b.core.clone(),
            weight_core: b.weight_core.clone(),
            factors: b.factors.clone(),
            q: b.q.clone(),
            d: b.d,
        }
    }

    pub fn into_block(self) -> Block {
        Block { core: self.core, weight_core: self.weight_core, factors: self.factors, q: self.q, d: self.d, t: None }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockUpdate {
    pub sample_count: u64,
    pub params: BlockParams,
}

/// A client's deflation result under the global block.
#[derive(Debug, Clone, PartialEq)]
pub struct DeflateAck {
    /// Local coefficient `(F q)^T t`.
    pub d: f64,
    /// Local `G^(X)` of the projection.
    pub core: Tensor,
    /// Global weight core rescaled to the local unit-norm score.
    pub weight_core: Tensor,
    pub e_norm: f64,
    pub f_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// Client introduction.
    ClientHello { sample_count: u64, feature_shape: Vec<usize>, responses: usize },
    /// Server start-of-round notice with the search grid.
    RoundStart { attempt: u32, epsilon: f64, snr_values: Vec<f64>, tau_values: Vec<f64> },
    AceReport(AceReport),
    HyperAssign(HyperAssign),
    BlockUpdate(BlockUpdate),
    GlobalBlock(BlockParams),
    DeflateAck(DeflateAck),
    /// End of training; carries the serialized global model.
    Done { model: Vec<u8> },
    Error { code: u32, message: String },
}

/// Error codes carried by [`Body::Error`].
pub mod codes {
    pub const DECOMPOSITION: u32 = 1;
    pub const BAD_ASSIGNMENT: u32 = 2;
    pub const PROTOCOL: u32 = 3;
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::ClientHello { .. } | Body::RoundStart { .. } => Kind::Hello,
            Body::AceReport(_) => Kind::AceReport,
            Body::HyperAssign(_) => Kind::HyperAssign,
            Body::BlockUpdate(_) => Kind::BlockUpdate,
            Body::GlobalBlock(_) => Kind::GlobalBlock,
            Body::DeflateAck(_) => Kind::DeflateAck,
            Body::Done { .. } => Kind::Done,
            Body::Error { .. } => Kind::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u32,
    pub client_id: u32,
    pub body: Body,
}

fn put_params(w: &mut ByteWriter, p: &BlockParams) {
    w.tensor(&p.core);
    w.tensor(&p.weight_core);
    w.matrices(&p.factors);
    w.matrix(&p.q);
    w.f64(p.d);
}

fn get_params(r: &mut ByteReader<'_>) -> Result<BlockParams> {
    Ok(BlockParams {
        core: r.tensor()?,
        weight_core: r.tensor()?,
        factors: r.matrices()?,
        q: r.matrix()?,
        d: r.f64()?,
    })
}

fn check_params(p: &BlockParams) -> Result<()> {
    let mut shape = vec![1];
    shape.extend(p.factors.iter().map(Matrix::cols));
    if p.core.shape() != shape.as_slice() || p.weight_core.shape() != shape.as_slice() {
        return Err(Error::Protocol(format!(
            "core shapes {:?}/{:?} do not match factor ranks {shape:?}",
            p.core.shape(),
            p.weight_core.shape()
        )));
    }
    if p.q.cols() != 1 {
        return Err(Error::Protocol("q must be a single column".into()));
    }
    Ok(())
}

fn get_bool(r: &mut ByteReader<'_>) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(Error::Protocol(format!("bad flag byte {v}"))),
    }
}

impl Message {
    pub fn new(round: u32, client_id: u32, body: Body) -> Message {
        Message { round, client_id, body }
    }

    pub fn kind(&self) -> Kind {
        self.body.kind()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.u32(self.round);
        w.u32(self.client_id);
        match &self.body {
            Body::ClientHello { sample_count, feature_shape, responses } => {
                w.u8(0);
                w.u64(*sample_count);
                w.u32s(feature_shape);
                w.len_u32(*responses);
            }
            Body::RoundStart { attempt, epsilon, snr_values, tau_values } => {
                w.u8(1);
                w.u32(*attempt);
                w.f64(*epsilon);
                w.f64s(snr_values);
                w.f64s(tau_values);
            }
            Body::AceReport(a) => {
                w.u32(a.attempt);
                w.u8(a.skip as u8);
                w.f64(a.snr);
                w.f64(a.tau);
                w.f64(a.bic);
                w.u32s(&a.ranks);
                w.f64(a.e_norm);
                w.f64(a.f_norm);
            }
            Body::HyperAssign(h) => {
                w.f64(h.snr);
                w.f64(h.tau);
                w.u32s(&h.target_ranks);
                w.f64(h.epsilon);
            }
            Body::BlockUpdate(u) => {
                w.u64(u.sample_count);
                put_params(&mut w, &u.params);
            }
            Body::GlobalBlock(p) => put_params(&mut w, p),
            Body::DeflateAck(a) => {
                w.f64(a.d);
                w.tensor(&a.core);
                w.tensor(&a.weight_core);
                w.f64(a.e_norm);
                w.f64(a.f_norm);
            }
            Body::Done { model } => {
                w.len_u32(model.len());
                w.bytes(model);
            }
            Body::Error { code, message } => {
                w.u32(*code);
                w.string(message);
            }
        }
        let payload = w.into_inner();
        let mut frame = Vec::with_capacity(HEADER_LEN + payload.len());
        frame.extend_from_slice(FRAME_MAGIC);
        frame.push(PROTOCOL_VERSION);
        frame.push(self.kind() as u8);
        frame.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        frame.extend_from_slice(&payload);
        frame
    }

    /// Parses a frame header, returning the kind and payload length.
    pub fn parse_header(header: &[u8]) -> Result<(Kind, usize)> {
        if header.len() < HEADER_LEN {
            return Err(Error::Protocol("short frame header".into()));
        }
        if &header[..4] != FRAME_MAGIC {
            return Err(Error::Protocol("bad frame magic".into()));
        }
        if header[4] != PROTOCOL_VERSION {
            return Err(Error::Protocol(format!("unsupported protocol version {}", header[4])));
        }
        let kind = Kind::from_byte(header[5])?;
        let len = u32::from_le_bytes(header[6..10].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(Error::Protocol(format!("payload of {len} bytes exceeds the limit")));
        }
        Ok((kind, len))
    }

    pub fn decode(frame: &[u8]) -> Result<Message> {
        let (kind, len) = Message::parse_header(frame)?;
        if frame.len() != HEADER_LEN + len {
            return Err(Error::Protocol(format!(
                "frame declares {len} payload bytes but carries {}",
                frame.len() - HEADER_LEN
            )));
        }
        let mut r = ByteReader::new(&frame[HEADER_LEN..], "frame");
        let round = r.u32()?;
        let client_id = r.u32()?;
        let body = match kind {
            Kind::Hello => match r.u8()? {
                0 => Body::ClientHello {
                    sample_count: r.u64()?,
                    feature_shape: r.u32s()?,
                    responses: r.u32()? as usize,
                },
                1 => Body::RoundStart {
                    attempt: r.u32()?,
                    epsilon: r.f64()?,
                    snr_values: r.f64s()?,
                    tau_values: r.f64s()?,
                },
                v => return Err(Error::Protocol(format!("bad hello role {v}"))),
            },
            Kind::AceReport => Body::AceReport(AceReport {
                attempt: r.u32()?,
                skip: get_bool(&mut r)?,
                snr: r.f64()?,
                tau: r.f64()?,
                bic: r.f64()?,
                ranks: r.u32s()?,
                e_norm: r.f64()?,
                f_norm: r.f64()?,
            }),
            Kind::HyperAssign => Body::HyperAssign(HyperAssign {
                snr: r.f64()?,
                tau: r.f64()?,
                target_ranks: r.u32s()?,
                epsilon: r.f64()?,
            }),
            Kind::BlockUpdate => {
                let sample_count = r.u64()?;
                let params = get_params(&mut r)?;
                check_params(&params)?;
                Body::BlockUpdate(BlockUpdate { sample_count, params })
            }
            Kind::GlobalBlock => {
                let params = get_params(&mut r)?;
                check_params(&params)?;
                Body::GlobalBlock(params)
            }
            Kind::DeflateAck => {
                let ack = DeflateAck {
                    d: r.f64()?,
                    core: r.tensor()?,
                    weight_core: r.tensor()?,
                    e_norm: r.f64()?,
                    f_norm: r.f64()?,
                };
                if ack.core.shape() != ack.weight_core.shape() {
                    return Err(Error::Protocol("acknowledged cores differ in shape".into()));
                }
                Body::DeflateAck(ack)
            }
            Kind::Done => {
                let n = r.count()?;
                Body::Done { model: r.take(n)?.to_vec() }
            }
            Kind::Error => Body::Error { code: r.u32()?, message: r.string()? },
        };
        r.finish()?;
        Ok(Message { round, client_id, body })
    }
}
