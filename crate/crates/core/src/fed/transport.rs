//! Frame transports: in-process channels, TCP streams and a recording
//! wrapper used for inspecting traffic.

use std::io::{ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use super::message::{Message, HEADER_LEN};
use crate::error::{Error, Result};

pub const DEFAULT_HEARTBEAT: Duration = Duration::from_secs(5);
pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(120);

/// Timing knobs shared by both ends of a connection.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransportConfig {
    /// Polling granularity for blocking reads.
    pub heartbeat: Duration,
    /// How long the server waits for any single client reply.
    pub round_timeout: Duration,
    /// How long a client waits for the next server instruction.
    pub client_idle_timeout: Duration,
}

impl Default for TransportConfig {
    fn default() -> Self {
        TransportConfig {
            heartbeat: DEFAULT_HEARTBEAT,
            round_timeout: DEFAULT_ROUND_TIMEOUT,
            client_idle_timeout: DEFAULT_ROUND_TIMEOUT * 10,
        }
    }
}

/// Ordered, reliable delivery of whole frames.
pub trait Connection: Send {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()>;
    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>>;

    fn send(&mut self, msg: &Message) -> Result<()> {
        self.send_frame(&msg.encode())
    }

    fn recv(&mut self, timeout: Duration) -> Result<Message> {
        Message::decode(&self.recv_frame(timeout)?)
    }
}

impl<C: Connection + ?Sized> Connection for Box<C> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        (**self).send_frame(frame)
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        (**self).recv_frame(timeout)
    }
}

/// One end of an in-process channel pair.
pub struct InProcessConnection {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

/// Two connected in-process endpoints.
pub fn in_process_pair() -> (InProcessConnection, InProcessConnection) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (InProcessConnection { tx: a_tx, rx: a_rx }, InProcessConnection { tx: b_tx, rx: b_rx })
}

impl Connection for InProcessConnection {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.tx.send(frame.to_vec()).map_err(|_| Error::Transport("peer hung up".into()))
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        match self.rx.recv_timeout(timeout) {
            Ok(f) => Ok(f),
            Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(format!("frame after {timeout:?}"))),
            Err(RecvTimeoutError::Disconnected) => Err(Error::Transport("peer hung up".into())),
        }
    }
}

/// Length-prefixed frames over a TCP stream.
pub struct TcpConnection {
    stream: TcpStream,
    heartbeat: Duration,
    /// Bytes of a frame whose reception was interrupted by a timeout.
    partial: Vec<u8>,
}

impl TcpConnection {
    pub fn new(stream: TcpStream, heartbeat: Duration) -> Result<TcpConnection> {
        stream.set_nodelay(true)?;
        Ok(TcpConnection { stream, heartbeat: heartbeat.max(Duration::from_millis(1)), partial: Vec::new() })
    }

    pub fn connect(addr: impl ToSocketAddrs, cfg: &TransportConfig) -> Result<TcpConnection> {
        let deadline = Instant::now() + cfg.round_timeout;
        loop {
            match TcpStream::connect(&addr) {
                Ok(s) => return TcpConnection::new(s, cfg.heartbeat),
                Err(e) if Instant::now() < deadline => {
                    log::debug!("connect failed ({e}), retrying");
                    std::thread::sleep(cfg.heartbeat.min(Duration::from_millis(200)));
                }
                Err(e) => return Err(Error::Transport(format!("connect: {e}"))),
            }
        }
    }

    /// Reads until `self.partial` holds `want` bytes or the deadline passes.
    fn fill(&mut self, want: usize, deadline: Instant) -> Result<()> {
        let mut buf = [0u8; 64 * 1024];
        while self.partial.len() < want {
            let now = Instant::now();
            if now >= deadline {
                return Err(Error::Timeout("frame from peer".into()));
            }
            let wait = self.heartbeat.min(deadline - now).max(Duration::from_millis(1));
            self.stream.set_read_timeout(Some(wait))?;
            let room = (want - self.partial.len()).min(buf.len());
            match self.stream.read(&mut buf[..room]) {
                Ok(0) => return Err(Error::Transport("connection closed by peer".into())),
                Ok(n) => self.partial.extend_from_slice(&buf[..n]),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
                Err(e) => return Err(Error::Transport(format!("read: {e}"))),
            }
        }
        Ok(())
    }
}

impl Connection for TcpConnection {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.stream
            .write_all(frame)
            .and_then(|_| self.stream.flush())
            .map_err(|e| Error::Transport(format!("write: {e}")))
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        let deadline = Instant::now() + timeout;
        self.fill(HEADER_LEN, deadline)?;
        let (_, len) = Message::parse_header(&self.partial[..HEADER_LEN])?;
        self.fill(HEADER_LEN + len, deadline)?;
        Ok(std::mem::take(&mut self.partial))
    }
}

/// Accepts `n` connections from `listener`, waiting at most `timeout` in total.
pub fn accept_clients(listener: &TcpListener, n: usize, cfg: &TransportConfig) -> Result<Vec<TcpConnection>> {
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + cfg.round_timeout;
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        match listener.accept() {
            Ok((stream, peer)) => {
                log::info!("client connected from {peer}");
                stream.set_nonblocking(false)?;
                out.push(TcpConnection::new(stream, cfg.heartbeat)?);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(Error::Timeout(format!("{} of {n} clients to connect", n - out.len())));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(Error::Transport(format!("accept: {e}"))),
        }
    }
    listener.set_nonblocking(false)?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecordedFrame {
    /// Label of the recording endpoint.
    pub endpoint: String,
    pub direction: Direction,
    pub bytes: Vec<u8>,
}

/// Shared log of frames captured by [`RecordingConnection`]s.
pub type FrameLog = Arc<Mutex<Vec<RecordedFrame>>>;

/// Passes frames through to `inner` and appends a copy to a shared log.
pub struct RecordingConnection<C> {
    inner: C,
    endpoint: String,
    log: FrameLog,
}

impl<C: Connection> RecordingConnection<C> {
    pub fn new(inner: C, endpoint: impl Into<String>, log: FrameLog) -> Self {
        RecordingConnection { inner, endpoint: endpoint.into(), log }
    }

    fn record(&self, direction: Direction, bytes: &[u8]) {
        self.log.lock().expect("frame log poisoned").push(RecordedFrame {
            endpoint: self.endpoint.clone(),
            direction,
            bytes: bytes.to_vec(),
        });
    }
}

impl<C: Connection> Connection for RecordingConnection<C> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.inner.send_frame(frame)?;
        self.record(Direction::Sent, frame);
        Ok(())
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        let f = self.inner.recv_frame(timeout)?;
        self.record(Direction::Received, &f);
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fed::message::Body;

    fn hello() -> Message {
        Message::new(0, 7, Body::ClientHello { sample_count: 3, feature_shape: vec![2, 2], responses: 1 })
    }

    #[test]
    fn in_process_delivers_in_order_and_times_out() {
        let (mut a, mut b) = in_process_pair();
        a.send(&hello()).unwrap();
        a.send(&Message::new(1, 7, Body::Done { model: vec![] })).unwrap();
        assert_eq!(b.recv(Duration::from_secs(1)).unwrap(), hello());
        assert_eq!(b.recv(Duration::from_secs(1)).unwrap().round, 1);
        assert!(matches!(b.recv_frame(Duration::from_millis(10)), Err(Error::Timeout(_))));
        drop(a);
        assert!(matches!(b.recv_frame(Duration::from_millis(10)), Err(Error::Transport(_))));
    }

    #[test]
    fn tcp_round_trip_and_timeout() {
        let cfg = TransportConfig { heartbeat: Duration::from_millis(10), ..TransportConfig::default() };
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = std::thread::spawn(move || {
            let mut c = TcpConnection::connect(addr, &cfg).unwrap();
            c.send(&hello()).unwrap();
            c.recv(Duration::from_secs(5)).unwrap()
        });
        let mut conns = accept_clients(&listener, 1, &cfg).unwrap();
        let got = conns[0].recv(Duration::from_secs(5)).unwrap();
        assert_eq!(got, hello());
        assert!(matches!(conns[0].recv_frame(Duration::from_millis(30)), Err(Error::Timeout(_))));
        let done = Message::new(9, 7, Body::Done { model: vec![4, 5] });
        conns[0].send(&done).unwrap();
        assert_eq!(client.join().unwrap(), done);
    }

    #[test]
    fn recording_captures_both_directions() {
        let log = FrameLog::default();
        let (a, b) = in_process_pair();
        let mut a = RecordingConnection::new(a, "a", log.clone());
        let mut b = RecordingConnection::new(b, "b", log.clone());
        a.send(&hello()).unwrap();
        b.recv(Duration::from_secs(1)).unwrap();
        let frames = log.lock().unwrap();
        assert_eq!(frames.len(), 2);
        assert_eq!(frames[0].direction, Direction::Sent);
        assert_eq!(frames[1].direction, Direction::Received);
        assert_eq!(frames[0].bytes, frames[1].bytes);
    }
}
