use std::collections::HashSet;
use std::thread;
use std::time::Duration;

use fbttr::bttr::{fit, FitConfig};
use fbttr::data::{make_synthetic, partition, Dataset, PartitionPlan, Scheme, SyntheticSpec};
use fbttr::fed::{
    in_process_pair, run_client, run_federated_fit, run_federation, serve, ClientState, Connection, Kind,
    Transport, TransportConfig,
};
use fbttr::metrics::pearson_r;
use fbttr::sparse_tucker::HyperGrid;
use fbttr::tensor::{Matrix, Tensor};
use fbttr::Result;

fn grid() -> HyperGrid {
    HyperGrid::new(vec![5.0, 10.0, 20.0, 40.0], (95..=100).map(f64::from).collect()).unwrap()
}

fn cfg(blocks: usize) -> FitConfig {
    FitConfig::new(blocks, 1e-9, grid()).unwrap()
}

fn planted(shape: Vec<usize>, blocks: usize, snr: f64, seed: u64) -> Dataset {
    make_synthetic(&SyntheticSpec::new(shape, blocks, Some(snr), seed)).unwrap().0
}

fn pairs(parts: &[Dataset]) -> Vec<(Tensor, Matrix)> {
    parts.iter().map(|d| (d.x.clone(), d.y.clone())).collect()
}

#[test]
fn one_client_reproduces_the_centralized_fit() {
    for (seed, shape) in [(1, vec![40, 6]), (2, vec![40, 5, 4]), (3, vec![40, 4, 3, 3])] {
        let ds = planted(shape, 2, 20.0, seed);
        let (train, test) = (ds.slice(0, 30).unwrap(), ds.slice(30, 40).unwrap());
        let central = fit(&train.x, &train.y, &cfg(3)).unwrap();
        let fed = run_federated_fit(&pairs(&[train]), &cfg(3), Transport::InProcess).unwrap();
        assert_eq!(fed.num_blocks(), central.num_blocks());
        let diff = fed.predict(&test.x).unwrap().max_abs_diff(&central.predict(&test.x).unwrap());
        assert!(diff <= 1e-8, "seed {seed}: {diff}");
    }
}

#[test]
fn identical_replicas_reproduce_one_client() {
    let ds = planted(vec![30, 5, 4], 2, 20.0, 7);
    let one = run_federated_fit(&pairs(std::slice::from_ref(&ds)), &cfg(3), Transport::InProcess).unwrap();
    let three = run_federated_fit(&pairs(&[ds.clone(), ds.clone(), ds.clone()]), &cfg(3), Transport::InProcess).unwrap();
    let diff = one.predict(&ds.x).unwrap().max_abs_diff(&three.predict(&ds.x).unwrap());
    assert!(diff <= 1e-8, "{diff}");
}

#[test]
fn iid_clients_track_the_centralized_fit() {
    let ds = planted(vec![240, 6, 5], 2, 30.0, 11);
    let (train, test) = (ds.slice(0, 200).unwrap(), ds.slice(200, 240).unwrap());
    let parts = partition(&train, &PartitionPlan { scheme: Scheme::Iid, client_count: 4, seed: 5 }).unwrap();
    let central = fit(&train.x, &train.y, &cfg(2)).unwrap();
    let fed = run_federated_fit(&pairs(&parts), &cfg(2), Transport::InProcess).unwrap();
    let r_c = pearson_r(&central.predict(&test.x).unwrap().col(0), &test.y.col(0)).unwrap();
    let r_f = pearson_r(&fed.predict(&test.x).unwrap().col(0), &test.y.col(0)).unwrap();
    assert!(r_c >= 0.95, "{r_c}");
    assert!((r_c - r_f).abs() <= 0.05, "{r_c} vs {r_f}");
}

#[test]
fn runs_are_deterministic_and_transport_independent() {
    let ds = planted(vec![60, 5, 4], 2, 20.0, 3);
    let parts = partition(&ds, &PartitionPlan { scheme: Scheme::Iid, client_count: 3, seed: 1 }).unwrap();
    let tcfg = TransportConfig::default();
    let a = run_federation(&pairs(&parts), &cfg(2), Transport::InProcess, &tcfg).unwrap();
    let b = run_federation(&pairs(&parts), &cfg(2), Transport::InProcess, &tcfg).unwrap();
    let c = run_federation(&pairs(&parts), &cfg(2), Transport::TcpLoopback, &tcfg).unwrap();
    assert_eq!(a.model.to_bytes(), b.model.to_bytes());
    assert_eq!(a.model.to_bytes(), c.model.to_bytes());
    let sent = |r: &fbttr::fed::FederationRun| r.frames.iter().map(|f| f.bytes.clone()).collect::<HashSet<_>>();
    assert_eq!(sent(&a), sent(&c));
}

fn windows(values: &[f64], out: &mut HashSet<[u8; 24]>) {
    for w in values.windows(3) {
        let mut key = [0u8; 24];
        for (i, v) in w.iter().enumerate() {
            key[i * 8..(i + 1) * 8].copy_from_slice(&v.to_le_bytes());
        }
        out.insert(key);
    }
}

#[test]
fn frames_never_carry_raw_data_or_scores() {
    let ds = planted(vec![60, 5, 4], 2, 20.0, 9);
    let parts = partition(&ds, &PartitionPlan { scheme: Scheme::Iid, client_count: 3, seed: 2 }).unwrap();
    let run = run_federation(&pairs(&parts), &cfg(2), Transport::InProcess, &TransportConfig::default()).unwrap();

    let mut secret = HashSet::new();
    for (p, c) in parts.iter().zip(&run.clients) {
        windows(p.x.data(), &mut secret);
        windows(p.y.data(), &mut secret);
        windows(c.e_residual.data(), &mut secret);
        windows(c.f_residual.data(), &mut secret);
        for b in &c.local_blocks {
            windows(b.t.as_ref().expect("clients keep their scores").data(), &mut secret);
        }
    }
    assert!(!secret.is_empty());
    let kinds: HashSet<u8> = run.frames.iter().map(|f| f.bytes[5]).collect();
    assert!(kinds.contains(&(Kind::BlockUpdate as u8)) && kinds.contains(&(Kind::DeflateAck as u8)));
    for f in &run.frames {
        for w in f.bytes.windows(24) {
            assert!(!secret.contains(<&[u8; 24]>::try_from(w).unwrap()), "frame to/from {} leaks data", f.endpoint);
        }
    }
}

/// Client-side connection that misbehaves once a trigger is hit.
struct Faulty<C> {
    inner: C,
    mode: Fault,
    sends: usize,
}

#[derive(Clone, Copy)]
enum Fault {
    /// Swallows every send after the first `n` (the peer sees silence).
    SilentAfter(usize),
    /// Fails as soon as a global block arrives.
    DieOnGlobalBlock,
}

impl<C: Connection> Connection for Faulty<C> {
    fn send_frame(&mut self, frame: &[u8]) -> Result<()> {
        self.sends += 1;
        match self.mode {
            Fault::SilentAfter(n) if self.sends > n => Ok(()),
            _ => self.inner.send_frame(frame),
        }
    }

    fn recv_frame(&mut self, timeout: Duration) -> Result<Vec<u8>> {
        let frame = self.inner.recv_frame(timeout)?;
        if matches!(self.mode, Fault::DieOnGlobalBlock) && frame[5] == Kind::GlobalBlock as u8 {
            return Err(fbttr::Error::Transport("simulated crash".into()));
        }
        Ok(frame)
    }
}

fn run_with_fault(parts: &[Dataset], faulty: u32, fault: Fault) -> (fbttr::bttr::BttrModel, fbttr::fed::ServerState) {
    let tcfg = TransportConfig {
        heartbeat: Duration::from_millis(20),
        round_timeout: Duration::from_millis(800),
        client_idle_timeout: Duration::from_secs(30),
    };
    let mut server_ends = Vec::new();
    let result = thread::scope(|s| {
        for (i, p) in parts.iter().enumerate() {
            let (a, b) = in_process_pair();
            server_ends.push(a);
            s.spawn(move || {
                let mut state = ClientState::new(i as u32, p.x.clone(), p.y.clone()).unwrap();
                let mode = if i as u32 == faulty { fault } else { Fault::SilentAfter(usize::MAX) };
                let mut conn = Faulty { inner: b, mode, sends: 0 };
                let _ = run_client(&mut conn, &mut state, &tcfg);
            });
        }
        serve(std::mem::take(&mut server_ends), &cfg(2), &tcfg)
    });
    result.unwrap()
}

#[test]
fn silent_client_is_retried_then_excluded() {
    let ds = planted(vec![60, 5, 4], 2, 20.0, 4);
    let parts = partition(&ds, &PartitionPlan { scheme: Scheme::Iid, client_count: 3, seed: 3 }).unwrap();
    // HELLO goes through, the first ACE report never arrives.
    let (model, state) = run_with_fault(&parts, 2, Fault::SilentAfter(1));
    assert_eq!(state.excluded, vec![2]);
    assert_eq!(state.client_roster.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1]);
    assert_eq!(model.num_blocks(), 2);

    // The survivors alone give the same model as a clean two-client run.
    let clean = run_federated_fit(&pairs(&parts[..2]), &cfg(2), Transport::InProcess).unwrap();
    assert!(model.predict(&ds.x).unwrap().max_abs_diff(&clean.predict(&ds.x).unwrap()) <= 1e-12);
}

#[test]
fn failure_after_broadcast_excludes_at_once() {
    let ds = planted(vec![60, 5, 4], 2, 20.0, 6);
    let parts = partition(&ds, &PartitionPlan { scheme: Scheme::Iid, client_count: 3, seed: 4 }).unwrap();
    let (model, state) = run_with_fault(&parts, 1, Fault::DieOnGlobalBlock);
    assert_eq!(state.excluded, vec![1]);
    assert_eq!(model.num_blocks(), 2);
    assert_eq!(state.trace.len(), 3);
}
