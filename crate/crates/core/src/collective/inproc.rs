//! In-process network: one FIFO channel per ordered rank pair.
//!
//! With jitter enabled each endpoint draws from a seeded RNG before every
//! send and yields or sleeps for a random moment. Per-pair order is
//! untouched, but the interleaving of deliveries across pairs changes from
//! seed to seed, which is what the progress tests shake.

use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::transport::{Frame, Transport};
use crate::error::{Error, Result};

pub const DEFAULT_RECV_TIMEOUT: Duration = Duration::from_secs(600);

pub struct InProcTransport {
    rank: usize,
    size: usize,
    outgoing: Vec<Sender<Frame>>,
    incoming: Vec<Receiver<Frame>>,
    jitter: Option<ChaCha8Rng>,
    timeout: Duration,
}

/// Builds `size` connected endpoints.
pub fn endpoints(size: usize) -> Vec<InProcTransport> {
    build(size, None, DEFAULT_RECV_TIMEOUT)
}

/// Endpoints whose send timing is perturbed by a per-rank RNG derived from
/// `seed`.
pub fn endpoints_with_jitter(size: usize, seed: u64) -> Vec<InProcTransport> {
    build(size, Some(seed), DEFAULT_RECV_TIMEOUT)
}

pub(crate) fn build(size: usize, seed: Option<u64>, timeout: Duration) -> Vec<InProcTransport> {
    // senders[src][dst], receivers[dst][src]
    let mut senders: Vec<Vec<Option<Sender<Frame>>>> = (0..size).map(|_| vec![None; size]).collect();
    let mut receivers: Vec<Vec<Option<Receiver<Frame>>>> =
        (0..size).map(|_| (0..size).map(|_| None).collect()).collect();
    for src in 0..size {
        for dst in 0..size {
            let (tx, rx) = channel();
            senders[src][dst] = Some(tx);
            receivers[dst][src] = Some(rx);
        }
    }
    senders
        .into_iter()
        .zip(receivers)
        .enumerate()
        .map(|(rank, (tx, rx))| InProcTransport {
            rank,
            size,
            outgoing: tx.into_iter().map(Option::unwrap).collect(),
            incoming: rx.into_iter().map(Option::unwrap).collect(),
            jitter: seed.map(|s| ChaCha8Rng::seed_from_u64(s ^ (rank as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))),
            timeout,
        })
        .collect()
}

impl InProcTransport {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn perturb(&mut self) {
        if let Some(rng) = self.jitter.as_mut() {
            match rng.gen_range(0..4) {
                0 => {}
                1 | 2 => {
                    for _ in 0..rng.gen_range(1..4) {
                        std::thread::yield_now();
                    }
                }
                _ => std::thread::sleep(Duration::from_micros(rng.gen_range(1..200))),
            }
        }
    }

    fn check_peer(&self, peer: usize) -> Result<()> {
        if peer >= self.size {
            return Err(Error::Transport(format!(
                "rank {peer} is outside a world of size {}",
                self.size
            )));
        }
        Ok(())
    }
}

impl Transport for InProcTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dest: usize, frame: Frame) -> Result<()> {
        self.check_peer(dest)?;
        self.perturb();
        self.outgoing[dest]
            .send(frame)
            .map_err(|_| Error::Transport(format!("rank {dest} hung up")))
    }

    fn recv(&mut self, src: usize) -> Result<Frame> {
        self.check_peer(src)?;
        self.incoming[src].recv_timeout(self.timeout).map_err(|e| match e {
            RecvTimeoutError::Timeout => Error::Transport(format!(
                "rank {} timed out after {:?} waiting for rank {src}",
                self.rank, self.timeout
            )),
            RecvTimeoutError::Disconnected => {
                Error::Transport(format!("rank {src} hung up before sending"))
            }
        })
    }
}
