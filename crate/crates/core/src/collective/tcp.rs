//! Full-mesh TCP transport.
//!
//! Rank `r` listens on `base_port + r`. For every pair the lower rank opens
//! the connection and first writes its rank id as 8 little-endian bytes.
//! Each frame on the wire is a 16-byte header
//!
//! ```text
//! magic u32 | phase u16 | depth u16 | group u16 | payload length u48
//! ```
//!
//! (all little-endian) followed by the serialized tensor. One writer thread
//! and one reader thread per peer keep `send` non-blocking, so two ranks can
//! push large halves at each other without deadlocking on socket buffers.

use std::io::{Read, Write};
use std::net::{Ipv4Addr, Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::transport::{Frame, Tag, Transport};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: u32 = 0xAD5C_0DE1;
pub const HEADER_LEN: usize = 16;
const MAX_PAYLOAD: u64 = (1 << 48) - 1;

/// Serializes a frame header for a payload of `payload_len` bytes.
pub fn encode_header(tag: Tag, payload_len: usize) -> Result<[u8; HEADER_LEN]> {
    if payload_len as u64 > MAX_PAYLOAD {
        return Err(Error::Transport(format!("payload of {payload_len} bytes exceeds 48-bit length")));
    }
    let mut h = [0u8; HEADER_LEN];
    h[0..4].copy_from_slice(&MAGIC.to_le_bytes());
    h[4..6].copy_from_slice(&tag.phase.to_le_bytes());
    h[6..8].copy_from_slice(&tag.depth.to_le_bytes());
    h[8..10].copy_from_slice(&tag.group.to_le_bytes());
    h[10..16].copy_from_slice(&(payload_len as u64).to_le_bytes()[..6]);
    Ok(h)
}

/// Parses a header into its tag and payload length.
pub fn decode_header(h: &[u8; HEADER_LEN]) -> Result<(Tag, usize)> {
    let magic = u32::from_le_bytes(h[0..4].try_into().unwrap());
    if magic != MAGIC {
        return Err(Error::Protocol(format!("bad frame magic {magic:#010x}")));
    }
    let tag = Tag {
        phase: u16::from_le_bytes([h[4], h[5]]),
        depth: u16::from_le_bytes([h[6], h[7]]),
        group: u16::from_le_bytes([h[8], h[9]]),
    };
    let mut len = [0u8; 8];
    len[..6].copy_from_slice(&h[10..16]);
    Ok((tag, u64::from_le_bytes(len) as usize))
}

pub fn encode_frame(frame: &Frame) -> Result<Vec<u8>> {
    let payload_len = frame.payload.encoded_len();
    let mut out = Vec::with_capacity(HEADER_LEN + payload_len);
    out.extend_from_slice(&encode_header(frame.tag, payload_len)?);
    frame.payload.encode_into(&mut out);
    Ok(out)
}

pub fn read_frame<R: Read>(r: &mut R) -> Result<Frame> {
    let mut h = [0u8; HEADER_LEN];
    r.read_exact(&mut h)?;
    let (tag, len) = decode_header(&h)?;
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(Frame {
        tag,
        payload: Tensor::decode(&payload)?,
    })
}

struct Peer {
    outgoing: Option<Sender<Vec<u8>>>,
    writer: Option<JoinHandle<()>>,
    incoming: Receiver<Result<Frame>>,
}

pub struct TcpTransport {
    rank: usize,
    size: usize,
    peers: Vec<Option<Peer>>,
    timeout: Duration,
}

impl TcpTransport {
    /// Joins the mesh on `127.0.0.1`. Blocks until every peer is connected
    /// or `timeout` elapses.
    pub fn connect(rank: usize, size: usize, base_port: u16, timeout: Duration) -> Result<Self> {
        Self::connect_on(Ipv4Addr::LOCALHOST.into(), rank, size, base_port, timeout)
    }

    pub fn connect_on(
        host: std::net::IpAddr,
        rank: usize,
        size: usize,
        base_port: u16,
        timeout: Duration,
    ) -> Result<Self> {
        if rank >= size {
            return Err(Error::Config(format!("rank {rank} outside world size {size}")));
        }
        let port = |r: usize| -> Result<u16> {
            u16::try_from(base_port as usize + r)
                .map_err(|_| Error::Config(format!("port for rank {r} exceeds 65535")))
        };
        let listener = TcpListener::bind(SocketAddr::new(host, port(rank)?))?;
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..size).map(|_| None).collect();

        #[allow(clippy::needless_range_loop)]
        for peer in (rank + 1)..size {
            let addr = SocketAddr::new(host, port(peer)?);
            let mut stream = loop {
                match TcpStream::connect_timeout(&addr, Duration::from_millis(200)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() >= deadline => {
                        return Err(Error::Transport(format!("connecting to rank {peer} at {addr}: {e}")))
                    }
                    Err(_) => std::thread::sleep(Duration::from_millis(20)),
                }
            };
            stream.write_all(&(rank as u64).to_le_bytes())?;
            streams[peer] = Some(stream);
        }

        listener.set_nonblocking(true)?;
        let mut pending = rank;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, _)) => {
                    stream.set_nonblocking(false)?;
                    stream.set_read_timeout(Some(timeout))?;
                    let mut id = [0u8; 8];
                    stream.read_exact(&mut id)?;
                    stream.set_read_timeout(None)?;
                    let peer = u64::from_le_bytes(id) as usize;
                    if peer >= rank || streams[peer].is_some() {
                        return Err(Error::Protocol(format!(
                            "rank {rank} got an unexpected handshake from rank {peer}"
                        )));
                    }
                    streams[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Transport(format!(
                            "rank {rank} timed out waiting for {pending} lower ranks"
                        )));
                    }
                    std::thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(e.into()),
            }
        }

        let peers = streams
            .into_iter()
            .map(|s| s.map(spawn_peer).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(TcpTransport {
            rank,
            size,
            peers,
            timeout: super::inproc::DEFAULT_RECV_TIMEOUT,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    fn peer(&mut self, r: usize) -> Result<&mut Peer> {
        self.peers
            .get_mut(r)
            .and_then(Option::as_mut)
            .ok_or_else(|| Error::Transport(format!("no connection from rank {} to rank {r}", self.rank)))
    }
}

fn spawn_peer(stream: TcpStream) -> Result<Peer> {
    stream.set_nodelay(true)?;
    let mut write_half = stream.try_clone()?;
    let mut read_half = stream;
    let (out_tx, out_rx) = channel::<Vec<u8>>();
    let (in_tx, in_rx) = channel::<Result<Frame>>();
    let writer = std::thread::spawn(move || {
        for bytes in out_rx {
            if write_half.write_all(&bytes).is_err() {
                break;
            }
        }
        let _ = write_half.flush();
        let _ = write_half.shutdown(Shutdown::Write);
    });
    std::thread::spawn(move || loop {
        match read_frame(&mut read_half) {
            Ok(frame) => {
                if in_tx.send(Ok(frame)).is_err() {
                    break;
                }
            }
            Err(Error::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => {
                let _ = in_tx.send(Err(e));
                break;
            }
        }
    });
    Ok(Peer {
        outgoing: Some(out_tx),
        writer: Some(writer),
        incoming: in_rx,
    })
}

impl Transport for TcpTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.size
    }

    fn send(&mut self, dest: usize, frame: Frame) -> Result<()> {
        let bytes = encode_frame(&frame)?;
        let peer = self.peer(dest)?;
        peer.outgoing
            .as_ref()
            .expect("writer open until drop")
            .send(bytes)
            .map_err(|_| Error::Transport(format!("connection to rank {dest} is closed")))
    }

    fn recv(&mut self, src: usize) -> Result<Frame> {
        let timeout = self.timeout;
        let rank = self.rank;
        let peer = self.peer(src)?;
        match peer.incoming.recv_timeout(timeout) {
            Ok(frame) => frame,
            Err(RecvTimeoutError::Timeout) => Err(Error::Transport(format!(
                "rank {rank} timed out after {timeout:?} waiting for rank {src}"
            ))),
            Err(RecvTimeoutError::Disconnected) => {
                Err(Error::Transport(format!("rank {src} closed the connection")))
            }
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        // Flush queued frames before the process can exit.
        for peer in self.peers.iter_mut().flatten() {
            peer.outgoing.take();
            if let Some(w) = peer.writer.take() {
                let _ = w.join();
            }
        }
    }
}

/// Finds `count` consecutive free loopback ports, for tests and local runs.
pub fn free_base_port(count: usize) -> Result<u16> {
    use rand::Rng;
    let mut rng = rand::thread_rng();
    for _ in 0..200 {
        let base: u16 = rng.gen_range(20_000..(60_000 - count as u16));
        let ok = (0..count).all(|i| TcpListener::bind((Ipv4Addr::LOCALHOST, base + i as u16)).is_ok());
        if ok {
            return Ok(base);
        }
    }
    Err(Error::Transport("no free port range found".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let tag = Tag { phase: 2, depth: 3, group: 0xbeef };
        let h = encode_header(tag, 0x0102_0304_0506).unwrap();
        assert_eq!(&h[0..4], &[0xe1, 0x0d, 0x5c, 0xad]);
        assert_eq!(&h[4..10], &[2, 0, 3, 0, 0xef, 0xbe]);
        assert_eq!(&h[10..16], &[6, 5, 4, 3, 2, 1]);
        assert_eq!(decode_header(&h).unwrap(), (tag, 0x0102_0304_0506));
    }

    #[test]
    fn rejects_bad_magic_and_oversized_payload() {
        let mut h = encode_header(Tag { phase: 1, depth: 0, group: 0 }, 4).unwrap();
        h[0] ^= 1;
        assert!(matches!(decode_header(&h), Err(Error::Protocol(_))));
        assert!(encode_header(Tag { phase: 1, depth: 0, group: 0 }, 1 << 48).is_err());
    }

    #[test]
    fn frame_roundtrip_through_bytes() {
        let frame = Frame {
            tag: Tag { phase: 5, depth: 1, group: 7 },
            payload: Tensor::from_f64(vec![1.5, -2.0, f64::MAX]),
        };
        let bytes = encode_frame(&frame).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 9 + 24);
        let back = read_frame(&mut bytes.as_slice()).unwrap();
        assert_eq!(back, frame);
    }

    #[test]
    fn two_rank_exchange_over_loopback() {
        let base = free_base_port(2).unwrap();
        let handles: Vec<_> = (0..2)
            .map(|rank| {
                std::thread::spawn(move || {
                    let mut t = TcpTransport::connect(rank, 2, base, Duration::from_secs(10)).unwrap();
                    let other = 1 - rank;
                    let payload = Tensor::from_f64(vec![rank as f64; 100_000]);
                    t.send(other, Frame { tag: Tag { phase: 9, depth: 0, group: 0 }, payload }).unwrap();
                    t.recv(other).unwrap()
                })
            })
            .collect();
        for (rank, h) in handles.into_iter().enumerate() {
            let frame = h.join().unwrap();
            assert_eq!(frame.payload.get(0), (1 - rank) as f64);
            assert_eq!(frame.payload.len(), 100_000);
        }
    }
}
