//! Point-to-point messaging between ranks.

use std::fmt;

use crate::error::Result;
use crate::tensor::Tensor;

/// Schedule position of a message. Every collective stamps its frames and
/// checks the stamp on receipt, so ranks that disagree about the schedule
/// fail with a protocol error instead of silently mixing data.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag {
    pub phase: u16,
    pub depth: u16,
    pub group: u16,
}

impl fmt::Display for Tag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "phase={} depth={} group={:#06x}", self.phase, self.depth, self.group)
    }
}

/// Phase codes carried in [`Tag::phase`].
pub mod phase {
    pub const SUM_ALLREDUCE: u16 = 1;
    pub const ADASUM_EXCHANGE: u16 = 2;
    pub const ADASUM_DOT: u16 = 3;
    pub const ADASUM_ALLGATHER: u16 = 4;
    pub const SUM_EXCHANGE: u16 = 5;
    pub const SUM_ALLGATHER: u16 = 6;
    pub const USER: u16 = 100;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub tag: Tag,
    pub payload: Tensor,
}

/// Reliable, ordered, blocking delivery per (sender, receiver) pair.
///
/// `send` must not wait for the receiver to post a matching `recv`: both
/// sides of a pairwise exchange send first and then receive.
pub trait Transport: Send {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&mut self, dest: usize, frame: Frame) -> Result<()>;
    fn recv(&mut self, src: usize) -> Result<Frame>;
}
