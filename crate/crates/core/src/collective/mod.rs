//! Rank-parallel reductions.
//!
//! Every collective here is bulk-synchronous: all ranks of the group must
//! call the same collectives in the same order. Reduce-scatter runs by
//! recursive vector halving (pairs at distance 1, 2, 4, ...), and the
//! allgather retraces the same pairs in reverse.
//!
//! [`adasum_rvh`] is the halving allreduce with the adaptive-sum operator.
//! Because each rank only holds a slice of the two vectors being combined,
//! every level first sums the partial per-layer dot products across the
//! ranks that share the logical vector and only then applies the
//! coefficients locally.

pub mod fusion;
pub mod inproc;
pub mod tcp;
pub mod transport;

use crate::combiner::{apply_layer_coefficients, layer_triples, LayerLayout};
use crate::error::{Error, Result};
use crate::tensor::{round_f16, DType, DotTriple, Tensor};

pub use fusion::{allreduce_fused, fuse, unfuse, FusedBuffer};
pub use transport::{phase, Frame, Tag, Transport};

pub const FUSION_THRESHOLD_ENV: &str = "ADASUM_FUSION_THRESHOLD";
pub const NODE_SIZE_ENV: &str = "ADASUM_NODE_SIZE";
pub const DEFAULT_FUSION_THRESHOLD: usize = 4 * 1024 * 1024;

/// Counters kept per rank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CommStats {
    /// Top-level allreduce calls (`adasum_rvh`, `sum_rvh`, hierarchical).
    pub allreduce_calls: u64,
    pub messages_sent: u64,
    pub bytes_sent: u64,
}

/// A rank's identity plus its endpoint into the network.
pub struct RankContext {
    rank: usize,
    size: usize,
    transport: Box<dyn Transport>,
    stats: CommStats,
}

impl RankContext {
    pub fn new<T: Transport + 'static>(transport: T) -> Self {
        RankContext {
            rank: transport.rank(),
            size: transport.size(),
            transport: Box::new(transport),
            stats: CommStats::default(),
        }
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn stats(&self) -> CommStats {
        self.stats
    }

    pub fn send(&mut self, dest: usize, tag: Tag, payload: Tensor) -> Result<()> {
        self.stats.messages_sent += 1;
        self.stats.bytes_sent += payload.encoded_len() as u64;
        self.transport.send(dest, Frame { tag, payload })
    }

    /// Receives from `src` and checks the frame carries `expected`.
    pub fn recv(&mut self, src: usize, expected: Tag) -> Result<Tensor> {
        let frame = self.transport.recv(src)?;
        if frame.tag != expected {
            return Err(Error::Protocol(format!(
                "rank {} expected [{expected}] from rank {src}, got [{}]",
                self.rank, frame.tag
            )));
        }
        Ok(frame.payload)
    }

    /// Blocks until every rank has entered the barrier.
    pub fn barrier(&mut self) -> Result<()> {
        let all: Vec<usize> = (0..self.size).collect();
        sum_allreduce_tagged(self, &[0.0], &all, phase::USER, 0).map(|_| ())
    }
}

/// Reduction applied to effective gradients across ranks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Reduction {
    Sum,
    Adasum,
}

impl std::str::FromStr for Reduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Reduction::Sum),
            "adasum" => Ok(Reduction::Adasum),
            other => Err(Error::Config(format!("unknown reduction '{other}'"))),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Reduction::Sum => "sum",
            Reduction::Adasum => "adasum",
        })
    }
}

/// Knobs read from the environment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CollectiveConfig {
    pub fusion_threshold: usize,
    pub node_size: usize,
}

impl Default for CollectiveConfig {
    fn default() -> Self {
        CollectiveConfig {
            fusion_threshold: DEFAULT_FUSION_THRESHOLD,
            node_size: 1,
        }
    }
}

impl CollectiveConfig {
    pub fn from_env() -> Result<Self> {
        let read = |key: &str, default: usize| -> Result<usize> {
            match std::env::var(key) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{key}={v} is not a non-negative integer"))),
                Err(_) => Ok(default),
            }
        };
        let node_size = read(NODE_SIZE_ENV, 1)?;
        if node_size == 0 {
            return Err(Error::Config(format!("{NODE_SIZE_ENV} must be at least 1")));
        }
        Ok(CollectiveConfig {
            fusion_threshold: read(FUSION_THRESHOLD_ENV, DEFAULT_FUSION_THRESHOLD)?,
            node_size,
        })
    }
}

/// 16-bit tag identifying a member list.
fn group_id(members: &[usize]) -> u16 {
    let mut h: u32 = 0x811c_9dc5;
    for &m in members {
        for b in (m as u32).to_le_bytes() {
            h ^= b as u32;
            h = h.wrapping_mul(0x0100_0193);
        }
    }
    ((h >> 16) ^ (h & 0xffff)) as u16
}

fn position(ctx: &RankContext, members: &[usize]) -> Result<usize> {
    members.iter().position(|&m| m == ctx.rank).ok_or_else(|| {
        Error::Argument(format!("rank {} is not a member of group {members:?}", ctx.rank))
    })
}

fn check_power_of_two(n: usize, what: &str) -> Result<()> {
    if n == 0 || !n.is_power_of_two() {
        return Err(Error::Config(format!("{what} must be a power of two, got {n}")));
    }
    Ok(())
}

/// Elementwise sum of `v` over the ranks in `group`, by recursive doubling.
/// Every member returns a bitwise-identical result.
pub fn sum_allreduce(ctx: &mut RankContext, v: &[f64], group: &[usize]) -> Result<Vec<f64>> {
    sum_allreduce_tagged(ctx, v, group, phase::SUM_ALLREDUCE, 0)
}

fn sum_allreduce_tagged(
    ctx: &mut RankContext,
    v: &[f64],
    members: &[usize],
    phase: u16,
    depth_base: u16,
) -> Result<Vec<f64>> {
    check_power_of_two(members.len(), "group size")?;
    let pos = position(ctx, members)?;
    let gid = group_id(members);
    let mut acc = v.to_vec();
    let mut mask = 1;
    let mut step = 0u16;
    while mask < members.len() {
        let peer = members[pos ^ mask];
        let tag = Tag {
            phase,
            depth: depth_base + step,
            group: gid,
        };
        ctx.send(peer, tag, Tensor::from_f64(acc.clone()))?;
        let other = ctx.recv(peer, tag)?.into_f64_vec();
        if other.len() != acc.len() {
            return Err(Error::Protocol(format!(
                "allreduce length mismatch: {} vs {} from rank {peer}",
                acc.len(),
                other.len()
            )));
        }
        for (a, o) in acc.iter_mut().zip(&other) {
            *a += o;
        }
        mask <<= 1;
        step += 1;
    }
    Ok(acc)
}

#[derive(Clone, Copy)]
enum Op<'a> {
    Sum,
    /// `replicas` consecutive ranks around each member hold the other
    /// fragments of that member's logical vector and join its dot products.
    Adasum { layout: &'a LayerLayout, replicas: usize },
}

struct HalvingStep {
    peer: usize,
    left: bool,
    level: u16,
}

/// One rank's slice of a partially reduced vector, at global offset `lo`.
struct Slice {
    data: Vec<f64>,
    lo: usize,
}

fn round_to(dtype: DType, v: Vec<f64>) -> Vec<f64> {
    match dtype {
        DType::F64 => v,
        DType::F16 => v.into_iter().map(round_f16).collect(),
    }
}

/// Recursive-halving reduce-scatter among `members` (a power-of-two list
/// containing this rank).
fn reduce_scatter(
    ctx: &mut RankContext,
    members: &[usize],
    mut slice: Slice,
    dtype: DType,
    op: Op<'_>,
) -> Result<(Slice, Vec<HalvingStep>)> {
    let n = members.len();
    let pos = position(ctx, members)?;
    let gid = group_id(members);
    let exchange_phase = match op {
        Op::Sum => phase::SUM_EXCHANGE,
        Op::Adasum { .. } => phase::ADASUM_EXCHANGE,
    };
    let mut steps = Vec::new();
    let mut distance = 1;
    let mut level = 0u16;
    while distance < n {
        let left = (pos / distance) % 2 == 0;
        let peer_pos = if left { pos + distance } else { pos - distance };
        let peer = members[peer_pos];
        let len = slice.data.len();
        let mid = len / 2;
        let (keep, give) = if left { (0..mid, mid..len) } else { (mid..len, 0..mid) };
        let tag = Tag {
            phase: exchange_phase,
            depth: level,
            group: gid,
        };
        ctx.send(peer, tag, Tensor::from_values(slice.data[give].to_vec(), dtype))?;
        let received = ctx.recv(peer, tag)?.into_f64_vec();
        if received.len() != keep.len() {
            return Err(Error::Protocol(format!(
                "rank {} expected a half of {} elements from rank {peer}, got {}",
                ctx.rank,
                keep.len(),
                received.len()
            )));
        }
        let mine = &slice.data[keep];
        // `a` is always the left neighbour's half, `b` the right's.
        let (a, b) = if left { (mine, &received[..]) } else { (&received[..], mine) };
        let lo = if left { slice.lo } else { slice.lo + mid };
        let combined = match op {
            Op::Sum => a.iter().zip(b).map(|(x, y)| x + y).collect(),
            Op::Adasum { layout, replicas } => {
                let partial: Vec<f64> = layer_triples(a, b, lo, layout)
                    .iter()
                    .flat_map(|t| t.to_array())
                    .collect();
                let span = 2 * distance;
                let start = (pos / span) * span;
                let dot_group: Vec<usize> = members[start..start + span]
                    .iter()
                    .flat_map(|&m| (m - m % replicas)..(m - m % replicas + replicas))
                    .collect();
                let totals = sum_allreduce_tagged(ctx, &partial, &dot_group, phase::ADASUM_DOT, level * 32)?;
                let triples: Vec<DotTriple> = totals.chunks_exact(3).map(DotTriple::from_slice).collect();
                apply_layer_coefficients(a, b, lo, layout, &triples)
            }
        };
        slice = Slice {
            data: round_to(dtype, combined),
            lo,
        };
        steps.push(HalvingStep { peer, left, level });
        distance *= 2;
        level += 1;
    }
    Ok((slice, steps))
}

/// Undoes `steps` by swapping halves back up the tree.
fn allgather(
    ctx: &mut RankContext,
    members: &[usize],
    mut data: Vec<f64>,
    steps: &[HalvingStep],
    dtype: DType,
    phase: u16,
) -> Result<Vec<f64>> {
    let gid = group_id(members);
    for step in steps.iter().rev() {
        let tag = Tag {
            phase,
            depth: step.level,
            group: gid,
        };
        ctx.send(step.peer, tag, Tensor::from_values(data.clone(), dtype))?;
        let other = ctx.recv(step.peer, tag)?.into_f64_vec();
        data = if step.left {
            data.extend_from_slice(&other);
            data
        } else {
            let mut joined = other;
            joined.extend_from_slice(&data);
            joined
        };
    }
    Ok(data)
}

fn check_world(ctx: &RankContext) -> Result<()> {
    check_power_of_two(ctx.size, "world size")
}

/// Allreduce with the adaptive-sum operator applied per layer.
///
/// Every rank returns the same vector, equal (up to summation order of the
/// dot products) to [`crate::combiner::adasum_tree`] over the inputs in rank
/// order.
pub fn adasum_rvh(ctx: &mut RankContext, x: &Tensor, layout: &LayerLayout) -> Result<Tensor> {
    check_world(ctx)?;
    layout.check_covers(x.len())?;
    ctx.stats.allreduce_calls += 1;
    let members: Vec<usize> = (0..ctx.size).collect();
    let dtype = x.dtype();
    let start = Slice {
        data: x.to_f64_vec(),
        lo: 0,
    };
    let op = Op::Adasum { layout, replicas: 1 };
    let (slice, steps) = reduce_scatter(ctx, &members, start, dtype, op)?;
    let data = allgather(ctx, &members, slice.data, &steps, dtype, phase::ADASUM_ALLGATHER)?;
    Ok(Tensor::from_values(data, dtype))
}

/// Elementwise-sum allreduce by recursive halving and doubling.
pub fn sum_rvh(ctx: &mut RankContext, x: &Tensor) -> Result<Tensor> {
    check_world(ctx)?;
    ctx.stats.allreduce_calls += 1;
    let members: Vec<usize> = (0..ctx.size).collect();
    let dtype = x.dtype();
    let start = Slice {
        data: x.to_f64_vec(),
        lo: 0,
    };
    let (slice, steps) = reduce_scatter(ctx, &members, start, dtype, Op::Sum)?;
    let data = allgather(ctx, &members, slice.data, &steps, dtype, phase::SUM_ALLGATHER)?;
    Ok(Tensor::from_values(data, dtype))
}

/// Two-level allreduce: ranks are grouped into nodes of `node_size`
/// consecutive ranks; each node sums its members' vectors by reduce-scatter,
/// ranks owning the same slice in different nodes combine it with the
/// adaptive-sum allreduce, and an intra-node allgather finishes.
pub fn hierarchical_adasum(
    ctx: &mut RankContext,
    x: &Tensor,
    layout: &LayerLayout,
    node_size: usize,
) -> Result<Tensor> {
    check_world(ctx)?;
    check_power_of_two(node_size, "node size")?;
    if !ctx.size.is_multiple_of(node_size) {
        return Err(Error::Config(format!(
            "world size {} is not divisible by node size {node_size}",
            ctx.size
        )));
    }
    layout.check_covers(x.len())?;
    ctx.stats.allreduce_calls += 1;
    let node = ctx.rank / node_size;
    let local = ctx.rank % node_size;
    let intra: Vec<usize> = (node * node_size..(node + 1) * node_size).collect();
    let cross: Vec<usize> = (0..ctx.size / node_size).map(|n| n * node_size + local).collect();
    let dtype = x.dtype();
    let start = Slice {
        data: x.to_f64_vec(),
        lo: 0,
    };
    let (node_sum, intra_steps) = reduce_scatter(ctx, &intra, start, dtype, Op::Sum)?;
    // Each node's sum is spread over its ranks, so whole-layer dot products
    // gather fragments from every rank of the participating nodes.
    let op = Op::Adasum {
        layout,
        replicas: node_size,
    };
    let (reduced, cross_steps) = reduce_scatter(ctx, &cross, node_sum, dtype, op)?;
    let data = allgather(ctx, &cross, reduced.data, &cross_steps, dtype, phase::ADASUM_ALLGATHER)?;
    let data = allgather(ctx, &intra, data, &intra_steps, dtype, phase::SUM_ALLGATHER)?;
    Ok(Tensor::from_values(data, dtype))
}

/// Dispatches on `reduction`; Adasum goes hierarchical when `node_size > 1`.
pub fn allreduce(
    ctx: &mut RankContext,
    x: &Tensor,
    layout: &LayerLayout,
    reduction: Reduction,
    node_size: usize,
) -> Result<Tensor> {
    match reduction {
        Reduction::Sum => sum_rvh(ctx, x),
        Reduction::Adasum if node_size > 1 => hierarchical_adasum(ctx, x, layout, node_size),
        Reduction::Adasum => adasum_rvh(ctx, x, layout),
    }
}

/// Runs `f` once per rank on its own thread over the given endpoints and
/// collects the per-rank results in rank order.
///
/// When several ranks fail, the first error that is not a secondary
/// transport failure (a peer hanging up) is returned.
pub fn run_ranks<T, E, F>(endpoints: Vec<E>, f: F) -> Result<Vec<T>>
where
    T: Send,
    E: Transport + 'static,
    F: Fn(&mut RankContext) -> Result<T> + Sync,
{
    let results: Vec<Result<T>> = std::thread::scope(|scope| {
        let handles: Vec<_> = endpoints
            .into_iter()
            .map(|endpoint| {
                let f = &f;
                scope.spawn(move || {
                    let mut ctx = RankContext::new(endpoint);
                    f(&mut ctx)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Transport("rank thread panicked".into()))))
            .collect()
    });
    let mut first_transport = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(Error::Transport(msg)) => {
                first_transport.get_or_insert(Error::Transport(msg));
            }
            Err(e) => return Err(e),
        }
    }
    match first_transport {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// [`run_ranks`] over a fresh in-process network of `size` ranks.
pub fn simulate<T, F>(size: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut RankContext) -> Result<T> + Sync,
{
    run_ranks(inproc::endpoints(size), f)
}

/// [`run_ranks`] over a loopback TCP mesh of `size` ranks.
pub fn simulate_tcp<T, F>(size: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&mut RankContext) -> Result<T> + Sync,
{
    let base = tcp::free_base_port(size)?;
    let timeout = std::time::Duration::from_secs(30);
    let endpoints = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..size)
            .map(|rank| scope.spawn(move || tcp::TcpTransport::connect(rank, size, base, timeout)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("connect thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    run_ranks(endpoints, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_f64(v.to_vec())
    }

    #[test]
    fn sum_allreduce_examples() {
        let out = simulate(2, |ctx| {
            let v = if ctx.rank() == 0 { [1.0, 2.0] } else { [3.0, 4.0] };
            sum_allreduce(ctx, &v, &[0, 1])
        })
        .unwrap();
        assert_eq!(out, vec![vec![4.0, 6.0]; 2]);

        let out = simulate(4, |ctx| {
            let r = ctx.rank() as f64;
            sum_allreduce(ctx, &[r, r, r], &[0, 1, 2, 3])
        })
        .unwrap();
        assert_eq!(out, vec![vec![6.0; 3]; 4]);

        let out = simulate(2, |ctx| {
            let r = ctx.rank();
            sum_allreduce(ctx, &[r as f64 + 0.5], &[r])
        })
        .unwrap();
        assert_eq!(out, vec![vec![0.5], vec![1.5]]);
    }

    #[test]
    fn sum_allreduce_subgroups_run_concurrently() {
        let out = simulate(4, |ctx| {
            let group: Vec<usize> = if ctx.rank() < 2 { vec![0, 1] } else { vec![2, 3] };
            sum_allreduce(ctx, &[ctx.rank() as f64], &group)
        })
        .unwrap();
        assert_eq!(out, vec![vec![1.0], vec![1.0], vec![5.0], vec![5.0]]);
    }

    #[test]
    fn mismatched_groups_are_a_protocol_error() {
        let err = simulate(2, |ctx| {
            let group: Vec<usize> = if ctx.rank() == 0 { vec![0, 1] } else { vec![1, 0] };
            sum_allreduce(ctx, &[1.0], &group)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn non_member_is_rejected() {
        let err = simulate(2, |ctx| sum_allreduce(ctx, &[1.0], &[1 - ctx.rank(), 5])).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn rvh_examples() {
        let layout = LayerLayout::single(4);
        let out = simulate(2, |ctx| {
            let x = if ctx.rank() == 0 { t(&[1.0, 0.0, 0.0, 0.0]) } else { t(&[0.0, 0.0, 0.0, 1.0]) };
            adasum_rvh(ctx, &x, &layout)
        })
        .unwrap();
        assert_eq!(out, vec![t(&[1.0, 0.0, 0.0, 1.0]); 2]);

        let v = t(&[0.5, -1.0, 3.0, 2.0, 7.0]);
        let layout = LayerLayout::single(5);
        let out = simulate(4, |ctx| adasum_rvh(ctx, &v, &layout)).unwrap();
        assert_eq!(out, vec![v.clone(); 4]);

        let out = simulate(2, |ctx| {
            let x = if ctx.rank() == 0 { t(&[1.0, 2.0]) } else { t(&[3.0, 4.0]) };
            sum_rvh(ctx, &x)
        })
        .unwrap();
        assert_eq!(out, vec![t(&[4.0, 6.0]); 2]);

        let out = simulate(4, |ctx| sum_rvh(ctx, &v)).unwrap();
        assert_eq!(out, vec![v.scale(4.0); 4]);
    }

    #[test]
    fn single_rank_world_is_identity() {
        let v = t(&[1.0, 2.0, 3.0]);
        let layout = LayerLayout::single(3);
        let out = simulate(1, |ctx| adasum_rvh(ctx, &v, &layout)).unwrap();
        assert_eq!(out[0], v);
        let out = simulate(1, |ctx| sum_rvh(ctx, &v)).unwrap();
        assert_eq!(out[0], v);
    }

    #[test]
    fn short_vectors_exchange_empty_halves() {
        let layout = LayerLayout::single(1);
        let out = simulate(8, |ctx| adasum_rvh(ctx, &t(&[ctx.rank() as f64 + 1.0]), &layout)).unwrap();
        let gs: Vec<Tensor> = (0..8).map(|r| t(&[r as f64 + 1.0])).collect();
        let expected = crate::combiner::adasum_tree(&gs, Some(&layout)).unwrap();
        for o in &out {
            assert!((o.get(0) - expected.get(0)).abs() < 1e-12);
        }
        let empty = LayerLayout::single(0);
        let out = simulate(4, |ctx| adasum_rvh(ctx, &t(&[]), &empty)).unwrap();
        assert!(out.iter().all(Tensor::is_empty));
    }

    #[test]
    fn config_errors() {
        let layout = LayerLayout::single(2);
        let err = simulate(3, |ctx| adasum_rvh(ctx, &t(&[1.0, 2.0]), &layout)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = simulate(4, |ctx| hierarchical_adasum(ctx, &t(&[1.0, 2.0]), &layout, 3)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = simulate(4, |ctx| hierarchical_adasum(ctx, &t(&[1.0, 2.0]), &layout, 8)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn unequal_lengths_are_detected() {
        let err = simulate(2, |ctx| {
            let x = if ctx.rank() == 0 { t(&[1.0, 2.0]) } else { t(&[1.0, 2.0, 3.0]) };
            sum_rvh(ctx, &x)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "{err}");
    }

    #[test]
    fn stats_count_top_level_calls() {
        let layout = LayerLayout::single(8);
        let out = simulate(4, |ctx| {
            let x = t(&[1.0; 8]);
            adasum_rvh(ctx, &x, &layout)?;
            sum_rvh(ctx, &x)?;
            Ok(ctx.stats())
        })
        .unwrap();
        assert!(out.iter().all(|s| s.allreduce_calls == 2 && s.messages_sent > 0));
    }

    #[test]
    fn env_config_defaults() {
        let c = CollectiveConfig::default();
        assert_eq!(c.fusion_threshold, 4_194_304);
        assert_eq!(c.node_size, 1);
    }

    #[test]
    fn reduction_parses() {
        assert_eq!("sum".parse::<Reduction>().unwrap(), Reduction::Sum);
        assert_eq!("adasum".parse::<Reduction>().unwrap(), Reduction::Adasum);
        assert!("mean".parse::<Reduction>().is_err());
    }
}
