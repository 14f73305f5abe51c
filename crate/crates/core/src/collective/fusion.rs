//! Packing many small tensors into few large buffers so one collective call
//! serves many layers.

use std::collections::HashSet;

use super::{allreduce, RankContext, Reduction};
use crate::combiner::LayerLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Concatenated tensors plus the boundaries needed to split them again.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedBuffer {
    pub data: Tensor,
    pub layout: LayerLayout,
    /// Originating tensor id of each layout segment.
    pub source_ids: Vec<u64>,
}

impl FusedBuffer {
    pub fn size_in_bytes(&self) -> usize {
        self.data.len() * self.data.dtype().size_in_bytes()
    }
}

/// Packs `tensors` into buffers of at most `threshold` bytes each.
///
/// Tensors are taken in ascending id order and packed greedily, so every rank
/// holding the same ids produces the same buffers. A tensor larger than the
/// threshold gets a buffer of its own; a change of dtype also starts a new
/// buffer.
pub fn fuse(tensors: &[(u64, Tensor)], threshold: usize) -> Result<Vec<FusedBuffer>> {
    let mut seen = HashSet::with_capacity(tensors.len());
    for (id, _) in tensors {
        if !seen.insert(*id) {
            return Err(Error::Argument(format!("duplicate tensor id {id}")));
        }
    }
    let mut order: Vec<&(u64, Tensor)> = tensors.iter().collect();
    order.sort_by_key(|(id, _)| *id);

    let mut buffers = Vec::new();
    let mut pending: Vec<&(u64, Tensor)> = Vec::new();
    let mut pending_bytes = 0usize;
    let flush = |pending: &mut Vec<&(u64, Tensor)>, buffers: &mut Vec<FusedBuffer>| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let parts: Vec<Tensor> = pending.iter().map(|(_, t)| t.clone()).collect();
        let lengths: Vec<usize> = parts.iter().map(Tensor::len).collect();
        buffers.push(FusedBuffer {
            data: Tensor::concat(&parts)?,
            layout: LayerLayout::from_lengths(&lengths),
            source_ids: pending.iter().map(|(id, _)| *id).collect(),
        });
        pending.clear();
        Ok(())
    };
    for entry in order {
        let t = &entry.1;
        let bytes = t.len() * t.dtype().size_in_bytes();
        let dtype_change = pending.first().is_some_and(|(_, p)| p.dtype() != t.dtype());
        if dtype_change || (!pending.is_empty() && pending_bytes + bytes > threshold) {
            flush(&mut pending, &mut buffers)?;
            pending_bytes = 0;
        }
        pending.push(entry);
        pending_bytes += bytes;
    }
    flush(&mut pending, &mut buffers)?;
    Ok(buffers)
}

/// Splits a buffer back into `(id, tensor)` pairs in segment order.
pub fn unfuse(buf: &FusedBuffer) -> Vec<(u64, Tensor)> {
    buf.layout
        .segments()
        .iter()
        .zip(&buf.source_ids)
        .map(|(seg, id)| (*id, buf.data.slice(seg.offset, seg.end())))
        .collect()
}

/// Fuses, allreduces each buffer with per-tensor coefficients, and unfuses.
/// Results come back in ascending id order.
pub fn allreduce_fused(
    ctx: &mut RankContext,
    tensors: &[(u64, Tensor)],
    reduction: Reduction,
    threshold: usize,
    node_size: usize,
) -> Result<Vec<(u64, Tensor)>> {
    let mut out = Vec::with_capacity(tensors.len());
    for buf in fuse(tensors, threshold)? {
        let reduced = FusedBuffer {
            data: allreduce(ctx, &buf.data, &buf.layout, reduction, node_size)?,
            layout: buf.layout,
            source_ids: buf.source_ids,
        };
        out.extend(unfuse(&reduced));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::collective::simulate;
    use crate::tensor::DType;

    fn t(v: &[f64]) -> Tensor {
        Tensor::from_f64(v.to_vec())
    }

    #[test]
    fn roundtrip_and_layout() {
        let ts = vec![(7, t(&[1.0, 2.0])), (3, t(&[3.0, 4.0, 5.0])), (5, t(&[6.0, 7.0, 8.0, 9.0, 10.0]))];
        let bufs = fuse(&ts, 1 << 20).unwrap();
        assert_eq!(bufs.len(), 1);
        assert_eq!(bufs[0].layout.boundaries(), vec![(0, 3), (3, 5), (8, 2)]);
        assert_eq!(bufs[0].source_ids, vec![3, 5, 7]);
        let mut back = unfuse(&bufs[0]);
        back.sort_by_key(|(id, _)| std::cmp::Reverse(*id));
        let mut expected = ts.clone();
        expected.sort_by_key(|(id, _)| std::cmp::Reverse(*id));
        assert_eq!(back, expected);

        let two = fuse(&[(0, t(&[0.0; 3])), (1, t(&[0.0; 5]))], 1 << 20).unwrap();
        assert_eq!(two[0].layout.boundaries(), vec![(0, 3), (3, 5)]);
    }

    #[test]
    fn threshold_splits_buffers() {
        let ts: Vec<(u64, Tensor)> = (0..6).map(|i| (i, t(&[i as f64; 4]))).collect();
        // 32 bytes each; a 64-byte cap holds two.
        let bufs = fuse(&ts, 64).unwrap();
        assert_eq!(bufs.len(), 3);
        assert!(bufs.iter().all(|b| b.size_in_bytes() <= 64));
        let big = fuse(&[(0, t(&[1.0; 100])), (1, t(&[1.0]))], 64).unwrap();
        assert_eq!(big.len(), 2);
        assert_eq!(big[0].data.len(), 100);
    }

    #[test]
    fn dtype_change_starts_new_buffer() {
        let ts = vec![(0, t(&[1.0])), (1, Tensor::from_values(vec![2.0], DType::F16)), (2, t(&[3.0]))];
        let bufs = fuse(&ts, 1 << 20).unwrap();
        assert_eq!(bufs.len(), 3);
    }

    #[test]
    fn duplicate_ids_rejected() {
        assert!(matches!(fuse(&[(1, t(&[1.0])), (1, t(&[2.0]))], 64), Err(Error::Argument(_))));
    }

    #[test]
    fn fused_adasum_matches_per_tensor() {
        let inputs = |r: usize| -> Vec<(u64, Tensor)> {
            vec![
                (0, t(&[1.0 + r as f64, -2.0, 0.5])),
                (1, t(&[r as f64 * 0.3, 4.0, -1.0, 2.0, 0.25])),
                (2, t(&[(r * r) as f64, 1.0])),
            ]
        };
        let fused = simulate(4, |ctx| allreduce_fused(ctx, &inputs(ctx.rank()), Reduction::Adasum, 1 << 20, 1)).unwrap();
        for id in 0..3usize {
            let per_rank: Vec<Tensor> = (0..4).map(|r| inputs(r)[id].1.clone()).collect();
            let expected = crate::combiner::adasum_tree(&per_rank, None).unwrap();
            for out in &fused {
                let got = &out[id].1;
                for i in 0..got.len() {
                    assert!((got.get(i) - expected.get(i)).abs() <= 1e-12 * (1.0 + expected.get(i).abs()));
                }
            }
        }
    }
}
