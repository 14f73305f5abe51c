//! Packs many small tensors into fused buffers, reduces them with one
//! collective call per buffer and unpacks them. Per-tensor Adasum
//! coefficients survive fusion because each tensor keeps its own layer.

use adasum::collective::{allreduce_fused, fuse, simulate, Reduction};
use adasum::{adasum_pair, Tensor};

fn main() -> adasum::Result<()> {
    let tensors = |rank: usize| -> Vec<(u64, Tensor)> {
        (0..10u64)
            .map(|id| {
                let len = 3 + id as usize;
                let v = (0..len).map(|i| ((rank + 1) as f64 * (i as f64 + id as f64)).cos()).collect();
                (id, Tensor::from_f64(v))
            })
            .collect()
    };
    let threshold = 64; // bytes, small enough to force several buffers
    let buffers = fuse(&tensors(0), threshold)?;
    println!("10 tensors packed into {} buffers of up to {threshold} bytes", buffers.len());
    for b in &buffers {
        println!("  ids {:?} -> {} bytes", b.source_ids, b.size_in_bytes());
    }

    let out = simulate(2, |ctx| allreduce_fused(ctx, &tensors(ctx.rank()), Reduction::Adasum, threshold, 1))?;
    let (t0, t1) = (tensors(0), tensors(1));
    for ((id, reduced), ((_, a), (_, b))) in out[0].iter().zip(t0.iter().zip(&t1)) {
        let direct = adasum_pair(a, b, None)?;
        let err = (0..a.len()).map(|i| (reduced.get(i) - direct.get(i)).abs()).fold(0.0, f64::max);
        println!("tensor {id}: max difference from unfused adasum {err:.1e}");
    }
    Ok(())
}
