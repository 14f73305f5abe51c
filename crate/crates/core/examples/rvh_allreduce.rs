//! Recursive vector-halving Adasum across 8 in-process ranks, checked
//! against the sequential tree combination.

use adasum::collective::{adasum_rvh, simulate, sum_rvh};
use adasum::{adasum_tree, LayerLayout, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adasum::Result<()> {
    let ranks = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let inputs: Vec<Tensor> = (0..ranks)
        .map(|_| Tensor::from_f64((0..1000).map(|_| rng.gen_range(-1.0..1.0)).collect()))
        .collect();
    let layout = LayerLayout::from_lengths(&[600, 300, 100]);

    let reduced = simulate(ranks, |ctx| adasum_rvh(ctx, &inputs[ctx.rank()], &layout))?;
    let summed = simulate(ranks, |ctx| sum_rvh(ctx, &inputs[ctx.rank()]))?;
    let expected = adasum_tree(&inputs, Some(&layout))?;

    let err = (0..expected.len())
        .map(|i| (reduced[0].get(i) - expected.get(i)).abs())
        .fold(0.0, f64::max);
    let agree = reduced.iter().all(|r| r == &reduced[0]);
    println!("{ranks} ranks, 1000 elements in 3 layers");
    println!("all ranks bitwise equal:  {agree}");
    println!("max |rvh - tree|:         {err:.2e}");
    println!("first 3 adasum / sum:     {:?} / {:?}", &reduced[0].to_f64_vec()[..3], &summed[0].to_f64_vec()[..3]);
    Ok(())
}
