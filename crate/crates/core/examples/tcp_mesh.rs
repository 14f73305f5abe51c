//! The same allreduce over a loopback TCP mesh and over in-process
//! channels; results agree bitwise.
//!
//! For separate processes, run one `adasum train --transport tcp --rank R
//! --world-size N --base-port P` per rank instead.

use adasum::collective::{adasum_rvh, simulate, simulate_tcp};
use adasum::{LayerLayout, Tensor};

fn main() -> adasum::Result<()> {
    let ranks = 4;
    let layout = LayerLayout::from_lengths(&[5, 3]);
    let input = |rank: usize| Tensor::from_f64((0..8).map(|i| ((rank * 8 + i) as f64).sin()).collect());

    let tcp = simulate_tcp(ranks, |ctx| {
        let out = adasum_rvh(ctx, &input(ctx.rank()), &layout)?;
        Ok((out, ctx.stats()))
    })?;
    let local = simulate(ranks, |ctx| adasum_rvh(ctx, &input(ctx.rank()), &layout))?;

    for (rank, (out, stats)) in tcp.iter().enumerate() {
        println!("rank {rank}: {} messages, {} bytes sent", stats.messages_sent, stats.bytes_sent);
        assert_eq!(out, &local[rank]);
    }
    println!("tcp and in-process results are bitwise identical: {:?}", tcp[0].0.to_f64_vec());
    Ok(())
}
