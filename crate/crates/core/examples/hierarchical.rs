//! Hierarchical Adasum: ranks inside a node are summed, nodes are combined
//! with Adasum.

use adasum::collective::{hierarchical_adasum, simulate};
use adasum::combiner::sum_tensors;
use adasum::{adasum_tree, LayerLayout, Tensor};

fn main() -> adasum::Result<()> {
    let (ranks, node_size) = (8, 2);
    let inputs: Vec<Tensor> = (0..ranks)
        .map(|r| Tensor::from_f64((0..6).map(|i| ((r + 1) * (i + 2)) as f64 % 5.0 - 2.0).collect()))
        .collect();
    let layout = LayerLayout::from_lengths(&[4, 2]);

    let out = simulate(ranks, |ctx| hierarchical_adasum(ctx, &inputs[ctx.rank()], &layout, node_size))?;
    let node_sums: Vec<Tensor> = inputs.chunks(node_size).map(sum_tensors).collect::<adasum::Result<_>>()?;
    let reference = adasum_tree(&node_sums, Some(&layout))?;

    println!("{ranks} ranks in nodes of {node_size}");
    println!("hierarchical:         {:?}", out[0].to_f64_vec());
    println!("tree of node sums:    {:?}", reference.to_f64_vec());
    Ok(())
}
