//! Tracks how orthogonal the rank deltas are during Adasum training: near
//! 1/n when they agree, near 1 when they are orthogonal.

use adasum::training::data::gauss_blobs;
use adasum::training::{train, ModelSpec, TrainConfig};

fn main() -> adasum::Result<()> {
    let (tr, ev) = gauss_blobs(5000, 16, 10, 1.0, 100).split(0.2, 0);
    let cfg = TrainConfig {
        ranks: 8,
        batch_size: 16,
        epochs: 4,
        model: ModelSpec::Mlp { hidden: 32 },
        max_lr: 0.1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let res = train(&cfg, &tr, &ev)?;
    let orth: Vec<f64> = res.records.iter().filter_map(|r| r.orthogonality_mean).collect();
    let buckets = 8;
    let width = orth.len().div_ceil(buckets);
    for (i, chunk) in orth.chunks(width).enumerate() {
        let mean = chunk.iter().sum::<f64>() / chunk.len() as f64;
        let bar = "#".repeat((mean * 40.0) as usize);
        println!("rounds {:>3}-{:<3} {mean:.3} {bar}", i * width + 1, i * width + chunk.len());
    }
    println!("final accuracy {:.4}", res.final_eval_accuracy);
    Ok(())
}
