//! One fixed training schedule run sequentially and at 16 and 32 ranks with
//! summed (averaged) and Adasum reduction.

use adasum::collective::Reduction;
use adasum::training::data::gauss_blobs;
use adasum::training::{train, ModelSpec, TrainConfig};

fn main() -> adasum::Result<()> {
    let (tr, ev) = gauss_blobs(5000, 16, 10, 1.0, 100).split(0.2, 0);
    let schedule = TrainConfig {
        batch_size: 2,
        epochs: 1,
        model: ModelSpec::Mlp { hidden: 32 },
        max_lr: 0.05,
        warmup_frac: 0.1,
        eval_every: 0,
        ..TrainConfig::default()
    };
    println!("{:>5} {:>7} {:>9} {:>10}", "ranks", "reduce", "accuracy", "allreduces");
    for (ranks, reduction) in [
        (1, Reduction::Sum),
        (16, Reduction::Sum),
        (16, Reduction::Adasum),
        (32, Reduction::Sum),
        (32, Reduction::Adasum),
    ] {
        let cfg = TrainConfig {
            ranks,
            reduction,
            ..schedule.clone()
        };
        let res = train(&cfg, &tr, &ev)?;
        println!("{ranks:>5} {:>7} {:>9.4} {:>10}", reduction.to_string(), res.final_eval_accuracy, res.allreduce_calls);
    }
    Ok(())
}
