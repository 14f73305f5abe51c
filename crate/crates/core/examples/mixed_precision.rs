//! Half-precision communication with dynamic loss scaling. An overflow is
//! injected on one round: that round is skipped and the scale halves.

use adasum::training::data::gauss_blobs;
use adasum::training::{train, ModelSpec, Precision, TrainConfig};

fn main() -> adasum::Result<()> {
    let (tr, ev) = gauss_blobs(5000, 16, 10, 1.0, 100).split(0.2, 0);
    let base = TrainConfig {
        ranks: 8,
        batch_size: 2,
        model: ModelSpec::Mlp { hidden: 32 },
        max_lr: 0.05,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let full = train(&base, &tr, &ev)?;
    let half = train(
        &TrainConfig {
            precision: Precision::F16,
            loss_scale_growth_interval: 25,
            inject_overflow_at: Some(40),
            ..base.clone()
        },
        &tr,
        &ev,
    )?;
    println!("f64 final loss {:.5}", full.final_train_loss);
    println!(
        "f16 final loss {:.5} ({} accepted, {} skipped)",
        half.final_train_loss, half.accepted_rounds, half.rejected_rounds
    );
    for r in half.records.iter().filter(|r| !r.applied) {
        println!("  round {} skipped, scale now {}", r.step, r.scale.unwrap_or_default());
    }
    Ok(())
}
