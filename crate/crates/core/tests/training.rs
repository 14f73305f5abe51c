use adasum::collective::{simulate, Reduction};
use adasum::training::data::{gauss_blobs, two_spirals};
use adasum::training::{
    distributed_step, train, Batch, LrSchedule, Model, ModelSpec, OptimizerKind, OptimizerState, StepOptions,
    TrainConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

fn batches(seed: u64, count: usize, b: usize) -> Vec<Batch> {
    let data = gauss_blobs(count * b, 4, 3, 0.8, seed);
    (0..count)
        .map(|k| data.batch(&(k * b..(k + 1) * b).collect::<Vec<_>>()).unwrap())
        .collect()
}

#[test]
fn identical_data_adasum_tracks_single_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let base = Model::mlp(4, 6, 3, &mut rng);
    let rounds = batches(3, 12, 8);
    for kind in [OptimizerKind::Sgd, OptimizerKind::momentum(), OptimizerKind::adam(), OptimizerKind::lamb()] {
        let run = |ranks: usize| {
            simulate(ranks, |ctx| {
                let mut m = base.clone();
                let mut opt = OptimizerState::new(kind, LrSchedule::Constant(0.05), m.num_params());
                let mut trajectory = Vec::new();
                for pair in rounds.chunks(2) {
                    distributed_step(ctx, &mut m, &mut opt, pair, &StepOptions::default(), None)?;
                    trajectory.push(m.params.clone());
                }
                Ok(trajectory)
            })
            .unwrap()
            .swap_remove(0)
        };
        let single = run(1);
        for ranks in [2, 4] {
            for (step, (a, b)) in run(ranks).iter().zip(&single).enumerate() {
                let err = max_rel(a, b);
                assert!(err < 1e-8, "{} ranks={ranks} step {step}: {err}", kind.name());
            }
        }
    }
}

#[test]
fn two_rank_sum_is_sgd_on_the_concatenated_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = Model::mlp(4, 5, 3, &mut rng);
    let parts = batches(11, 2, 6);

    let mut joined_inputs = parts[0].inputs.clone();
    joined_inputs.extend_from_slice(&parts[1].inputs);
    let mut joined_labels = parts[0].labels.clone();
    joined_labels.extend_from_slice(&parts[1].labels);
    let joined = Batch::new(joined_inputs, 4, joined_labels).unwrap();
    let mut reference = base.clone();
    let (_, g) = reference.loss_and_grad(&joined).unwrap();
    let mut opt = OptimizerState::new(OptimizerKind::Sgd, LrSchedule::Constant(0.2), reference.num_params());
    opt.apply(&mut reference.params, &g, &reference.layout).unwrap();

    let out = simulate(2, |ctx| {
        let mut m = base.clone();
        let mut opt = OptimizerState::new(OptimizerKind::Sgd, LrSchedule::Constant(0.2), m.num_params());
        let opts = StepOptions {
            reduction: Reduction::Sum,
            ..StepOptions::default()
        };
        distributed_step(ctx, &mut m, &mut opt, &parts[ctx.rank()..ctx.rank() + 1], &opts, None)?;
        Ok(m.params)
    })
    .unwrap();
    for params in &out {
        assert!(max_rel(params, &reference.params) < 1e-12);
    }
    assert_eq!(out[0], out[1]);
}

#[test]
fn sum_single_rank_is_bitwise_deterministic() {
    let data = gauss_blobs(600, 5, 3, 1.0, 9);
    let (tr, ev) = data.split(0.2, 1);
    let cfg = TrainConfig {
        reduction: Reduction::Sum,
        optimizer: OptimizerKind::adam(),
        max_lr: 0.01,
        epochs: 2,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &tr, &ev).unwrap();
    let b = train(&cfg, &tr, &ev).unwrap();
    assert_eq!(a.params, b.params);
    assert_eq!(a.records, b.records);
}

#[test]
fn two_spirals_needs_a_hidden_layer() {
    for seed in 0..2 {
        let data = two_spirals(2000, 0.02, seed);
        let (tr, ev) = data.split(0.2, seed);
        let logistic = TrainConfig {
            model: ModelSpec::Logistic,
            epochs: 20,
            optimizer: OptimizerKind::adam(),
            max_lr: 0.05,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let lin = train(&logistic, &tr.with_bias(), &ev.with_bias()).unwrap();
        let mlp = TrainConfig {
            model: ModelSpec::Mlp { hidden: 64 },
            epochs: 100,
            optimizer: OptimizerKind::adam(),
            max_lr: 0.01,
            warmup_frac: 0.05,
            seed,
            eval_every: 0,
            ..TrainConfig::default()
        };
        let deep = train(&mlp, &tr, &ev).unwrap();
        assert!(lin.final_eval_accuracy < 0.75, "logistic {}", lin.final_eval_accuracy);
        assert!(deep.final_eval_accuracy > 0.95, "mlp {}", deep.final_eval_accuracy);
    }
}
