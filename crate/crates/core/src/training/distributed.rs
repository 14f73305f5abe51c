//! Data-parallel training where ranks reduce optimizer deltas.
//!
//! Each communication round snapshots the parameters, runs a few local
//! optimizer steps, and reduces the resulting parameter delta (the effective
//! gradient) across ranks. The reduced delta is added back to the snapshot.

use sha2::{Digest, Sha256};

use super::data::{partition, Dataset};
use super::model::{Batch, Model};
use super::optim::{LrSchedule, OptimizerKind, OptimizerState};
use crate::collective::{allreduce, simulate, sum_allreduce, RankContext, Reduction};
use crate::error::{Error, Result};
use crate::precision::{scaled_cast, ScaleDecision, ScaleState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F16,
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f64" => Ok(Precision::F64),
            "f16" => Ok(Precision::F16),
            other => Err(Error::Config(format!("unknown precision '{other}'"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F16 => "f16",
        })
    }
}

/// Per-round options for [`distributed_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOptions {
    pub reduction: Reduction,
    pub precision: Precision,
    pub node_size: usize,
    /// Verify all ranks start from identical parameters.
    pub check_consistency: bool,
    /// Replace this rank's first delta component with +inf before reducing.
    pub inject_overflow: bool,
}

impl Default for StepOptions {
    fn default() -> Self {
        StepOptions {
            reduction: Reduction::Adasum,
            precision: Precision::F64,
            node_size: 1,
            check_consistency: false,
            inject_overflow: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Mean over ranks of each rank's mean local loss.
    pub loss: f64,
    /// False when the reduced delta overflowed and the round was dropped.
    pub applied: bool,
    /// Per-layer `‖reduced‖² / Σᵢ‖Δᵢ‖²`, for Adasum rounds that were applied.
    /// Layers whose deltas are all zero are `None`.
    pub orthogonality: Option<Vec<Option<f64>>>,
    pub lr: f64,
}

impl StepReport {
    pub fn orthogonality_mean(&self) -> Option<f64> {
        let vals: Vec<f64> = self.orthogonality.as_ref()?.iter().flatten().copied().collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

fn param_hash(params: &[f64]) -> f64 {
    let mut h = Sha256::new();
    for p in params {
        h.update(p.to_le_bytes());
    }
    let d = h.finalize();
    f64::from(u32::from_le_bytes([d[0], d[1], d[2], 0]))
}

fn check_consistency(ctx: &mut RankContext, params: &[f64]) -> Result<()> {
    let h = param_hash(params);
    let all: Vec<usize> = (0..ctx.size()).collect();
    let s = sum_allreduce(ctx, &[h, h * h], &all)?;
    // Equal iff every rank contributed the same hash (zero variance).
    if ctx.size() as f64 * s[1] != s[0] * s[0] {
        return Err(Error::Consistency(format!(
            "rank {} parameters diverged from the other ranks (hash {h})",
            ctx.rank()
        )));
    }
    Ok(())
}

/// One communication round: local optimizer steps over `batches`, then an
/// allreduce of the parameter delta.
///
/// With [`Precision::F16`] the delta is sent scaled and rounded to binary16
/// and `scale` decides whether the round is kept; a dropped round restores
/// the starting parameters exactly. Optimizer moments are not rewound.
pub fn distributed_step(
    ctx: &mut RankContext,
    model: &mut Model,
    opt: &mut OptimizerState,
    batches: &[Batch],
    opts: &StepOptions,
    scale: Option<&mut ScaleState>,
) -> Result<StepReport> {
    if batches.is_empty() {
        return Err(Error::Config("a round needs at least one local batch".into()));
    }
    if opts.check_consistency {
        check_consistency(ctx, &model.params)?;
    }
    let start = model.params.clone();
    let mut loss = 0.0;
    let mut lr = 0.0;
    for batch in batches {
        let (l, g) = model.loss_and_grad(batch)?;
        lr = opt.current_lr();
        opt.apply(&mut model.params, &g, &model.layout)?;
        loss += l;
    }
    loss /= batches.len() as f64;
    let mut delta: Vec<f64> = model.params.iter().zip(&start).map(|(p, s)| p - s).collect();
    if opts.inject_overflow && !delta.is_empty() {
        delta[0] = f64::INFINITY;
    }

    let world = ctx.size() as f64;
    let reduced = match opts.precision {
        Precision::F64 => {
            let r = allreduce(ctx, &Tensor::from_f64(delta.clone()), &model.layout, opts.reduction, opts.node_size)?;
            if r.has_non_finite() {
                return Err(Error::Numeric(format!("reduced delta is not finite (local loss {loss})")));
            }
            Some(r.into_f64_vec())
        }
        Precision::F16 => {
            let state = scale.ok_or_else(|| Error::Config("f16 precision needs a scale state".into()))?;
            let q = scaled_cast(&Tensor::from_f64(delta.clone()), state);
            let r = allreduce(ctx, &q, &model.layout, opts.reduction, opts.node_size)?;
            match state.check_and_update(&r) {
                ScaleDecision::Accept(t) => Some(t.into_f64_vec()),
                ScaleDecision::Reject => None,
            }
        }
    };
    let reduced = reduced.map(|mut r| {
        if opts.reduction == Reduction::Sum {
            r.iter_mut().for_each(|v| *v /= world);
        }
        r
    });

    // Loss and per-layer delta norms share one small allreduce.
    let layers = model.layout.segments();
    let mut stats = vec![loss];
    stats.extend(
        layers
            .iter()
            .map(|s| delta[s.offset..s.end()].iter().map(|v| v * v).sum::<f64>()),
    );
    let all: Vec<usize> = (0..ctx.size()).collect();
    let totals = sum_allreduce(ctx, &stats, &all)?;

    let applied = reduced.is_some();
    let orthogonality = match (&reduced, opts.reduction) {
        (Some(r), Reduction::Adasum) => Some(
            layers
                .iter()
                .zip(&totals[1..])
                .map(|(s, &den)| {
                    let num: f64 = r[s.offset..s.end()].iter().map(|v| v * v).sum();
                    (den > 0.0 && den.is_finite()).then(|| num / den)
                })
                .collect(),
        ),
        _ => None,
    };
    model.params = match reduced {
        Some(r) => start.iter().zip(&r).map(|(s, d)| s + d).collect(),
        None => start,
    };
    Ok(StepReport {
        loss: totals[0] / world,
        applied,
        orthogonality,
        lr,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelSpec {
    Logistic,
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub ranks: usize,
    pub batch_size: usize,
    pub local_steps: usize,
    pub reduction: Reduction,
    pub precision: Precision,
    pub seed: u64,
    pub epochs: usize,
    pub node_size: usize,
    pub model: ModelSpec,
    pub optimizer: OptimizerKind,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub loss_scale_init: f64,
    pub loss_scale_growth_interval: u64,
    /// Communication step (1-based) at which rank 0 injects an overflow.
    pub inject_overflow_at: Option<u64>,
    pub check_consistency: bool,
    /// Evaluate every this many rounds (and always on the last); 0 disables.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            ranks: 1,
            batch_size: 16,
            local_steps: 1,
            reduction: Reduction::Adasum,
            precision: Precision::F64,
            seed: 0,
            epochs: 1,
            node_size: 1,
            model: ModelSpec::Mlp { hidden: 16 },
            optimizer: OptimizerKind::Sgd,
            max_lr: 0.1,
            warmup_frac: 0.1,
            loss_scale_init: 32768.0,
            loss_scale_growth_interval: 2000,
            inject_overflow_at: None,
            check_consistency: false,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ranks == 0 || !self.ranks.is_power_of_two() {
            return Err(Error::Config(format!("ranks must be a power of two, got {}", self.ranks)));
        }
        if self.local_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("local_steps, batch_size and epochs must be positive".into()));
        }
        if self.node_size == 0 || !self.ranks.is_multiple_of(self.node_size) {
            return Err(Error::Config(format!(
                "node size {} does not divide {} ranks",
                self.node_size, self.ranks
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must be within [0, 1]".into()));
        }
        Ok(())
    }

    /// Communication rounds per epoch when `n` examples are split over the ranks.
    pub fn rounds_per_epoch(&self, n: usize) -> usize {
        n / self.ranks / (self.batch_size * self.local_steps)
    }

    pub fn build_model(&self, data: &Dataset) -> Result<Model> {
        match self.model {
            ModelSpec::Logistic => {
                if data.classes > 2 {
                    return Err(Error::Config(format!(
                        "logistic regression is binary but the dataset has {} classes",
                        data.classes
                    )));
                }
                Ok(Model::logistic(data.dim))
            }
            ModelSpec::Mlp { hidden } => {
                use rand::SeedableRng;
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d6c_705f_696e_6974);
                Ok(Model::mlp(data.dim, hidden, data.classes, &mut rng))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_accuracy: Option<f64>,
    pub lr: f64,
    pub orthogonality_mean: Option<f64>,
    pub orthogonality_layers: Option<Vec<Option<f64>>>,
    pub scale: Option<f64>,
    pub applied: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainResult {
    pub records: Vec<StepRecord>,
    pub params: Vec<f64>,
    pub final_eval_accuracy: f64,
    /// Mean loss of the final parameters over the whole training set.
    pub final_train_loss: f64,
    pub allreduce_calls: u64,
    pub accepted_rounds: u64,
    pub rejected_rounds: u64,
}

/// Runs the whole schedule on this rank. Only rank 0 evaluates; on other
/// ranks `eval_accuracy` is `None`. `on_record` sees each round as it ends.
pub fn train_on(
    ctx: &mut RankContext,
    cfg: &TrainConfig,
    train: &Dataset,
    eval: &Dataset,
    on_record: &mut dyn FnMut(&StepRecord) -> Result<()>,
) -> Result<TrainResult> {
    cfg.validate()?;
    if ctx.size() != cfg.ranks {
        return Err(Error::Config(format!(
            "configured for {} ranks but the world has {}",
            cfg.ranks,
            ctx.size()
        )));
    }
    let rounds = cfg.rounds_per_epoch(train.len());
    if rounds == 0 {
        return Err(Error::Config(format!(
            "{} examples cannot fill one round of {} ranks x {} local steps x batch {}",
            train.len(),
            cfg.ranks,
            cfg.local_steps,
            cfg.batch_size
        )));
    }
    let mut model = cfg.build_model(train)?;
    let total_steps = (cfg.epochs * rounds * cfg.local_steps) as u64;
    let schedule = LrSchedule::WarmupDecay {
        max_lr: cfg.max_lr,
        warmup_frac: cfg.warmup_frac,
        total_steps,
    };
    let mut opt = OptimizerState::new(cfg.optimizer, schedule, model.num_params());
    let mut scale = (cfg.precision == Precision::F16)
        .then(|| ScaleState::new(cfg.loss_scale_init, cfg.loss_scale_growth_interval));
    let eval_batch = (!eval.is_empty()).then(|| eval.all()).transpose()?;
    let is_root = ctx.rank() == 0;

    let mut records = Vec::new();
    let (mut accepted, mut rejected) = (0, 0);
    let mut step = 0u64;
    let per_round = cfg.batch_size * cfg.local_steps;
    for epoch in 0..cfg.epochs {
        let shard = partition(train.len(), cfg.ranks, ctx.rank(), cfg.seed, epoch as u64);
        for round in 0..rounds {
            step += 1;
            let batches = shard[round * per_round..(round + 1) * per_round]
                .chunks(cfg.batch_size)
                .map(|idx| train.batch(idx))
                .collect::<Result<Vec<_>>>()?;
            let opts = StepOptions {
                reduction: cfg.reduction,
                precision: cfg.precision,
                node_size: cfg.node_size,
                check_consistency: cfg.check_consistency,
                inject_overflow: is_root && cfg.inject_overflow_at == Some(step),
            };
            let report = distributed_step(ctx, &mut model, &mut opt, &batches, &opts, scale.as_mut())?;
            if report.applied {
                accepted += 1;
            } else {
                rejected += 1;
            }
            let last = epoch + 1 == cfg.epochs && round + 1 == rounds;
            let eval_now = cfg.eval_every > 0 && ((step as usize).is_multiple_of(cfg.eval_every) || last);
            let eval_accuracy = match (&eval_batch, is_root && eval_now) {
                (Some(b), true) => Some(model.accuracy(b)),
                _ => None,
            };
            let record = StepRecord {
                step,
                epoch,
                train_loss: report.loss,
                eval_accuracy,
                lr: report.lr,
                orthogonality_mean: report.orthogonality_mean(),
                orthogonality_layers: report.orthogonality,
                scale: scale.as_ref().map(|s| s.scale),
                applied: report.applied,
            };
            on_record(&record)?;
            records.push(record);
        }
    }
    let final_train_loss = if is_root { model.loss(&train.all()?)? } else { f64::NAN };
    let final_eval_accuracy = match (&eval_batch, is_root) {
        (Some(b), true) => model.accuracy(b),
        _ => f64::NAN,
    };
    Ok(TrainResult {
        records,
        params: model.params,
        final_eval_accuracy,
        final_train_loss,
        allreduce_calls: ctx.stats().allreduce_calls,
        accepted_rounds: accepted,
        rejected_rounds: rejected,
    })
}

/// Trains over an in-process world of `cfg.ranks` ranks and returns rank 0's result.
pub fn train(cfg: &TrainConfig, train: &Dataset, eval: &Dataset) -> Result<TrainResult> {
    let mut results = simulate(cfg.ranks, |ctx| train_on(ctx, cfg, train, eval, &mut |_| Ok(())))?;
    Ok(results.swap_remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::data::gauss_blobs;

    fn blobs() -> Dataset {
        gauss_blobs(256, 3, 3, 0.7, 4)
    }

    #[test]
    fn single_rank_equals_sequential_steps() {
        let data = blobs();
        let batches: Vec<Batch> = (0..4).map(|k| data.batch(&(k * 8..k * 8 + 8).collect::<Vec<_>>()).unwrap()).collect();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(1);
        let base = Model::mlp(3, 5, 3, &mut rng);

        let mut seq = base.clone();
        let mut opt = OptimizerState::new(OptimizerKind::momentum(), LrSchedule::Constant(0.1), seq.num_params());
        for b in &batches {
            let (_, g) = seq.loss_and_grad(b).unwrap();
            opt.apply(&mut seq.params, &g, &seq.layout).unwrap();
        }
        for reduction in [Reduction::Sum, Reduction::Adasum] {
            let out = simulate(1, |ctx| {
                let mut m = base.clone();
                let mut opt = OptimizerState::new(OptimizerKind::momentum(), LrSchedule::Constant(0.1), m.num_params());
                let opts = StepOptions {
                    reduction,
                    ..StepOptions::default()
                };
                distributed_step(ctx, &mut m, &mut opt, &batches, &opts, None)?;
                Ok(m.params)
            })
            .unwrap();
            let err = out[0].iter().zip(&seq.params).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-15, "{reduction}: {err}");
        }
    }

    #[test]
    fn consistency_check_catches_divergence() {
        let err = simulate(2, |ctx| {
            let mut m = Model::logistic(2);
            m.params[0] = ctx.rank() as f64;
            let mut opt = OptimizerState::new(OptimizerKind::Sgd, LrSchedule::Constant(0.1), 2);
            let b = Batch::new(vec![1.0, 1.0], 2, vec![1])?;
            let opts = StepOptions {
                check_consistency: true,
                ..StepOptions::default()
            };
            distributed_step(ctx, &mut m, &mut opt, &[b], &opts, None)
        })
        .unwrap_err();
        assert!(matches!(err, Error::Consistency(_)), "{err}");
    }

    #[test]
    fn overflow_round_is_dropped_bitwise() {
        let out = simulate(2, |ctx| {
            let mut m = Model::logistic(2);
            m.params = vec![0.25, -0.5];
            let before = m.params.clone();
            let mut opt = OptimizerState::new(OptimizerKind::Sgd, LrSchedule::Constant(0.1), 2);
            let mut s = ScaleState::new(1024.0, 2000);
            let b = Batch::new(vec![1.0, 2.0], 2, vec![ctx.rank()])?;
            let opts = StepOptions {
                precision: Precision::F16,
                inject_overflow: ctx.rank() == 0,
                ..StepOptions::default()
            };
            let r = distributed_step(ctx, &mut m, &mut opt, &[b], &opts, Some(&mut s))?;
            Ok((r.applied, m.params == before, s.scale))
        })
        .unwrap();
        assert!(out.iter().all(|&o| o == (false, true, 512.0)));
    }

    #[test]
    fn training_runs_and_counts_calls() {
        let data = blobs();
        let (tr, ev) = data.split(0.25, 1);
        let cfg = TrainConfig {
            ranks: 2,
            local_steps: 2,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let res = train(&cfg, &tr, &ev).unwrap();
        let rounds = cfg.rounds_per_epoch(tr.len()) as u64 * 2;
        assert_eq!(res.allreduce_calls, rounds);
        assert_eq!(res.records.len() as u64, rounds);
        assert!(res.final_eval_accuracy > 0.5);
        assert!(res.records.iter().all(|r| r.orthogonality_mean.is_some()));
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            ranks: 3,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let cfg = TrainConfig {
            model: ModelSpec::Logistic,
            ..TrainConfig::default()
        };
        assert!(cfg.build_model(&blobs()).is_err());
    }
}
