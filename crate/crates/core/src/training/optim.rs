//! Optimizers and learning-rate schedules.

use crate::combiner::LayerLayout;
use crate::error::{Error, Result};
use crate::linalg::norm;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { mu: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Lamb { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn momentum() -> Self {
        OptimizerKind::Momentum { mu: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lamb() -> Self {
        OptimizerKind::Lamb {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Momentum { .. } => "momentum",
            OptimizerKind::Adam { .. } => "adam",
            OptimizerKind::Lamb { .. } => "lamb",
        }
    }
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => Ok(OptimizerKind::momentum()),
            "adam" => Ok(OptimizerKind::adam()),
            "lamb" => Ok(OptimizerKind::lamb()),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant(f64),
    /// Linear ramp from `max_lr / warmup` to `max_lr` over the first
    /// `warmup_frac` of `total_steps`, then linear decay towards zero.
    WarmupDecay {
        max_lr: f64,
        warmup_frac: f64,
        total_steps: u64,
    },
}

impl LrSchedule {
    /// Learning rate for the zero-based optimizer step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        match *self {
            LrSchedule::Constant(lr) => lr,
            LrSchedule::WarmupDecay {
                max_lr,
                warmup_frac,
                total_steps,
            } => {
                let total = total_steps.max(1);
                let warmup = ((warmup_frac * total as f64).round() as u64).min(total);
                if step < warmup {
                    max_lr * (step + 1) as f64 / warmup as f64
                } else {
                    let left = total.saturating_sub(step) as f64;
                    max_lr * left / (total - warmup).max(1) as f64
                }
            }
        }
    }
}

/// LAMB's per-layer scaling `‖w‖/‖u‖`, clamped to [0.01, 10]; 1 when
/// either norm is zero.
pub fn trust_ratio(weights: &[f64], update: &[f64]) -> f64 {
    let (wn, un) = (norm(weights), norm(update));
    if wn == 0.0 || un == 0.0 {
        1.0
    } else {
        (wn / un).clamp(0.01, 10.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub schedule: LrSchedule,
    /// First moment, or velocity for momentum.
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, schedule: LrSchedule, num_params: usize) -> Self {
        let (m, v) = match kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Momentum { .. } => (vec![0.0; num_params], Vec::new()),
            _ => (vec![0.0; num_params], vec![0.0; num_params]),
        };
        OptimizerState {
            kind,
            schedule,
            m,
            v,
            step: 0,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule.lr(self.step)
    }

    /// Applies one update to `params` in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], layout: &LayerLayout) -> Result<()> {
        if grad.len() != params.len() {
            return Err(Error::shape(params.len(), grad.len()));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient component {} at index {i} (step {})",
                grad[i], self.step
            )));
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as i32;
        match self.kind {
            OptimizerKind::Sgd => {
                for (w, g) in params.iter_mut().zip(grad) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Momentum { mu } => {
                for ((w, g), v) in params.iter_mut().zip(grad).zip(&mut self.m) {
                    *v = mu * *v + g;
                    *w -= lr * *v;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
            OptimizerKind::Lamb { beta1, beta2, eps } => {
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                let mut update = vec![0.0; params.len()];
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    update[i] = (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
                for seg in layout.segments() {
                    let range = seg.offset..seg.end();
                    let ratio = trust_ratio(&params[range.clone()], &update[range.clone()]);
                    for i in range {
                        params[i] -= lr * ratio * update[i];
                    }
                }
            }
        }
        Ok(())
    }
}
