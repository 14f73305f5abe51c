//! Dynamic scaling for half-precision communication.
//!
//! Values are multiplied by a power-of-two scale before being rounded to
//! binary16 so that small gradients stay out of the subnormal range. When a
//! reduced tensor comes back with an overflow the step is dropped and the
//! scale backs off; after a run of clean steps it grows again.

use crate::tensor::{quantize_f16, Tensor};

pub const MIN_SCALE: f64 = 1.0 / 1024.0;
pub const MAX_SCALE: f64 = (1u64 << 30) as f64;

#[derive(Clone, Debug, PartialEq)]
pub struct ScaleState {
    pub scale: f64,
    pub good_steps: u64,
    pub growth_interval: u64,
    pub backoff: f64,
    pub growth: f64,
}

impl Default for ScaleState {
    fn default() -> Self {
        ScaleState {
            scale: 32768.0,
            good_steps: 0,
            growth_interval: 2000,
            backoff: 2.0,
            growth: 2.0,
        }
    }
}

/// Outcome of inspecting an allreduced, scaled tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum ScaleDecision {
    /// The tensor divided by the scale that was in effect.
    Accept(Tensor),
    Reject,
}

impl ScaleDecision {
    pub fn is_accept(&self) -> bool {
        matches!(self, ScaleDecision::Accept(_))
    }
}

impl ScaleState {
    pub fn new(initial_scale: f64, growth_interval: u64) -> Self {
        ScaleState {
            scale: initial_scale.clamp(MIN_SCALE, MAX_SCALE),
            growth_interval: growth_interval.max(1),
            ..ScaleState::default()
        }
    }

    /// Accepts and unscales `result` if every element is finite, otherwise
    /// rejects and backs off. The scale stays within
    /// [`MIN_SCALE`, `MAX_SCALE`].
    pub fn check_and_update(&mut self, result: &Tensor) -> ScaleDecision {
        if result.has_non_finite() {
            self.scale = (self.scale / self.backoff).max(MIN_SCALE);
            self.good_steps = 0;
            return ScaleDecision::Reject;
        }
        let unscaled = Tensor::from_f64(result.to_f64_vec().into_iter().map(|v| v / self.scale).collect());
        self.good_steps += 1;
        if self.good_steps >= self.growth_interval {
            self.scale = (self.scale * self.growth).min(MAX_SCALE);
            self.good_steps = 0;
        }
        ScaleDecision::Accept(unscaled)
    }
}

/// `quantize_f16(scale · t)`.
pub fn scaled_cast(t: &Tensor, state: &ScaleState) -> Tensor {
    quantize_f16(&t.scale(state.scale))
}
