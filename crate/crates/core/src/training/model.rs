//! Small differentiable models with hand-written backprop.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::combiner::LayerLayout;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A minibatch stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub dim: usize,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, dim: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        if inputs.len() != labels.len() * dim {
            return Err(Error::shape(labels.len() * dim, inputs.len()));
        }
        Ok(Batch { inputs, dim, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    /// Binary classifier `σ(w·x)` over labels {0, 1}. Append a constant
    /// feature to the data for an intercept.
    LogisticRegression { d: usize },
    /// One tanh hidden layer and a softmax output.
    Mlp { d: usize, h: usize, classes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub params: Vec<f64>,
    pub layout: LayerLayout,
    /// Coefficient of the `½·l2·‖w‖²` penalty added to the loss.
    pub l2: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

impl Model {
    pub fn logistic(d: usize) -> Self {
        Model {
            kind: ModelKind::LogisticRegression { d },
            params: vec![0.0; d],
            layout: LayerLayout::single(d),
            l2: 0.0,
        }
    }

    /// MLP with weights drawn from `N(0, 1/fan_in)` and zero biases.
    pub fn mlp<R: Rng + ?Sized>(d: usize, h: usize, classes: usize, rng: &mut R) -> Self {
        let mut params = Vec::with_capacity(h * d + h + classes * h + classes);
        let s1 = (1.0 / d.max(1) as f64).sqrt();
        params.extend((0..h * d).map(|_| s1 * rng.sample::<f64, _>(StandardNormal)));
        params.extend(std::iter::repeat_n(0.0, h));
        let s2 = (1.0 / h.max(1) as f64).sqrt();
        params.extend((0..classes * h).map(|_| s2 * rng.sample::<f64, _>(StandardNormal)));
        params.extend(std::iter::repeat_n(0.0, classes));
        Model {
            kind: ModelKind::Mlp { d, h, classes },
            params,
            layout: LayerLayout::from_lengths(&[h * d, h, classes * h, classes]),
            l2: 0.0,
        }
    }

    pub fn with_l2(mut self, l2: f64) -> Self {
        self.l2 = l2;
        self
    }

    pub fn input_dim(&self) -> usize {
        match self.kind {
            ModelKind::LogisticRegression { d } | ModelKind::Mlp { d, .. } => d,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            ModelKind::LogisticRegression { .. } => 2,
            ModelKind::Mlp { classes, .. } => classes,
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params_tensor(&self) -> Tensor {
        Tensor::from_f64(self.params.clone())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.dim != self.input_dim() {
            return Err(Error::shape(self.input_dim(), batch.dim));
        }
        let classes = self.num_classes();
        if let Some(&bad) = batch.labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {bad} outside {classes} classes")));
        }
        Ok(())
    }

    /// Mean cross-entropy over the batch (plus the l2 penalty).
    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        self.evaluate(&self.params, batch, false).map(|(l, _)| l)
    }

    /// Mean cross-entropy and its exact gradient.
    pub fn loss_and_grad(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        self.evaluate(&self.params, batch, true)
    }

    /// [`Model::loss_and_grad`] at parameters `w` instead of `self.params`.
    pub fn loss_and_grad_at(&self, w: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        if w.len() != self.params.len() {
            return Err(Error::shape(self.params.len(), w.len()));
        }
        self.evaluate(w, batch, true)
    }

    fn evaluate(&self, w: &[f64], batch: &Batch, want_grad: bool) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        let b = batch.len() as f64;
        let mut grad = if want_grad { vec![0.0; w.len()] } else { Vec::new() };
        let mut loss = 0.0;
        match self.kind {
            ModelKind::LogisticRegression { d } => {
                for i in 0..batch.len() {
                    let x = batch.row(i);
                    let y = batch.labels[i] as f64;
                    let z: f64 = (0..d).map(|k| w[k] * x[k]).sum();
                    loss += softplus(z) - y * z;
                    if want_grad {
                        let r = (sigmoid(z) - y) / b;
                        for k in 0..d {
                            grad[k] += r * x[k];
                        }
                    }
                }
            }
            ModelKind::Mlp { d, h, classes } => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(classes * h);
                let o_b1 = h * d;
                let o_w2 = o_b1 + h;
                let o_b2 = o_w2 + classes * h;
                let mut act = vec![0.0; h];
                let mut logits = vec![0.0; classes];
                let mut dact = vec![0.0; h];
                for i in 0..batch.len() {
                    let x = batch.row(i);
                    for j in 0..h {
                        let row = &w1[j * d..(j + 1) * d];
                        act[j] = (b1[j] + row.iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).tanh();
                    }
                    for c in 0..classes {
                        let row = &w2[c * h..(c + 1) * h];
                        logits[c] = b2[c] + row.iter().zip(&act).map(|(p, q)| p * q).sum::<f64>();
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
                    let y = batch.labels[i];
                    loss += lse - logits[y];
                    if !want_grad {
                        continue;
                    }
                    dact.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..classes {
                        let delta = ((logits[c] - lse).exp() - if c == y { 1.0 } else { 0.0 }) / b;
                        grad[o_b2 + c] += delta;
                        let row = &w2[c * h..(c + 1) * h];
                        for j in 0..h {
                            grad[o_w2 + c * h + j] += delta * act[j];
                            dact[j] += delta * row[j];
                        }
                    }
                    for j in 0..h {
                        let dz = dact[j] * (1.0 - act[j] * act[j]);
                        grad[o_b1 + j] += dz;
                        for k in 0..d {
                            grad[j * d + k] += dz * x[k];
                        }
                    }
                }
            }
        }
        loss /= b;
        if self.l2 != 0.0 {
            loss += 0.5 * self.l2 * w.iter().map(|v| v * v).sum::<f64>();
            if want_grad {
                for (g, v) in grad.iter_mut().zip(w) {
                    *g += self.l2 * v;
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss {loss} on a batch of {} (max |w| = {:e})",
                batch.len(),
                w.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            )));
        }
        Ok((loss, grad))
    }

    /// Most likely class for one input row.
    pub fn predict(&self, x: &[f64]) -> usize {
        let w = &self.params;
        match self.kind {
            ModelKind::LogisticRegression { d } => {
                let z: f64 = (0..d).map(|k| w[k] * x[k]).sum();
                usize::from(z > 0.0)
            }
            ModelKind::Mlp { d, h, classes } => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(classes * h);
                let act: Vec<f64> = (0..h)
                    .map(|j| (b1[j] + w1[j * d..(j + 1) * d].iter().zip(x).map(|(p, q)| p * q).sum::<f64>()).tanh())
                    .collect();
                (0..classes)
                    .map(|c| b2[c] + w2[c * h..(c + 1) * h].iter().zip(&act).map(|(p, q)| p * q).sum::<f64>())
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, l)| if l > best.1 { (c, l) } else { best })
                    .0
            }
        }
    }

    /// Fraction of rows classified correctly.
    pub fn accuracy(&self, batch: &Batch) -> f64 {
        if batch.is_empty() {
            return 0.0;
        }
        let hits = (0..batch.len()).filter(|&i| self.predict(batch.row(i)) == batch.labels[i]).count();
        hits as f64 / batch.len() as f64
    }
}

/// Central-difference gradient of `f` at `w`.
pub fn finite_difference_gradient<F: Fn(&[f64]) -> f64>(f: F, w: &[f64], step: f64) -> Vec<f64> {
    let mut probe = w.to_vec();
    (0..w.len())
        .map(|k| {
            probe[k] = w[k] + step;
            let up = f(&probe);
            probe[k] = w[k] - step;
            let down = f(&probe);
            probe[k] = w[k];
            (up - down) / (2.0 * step)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_batch(rng: &mut ChaCha8Rng, b: usize, d: usize, classes: usize) -> Batch {
        let inputs = (0..b * d).map(|_| rng.sample(StandardNormal)).collect();
        let labels = (0..b).map(|_| rng.gen_range(0..classes)).collect();
        Batch::new(inputs, d, labels).unwrap()
    }

    fn assert_grad_matches(m: &Model, batch: &Batch) {
        let (_, g) = m.loss_and_grad(batch).unwrap();
        let fd = finite_difference_gradient(|w| m.loss_and_grad_at(w, batch).unwrap().0, &m.params, 1e-5);
        let scale = g.iter().chain(&fd).fold(1e-3f64, |acc, v| acc.max(v.abs()));
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * scale, "{a} vs {b}");
        }
    }

    #[test]
    fn logistic_zero_weights_balanced_batch_is_ln2() {
        let batch = Batch::new(vec![1.0, 2.0, -1.0, 0.5], 2, vec![0, 1]).unwrap();
        let m = Model::logistic(2);
        assert!((m.loss(&batch).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn duplicated_examples_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Model::mlp(3, 4, 3, &mut rng);
        let one = Batch::new(vec![0.3, -1.0, 2.0], 3, vec![2]).unwrap();
        let many = Batch::new([0.3, -1.0, 2.0].repeat(5), 3, vec![2; 5]).unwrap();
        let (l1, g1) = m.loss_and_grad(&one).unwrap();
        let (l5, g5) = m.loss_and_grad(&many).unwrap();
        assert!((l1 - l5).abs() < 1e-14);
        for (a, b) in g1.iter().zip(&g5) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let mut m = Model::logistic(5).with_l2(0.01);
            m.params = (0..5).map(|_| rng.sample(StandardNormal)).collect();
            let batch = random_batch(&mut rng, 7, 5, 2);
            assert_grad_matches(&m, &batch);
            let m = Model::mlp(4, 6, 3, &mut rng);
            let batch = random_batch(&mut rng, 5, 4, 3);
            assert_grad_matches(&m, &batch);
        }
    }

    #[test]
    fn mlp_layout_has_four_segments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Model::mlp(2, 8, 2, &mut rng);
        assert_eq!(m.layout.boundaries(), vec![(0, 16), (16, 8), (24, 16), (40, 2)]);
        assert_eq!(m.num_params(), 42);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let m = Model::logistic(2);
        let batch = Batch::new(vec![1.0, 2.0, 3.0], 3, vec![0]).unwrap();
        assert!(matches!(m.loss(&batch), Err(Error::Shape { .. })));
        let batch = Batch::new(vec![1.0, 2.0], 2, vec![2]).unwrap();
        assert!(matches!(m.loss(&batch), Err(Error::Argument(_))));
        let mut m = Model::logistic(1);
        m.params[0] = f64::NAN;
        let batch = Batch::new(vec![1.0], 1, vec![1]).unwrap();
        assert!(matches!(m.loss(&batch), Err(Error::Numeric(_))));
    }

    #[test]
    fn predictions() {
        let mut m = Model::logistic(1);
        m.params[0] = 2.0;
        let batch = Batch::new(vec![1.0, -1.0], 1, vec![1, 0]).unwrap();
        assert_eq!(m.accuracy(&batch), 1.0);
    }
}
