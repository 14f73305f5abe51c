//! Exact-Hessian reference for what running minibatches one after another
//! would have produced, and the experiment that scores parallel reductions
//! against it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::combiner::{adasum_tree, orthogonality};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::tensor::Tensor;
use crate::training::data::{gauss_blobs, Dataset};
use crate::training::model::{Batch, Model, ModelKind};

/// Parameter limit for the analytic logistic Hessian.
pub const MAX_ANALYTIC_PARAMS: usize = 64;
/// Parameter limit for finite-difference Hessians.
pub const MAX_FD_PARAMS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianMode {
    Analytic,
    FiniteDifference,
}

/// Symmetric Hessian of the mean batch loss at the model's parameters.
pub fn exact_hessian(model: &Model, batch: &Batch, mode: HessianMode) -> Result<Matrix> {
    let n = model.num_params();
    match (mode, model.kind) {
        (HessianMode::Analytic, ModelKind::LogisticRegression { d }) => {
            if n > MAX_ANALYTIC_PARAMS {
                return Err(Error::Config(format!(
                    "analytic Hessian limited to {MAX_ANALYTIC_PARAMS} parameters, model has {n}"
                )));
            }
            if batch.dim != d {
                return Err(Error::shape(d, batch.dim));
            }
            let mut h = Matrix::zeros(d);
            let b = batch.len() as f64;
            for i in 0..batch.len() {
                let x = batch.row(i);
                let p = 1.0 / (1.0 + (-dot(&model.params, x)).exp());
                h.add_outer(x, p * (1.0 - p) / b);
            }
            for k in 0..d {
                h[(k, k)] += model.l2;
            }
            Ok(h.symmetrized())
        }
        (HessianMode::Analytic, ModelKind::Mlp { .. }) => Err(Error::Config(
            "the analytic Hessian is only available for logistic regression".into(),
        )),
        (HessianMode::FiniteDifference, _) => {
            if n > MAX_FD_PARAMS {
                return Err(Error::Config(format!(
                    "finite-difference Hessian limited to {MAX_FD_PARAMS} parameters, model has {n}"
                )));
            }
            let grad = |w: &[f64]| model.loss_and_grad_at(w, batch).map(|(_, g)| g);
            // Surface numeric errors once rather than inside the probe loop.
            grad(&model.params)?;
            Ok(finite_difference_hessian(|w| grad(w).unwrap_or_else(|_| vec![f64::NAN; n]), &model.params, 1e-5))
        }
    }
}

/// Central differences of `grad`, symmetrized.
pub fn finite_difference_hessian<F: Fn(&[f64]) -> Vec<f64>>(grad: F, w: &[f64], step: f64) -> Matrix {
    let n = w.len();
    let mut h = Matrix::zeros(n);
    let mut probe = w.to_vec();
    for k in 0..n {
        probe[k] = w[k] + step;
        let up = grad(&probe);
        probe[k] = w[k] - step;
        let down = grad(&probe);
        probe[k] = w[k];
        for i in 0..n {
            h[(i, k)] = (up[i] - down[i]) / (2.0 * step);
        }
    }
    h.symmetrized()
}

fn check_len(expected: usize, v: &[f64]) -> Result<()> {
    if v.len() != expected {
        return Err(Error::shape(expected, v.len()));
    }
    Ok(())
}

/// `w0 − α·(g1 + g2 − α·H2·g1)`: two sequential steps with the second
/// gradient corrected to first order for having been taken at `w0`.
pub fn sequential_emulation_step(w0: &[f64], g1: &[f64], g2: &[f64], h2: &Matrix, alpha: f64) -> Result<Vec<f64>> {
    sequential_emulation(w0, &[g1.to_vec(), g2.to_vec()], &[Matrix::zeros(w0.len()), h2.clone()], alpha)
}

/// Folds the gradients left to right; each is corrected by its Hessian
/// applied to the corrected gradients before it.
pub fn sequential_emulation(w0: &[f64], grads: &[Vec<f64>], hessians: &[Matrix], alpha: f64) -> Result<Vec<f64>> {
    if grads.len() != hessians.len() {
        return Err(Error::Argument(format!(
            "{} gradients but {} Hessians",
            grads.len(),
            hessians.len()
        )));
    }
    let n = w0.len();
    let mut acc = vec![0.0; n];
    for (g, h) in grads.iter().zip(hessians) {
        check_len(n, g)?;
        if h.dim() != n {
            return Err(Error::shape(n, h.dim()));
        }
        let hv = h.matvec(&acc);
        for i in 0..n {
            acc[i] += g[i] - alpha * hv[i];
        }
    }
    Ok(w0.iter().zip(&acc).map(|(w, a)| w - alpha * a).collect())
}

/// Sequential step with the Hessian replaced by the rank-one estimate
/// `g2·g2ᵀ` at the step size `1/‖g2‖²`, leaving `α` as the outer rate:
/// `w0 − α·(g1 + g2 − (g2·g1/‖g2‖²)·g2)`. A zero `g2` gives `w0 − α·g1`.
pub fn ggt_approx_step(w0: &[f64], g1: &[f64], g2: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_len(w0.len(), g1)?;
    check_len(w0.len(), g2)?;
    let nn = dot(g2, g2);
    if nn == 0.0 {
        return Ok(w0.iter().zip(g1).map(|(w, g)| w - alpha * g).collect());
    }
    let c = dot(g2, g1) / nn;
    Ok((0..w0.len()).map(|i| w0[i] - alpha * (g1[i] + g2[i] - c * g2[i])).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqErrorConfig {
    pub ranks: usize,
    pub steps: usize,
    /// Examples per rank per step.
    pub batch_size: usize,
    pub alpha: f64,
    pub dim: usize,
    pub examples: usize,
    pub spread: f64,
    pub seed: u64,
    pub path: SeqErrorPath,
}

/// Which update moves the parameters between measured steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqErrorPath {
    /// The emulated sequential update.
    Oracle,
    /// Synchronous SGD on the rank-averaged gradient.
    Average,
}

impl Default for SeqErrorConfig {
    fn default() -> Self {
        SeqErrorConfig {
            ranks: 16,
            steps: 200,
            batch_size: 16,
            alpha: 0.3,
            dim: 8,
            examples: 2000,
            spread: 2.0,
            seed: 0,
            path: SeqErrorPath::Average,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqErrorRow {
    pub step: usize,
    pub rel_err_adasum: f64,
    pub rel_err_sum: f64,
    pub grad_norm_mean: f64,
    pub orthogonality: f64,
    /// Running means of the per-step errors up to this row.
    pub cum_rel_err_adasum: f64,
    pub cum_rel_err_sum: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqErrorReport {
    pub rows: Vec<SeqErrorRow>,
    /// Steps skipped because the oracle update was zero.
    pub skipped: usize,
}

pub const SEQ_ERROR_HEADER: &str =
    "step,rel_err_adasum,rel_err_sum,grad_norm_mean,orthogonality,cum_rel_err_adasum,cum_rel_err_sum";

impl SeqErrorRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.rel_err_adasum,
            self.rel_err_sum,
            self.grad_norm_mean,
            self.orthogonality,
            self.cum_rel_err_adasum,
            self.cum_rel_err_sum
        )
    }
}

fn rel_err(update: &[f64], oracle: &[f64]) -> f64 {
    let diff: Vec<f64> = update.iter().zip(oracle).map(|(a, b)| a - b).collect();
    norm(&diff) / norm(oracle)
}

/// Binary logistic data with an intercept column, as used by the experiment.
pub fn seq_error_dataset(cfg: &SeqErrorConfig) -> Dataset {
    gauss_blobs(cfg.examples, cfg.dim.saturating_sub(1).max(1), 2, cfg.spread, cfg.seed).with_bias()
}

/// Scores the Adasum and plain-sum updates against the exact-Hessian
/// sequential emulation on a logistic-regression run. Every step draws one
/// minibatch per rank at the current parameters; the parameters then move
/// along `cfg.path`.
pub fn relative_error_experiment(cfg: &SeqErrorConfig) -> Result<SeqErrorReport> {
    if cfg.ranks == 0 || cfg.ranks > 16 {
        return Err(Error::Config(format!("ranks must be within 1..=16, got {}", cfg.ranks)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let data = seq_error_dataset(cfg);
    let mut model = Model::logistic(data.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e9e_0e44);
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut skipped = 0;
    let (mut sum_a, mut sum_s) = (0.0, 0.0);
    for step in 1..=cfg.steps {
        let mut grads = Vec::with_capacity(cfg.ranks);
        let mut hessians = Vec::with_capacity(cfg.ranks);
        for _ in 0..cfg.ranks {
            let idx: Vec<usize> = (0..cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
            let batch = data.batch(&idx)?;
            grads.push(model.loss_and_grad(&batch)?.1);
            hessians.push(exact_hessian(&model, &batch, HessianMode::Analytic)?);
        }
        let w0 = model.params.clone();
        let oracle: Vec<f64> = sequential_emulation(&w0, &grads, &hessians, cfg.alpha)?
            .iter()
            .zip(&w0)
            .map(|(w, s)| w - s)
            .collect();
        if norm(&oracle) == 0.0 {
            skipped += 1;
            continue;
        }
        let tensors: Vec<Tensor> = grads.iter().map(|g| Tensor::from_f64(g.clone())).collect();
        let adasum: Vec<f64> = adasum_tree(&tensors, None)?.into_f64_vec().iter().map(|v| -cfg.alpha * v).collect();
        let sum: Vec<f64> = (0..w0.len())
            .map(|k| -cfg.alpha * grads.iter().map(|g| g[k]).sum::<f64>())
            .collect();
        let (ea, es) = (rel_err(&adasum, &oracle), rel_err(&sum, &oracle));
        sum_a += ea;
        sum_s += es;
        let count = rows.len() as f64 + 1.0;
        let grad_norm_mean = grads.iter().map(|g| norm(g)).sum::<f64>() / grads.len() as f64;
        let orth = orthogonality(&tensors).unwrap_or(f64::NAN);
        rows.push(SeqErrorRow {
            step,
            rel_err_adasum: ea,
            rel_err_sum: es,
            grad_norm_mean,
            orthogonality: orth,
            cum_rel_err_adasum: sum_a / count,
            cum_rel_err_sum: sum_s / count,
        });
        model.params = match cfg.path {
            SeqErrorPath::Oracle => w0.iter().zip(&oracle).map(|(w, d)| w + d).collect(),
            SeqErrorPath::Average => w0.iter().zip(&sum).map(|(w, d)| w + d / cfg.ranks as f64).collect(),
        };
    }
    Ok(SeqErrorReport { rows, skipped })
}

pub fn median(values: &[f64]) -> f64 {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::combiner::adasum_pair;
    use rand_distr::StandardNormal;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn logistic_single_example_hessian() {
        let m = Model::logistic(2);
        let b = Batch::new(vec![1.0, 0.0], 2, vec![1]).unwrap();
        let h = exact_hessian(&m, &b, HessianMode::Analytic).unwrap();
        assert_eq!(h, Matrix::from_rows(&[vec![0.25, 0.0], vec![0.0, 0.0]]).unwrap());
    }

    #[test]
    fn quadratic_hessian_is_identity() {
        let h = finite_difference_hessian(|w| w.to_vec(), &[0.3, -1.0, 2.0], 1e-5);
        assert!(h.max_abs_diff(&Matrix::identity(3)) < 1e-9);
    }

    #[test]
    fn analytic_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = Model::logistic(5);
        m.params = rand_vec(&mut rng, 5);
        let b = Batch::new(rand_vec(&mut rng, 40), 5, (0..8).map(|i| i % 2).collect()).unwrap();
        let a = exact_hessian(&m, &b, HessianMode::Analytic).unwrap();
        let f = exact_hessian(&m, &b, HessianMode::FiniteDifference).unwrap();
        assert!(a.max_abs_diff(&f) < 1e-5);
        assert!(a.symmetric_eigenvalues(1e-12)[0] >= -1e-9);
    }

    #[test]
    fn mode_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Model::mlp(4, 3, 2, &mut rng);
        let b = Batch::new(vec![0.0; 4], 4, vec![0]).unwrap();
        assert!(matches!(exact_hessian(&mlp, &b, HessianMode::Analytic), Err(Error::Config(_))));
        assert_eq!(exact_hessian(&mlp, &b, HessianMode::FiniteDifference).unwrap().dim(), mlp.num_params());
        let big = Model::mlp(40, 10, 2, &mut rng);
        let b = Batch::new(vec![0.0; 40], 40, vec![0]).unwrap();
        assert!(matches!(exact_hessian(&big, &b, HessianMode::FiniteDifference), Err(Error::Config(_))));
    }

    #[test]
    fn emulation_examples() {
        let w0 = [1.0, 2.0];
        let g1 = [0.5, -1.0];
        let g2 = [2.0, 1.0];
        let zero = Matrix::zeros(2);
        let out = sequential_emulation_step(&w0, &g1, &g2, &zero, 0.1).unwrap();
        assert_eq!(out, vec![1.0 - 0.1 * 2.5, 2.0 - 0.1 * 0.0]);
        let h = Matrix::from_rows(&[vec![1.0, 0.5], vec![0.5, 2.0]]).unwrap();
        let out = sequential_emulation_step(&w0, &[0.0, 0.0], &g2, &h, 0.1).unwrap();
        assert_eq!(out, vec![1.0 - 0.2, 2.0 - 0.1]);
    }

    #[test]
    fn ggt_examples_and_identity() {
        let w0 = [0.0, 0.0];
        let alpha = 0.5;
        let o = ggt_approx_step(&w0, &[1.0, 0.0], &[0.0, 1.0], alpha).unwrap();
        assert_eq!(o, vec![-0.5, -0.5]);
        let o = ggt_approx_step(&w0, &[1.0, 2.0], &[1.0, 2.0], alpha).unwrap();
        assert_eq!(o, vec![-0.5, -1.0]);
        let a = ggt_approx_step(&w0, &[1.0, 0.0], &[1.0, 1.0], alpha).unwrap();
        let b = ggt_approx_step(&w0, &[1.0, 1.0], &[1.0, 0.0], alpha).unwrap();
        let avg: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        assert!((avg[0] + 0.5 * 1.25).abs() < 1e-15 && (avg[1] + 0.5 * 0.75).abs() < 1e-15);
        assert_eq!(ggt_approx_step(&w0, &[1.0, 1.0], &[0.0, 0.0], 1.0).unwrap(), vec![-1.0, -1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let w: Vec<f64> = rand_vec(&mut rng, 6);
            let (g1, g2) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6));
            let a = ggt_approx_step(&w, &g1, &g2, alpha).unwrap();
            let b = ggt_approx_step(&w, &g2, &g1, alpha).unwrap();
            let ada = adasum_pair(&Tensor::from_f64(g1.clone()), &Tensor::from_f64(g2.clone()), None).unwrap();
            for i in 0..6 {
                let expected = w[i] - alpha * ada.get(i);
                assert!((0.5 * (a[i] + b[i]) - expected).abs() <= 1e-12 * (1.0 + expected.abs()));
            }
        }
    }

    #[test]
    fn experiment_schema_and_small_alpha() {
        let cfg = SeqErrorConfig {
            ranks: 4,
            steps: 10,
            alpha: 1e-4,
            ..SeqErrorConfig::default()
        };
        let rep = relative_error_experiment(&cfg).unwrap();
        assert_eq!(rep.rows.len() + rep.skipped, 10);
        assert!(rep.rows.iter().all(|r| r.rel_err_sum < 1e-3));
        assert_eq!(SEQ_ERROR_HEADER.split(',').count(), rep.rows[0].csv_line().split(',').count());
    }

    #[test]
    fn median_of_values() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
