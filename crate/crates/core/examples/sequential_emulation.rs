//! Compares one Adasum step and one summed step against a sequential
//! emulation that corrects each gradient with the exact Hessian.

use adasum::oracle::{exact_hessian, ggt_approx_step, sequential_emulation_step, HessianMode};
use adasum::training::{Batch, Model};
use adasum::{adasum_pair, Tensor};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn main() -> adasum::Result<()> {
    let mut model = Model::logistic(3);
    model.params = vec![0.2, -0.4, 0.1];
    let b1 = Batch::new(vec![1.0, 0.5, 1.0, -0.3, 1.2, 1.0], 3, vec![1, 0])?;
    let b2 = Batch::new(vec![0.8, 0.9, 1.0, -1.0, 0.1, 1.0], 3, vec![1, 1])?;
    let (_, g1) = model.loss_and_grad(&b1)?;
    let (_, g2) = model.loss_and_grad(&b2)?;
    let h2 = exact_hessian(&model, &b2, HessianMode::Analytic)?;
    let w0 = &model.params;

    for alpha in [0.5, 0.1, 0.02] {
        let oracle = sequential_emulation_step(w0, &g1, &g2, &h2, alpha)?;
        let ada = adasum_pair(&Tensor::from_f64(g1.clone()), &Tensor::from_f64(g2.clone()), None)?;
        let w_ada: Vec<f64> = w0.iter().zip(ada.to_f64_vec()).map(|(w, g)| w - alpha * g).collect();
        let w_sum: Vec<f64> = (0..3).map(|i| w0[i] - alpha * (g1[i] + g2[i])).collect();
        let w_ggt = ggt_approx_step(w0, &g1, &g2, alpha)?;
        let step = dist(&oracle, w0);
        println!(
            "alpha {alpha:<5} relative error: adasum {:.4}  sum {:.4}  rank-one estimate {:.4}",
            dist(&w_ada, &oracle) / step,
            dist(&w_sum, &oracle) / step,
            dist(&w_ggt, &oracle) / step
        );
    }
    Ok(())
}
