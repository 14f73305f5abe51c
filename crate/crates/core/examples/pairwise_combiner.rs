//! The Adasum pair operator and its n-way forms on small vectors.

use adasum::{adasum_linear, adasum_pair, adasum_tree, orthogonality, LayerLayout, Tensor};

fn show(label: &str, t: &Tensor) {
    println!("{label:<28} {:?}", t.to_f64_vec());
}

fn main() -> adasum::Result<()> {
    let a = Tensor::from_f64(vec![1.0, 0.0]);
    let b = Tensor::from_f64(vec![1.0, 1.0]);
    show("adasum((1,0), (1,1))", &adasum_pair(&a, &b, None)?);
    show("orthogonal inputs -> sum", &adasum_pair(&a, &Tensor::from_f64(vec![0.0, 3.0]), None)?);
    show("identical inputs -> input", &adasum_pair(&b, &b, None)?);

    // Coefficients are computed per layer: here each coordinate is its own layer.
    let layout = LayerLayout::from_lengths(&[1, 1]);
    show("per-layer (1 + 1)", &adasum_pair(&a, &b, Some(&layout))?);

    let gs: Vec<Tensor> = (0..4)
        .map(|i| Tensor::from_f64(vec![1.0, i as f64 * 0.5, -(i as f64)]))
        .collect();
    show("tree over 4 gradients", &adasum_tree(&gs, None)?);
    show("left fold over 4 gradients", &adasum_linear(&gs, None)?);
    println!("orthogonality of the 4:       {:.4}", orthogonality(&gs)?);
    Ok(())
}
