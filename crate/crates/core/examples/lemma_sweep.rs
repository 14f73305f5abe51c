//! Checks the expectation properties of the combiner on random finite
//! distributions: the expected combined vector stays within a small angle
//! of the mean and its norm within [1, 2] times the mean's.

use adasum::combiner::{ordered_pair_average, COS_ANGLE_BOUND};
use adasum::{expected_combined, lemma_checks, FiniteDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> adasum::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut min_cos, mut min_ratio, mut max_ratio, mut worst_pair) = (1.0f64, f64::INFINITY, 0.0f64, 0.0f64);
    for _ in 0..300 {
        let dim = rng.gen_range(2..=12);
        let atoms = rng.gen_range(2..=32);
        let x = FiniteDistribution::random(&mut rng, dim, atoms);
        let r = lemma_checks(&x)?;
        min_cos = min_cos.min(r.cos_angle);
        min_ratio = min_ratio.min(r.norm_ratio);
        max_ratio = max_ratio.max(r.norm_ratio);
        let (closed, brute) = (expected_combined(&x)?, ordered_pair_average(&x)?);
        worst_pair = closed.iter().zip(&brute).fold(worst_pair, |m, (a, b)| m.max((a - b).abs()));
    }
    println!("300 distributions");
    println!("min cos angle   {min_cos:.6} (bound {COS_ANGLE_BOUND:.6})");
    println!("norm ratio      [{min_ratio:.4}, {max_ratio:.4}]");
    println!("closed form vs all ordered pairs: {worst_pair:.1e}");
    Ok(())
}
