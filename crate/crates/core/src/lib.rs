//! Adaptive-summation (Adasum) gradient reduction.
//!
//! The crate provides the pairwise and n-way Adasum operator, a recursive
//! vector-halving allreduce that evaluates it across ranks, dynamic loss
//! scaling for half-precision communication, and a small data-parallel
//! training harness with exact-Hessian reference computations.
//!
//! Runnable walkthroughs live in `examples/`; the `adasum` binary drives the
//! experiments and benchmarks and writes CSV.

pub mod cli;
pub mod collective;
pub mod combiner;
pub mod error;
pub mod linalg;
pub mod oracle;
pub mod precision;
pub mod tensor;
pub mod training;

pub use combiner::{
    adasum_linear, adasum_pair, adasum_tree, expected_combined, lemma_checks, orthogonality,
    orthogonality_per_layer, FiniteDistribution, LayerLayout, LemmaReport,
};
pub use error::{Error, Result};
pub use tensor::{axpby, dequantize_f16, dot_triple, quantize_f16, DType, DotTriple, Tensor};
