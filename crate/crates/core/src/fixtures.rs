//! Hand-checked reference instances shared by tests, examples and the CLI.

use crate::matrix::Matrix;
use crate::net::{Dataset, Params};

/// Fixture T1: `H = 1`, widths `(2, 2, 1)`, `W₀ = I₂`, `W₁ = (1, 1)ᵀ`, one sample
/// `a = (1, 0.5)` labelled `f(a) = 1`. The network outputs `1.5`, so `ℓ = 0.125`.
pub fn t1() -> (Params, Dataset) {
    (t1_params(), t1_dataset())
}

pub fn t1_params() -> Params {
    Params::from_matrices(vec![Matrix::identity(2), Matrix::from_rows(&[&[1.0], &[1.0]])])
        .expect("fixture shapes chain")
}

pub fn t1_dataset() -> Dataset {
    Dataset::new(vec![vec![1.0, 0.5]], vec![1.0]).expect("fixture dataset is valid")
}

/// `n` samples at the origin: the data term vanishes and `ℓ_λ = ℓ(0) + (λ/2)‖W‖²`
/// is a pure quadratic bowl in `W`.
pub fn origin_dataset(input_dim: usize, n: usize, label: f64) -> Dataset {
    Dataset::new(vec![vec![0.0; input_dim]; n], vec![label; n]).expect("origin dataset is valid")
}
