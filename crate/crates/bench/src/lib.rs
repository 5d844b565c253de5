//! Fixtures shared by the benchmarks.

use iterflow_core::numerics::{matmul, Rng, Tensor};

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(rows, cols, |_, _| rng.standard_normal())
}

/// `A Aᵀ + n I` for a random square `A`.
pub fn random_spd(n: usize, seed: u64) -> Tensor {
    let a = random_matrix(n, n, seed);
    let mut m = matmul(&a, &a.transpose()).expect("square");
    for i in 0..n {
        m.set(i, i, m.at(i, i) + n as f64);
    }
    m
}
