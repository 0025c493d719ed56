//! Fixtures shared by the kernel benchmarks.

use mhattnsurv::numerics::{DenseMatrix, RngStream};

/// `n x d` matrix of standard normal draws.
pub fn normal_matrix(rng: &mut RngStream, n: usize, d: usize) -> DenseMatrix {
    DenseMatrix::new(n, d, (0..n * d).map(|_| rng.normal()).collect()).expect("shape matches data")
}

/// Risks, times and event flags for `n` patients, roughly 70% events.
pub fn survival_batch(rng: &mut RngStream, n: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let risks = (0..n).map(|_| rng.normal()).collect();
    let times = (0..n).map(|_| rng.exponential(0.2)).collect();
    let events = (0..n).map(|_| rng.bernoulli(0.7)).collect();
    (risks, times, events)
}
