#![allow(dead_code)]

use std::sync::Arc;

use metastep_core::ad::{FnObjective, Objective, Tape, Var};
use metastep_core::tasks::{Activation, Mlp, MseObjective, TransferSpec, TransferTask};
use metastep_core::{Batch, ParamGroup, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn rel(a: &[f64], b: &[f64]) -> f64 {
    metastep_core::rel_error(a, b)
}

/// Central differences of a scalar function at `x`.
pub fn fd_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let up = f(&work);
            work[i] = x[i] - h;
            let down = f(&work);
            work[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central differences of a vector function along `dir`.
pub fn fd_directional(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], dir: &[f64], h: f64) -> Vec<f64> {
    let shift = |s: f64| -> Vec<f64> { x.iter().zip(dir).map(|(a, d)| a + s * d).collect() };
    let up = f(&shift(h));
    let down = f(&shift(-h));
    up.iter()
        .zip(&down)
        .map(|(u, d)| (u - d) / (2.0 * h))
        .collect()
}

pub fn regression_batch(rng: &mut ChaCha8Rng, rows: usize, d_in: usize, d_out: usize) -> Batch {
    Batch::new(
        Tensor::matrix(rows, d_in, randn(rng, rows * d_in)).unwrap(),
        Tensor::matrix(rows, d_out, randn(rng, rows * d_out)).unwrap(),
    )
    .unwrap()
}

pub fn mlp_mse(sizes: Vec<usize>) -> (Mlp, Arc<dyn Objective>) {
    let mlp = Mlp::new(sizes, Activation::Tanh);
    (mlp.clone(), Arc::new(MseObjective { mlp }))
}

pub fn small_transfer(seed: u64) -> (Arc<TransferTask>, ParamGroup, ParamGroup, Batch) {
    let mut r = rng(seed);
    let spec = TransferSpec {
        input_dim: 4,
        source_hidden: [5, 4],
        target_hidden: [3, 4],
        source_classes: 3,
        target_classes: 3,
        pretrain_steps: 100,
        ..TransferSpec::default()
    };
    let task = Arc::new(TransferTask::build(&mut r, spec).unwrap());
    let phi = task.init_phi(&mut r);
    let mut theta = task.init_theta(&mut r);
    let raw = randn(&mut r, 2);
    let flat: Vec<f64> = theta
        .flatten()
        .iter()
        .enumerate()
        .map(|(i, v)| if i < 2 { 0.3 * raw[i] } else { *v })
        .collect();
    theta = theta.unflatten(&flat).unwrap();
    let batch = task.sample_batch(&mut r, 6);
    (task, phi, theta, batch)
}

/// `f(φ, θ) = softplus(θ₀) · Σ tanh(φ ⊙ a)² + θ₁ · Σ φ` with one scalar θ pair.
pub fn coupled_objective() -> Arc<dyn Objective> {
    Arc::new(FnObjective::new(
        "coupled",
        |tape: &Tape, phi: &[Var<'_>], theta: &[Var<'_>], batch: &Batch| -> Result<Var<'_>> {
            let a = tape.constant(batch.inputs.clone().reshape(vec![phi[0].shape()[0]])?);
            let t = (phi[0] * a).tanh();
            let quad = (t * t).sum() * theta[0].softplus();
            Ok(quad + phi[0].sum() * theta[1])
        },
    ))
}
