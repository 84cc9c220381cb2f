use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Batch, Tensor};

/// What defines one sampled task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskDescriptor {
    Sinusoid {
        amplitude: f64,
        phase: f64,
    },
    Clusters {
        centroids: Vec<Vec<f64>>,
        sigma: f64,
    },
}

/// A support set for adaptation and a query set for evaluation, both drawn
/// from the same task instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Batch,
    pub query: Batch,
    pub task_descriptor: TaskDescriptor,
}

pub const SINUSOID_AMPLITUDE: (f64, f64) = (0.1, 5.0);
pub const SINUSOID_PHASE: (f64, f64) = (0.0, PI);
pub const SINUSOID_INPUT: (f64, f64) = (-5.0, 5.0);

pub fn sinusoid(amplitude: f64, phase: f64, x: f64) -> f64 {
    amplitude * (x + phase).sin()
}

fn sinusoid_batch<R: Rng + ?Sized>(rng: &mut R, n: usize, amplitude: f64, phase: f64) -> Batch {
    let xs: Vec<f64> = (0..n)
        .map(|_| rng.random_range(SINUSOID_INPUT.0..=SINUSOID_INPUT.1))
        .collect();
    let ys = xs.iter().map(|&x| sinusoid(amplitude, phase, x)).collect();
    Batch::new(
        Tensor::matrix(n, 1, xs).unwrap(),
        Tensor::matrix(n, 1, ys).unwrap(),
    )
    .unwrap()
}

/// `y = A sin(x + p)` regression with `K` support and `Q` query points.
pub fn sample_sinusoid<R: Rng + ?Sized>(rng: &mut R, k: usize, q: usize) -> Episode {
    assert!(k > 0 && q > 0, "support and query sizes must be positive");
    let amplitude = rng.random_range(SINUSOID_AMPLITUDE.0..=SINUSOID_AMPLITUDE.1);
    let phase = rng.random_range(SINUSOID_PHASE.0..=SINUSOID_PHASE.1);
    let support = sinusoid_batch(rng, k, amplitude, phase);
    let query = sinusoid_batch(rng, q, amplitude, phase);
    Episode {
        support,
        query,
        task_descriptor: TaskDescriptor::Sinusoid { amplitude, phase },
    }
}

/// Shape of an N-way K-shot Gaussian-cluster episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Smallest allowed angle between two centroids, in radians.
    pub min_angle: f64,
    pub max_attempts: usize,
}

impl ClusterSpec {
    pub fn new(n_way: usize, k_shot: usize, q_query: usize, dim: usize) -> Self {
        Self {
            n_way,
            k_shot,
            q_query,
            dim,
            sigma: 0.3,
            min_angle: PI / 4.0,
            max_attempts: 1000,
        }
    }
}

fn unit_vector<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn sample_centroids<R: Rng + ?Sized>(rng: &mut R, spec: &ClusterSpec) -> Result<Vec<Vec<f64>>> {
    let max_cos = spec.min_angle.cos();
    for _ in 0..spec.max_attempts {
        let cs: Vec<Vec<f64>> = (0..spec.n_way)
            .map(|_| unit_vector(rng, spec.dim))
            .collect();
        let ok = (0..cs.len()).all(|i| {
            (i + 1..cs.len()).all(|j| {
                let cos: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| a * b).sum();
                cos <= max_cos
            })
        });
        if ok {
            return Ok(cs);
        }
    }
    Err(Error::RejectionOverflow(spec.max_attempts))
}

fn cluster_batch<R: Rng + ?Sized>(
    rng: &mut R,
    centroids: &[Vec<f64>],
    per_class: usize,
    sigma: f64,
) -> Batch {
    let (n, dim) = (centroids.len(), centroids[0].len());
    let mut xs = Vec::with_capacity(n * per_class * dim);
    let mut ys = vec![0.0; n * per_class * n];
    for (c, centroid) in centroids.iter().enumerate() {
        for i in 0..per_class {
            for &m in centroid {
                xs.push(m + sigma * rng.sample::<f64, _>(StandardNormal));
            }
            ys[(c * per_class + i) * n + c] = 1.0;
        }
    }
    Batch::new(
        Tensor::matrix(n * per_class, dim, xs).unwrap(),
        Tensor::matrix(n * per_class, n, ys).unwrap(),
    )
    .unwrap()
}

/// Gaussian clusters around unit-norm centroids, one-hot labels, rows in
/// class order.
pub fn sample_cluster_episode_with<R: Rng + ?Sized>(
    rng: &mut R,
    spec: &ClusterSpec,
) -> Result<Episode> {
    if spec.n_way < 2 || spec.dim < 2 {
        return Err(Error::ShapeMismatch(format!(
            "cluster episodes need N >= 2 and dim >= 2, got N={} dim={}",
            spec.n_way, spec.dim
        )));
    }
    let centroids = sample_centroids(rng, spec)?;
    let support = cluster_batch(rng, &centroids, spec.k_shot, spec.sigma);
    let query = cluster_batch(rng, &centroids, spec.q_query, spec.sigma);
    Ok(Episode {
        support,
        query,
        task_descriptor: TaskDescriptor::Clusters {
            centroids,
            sigma: spec.sigma,
        },
    })
}

pub fn sample_cluster_episode<R: Rng + ?Sized>(
    rng: &mut R,
    n_way: usize,
    k_shot: usize,
    q_query: usize,
    dim: usize,
) -> Result<Episode> {
    sample_cluster_episode_with(rng, &ClusterSpec::new(n_way, k_shot, q_query, dim))
}
