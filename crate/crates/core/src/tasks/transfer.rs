//! Toy knowledge-transfer problem with a meta-network.
//!
//! A frozen source network, pretrained on its own labelling of the input
//! space, guides a target network through a feature-matching loss
//!
//! ```text
//! l_tfr = Σ_l w_l(θ) · mean_rows ‖h_tgt^l − h_src^l · M_l‖²,   w_l = softplus(raw_l)
//! ```
//!
//! The meta-parameters θ are the raw layer weights and the matching maps;
//! they only enter `l_tfr`, never the classification loss.

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{self, Objective, Tape, Var};
use crate::dynamics::{self, HyperParams, OptState};
use crate::error::{Error, Result};
use crate::metagrad::TransferObjectives;
use crate::tasks::mlp::{accuracy, cross_entropy, Activation, Mlp};
use crate::tensor::{Batch, ParamGroup, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    pub input_dim: usize,
    pub source_hidden: [usize; 2],
    pub target_hidden: [usize; 2],
    pub source_classes: usize,
    pub target_classes: usize,
    pub beta: f64,
    pub pretrain_steps: usize,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,
}

impl Default for TransferSpec {
    fn default() -> Self {
        Self {
            input_dim: 8,
            source_hidden: [16, 16],
            target_hidden: [12, 12],
            source_classes: 6,
            target_classes: 4,
            beta: 0.5,
            pretrain_steps: 500,
            pretrain_lr: 0.1,
            pretrain_batch: 32,
        }
    }
}

/// Labels are the arg-max of a fixed random linear read-out of the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLabeler {
    pub weights: Tensor,
}

impl LinearLabeler {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, input_dim: usize, classes: usize) -> Self {
        let w = (0..input_dim * classes)
            .map(|_| rng.sample(StandardNormal))
            .collect();
        Self {
            weights: Tensor::matrix(input_dim, classes, w).unwrap(),
        }
    }

    pub fn classes(&self) -> usize {
        self.weights.cols()
    }

    /// Gaussian inputs with one-hot labels.
    pub fn batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Batch {
        let (d, c) = (self.weights.rows(), self.weights.cols());
        let xs: Vec<f64> = (0..size * d).map(|_| rng.sample(StandardNormal)).collect();
        let mut ys = vec![0.0; size * c];
        for r in 0..size {
            let x = &xs[r * d..(r + 1) * d];
            let mut best = (0, f64::NEG_INFINITY);
            for k in 0..c {
                let s: f64 = (0..d).map(|i| x[i] * self.weights.data()[i * c + k]).sum();
                if s > best.1 {
                    best = (k, s);
                }
            }
            ys[r * c + best.0] = 1.0;
        }
        Batch::new(
            Tensor::matrix(size, d, xs).unwrap(),
            Tensor::matrix(size, c, ys).unwrap(),
        )
        .unwrap()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTask {
    pub spec: TransferSpec,
    pub source_model: Mlp,
    pub source_params: ParamGroup,
    pub target_model: Mlp,
    pub source_labels: LinearLabeler,
    pub target_labels: LinearLabeler,
}

impl TransferTask {
    /// Samples both label functions and pretrains the source network with
    /// plain SGD for `spec.pretrain_steps` steps.
    pub fn build<R: Rng + ?Sized>(rng: &mut R, spec: TransferSpec) -> Result<Self> {
        let [s1, s2] = spec.source_hidden;
        let [t1, t2] = spec.target_hidden;
        let source_model = Mlp::new(
            vec![spec.input_dim, s1, s2, spec.source_classes],
            Activation::Tanh,
        );
        let target_model = Mlp::new(
            vec![spec.input_dim, t1, t2, spec.target_classes],
            Activation::Tanh,
        );
        let source_labels = LinearLabeler::sample(rng, spec.input_dim, spec.source_classes);
        let target_labels = LinearLabeler::sample(rng, spec.input_dim, spec.target_classes);

        let objective = crate::tasks::CrossEntropyObjective {
            mlp: source_model.clone(),
        };
        let layout = source_model.init(rng);
        let hp = HyperParams::sgd(spec.pretrain_lr)?;
        let mut state = OptState::initial(Tensor::vector(layout.flatten()));
        let empty = ParamGroup::new();
        for _ in 0..spec.pretrain_steps {
            let batch = source_labels.batch(rng, spec.pretrain_batch);
            let params = layout.unflatten(state.phi.data())?;
            let g = ad::grad(&objective, &params, &empty, &batch)?;
            state = dynamics::step(&state, &g, &hp)?;
        }
        let source_params = layout.unflatten(state.phi.data())?;
        Ok(Self {
            spec,
            source_model,
            source_params,
            target_model,
            source_labels,
            target_labels,
        })
    }

    pub fn init_phi<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamGroup {
        self.target_model.init(rng)
    }

    /// Raw weights at zero (`w_l = ln 2`) and Gaussian matching maps.
    pub fn init_theta<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamGroup {
        let mut g = ParamGroup::new();
        for l in 0..2 {
            g.insert(format!("raw_w{l}"), Tensor::scalar(0.0));
        }
        for l in 0..2 {
            let (s, t) = (self.spec.source_hidden[l], self.spec.target_hidden[l]);
            let scale = 1.0 / (s as f64).sqrt();
            let m = (0..s * t)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            g.insert(format!("m{l}"), Tensor::matrix(s, t, m).unwrap());
        }
        g
    }

    /// A batch from the target distribution.
    pub fn sample_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Batch {
        self.target_labels.batch(rng, size)
    }

    /// A batch from the source distribution.
    pub fn source_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> Batch {
        self.source_labels.batch(rng, size)
    }

    pub fn source_accuracy(&self, batch: &Batch) -> Result<f64> {
        let logits = self
            .source_model
            .predict(&self.source_params, &batch.inputs)?;
        accuracy(&logits, &batch.targets)
    }

    pub fn target_accuracy(&self, phi: &ParamGroup, batch: &Batch) -> Result<f64> {
        let logits = self.target_model.predict(phi, &batch.inputs)?;
        accuracy(&logits, &batch.targets)
    }

    /// Source hidden activations, computed outside any gradient tape.
    pub fn source_features(&self, inputs: &Tensor) -> Result<Vec<Tensor>> {
        Ok(self.source_model.evaluate(&self.source_params, inputs)?.1)
    }

    /// Softplus layer weights `w_l(θ)`.
    pub fn layer_weights(&self, theta: &ParamGroup) -> Result<Vec<f64>> {
        (0..2)
            .map(|l| {
                let raw = theta
                    .get(&format!("raw_w{l}"))
                    .ok_or_else(|| Error::ShapeMismatch(format!("θ has no raw_w{l}")))?;
                Ok(softplus(raw.item()))
            })
            .collect()
    }

    fn losses<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<(Var<'t>, Var<'t>)> {
        if theta.len() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "transfer θ expects 4 tensors (raw_w0, raw_w1, m0, m1), got {}",
                theta.len()
            )));
        }
        let x = tape.constant(batch.inputs.clone());
        let f = self.target_model.forward(phi, x)?;
        let l_acc = cross_entropy(f.output, tape.constant(batch.targets.clone()));

        let source = self.source_features(&batch.inputs)?;
        let rows = batch.size() as f64;
        let mut l_tfr: Option<Var<'t>> = None;
        for (l, (h_tgt, h_src)) in f.hidden.iter().zip(source).enumerate() {
            let (raw, map) = (theta[l], theta[2 + l]);
            let want = [h_src.cols(), h_tgt.shape()[1]];
            if map.shape() != want {
                return Err(Error::ShapeMismatch(format!(
                    "matching map m{l} has shape {:?}, layer widths need {:?}",
                    map.shape(),
                    want
                )));
            }
            let mapped = tape.constant(h_src).matmul(map);
            let d = *h_tgt - mapped;
            let term = (d * d).sum().scale(1.0 / rows) * raw.softplus();
            l_tfr = Some(match l_tfr {
                None => term,
                Some(acc) => acc + term,
            });
        }
        Ok((l_acc, l_tfr.expect("two hidden layers")))
    }

    /// The three objectives over `(φ, θ)` sharing this task.
    pub fn objectives(self: &Arc<Self>) -> TransferObjectives {
        let make = |kind| -> Arc<dyn Objective> {
            Arc::new(TransferObjective {
                task: self.clone(),
                kind,
            })
        };
        TransferObjectives {
            total: make(TransferLoss::Total),
            transfer: make(TransferLoss::Transfer),
            accuracy: make(TransferLoss::Accuracy),
        }
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TransferLoss {
    Accuracy,
    Transfer,
    Total,
}

pub struct TransferObjective {
    pub task: Arc<TransferTask>,
    pub kind: TransferLoss,
}

impl Objective for TransferObjective {
    fn eval<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Var<'t>> {
        let (acc, tfr) = self.task.losses(tape, phi, theta, batch)?;
        Ok(match self.kind {
            TransferLoss::Accuracy => acc,
            TransferLoss::Transfer => tfr,
            TransferLoss::Total => acc + tfr.scale(self.task.spec.beta),
        })
    }

    fn name(&self) -> &str {
        match self.kind {
            TransferLoss::Accuracy => "l_acc",
            TransferLoss::Transfer => "l_tfr",
            TransferLoss::Total => "l_total",
        }
    }
}

/// `(l_acc, l_tfr, l_total)` at `(φ, θ)`.
pub fn transfer_losses(
    task: &TransferTask,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let phi_vars: Vec<Var<'_>> = phi.tensors().map(|t| tape.constant(t.clone())).collect();
    let theta_vars: Vec<Var<'_>> = theta.tensors().map(|t| tape.constant(t.clone())).collect();
    let (acc, tfr) = task.losses(&tape, &phi_vars, &theta_vars, batch)?;
    if let Some(msg) = tape.error() {
        return Err(Error::ShapeMismatch(msg));
    }
    let (a, t) = (acc.value().item(), tfr.value().item());
    Ok((a, t, a + task.spec.beta * t))
}
