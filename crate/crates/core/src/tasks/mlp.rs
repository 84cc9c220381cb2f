use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ad::{Objective, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Batch, ParamGroup, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Dense network `sizes[0] → sizes[1] → … → sizes[L]`, activation on every
/// hidden layer, linear output.
///
/// Parameters are a [`ParamGroup`] with entries `w0, b0, w1, b1, …`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    sizes: Vec<usize>,
    activation: Activation,
}

/// Output logits plus every hidden activation, first layer first.
pub struct Forward<'t> {
    pub output: Var<'t>,
    pub hidden: Vec<Var<'t>>,
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs input and output sizes");
        assert!(sizes.iter().all(|&s| s > 0), "layer sizes must be positive");
        Self { sizes, activation }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn hidden_sizes(&self) -> &[usize] {
        &self.sizes[1..self.sizes.len() - 1]
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    /// Zero-filled group with the right layout.
    pub fn layout(&self) -> ParamGroup {
        let mut g = ParamGroup::new();
        for l in 0..self.num_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            g.insert(format!("w{l}"), Tensor::zeros(&[i, o]));
            g.insert(format!("b{l}"), Tensor::zeros(&[o]));
        }
        g
    }

    /// Gaussian weights scaled by `1/√fan_in`, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamGroup {
        let mut g = ParamGroup::new();
        for l in 0..self.num_layers() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let scale = 1.0 / (i as f64).sqrt();
            let w = (0..i * o)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            g.insert(format!("w{l}"), Tensor::matrix(i, o, w).unwrap());
            g.insert(format!("b{l}"), Tensor::zeros(&[o]));
        }
        g
    }

    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Result<Forward<'t>> {
        if params.len() != 2 * self.num_layers() {
            return Err(Error::ShapeMismatch(format!(
                "mlp with {} layers expects {} parameter tensors, got {}",
                self.num_layers(),
                2 * self.num_layers(),
                params.len()
            )));
        }
        let mut h = x;
        let mut hidden = Vec::with_capacity(self.num_layers() - 1);
        for l in 0..self.num_layers() {
            h = h.affine(params[2 * l], params[2 * l + 1]);
            if l + 1 < self.num_layers() {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Relu => h.relu(),
                };
                hidden.push(h);
            }
        }
        Ok(Forward { output: h, hidden })
    }

    /// Plain evaluation on a scratch tape: output and hidden activations.
    pub fn evaluate(&self, params: &ParamGroup, inputs: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.tensors().map(|t| tape.constant(t.clone())).collect();
        let f = self.forward(&vars, tape.constant(inputs.clone()))?;
        if let Some(msg) = tape.error() {
            return Err(Error::ShapeMismatch(msg));
        }
        Ok((f.output.value(), f.hidden.iter().map(Var::value).collect()))
    }

    pub fn predict(&self, params: &ParamGroup, inputs: &Tensor) -> Result<Tensor> {
        Ok(self.evaluate(params, inputs)?.0)
    }
}

/// Mean over all entries of `(pred − target)²`.
pub fn mse<'t>(pred: Var<'t>, target: Var<'t>) -> Var<'t> {
    let d = pred - target;
    (d * d).mean()
}

/// Mean over rows of `−Σ_c y_c log softmax(z)_c`.
pub fn cross_entropy<'t>(logits: Var<'t>, onehot: Var<'t>) -> Var<'t> {
    let rows = logits.shape()[0] as f64;
    (logits.log_softmax() * onehot).sum().scale(-1.0 / rows)
}

/// Fraction of rows whose arg-max matches the one-hot target.
pub fn accuracy(logits: &Tensor, onehot: &Tensor) -> Result<f64> {
    if logits.shape() != onehot.shape() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs targets {:?}",
            logits.shape(),
            onehot.shape()
        )));
    }
    let (m, c) = (logits.rows(), logits.cols());
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    };
    let hits = (0..m)
        .filter(|&r| {
            let range = r * c..(r + 1) * c;
            argmax(&logits.data()[range.clone()]) == argmax(&onehot.data()[range])
        })
        .count();
    Ok(hits as f64 / m as f64)
}

/// Squared-error regression loss of an [`Mlp`] on `φ`; ignores θ.
#[derive(Debug, Clone)]
pub struct MseObjective {
    pub mlp: Mlp,
}

impl Objective for MseObjective {
    fn eval<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        _theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Var<'t>> {
        let f = self.mlp.forward(phi, tape.constant(batch.inputs.clone()))?;
        Ok(mse(f.output, tape.constant(batch.targets.clone())))
    }

    fn name(&self) -> &str {
        "mse"
    }
}

/// Softmax cross-entropy of an [`Mlp`] on `φ` with one-hot targets; ignores θ.
#[derive(Debug, Clone)]
pub struct CrossEntropyObjective {
    pub mlp: Mlp,
}

impl Objective for CrossEntropyObjective {
    fn eval<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        _theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Var<'t>> {
        let f = self.mlp.forward(phi, tape.constant(batch.inputs.clone()))?;
        Ok(cross_entropy(
            f.output,
            tape.constant(batch.targets.clone()),
        ))
    }

    fn name(&self) -> &str {
        "cross_entropy"
    }
}
