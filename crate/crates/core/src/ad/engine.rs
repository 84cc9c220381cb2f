//! Gradients and second-order products of scalar objectives.

use crate::ad::tape::{NodeId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Batch, ParamGroup, Tensor};

/// A scalar loss `f(φ, θ; batch)` written against the tape ops.
///
/// `phi` and `theta` hold one leaf per group entry, in group order. The
/// evaluation must be deterministic for fixed inputs.
pub trait Objective: Send + Sync {
    fn eval<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Var<'t>>;

    fn name(&self) -> &str {
        "objective"
    }
}

fn split_like(group: &ParamGroup, flat: &[f64]) -> Result<Vec<Tensor>> {
    Ok(group
        .unflatten(flat)?
        .entries()
        .iter()
        .map(|(_, t)| t.clone())
        .collect())
}

fn concat(tape: &Tape, ids: &[NodeId]) -> Vec<f64> {
    let mut out = Vec::new();
    for &id in ids {
        out.extend_from_slice(tape.value(id).data());
    }
    out
}

/// Loss tape with its first-order gradient recorded, kept alive so that
/// Hessian-vector and cross products can be taken at the same point later.
///
/// This is the unit of memory the meta-gradient sweep retains per anchor.
#[derive(Debug)]
pub struct AnchorGraph {
    tape: Tape,
    phi_layout: ParamGroup,
    phi_ids: Vec<NodeId>,
    theta_ids: Vec<NodeId>,
    grad_ids: Vec<NodeId>,
    loss: f64,
    grad: Tensor,
}

impl AnchorGraph {
    pub fn record(
        f: &dyn Objective,
        phi: &ParamGroup,
        theta: &ParamGroup,
        batch: &Batch,
    ) -> Result<Self> {
        if phi.flat_len() == 0 {
            return Err(Error::ShapeMismatch("task parameter group is empty".into()));
        }
        let tape = Tape::new();
        let phi_vars: Vec<Var<'_>> = phi.tensors().map(|t| tape.leaf(t.clone())).collect();
        let theta_vars: Vec<Var<'_>> = theta.tensors().map(|t| tape.leaf(t.clone())).collect();
        let out = f.eval(&tape, &phi_vars, &theta_vars, batch)?;
        if let Some(msg) = tape.error() {
            return Err(Error::ShapeMismatch(msg));
        }
        if out.shape().iter().product::<usize>() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "objective must be scalar, got {:?}",
                out.shape()
            )));
        }
        let loss = out.value().item();
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { value: loss });
        }
        let phi_ids: Vec<NodeId> = phi_vars.iter().map(|v| v.id()).collect();
        let theta_ids: Vec<NodeId> = theta_vars.iter().map(|v| v.id()).collect();
        let grad_ids = tape.backward(out.id(), &phi_ids);
        let grad = Tensor::vector(concat(&tape, &grad_ids));
        Ok(Self {
            phi_layout: phi.clone(),
            phi_ids,
            theta_ids,
            grad_ids,
            loss,
            grad,
            tape,
        })
    }

    pub fn loss(&self) -> f64 {
        self.loss
    }

    /// `∇_φ f` as a flat vector.
    pub fn grad(&self) -> &Tensor {
        &self.grad
    }

    pub fn phi_len(&self) -> usize {
        self.grad.len()
    }

    pub fn nbytes(&self) -> usize {
        self.tape.nbytes()
    }

    /// Both second-order products for one direction `v`:
    /// `(∇²_φ f · v, vᵀ ∂(∇_φ f)/∂θ)`.
    ///
    /// One reverse pass over the recorded gradient graph. The tape is
    /// restored to its recorded length afterwards; the returned byte count is
    /// how far it grew in between.
    pub fn second_order(&self, v: &Tensor) -> Result<(Tensor, Vec<f64>, usize)> {
        if v.len() != self.phi_len() {
            return Err(Error::DimensionMismatch {
                expected: self.phi_len(),
                got: v.len(),
            });
        }
        let mark = self.tape.len();
        let before = self.tape.nbytes();
        let parts = split_like(&self.phi_layout, v.data())?;
        let mut inner: Option<Var<'_>> = None;
        for (&g, part) in self.grad_ids.iter().zip(parts) {
            let term = self.tape.var(g).dot(self.tape.constant(part));
            inner = Some(match inner {
                None => term,
                Some(acc) => acc + term,
            });
        }
        let inner = inner.expect("non-empty phi");
        let wrt: Vec<NodeId> = self
            .phi_ids
            .iter()
            .chain(&self.theta_ids)
            .copied()
            .collect();
        let grads = self.tape.backward(inner.id(), &wrt);
        let (hv_ids, cross_ids) = grads.split_at(self.phi_ids.len());
        let hv = Tensor::vector(concat(&self.tape, hv_ids));
        let cross = concat(&self.tape, cross_ids);
        let grown = self.tape.nbytes() - before;
        self.tape.truncate(mark);
        Ok((hv, cross, grown))
    }

    pub fn hvp(&self, v: &Tensor) -> Result<Tensor> {
        self.second_order(v).map(|(hv, _, _)| hv)
    }

    pub fn cross_vp(&self, v: &Tensor) -> Result<Vec<f64>> {
        self.second_order(v).map(|(_, c, _)| c)
    }
}

/// `∇_φ f(φ, θ; batch)` as a flat vector.
pub fn grad(
    f: &dyn Objective,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
) -> Result<Tensor> {
    AnchorGraph::record(f, phi, theta, batch).map(|a| a.grad)
}

/// Loss value with gradients in both groups: `(f, ∇_φ f, ∇_θ f)`.
pub fn value_and_grads(
    f: &dyn Objective,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let phi_vars: Vec<Var<'_>> = phi.tensors().map(|t| tape.leaf(t.clone())).collect();
    let theta_vars: Vec<Var<'_>> = theta.tensors().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&tape, &phi_vars, &theta_vars, batch)?;
    if let Some(msg) = tape.error() {
        return Err(Error::ShapeMismatch(msg));
    }
    let loss = out.value().item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { value: loss });
    }
    let ids: Vec<NodeId> = phi_vars.iter().chain(&theta_vars).map(|v| v.id()).collect();
    let g = tape.backward(out.id(), &ids);
    let (gp, gt) = g.split_at(phi_vars.len());
    Ok((loss, concat(&tape, gp), concat(&tape, gt)))
}

/// Forward value only.
pub fn value(
    f: &dyn Objective,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
) -> Result<f64> {
    let tape = Tape::new();
    let phi_vars: Vec<Var<'_>> = phi.tensors().map(|t| tape.leaf(t.clone())).collect();
    let theta_vars: Vec<Var<'_>> = theta.tensors().map(|t| tape.leaf(t.clone())).collect();
    let out = f.eval(&tape, &phi_vars, &theta_vars, batch)?;
    if let Some(msg) = tape.error() {
        return Err(Error::ShapeMismatch(msg));
    }
    let loss = out.value().item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss { value: loss });
    }
    Ok(loss)
}

/// `∇²_φ f · v` without forming the Hessian.
pub fn hvp(
    f: &dyn Objective,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
    v: &Tensor,
) -> Result<Tensor> {
    AnchorGraph::record(f, phi, theta, batch)?.hvp(v)
}

/// `vᵀ ∂(∇_φ f)/∂θ`: the θ-gradient of `⟨∇_φ f, v⟩` with `v` held fixed.
/// Empty when θ is empty.
pub fn cross_vp(
    f: &dyn Objective,
    phi: &ParamGroup,
    theta: &ParamGroup,
    batch: &Batch,
    v: &Tensor,
) -> Result<Vec<f64>> {
    AnchorGraph::record(f, phi, theta, batch)?.cross_vp(v)
}

/// An objective built from a closure; handy for tests and small examples.
pub struct FnObjective<F> {
    name: String,
    f: F,
}

impl<F> FnObjective<F>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>], &Batch) -> Result<Var<'t>> + Send + Sync,
{
    pub fn new(name: impl Into<String>, f: F) -> Self {
        Self {
            name: name.into(),
            f,
        }
    }
}

impl<F> Objective for FnObjective<F>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>], &[Var<'t>], &Batch) -> Result<Var<'t>> + Send + Sync,
{
    fn eval<'t>(
        &self,
        tape: &'t Tape,
        phi: &[Var<'t>],
        theta: &[Var<'t>],
        batch: &Batch,
    ) -> Result<Var<'t>> {
        (self.f)(tape, phi, theta, batch)
    }

    fn name(&self) -> &str {
        &self.name
    }
}
