//! Forward unrolling with anchored gradients, and the backward sweeps.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::ad::{value_and_grads, AnchorGraph, Objective};
use crate::dynamics::{self, HyperParams, LagrangianState, OptState};
use crate::error::{Error, Result};
use crate::metagrad::schedule::WindowSchedule;
use crate::tensor::{Batch, ParamGroup, Tensor};

/// How the meta-parameters reach the inner problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MetaSpace {
    /// `φ_1 = θ` (MAML family); losses see an empty meta group.
    SharedInit,
    /// θ is its own group entering the losses; `φ_1` does not depend on θ.
    MetaNetwork,
}

/// One window of the unrolled loop: the gradient at the anchor state and,
/// when retained, the graph needed for second-order products there.
pub struct InnerWindow {
    pub anchor: usize,
    pub len: usize,
    pub batch_index: usize,
    pub objective: Arc<dyn Objective>,
    pub batch: Batch,
    pub loss: f64,
    pub grad: Tensor,
    graph: Option<AnchorGraph>,
}

impl InnerWindow {
    pub fn has_graph(&self) -> bool {
        self.graph.is_some()
    }

    fn nbytes(&self) -> usize {
        self.grad.nbytes() + self.graph.as_ref().map_or(0, |g| g.nbytes())
    }
}

impl std::fmt::Debug for InnerWindow {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InnerWindow")
            .field("anchor", &self.anchor)
            .field("len", &self.len)
            .field("objective", &self.objective.name())
            .field("loss", &self.loss)
            .field("graph", &self.graph.is_some())
            .finish()
    }
}

/// Recorded states `s_1 … s_{T+1}` and one [`InnerWindow`] per anchor.
///
/// Every step inside a window reuses the window's anchor gradient.
#[derive(Debug)]
pub struct Trajectory {
    phi_layout: ParamGroup,
    theta: ParamGroup,
    hp: HyperParams,
    schedule: WindowSchedule,
    states: Vec<OptState>,
    windows: Vec<InnerWindow>,
}

/// Everything the inner loop needs besides the starting point.
#[derive(Clone)]
pub struct InnerSpec<'a> {
    pub objective: Arc<dyn Objective>,
    /// Meta-parameters as seen by the losses (empty for [`MetaSpace::SharedInit`]).
    pub theta: &'a ParamGroup,
    pub hp: HyperParams,
    pub schedule: WindowSchedule,
    /// Window `k` uses `batches[k % batches.len()]`.
    pub batches: &'a [Batch],
    /// Keep the per-anchor graphs for the second-order sweep.
    pub retain_graphs: bool,
}

/// Runs the windowed dynamics from `φ_1` with zero initial velocity.
pub fn unroll_inner(spec: &InnerSpec<'_>, phi1: &ParamGroup) -> Result<Trajectory> {
    spec.hp.validate()?;
    if phi1.flat_len() == 0 {
        return Err(Error::ShapeMismatch("task parameter group is empty".into()));
    }
    if spec.batches.is_empty() && spec.schedule.total_steps() > 0 {
        return Err(Error::IncompleteTrajectory(
            "no inner batches supplied".into(),
        ));
    }
    let mut traj = Trajectory {
        phi_layout: phi1.clone(),
        theta: spec.theta.clone(),
        hp: spec.hp,
        schedule: spec.schedule.clone(),
        states: vec![OptState::initial(Tensor::vector(phi1.flatten()))],
        windows: Vec::with_capacity(spec.schedule.num_windows()),
    };
    for (k, (anchor, len)) in spec.schedule.windows().enumerate() {
        let batch_index = k % spec.batches.len();
        traj.push_window(
            spec.objective.clone(),
            &spec.batches[batch_index],
            batch_index,
            len,
            spec.retain_graphs,
        )
        .map_err(|e| e.at_step(anchor))?;
    }
    Ok(traj)
}

impl Trajectory {
    /// Appends a window of `len` steps starting from the current final state,
    /// all driven by the gradient of `objective` at that state.
    pub fn push_window(
        &mut self,
        objective: Arc<dyn Objective>,
        batch: &Batch,
        batch_index: usize,
        len: usize,
        retain_graph: bool,
    ) -> Result<()> {
        assert!(len >= 1);
        let start = self.states.last().expect("trajectory has s_1");
        let anchor = start.step_index;
        let phi = self.phi_layout.unflatten(start.phi.data())?;
        let graph = AnchorGraph::record(objective.as_ref(), &phi, &self.theta, batch)?;
        let grad = graph.grad().clone();
        let loss = graph.loss();
        for _ in 0..len {
            let next = dynamics::step(self.states.last().unwrap(), &grad, &self.hp)?;
            if !next.phi.is_finite() {
                return Err(Error::NonFiniteLoss { value: f64::NAN });
            }
            self.states.push(next);
        }
        self.windows.push(InnerWindow {
            anchor,
            len,
            batch_index,
            objective,
            batch: batch.clone(),
            loss,
            grad,
            graph: retain_graph.then_some(graph),
        });
        Ok(())
    }

    pub fn states(&self) -> &[OptState] {
        &self.states
    }

    pub fn windows(&self) -> &[InnerWindow] {
        &self.windows
    }

    pub fn schedule(&self) -> &WindowSchedule {
        &self.schedule
    }

    pub fn hp(&self) -> &HyperParams {
        &self.hp
    }

    pub fn theta(&self) -> &ParamGroup {
        &self.theta
    }

    pub fn phi_layout(&self) -> &ParamGroup {
        &self.phi_layout
    }

    /// Number of dynamics steps taken (`T`, plus any appended windows).
    pub fn num_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn final_state(&self) -> &OptState {
        self.states.last().unwrap()
    }

    /// `φ_{T+1}` in the task-parameter layout.
    pub fn final_phi(&self) -> ParamGroup {
        self.phi_layout
            .unflatten(self.final_state().phi.data())
            .expect("layout is fixed")
    }

    pub fn phi_at(&self, t: usize) -> ParamGroup {
        self.phi_layout
            .unflatten(self.states[t - 1].phi.data())
            .expect("layout is fixed")
    }

    /// Bytes held by states, anchor gradients, and retained graphs.
    pub fn retained_bytes(&self) -> usize {
        self.states.iter().map(OptState::nbytes).sum::<usize>()
            + self.windows.iter().map(InnerWindow::nbytes).sum::<usize>()
    }
}

/// Result of one meta-gradient estimate with its cost counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetaGradReport {
    /// Estimate of `∂L/∂θ` (for Reptile, the delta `θ − φ_{T+1}`).
    pub grad_theta: Vec<f64>,
    pub outer_loss: f64,
    pub hvp_count: usize,
    pub cross_vp_count: usize,
    pub first_order_grad_count: usize,
    pub wall_time_seconds: f64,
    /// Engine-counted bytes: states, anchor gradients, graphs, plus the
    /// largest transient growth of a second-order pass.
    pub peak_bytes: usize,
}

/// Meta-gradient by back-propagation through the recorded windows.
///
/// Seeds `Λ_T = ∂L/∂s_{T+1}` (velocity block zero), sweeps the windows in
/// reverse, and takes exactly one Hessian-vector and one cross product per
/// window at its anchor. For [`MetaSpace::SharedInit`] the result is the
/// adjoint transported to `φ_1`; for [`MetaSpace::MetaNetwork`] it is the
/// direct `∂L/∂θ` plus every window's θ-contribution.
pub fn meta_gradient(
    traj: &Trajectory,
    outer: &dyn Objective,
    outer_batch: &Batch,
    space: MetaSpace,
) -> Result<MetaGradReport> {
    let started = Instant::now();
    if let Some(w) = traj.windows.iter().find(|w| w.graph.is_none()) {
        return Err(Error::IncompleteTrajectory(format!(
            "window at step {} has no retained graph",
            w.anchor
        )));
    }
    if space == MetaSpace::SharedInit && !traj.theta.is_empty() {
        return Err(Error::SpaceMismatch(
            "shared-init mode expects an empty meta group in the losses".into(),
        ));
    }
    let (outer_loss, dl_dphi, dl_dtheta) =
        value_and_grads(outer, &traj.final_phi(), &traj.theta, outer_batch)?;

    let mut lam = LagrangianState::terminal(Tensor::vector(dl_dphi), traj.states.len());
    let mut theta_grad = dl_dtheta;
    let mut max_growth = 0;
    let (mut hvps, mut crosses) = (0, 0);
    for w in traj.windows.iter().rev() {
        let graph = w.graph.as_ref().expect("checked above");
        let (prev, cross) = dynamics::window_adjoint(&lam, &traj.hp, w.len, |u| {
            let (hv, cross, grown) = graph.second_order(u)?;
            hvps += 1;
            crosses += 1;
            max_growth = max_growth.max(grown);
            Ok((hv, cross))
        })
        .map_err(|e| e.at_step(w.anchor))?;
        for (acc, c) in theta_grad.iter_mut().zip(&cross) {
            *acc += c;
        }
        lam = prev;
    }

    let grad_theta = match space {
        MetaSpace::SharedInit => lam.lam_phi.into_data(),
        MetaSpace::MetaNetwork => theta_grad,
    };
    Ok(MetaGradReport {
        grad_theta,
        outer_loss,
        hvp_count: hvps,
        cross_vp_count: crosses,
        first_order_grad_count: traj.windows.len() + 1,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        peak_bytes: traj.retained_bytes() + max_growth,
    })
}

/// First-order estimate: `φ_{T+1}` treated as independent of θ.
///
/// In shared mode this is `∂L/∂φ` at `φ_{T+1}` (requires `|θ| = |φ|`); in
/// meta-network mode it is only the direct `∂L/∂θ`, which is zero whenever
/// the outer loss does not read θ.
pub fn meta_gradient_first_order(
    traj: &Trajectory,
    outer: &dyn Objective,
    outer_batch: &Batch,
    theta: &ParamGroup,
    space: MetaSpace,
) -> Result<MetaGradReport> {
    let started = Instant::now();
    let (outer_loss, dl_dphi, dl_dtheta) =
        value_and_grads(outer, &traj.final_phi(), &traj.theta, outer_batch)?;
    let grad_theta = match space {
        MetaSpace::SharedInit => {
            if theta.flat_len() != traj.phi_layout.flat_len() {
                return Err(Error::SpaceMismatch(format!(
                    "first-order shared mode needs |θ| = |φ|, got {} vs {}",
                    theta.flat_len(),
                    traj.phi_layout.flat_len()
                )));
            }
            dl_dphi
        }
        MetaSpace::MetaNetwork => dl_dtheta,
    };
    Ok(MetaGradReport {
        grad_theta,
        outer_loss,
        hvp_count: 0,
        cross_vp_count: 0,
        first_order_grad_count: traj.windows.len() + 1,
        wall_time_seconds: started.elapsed().as_secs_f64(),
        peak_bytes: traj.retained_bytes(),
    })
}

/// Reptile direction `θ − φ_{T+1}`.
pub fn reptile_delta(theta: &ParamGroup, traj: &Trajectory) -> Result<Tensor> {
    if theta.flat_len() != traj.phi_layout.flat_len() {
        return Err(Error::SpaceMismatch(format!(
            "reptile needs |θ| = |φ|, got {} vs {}",
            theta.flat_len(),
            traj.phi_layout.flat_len()
        )));
    }
    Tensor::vector(theta.flatten()).sub(&traj.final_state().phi)
}
