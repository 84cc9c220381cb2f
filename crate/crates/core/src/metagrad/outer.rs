//! Outer-loop updates: MAML-family meta-batches and meta-network training.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ad::{grad, Objective};
use crate::dynamics::{self, HyperParams, OptState};
use crate::error::{Error, Result};
use crate::metagrad::estimator::{MetaEstimator, MetaProblem};
use crate::metagrad::trajectory::{MetaGradReport, MetaSpace};
use crate::tensor::{Batch, ParamGroup, Tensor};

/// Applies an averaged meta-direction to the flat meta-parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MetaOptimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        #[serde(skip)]
        m: Vec<f64>,
        #[serde(skip)]
        v: Vec<f64>,
        #[serde(skip)]
        t: u64,
    },
}

impl MetaOptimizer {
    pub fn sgd(lr: f64) -> Self {
        MetaOptimizer::Sgd { lr }
    }

    pub fn adam(lr: f64) -> Self {
        MetaOptimizer::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            MetaOptimizer::Sgd { lr } | MetaOptimizer::Adam { lr, .. } => *lr,
        }
    }

    pub fn apply(&mut self, theta: &mut [f64], direction: &[f64]) -> Result<()> {
        if theta.len() != direction.len() {
            return Err(Error::DimensionMismatch {
                expected: theta.len(),
                got: direction.len(),
            });
        }
        match self {
            MetaOptimizer::Sgd { lr } => {
                for (p, d) in theta.iter_mut().zip(direction) {
                    *p -= *lr * d;
                }
            }
            MetaOptimizer::Adam {
                lr,
                beta1,
                beta2,
                eps,
                m,
                v,
                t,
            } => {
                if m.len() != theta.len() {
                    *m = vec![0.0; theta.len()];
                    *v = vec![0.0; theta.len()];
                    *t = 0;
                }
                *t += 1;
                let c1 = 1.0 - beta1.powi(*t as i32);
                let c2 = 1.0 - beta2.powi(*t as i32);
                for i in 0..theta.len() {
                    let g = direction[i];
                    m[i] = *beta1 * m[i] + (1.0 - *beta1) * g;
                    v[i] = *beta2 * v[i] + (1.0 - *beta2) * g * g;
                    let mhat = m[i] / c1;
                    let vhat = v[i] / c2;
                    theta[i] -= *lr * mhat / (vhat.sqrt() + *eps);
                }
            }
        }
        Ok(())
    }
}

/// One few-shot task: inner loss on `support`, outer loss on `query`.
#[derive(Clone)]
pub struct FewShotTask {
    pub inner: Arc<dyn Objective>,
    pub outer: Arc<dyn Objective>,
    pub support: Vec<Batch>,
    pub query: Batch,
}

/// Averaged meta-direction over a meta-batch, with merged counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterReport {
    pub direction: Vec<f64>,
    pub mean_outer_loss: f64,
    pub hvp_count: usize,
    pub cross_vp_count: usize,
    pub first_order_grad_count: usize,
    pub wall_time_seconds: f64,
    /// Largest per-task peak; tasks are independent so this is the working set
    /// of a sequential meta-batch.
    pub peak_bytes: usize,
}

impl OuterReport {
    fn merge(reports: Vec<MetaGradReport>, wall: f64) -> Self {
        let m = reports.len() as f64;
        let mut direction = vec![0.0; reports[0].grad_theta.len()];
        let mut out = OuterReport {
            direction: Vec::new(),
            mean_outer_loss: 0.0,
            hvp_count: 0,
            cross_vp_count: 0,
            first_order_grad_count: 0,
            wall_time_seconds: wall,
            peak_bytes: 0,
        };
        // task-index order keeps the reduction deterministic
        for r in &reports {
            for (d, g) in direction.iter_mut().zip(&r.grad_theta) {
                *d += g;
            }
            out.mean_outer_loss += r.outer_loss;
            out.hvp_count += r.hvp_count;
            out.cross_vp_count += r.cross_vp_count;
            out.first_order_grad_count += r.first_order_grad_count;
            out.peak_bytes = out.peak_bytes.max(r.peak_bytes);
        }
        for d in &mut direction {
            *d /= m;
        }
        out.mean_outer_loss /= m;
        out.direction = direction;
        out
    }
}

/// `(1/M) Σ_i estimator_i` over the meta-batch, each task unrolled from
/// `φ_1 = θ`. Tasks run in parallel; the sum is taken in task order.
pub fn maml_direction(
    theta: &ParamGroup,
    tasks: &[FewShotTask],
    hp: HyperParams,
    total_steps: usize,
    estimator: &dyn MetaEstimator,
) -> Result<OuterReport> {
    if tasks.is_empty() {
        return Err(Error::IncompleteTrajectory(
            "meta-batch has no tasks".into(),
        ));
    }
    let started = Instant::now();
    let reports = tasks
        .par_iter()
        .enumerate()
        .map(|(i, task)| {
            let problem = MetaProblem::shared(
                task.inner.clone(),
                task.outer.clone(),
                &task.support,
                &task.query,
                hp,
                total_steps,
                theta,
            );
            estimator
                .estimate(&problem)
                .map(|e| e.report)
                .map_err(|e| e.in_task(i))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(OuterReport::merge(reports, started.elapsed().as_secs_f64()))
}

/// `θ′ = θ − η_meta · (1/M) Σ_i estimator_i`.
pub fn maml_outer_step(
    theta: &ParamGroup,
    tasks: &[FewShotTask],
    hp: HyperParams,
    eta_meta: f64,
    total_steps: usize,
    estimator: &dyn MetaEstimator,
) -> Result<(ParamGroup, OuterReport)> {
    let report = maml_direction(theta, tasks, hp, total_steps, estimator)?;
    let mut flat = theta.flatten();
    MetaOptimizer::sgd(eta_meta).apply(&mut flat, &report.direction)?;
    Ok((theta.unflatten(&flat)?, report))
}

/// The three losses of the meta-transfer objective.
#[derive(Clone)]
pub struct TransferObjectives {
    /// `L_acc + β L_tfr`, used for the plain task update.
    pub total: Arc<dyn Objective>,
    /// `L_tfr`, the only loss θ enters; drives the windowed inner steps.
    pub transfer: Arc<dyn Objective>,
    /// `L_acc`, for the closing inner step and the meta-objective.
    pub accuracy: Arc<dyn Objective>,
}

#[derive(Debug, Clone)]
pub struct MetaNetStep {
    /// Task parameters after the plain update; inner-loop states are discarded.
    pub phi: ParamGroup,
    pub report: MetaGradReport,
    pub total_loss: f64,
}

/// One outer iteration of meta-transfer training, without touching θ:
///
/// 1. update φ once on `L_total` (from zero velocity);
/// 2. unroll `total_steps` steps of `L_tfr` from `(φ, 0)` with the
///    estimator's window, then, if `final_accuracy_step`, one step of `L_acc`;
/// 3. estimate `∂L_acc(φ_{T+1})/∂θ` through the recorded steps.
#[allow(clippy::too_many_arguments)]
pub fn metanet_direction(
    theta: &ParamGroup,
    phi: &ParamGroup,
    batch: &Batch,
    objectives: &TransferObjectives,
    hp: HyperParams,
    total_steps: usize,
    final_accuracy_step: bool,
    estimator: &dyn MetaEstimator,
) -> Result<MetaNetStep> {
    let g = grad(objectives.total.as_ref(), phi, theta, batch)?;
    let total_loss = crate::ad::value(objectives.total.as_ref(), phi, theta, batch)?;
    let s = dynamics::step(&OptState::initial(Tensor::vector(phi.flatten())), &g, &hp)?;
    let phi_next = phi.unflatten(s.phi.data())?;

    let batches = std::slice::from_ref(batch);
    let problem = MetaProblem {
        inner: objectives.transfer.clone(),
        outer: objectives.accuracy.clone(),
        inner_batches: batches,
        outer_batch: batch,
        hp,
        total_steps,
        space: MetaSpace::MetaNetwork,
        theta,
        phi1: Some(&phi_next),
        final_step: final_accuracy_step.then(|| (objectives.accuracy.clone(), batch)),
    };
    let est = estimator.estimate(&problem)?;
    Ok(MetaNetStep {
        phi: phi_next,
        report: est.report,
        total_loss,
    })
}

/// [`metanet_direction`] followed by `θ′ = θ − η_meta ∂L/∂θ`.
#[allow(clippy::too_many_arguments)]
pub fn metanet_outer_step(
    theta: &ParamGroup,
    phi: &ParamGroup,
    batch: &Batch,
    objectives: &TransferObjectives,
    hp: HyperParams,
    total_steps: usize,
    final_accuracy_step: bool,
    eta_meta: f64,
    estimator: &dyn MetaEstimator,
) -> Result<(ParamGroup, MetaNetStep)> {
    let step = metanet_direction(
        theta,
        phi,
        batch,
        objectives,
        hp,
        total_steps,
        final_accuracy_step,
        estimator,
    )?;
    let mut flat = theta.flatten();
    MetaOptimizer::sgd(eta_meta).apply(&mut flat, &step.report.grad_theta)?;
    Ok((theta.unflatten(&flat)?, step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_update() {
        let mut p = vec![1.0, 2.0];
        MetaOptimizer::sgd(0.5).apply(&mut p, &[2.0, -2.0]).unwrap();
        assert_eq!(p, vec![0.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_lr_sign() {
        let mut p = vec![0.0, 0.0];
        let mut opt = MetaOptimizer::adam(0.01);
        opt.apply(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] + 0.01).abs() < 1e-9);
        assert!((p[1] - 0.01).abs() < 1e-9);
    }

    #[test]
    fn optimizer_checks_length() {
        let mut p = vec![0.0];
        assert!(MetaOptimizer::sgd(0.1).apply(&mut p, &[1.0, 2.0]).is_err());
    }
}
