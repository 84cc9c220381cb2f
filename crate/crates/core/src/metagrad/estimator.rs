//! Meta-gradient estimators behind one trait, looked up by name.
//!
//! Built-ins:
//!
//! | name          | inner loop           | second-order products      |
//! |---------------|----------------------|----------------------------|
//! | `exact`       | gradient every step  | one per step               |
//! | `multistep`   | gradient per window  | one per window             |
//! | `first_order` | gradient every step  | none                       |
//! | `reptile`     | gradient every step  | none (returns `θ − φ_T+1`) |

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use crate::ad::Objective;
use crate::dynamics::HyperParams;
use crate::error::{Error, Result};
use crate::metagrad::schedule::WindowSchedule;
use crate::metagrad::trajectory::{
    meta_gradient, meta_gradient_first_order, reptile_delta, unroll_inner, InnerSpec,
    MetaGradReport, MetaSpace, Trajectory,
};
use crate::tensor::{Batch, ParamGroup};

/// One bilevel problem instance as seen by an estimator.
#[derive(Clone)]
pub struct MetaProblem<'a> {
    pub inner: Arc<dyn Objective>,
    pub outer: Arc<dyn Objective>,
    pub inner_batches: &'a [Batch],
    pub outer_batch: &'a Batch,
    pub hp: HyperParams,
    pub total_steps: usize,
    pub space: MetaSpace,
    /// Meta-parameters θ. In shared mode these are also `φ_1`.
    pub theta: &'a ParamGroup,
    /// `φ_1` in meta-network mode; ignored in shared mode.
    pub phi1: Option<&'a ParamGroup>,
    /// One extra step after the windowed steps, with its own objective and
    /// batch (the classification step closing a meta-transfer inner loop).
    pub final_step: Option<(Arc<dyn Objective>, &'a Batch)>,
}

impl<'a> MetaProblem<'a> {
    /// MAML-style problem: `φ_1 = θ`, losses do not read θ otherwise.
    pub fn shared(
        inner: Arc<dyn Objective>,
        outer: Arc<dyn Objective>,
        inner_batches: &'a [Batch],
        outer_batch: &'a Batch,
        hp: HyperParams,
        total_steps: usize,
        theta: &'a ParamGroup,
    ) -> Self {
        Self {
            inner,
            outer,
            inner_batches,
            outer_batch,
            hp,
            total_steps,
            space: MetaSpace::SharedInit,
            theta,
            phi1: None,
            final_step: None,
        }
    }

    fn start(&self) -> Result<&'a ParamGroup> {
        match self.space {
            MetaSpace::SharedInit => Ok(self.theta),
            MetaSpace::MetaNetwork => self.phi1.ok_or_else(|| {
                Error::SpaceMismatch("meta-network mode needs an explicit φ_1".into())
            }),
        }
    }

    /// Runs the inner loop with the given window length.
    pub fn unroll(&self, window: usize, retain_graphs: bool) -> Result<Trajectory> {
        let empty = ParamGroup::new();
        let loss_theta = match self.space {
            MetaSpace::SharedInit => &empty,
            MetaSpace::MetaNetwork => self.theta,
        };
        let spec = InnerSpec {
            objective: self.inner.clone(),
            theta: loss_theta,
            hp: self.hp,
            schedule: WindowSchedule::new(self.total_steps, window)?,
            batches: self.inner_batches,
            retain_graphs,
        };
        let mut traj = unroll_inner(&spec, self.start()?)?;
        if let Some((objective, batch)) = &self.final_step {
            let step = traj.num_steps() + 1;
            traj.push_window(objective.clone(), batch, 0, 1, retain_graphs)
                .map_err(|e| e.at_step(step))?;
        }
        Ok(traj)
    }
}

pub struct Estimate {
    pub report: MetaGradReport,
    pub trajectory: Trajectory,
}

/// A strategy for turning one inner trajectory into a meta-update direction.
pub trait MetaEstimator: Send + Sync {
    fn name(&self) -> &str;

    /// Window length used for the inner loop.
    fn window(&self) -> usize;

    fn estimate(&self, problem: &MetaProblem<'_>) -> Result<Estimate>;
}

/// Back-propagation through the windowed trajectory; `exact` is window 1.
#[derive(Debug, Clone)]
pub struct Unrolled {
    name: &'static str,
    window: usize,
}

impl Unrolled {
    pub fn exact() -> Self {
        Self {
            name: "exact",
            window: 1,
        }
    }

    pub fn multistep(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::InvalidSchedule(
                "multistep window must be >= 1".into(),
            ));
        }
        Ok(Self {
            name: "multistep",
            window,
        })
    }
}

impl MetaEstimator for Unrolled {
    fn name(&self) -> &str {
        self.name
    }

    fn window(&self) -> usize {
        self.window
    }

    fn estimate(&self, problem: &MetaProblem<'_>) -> Result<Estimate> {
        let started = Instant::now();
        let trajectory = problem.unroll(self.window, true)?;
        let mut report = meta_gradient(
            &trajectory,
            problem.outer.as_ref(),
            problem.outer_batch,
            problem.space,
        )?;
        report.wall_time_seconds = started.elapsed().as_secs_f64();
        Ok(Estimate { report, trajectory })
    }
}

#[derive(Debug, Clone, Default)]
pub struct FirstOrder;

impl MetaEstimator for FirstOrder {
    fn name(&self) -> &str {
        "first_order"
    }

    fn window(&self) -> usize {
        1
    }

    fn estimate(&self, problem: &MetaProblem<'_>) -> Result<Estimate> {
        let started = Instant::now();
        let trajectory = problem.unroll(1, false)?;
        let mut report = meta_gradient_first_order(
            &trajectory,
            problem.outer.as_ref(),
            problem.outer_batch,
            problem.theta,
            problem.space,
        )?;
        report.wall_time_seconds = started.elapsed().as_secs_f64();
        Ok(Estimate { report, trajectory })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Reptile;

impl MetaEstimator for Reptile {
    fn name(&self) -> &str {
        "reptile"
    }

    fn window(&self) -> usize {
        1
    }

    fn estimate(&self, problem: &MetaProblem<'_>) -> Result<Estimate> {
        let started = Instant::now();
        if problem.space != MetaSpace::SharedInit {
            return Err(Error::SpaceMismatch(
                "reptile only applies when θ is the initialization".into(),
            ));
        }
        let trajectory = problem.unroll(1, false)?;
        let delta = reptile_delta(problem.theta, &trajectory)?;
        let outer_loss = crate::ad::value(
            problem.outer.as_ref(),
            &trajectory.final_phi(),
            trajectory.theta(),
            problem.outer_batch,
        )?;
        let report = MetaGradReport {
            grad_theta: delta.into_data(),
            outer_loss,
            hvp_count: 0,
            cross_vp_count: 0,
            first_order_grad_count: trajectory.windows().len(),
            wall_time_seconds: started.elapsed().as_secs_f64(),
            peak_bytes: trajectory.retained_bytes(),
        };
        Ok(Estimate { report, trajectory })
    }
}

/// Constructor arguments shared by all estimators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub window: usize,
}

pub type EstimatorCtor = fn(&EstimatorSpec) -> Result<Box<dyn MetaEstimator>>;

/// Name → constructor table.
#[derive(Clone, Default)]
pub struct EstimatorRegistry {
    ctors: BTreeMap<&'static str, EstimatorCtor>,
}

impl EstimatorRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register("exact", |_| Ok(Box::new(Unrolled::exact())));
        r.register("multistep", |spec| {
            Ok(Box::new(Unrolled::multistep(spec.window)?))
        });
        r.register("first_order", |_| Ok(Box::new(FirstOrder)));
        r.register("reptile", |_| Ok(Box::new(Reptile)));
        r
    }

    /// Registers (or replaces) a constructor.
    pub fn register(&mut self, name: &'static str, ctor: EstimatorCtor) {
        self.ctors.insert(name, ctor);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.ctors.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.ctors.keys().copied()
    }

    pub fn create(&self, name: &str, spec: &EstimatorSpec) -> Result<Box<dyn MetaEstimator>> {
        let ctor = self
            .ctors
            .get(name)
            .ok_or_else(|| Error::UnknownEstimator(name.to_string()))?;
        ctor(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_are_registered() {
        let r = EstimatorRegistry::with_builtins();
        assert_eq!(
            r.names().collect::<Vec<_>>(),
            vec!["exact", "first_order", "multistep", "reptile"]
        );
        let m = r.create("multistep", &EstimatorSpec { window: 4 }).unwrap();
        assert_eq!((m.name(), m.window()), ("multistep", 4));
        let e = r.create("exact", &EstimatorSpec { window: 4 }).unwrap();
        assert_eq!(e.window(), 1);
    }

    #[test]
    fn unknown_name() {
        let r = EstimatorRegistry::with_builtins();
        assert!(matches!(
            r.create("imaml", &EstimatorSpec { window: 1 }),
            Err(Error::UnknownEstimator(_))
        ));
    }

    #[test]
    fn zero_window_multistep_rejected() {
        let r = EstimatorRegistry::with_builtins();
        assert!(r.create("multistep", &EstimatorSpec { window: 0 }).is_err());
    }

    #[test]
    fn custom_registration() {
        let mut r = EstimatorRegistry::empty();
        r.register("mine", |spec| {
            Ok(Box::new(Unrolled::multistep(spec.window * 2)?))
        });
        assert_eq!(
            r.create("mine", &EstimatorSpec { window: 3 })
                .unwrap()
                .window(),
            6
        );
    }
}
