//! Inner-loop unrolling with window schedules and meta-gradient estimation.
//!
//! A window of `n` steps reuses the gradient taken at its first state, so the
//! backward sweep needs one Hessian-vector (and one cross) product per window
//! instead of one per step. `n = 1` is exact back-propagation through the
//! optimizer.

mod estimator;
mod outer;
mod schedule;
mod trajectory;

pub use estimator::{
    Estimate, EstimatorCtor, EstimatorRegistry, EstimatorSpec, FirstOrder, MetaEstimator,
    MetaProblem, Reptile, Unrolled,
};
pub use outer::{
    maml_direction, maml_outer_step, metanet_direction, metanet_outer_step, FewShotTask,
    MetaNetStep, MetaOptimizer, OuterReport, TransferObjectives,
};
pub use schedule::WindowSchedule;
pub use trajectory::{
    meta_gradient, meta_gradient_first_order, reptile_delta, unroll_inner, InnerSpec, InnerWindow,
    MetaGradReport, MetaSpace, Trajectory,
};
