mod common;

use std::sync::Arc;

use common::*;
use metastep_core::ad::{FnObjective, Objective, Tape, Var};
use metastep_core::dynamics::HyperParams;
use metastep_core::metagrad::{MetaProblem, MetaSpace};
use metastep_core::tasks::{
    accuracy, grad_diff_series, sample_cluster_episode, sample_cluster_episode_with,
    sample_sinusoid, ClusterSpec, Episode, TransferTask,
};
use metastep_core::{Batch, Error, ParamGroup, Result, Tensor};

#[test]
fn episodes_round_trip_through_json() {
    let e = sample_sinusoid(&mut rng(17), 5, 10);
    let text = serde_json::to_string(&e).unwrap();
    let back: Episode = serde_json::from_str(&text).unwrap();
    assert_eq!(back, e);
    let c = sample_cluster_episode(&mut rng(18), 3, 2, 2, 4).unwrap();
    let back: Episode = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
    assert_eq!(back, c);
    let v: serde_json::Value = serde_json::to_value(&c).unwrap();
    assert_eq!(v["task_descriptor"]["kind"], "clusters");
    assert!(v["support"]["inputs"]["shape"].is_array());
}

#[test]
fn generators_are_pure_functions_of_seed() {
    let a =
        serde_json::to_string(&sample_cluster_episode(&mut rng(3), 5, 1, 5, 16).unwrap()).unwrap();
    let b =
        serde_json::to_string(&sample_cluster_episode(&mut rng(3), 5, 1, 5, 16).unwrap()).unwrap();
    assert_eq!(a, b);
    let (t1, ..) = small_transfer(4);
    let (t2, ..) = small_transfer(4);
    assert_eq!(
        serde_json::to_string(&*t1).unwrap(),
        serde_json::to_string(&*t2).unwrap()
    );
}

#[test]
fn transfer_task_round_trips_through_json() {
    let (task, ..) = small_transfer(5);
    let back: TransferTask = serde_json::from_str(&serde_json::to_string(&*task).unwrap()).unwrap();
    assert_eq!(back, *task);
}

#[test]
fn noiseless_two_way_is_solved_by_one_step_linear_head() {
    let mut spec = ClusterSpec::new(2, 3, 10, 5);
    spec.sigma = 0.0;
    let e = sample_cluster_episode_with(&mut rng(6), &spec).unwrap();
    let mlp = metastep_core::tasks::Mlp::new(vec![5, 2], metastep_core::tasks::Activation::Tanh);
    let f = metastep_core::tasks::CrossEntropyObjective { mlp: mlp.clone() };
    let phi = mlp.layout();
    let g = metastep_core::ad::grad(&f, &phi, &ParamGroup::new(), &e.support).unwrap();
    let stepped = phi
        .unflatten(
            phi.flatten()
                .iter()
                .zip(g.data())
                .map(|(p, g)| p - 1.0 * g)
                .collect::<Vec<_>>()
                .as_slice(),
        )
        .unwrap();
    let logits = mlp.predict(&stepped, &e.query.inputs).unwrap();
    assert_eq!(accuracy(&logits, &e.query.targets).unwrap(), 1.0);
}

#[test]
fn pretrained_source_beats_chance() {
    let mut r = rng(8);
    let task = TransferTask::build(&mut r, Default::default()).unwrap();
    let batch = task.source_labels.batch(&mut r, 400);
    let acc = task.source_accuracy(&batch).unwrap();
    assert!(acc > 0.6, "source accuracy {acc}");
}

fn diagnostic(inner: Arc<dyn Objective>, hp: HyperParams) -> Vec<Option<f64>> {
    let mut r = rng(9);
    let theta = ParamGroup::new().with("p", Tensor::vector(randn(&mut r, 4)));
    let batch = Batch::new(
        Tensor::matrix(2, 4, randn(&mut r, 8)).unwrap(),
        Tensor::zeros(&[2, 1]),
    )
    .unwrap();
    let batches = [batch.clone()];
    let p = MetaProblem::shared(
        inner.clone(),
        inner.clone(),
        &batches,
        &batch,
        hp,
        5,
        &theta,
    );
    let traj = p.unroll(1, false).unwrap();
    grad_diff_series(&traj, inner.as_ref(), &ParamGroup::new(), 0)
        .unwrap()
        .values
}

#[test]
fn affine_loss_has_zero_gradient_difference() {
    let affine: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "affine",
        |t: &Tape, phi: &[Var<'_>], _: &[Var<'_>], _: &Batch| -> Result<Var<'_>> {
            Ok((phi[0] * t.constant(Tensor::vector(vec![1.0, -2.0, 0.5, 3.0]))).sum())
        },
    ));
    let d = diagnostic(affine, HyperParams::new(0.1, 0.9, 0.0).unwrap());
    assert_eq!(d, vec![Some(0.0); 5]);
}

#[test]
fn frozen_parameters_have_zero_gradient_difference() {
    let (mlp, f) = mlp_mse(vec![4, 3, 1]);
    let mut r = rng(10);
    let phi = mlp.init(&mut r);
    let batch = regression_batch(&mut r, 4, 4, 1);
    let batches = [batch.clone()];
    let hp = HyperParams::sgd(1e-300).unwrap();
    let p = MetaProblem::shared(f.clone(), f.clone(), &batches, &batch, hp, 3, &phi);
    let traj = p.unroll(1, false).unwrap();
    let d = grad_diff_series(&traj, f.as_ref(), &ParamGroup::new(), 0).unwrap();
    assert_eq!(d.values, vec![Some(0.0); 3]);
}

#[test]
fn vanishing_gradient_is_a_sentinel() {
    let flat: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "flat",
        |_t: &Tape, phi: &[Var<'_>], _: &[Var<'_>], _: &Batch| -> Result<Var<'_>> {
            Ok(phi[0].sum().scale(0.0))
        },
    ));
    let d = diagnostic(flat, HyperParams::sgd(0.1).unwrap());
    assert_eq!(d, vec![None; 5]);
}

#[test]
fn diagnostic_requires_unit_windows() {
    let (mlp, f) = mlp_mse(vec![2, 1]);
    let mut r = rng(11);
    let phi = mlp.init(&mut r);
    let batch = regression_batch(&mut r, 3, 2, 1);
    let batches = [batch.clone()];
    let p = MetaProblem::shared(
        f.clone(),
        f.clone(),
        &batches,
        &batch,
        HyperParams::sgd(0.1).unwrap(),
        4,
        &phi,
    );
    let traj = p.unroll(2, false).unwrap();
    assert!(matches!(
        grad_diff_series(&traj, f.as_ref(), &ParamGroup::new(), 0),
        Err(Error::InvalidSchedule(_))
    ));
}

#[test]
fn transfer_gradient_difference_is_finite() {
    let (task, phi, theta, batch) = small_transfer(12);
    let obj = task.objectives();
    let batches = [batch.clone()];
    let p = MetaProblem {
        inner: obj.transfer.clone(),
        outer: obj.accuracy.clone(),
        inner_batches: &batches,
        outer_batch: &batch,
        hp: HyperParams::new(0.1, 0.9, 1e-4).unwrap(),
        total_steps: 4,
        space: MetaSpace::MetaNetwork,
        theta: &theta,
        phi1: Some(&phi),
        final_step: None,
    };
    let traj = p.unroll(1, false).unwrap();
    let d = grad_diff_series(&traj, obj.transfer.as_ref(), &theta, 3).unwrap();
    assert_eq!(d.outer_iter, 3);
    assert_eq!(d.values.len(), 4);
    assert!(d.defined().all(|x| x.is_finite() && x >= 0.0));
}
