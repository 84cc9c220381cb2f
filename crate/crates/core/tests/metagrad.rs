mod common;

use std::sync::Arc;

use common::*;
use metastep_core::ad::{grad, value, FnObjective, Objective, Tape, Var};
use metastep_core::dynamics::{self, HyperParams, OptState};
use metastep_core::metagrad::{
    maml_outer_step, meta_gradient, metanet_outer_step, reptile_delta, EstimatorRegistry,
    EstimatorSpec, FewShotTask, FirstOrder, MetaEstimator, MetaProblem, MetaSpace, Reptile,
    TransferObjectives, Unrolled,
};
use metastep_core::tasks::{
    sample_cluster_episode, sample_sinusoid, Activation, CrossEntropyObjective, Mlp,
};
use metastep_core::{Batch, Error, ParamGroup, Result, Tensor};

fn momentum() -> HyperParams {
    HyperParams::new(0.05, 0.9, 1e-4).unwrap()
}

/// Owned pieces of a bilevel problem so FD closures can rebuild it per θ.
#[derive(Clone)]
struct Setup {
    inner: Arc<dyn Objective>,
    outer: Arc<dyn Objective>,
    inner_batches: Vec<Batch>,
    outer_batch: Batch,
    hp: HyperParams,
    steps: usize,
    space: MetaSpace,
    theta: ParamGroup,
    phi1: Option<ParamGroup>,
    final_step: bool,
}

impl Setup {
    fn problem<'a>(&'a self, theta: &'a ParamGroup) -> MetaProblem<'a> {
        MetaProblem {
            inner: self.inner.clone(),
            outer: self.outer.clone(),
            inner_batches: &self.inner_batches,
            outer_batch: &self.outer_batch,
            hp: self.hp,
            total_steps: self.steps,
            space: self.space,
            theta,
            phi1: self.phi1.as_ref(),
            final_step: self
                .final_step
                .then(|| (self.outer.clone(), &self.outer_batch)),
        }
    }

    fn estimate(&self, est: &dyn MetaEstimator) -> metastep_core::metagrad::Estimate {
        est.estimate(&self.problem(&self.theta)).unwrap()
    }

    fn outer_loss(&self, flat_theta: &[f64]) -> f64 {
        let theta = self.theta.unflatten(flat_theta).unwrap();
        let traj = self.problem(&theta).unroll(1, false).unwrap();
        value(
            self.outer.as_ref(),
            &traj.final_phi(),
            traj.theta(),
            &self.outer_batch,
        )
        .unwrap()
    }

    fn fd_hypergradient(&self) -> Vec<f64> {
        fd_gradient(|x| self.outer_loss(x), &self.theta.flatten(), 1e-5)
    }
}

fn sinusoid_setup(seed: u64, steps: usize, hp: HyperParams) -> Setup {
    let mut r = rng(seed);
    let (mlp, f) = mlp_mse(vec![1, 8, 8, 1]);
    let ep = sample_sinusoid(&mut r, 5, 7);
    Setup {
        inner: f.clone(),
        outer: f,
        inner_batches: vec![ep.support],
        outer_batch: ep.query,
        hp,
        steps,
        space: MetaSpace::SharedInit,
        theta: mlp.init(&mut r),
        phi1: None,
        final_step: false,
    }
}

fn cluster_setup(seed: u64, steps: usize) -> Setup {
    let mut r = rng(seed);
    let ep = sample_cluster_episode(&mut r, 3, 2, 3, 4).unwrap();
    let mlp = Mlp::new(vec![4, 6, 3], Activation::Tanh);
    let f: Arc<dyn Objective> = Arc::new(CrossEntropyObjective { mlp: mlp.clone() });
    Setup {
        inner: f.clone(),
        outer: f,
        inner_batches: vec![ep.support.clone(), ep.query.clone()],
        outer_batch: ep.query,
        hp: momentum(),
        steps,
        space: MetaSpace::SharedInit,
        theta: mlp.init(&mut r),
        phi1: None,
        final_step: false,
    }
}

fn transfer_setup(seed: u64, steps: usize, hp: HyperParams, final_step: bool) -> Setup {
    let (task, phi, theta, batch) = small_transfer(seed);
    let obj = task.objectives();
    Setup {
        inner: obj.transfer,
        outer: obj.accuracy,
        inner_batches: vec![batch.clone()],
        outer_batch: batch,
        hp,
        steps,
        space: MetaSpace::MetaNetwork,
        theta,
        phi1: Some(phi),
        final_step,
    }
}

fn coupled_setup(seed: u64, steps: usize, hp: HyperParams) -> Setup {
    let mut r = rng(seed);
    let n = 6;
    let batch = Batch::new(
        Tensor::matrix(1, n, randn(&mut r, n)).unwrap(),
        Tensor::zeros(&[1, 1]),
    )
    .unwrap();
    let outer: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "outer",
        |_t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            let s = phi[0].add_scalar(-0.5);
            Ok((s * s).sum().scale(0.5))
        },
    ));
    Setup {
        inner: coupled_objective(),
        outer,
        inner_batches: vec![batch.clone()],
        outer_batch: batch,
        hp,
        steps,
        space: MetaSpace::MetaNetwork,
        theta: ParamGroup::new()
            .with("s", Tensor::scalar(0.2))
            .with("c", Tensor::scalar(0.7)),
        phi1: Some(ParamGroup::new().with("p", Tensor::vector(randn(&mut r, n)))),
        final_step: false,
    }
}

fn assert_fd(setup: &Setup, label: &str) {
    let exact = setup.estimate(&Unrolled::exact()).report.grad_theta;
    let fd = setup.fd_hypergradient();
    let e = rel(&exact, &fd);
    assert!(e <= 1e-4, "{label}: hypergradient rel error {e:.3e}");
    assert!(
        Tensor::vector(fd).norm() > 1e-8,
        "{label}: degenerate oracle"
    );
}

#[test]
fn one_step_quadratic_closed_form() {
    let a = [1.0, 3.0, 0.5];
    let quad: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "quad",
        move |t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            let w = t.constant(Tensor::vector(a.to_vec()));
            Ok((phi[0] * phi[0] * w).sum().scale(0.5))
        },
    ));
    let target = [0.2, -0.4, 1.0];
    let outer: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "dist",
        move |t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            let d = phi[0] - t.constant(Tensor::vector(target.to_vec()));
            Ok((d * d).sum().scale(0.5))
        },
    ));
    let eta = 0.1;
    let theta = ParamGroup::new().with("p", Tensor::vector(vec![1.0, 2.0, -1.0]));
    let batch = Batch::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
    let batches = [batch.clone()];
    let p = MetaProblem::shared(
        quad,
        outer,
        &batches,
        &batch,
        HyperParams::sgd(eta).unwrap(),
        1,
        &theta,
    );
    let got = Unrolled::exact().estimate(&p).unwrap().report.grad_theta;
    let th = theta.flatten();
    let want: Vec<f64> = (0..3)
        .map(|i| {
            let phi2 = th[i] - eta * a[i] * th[i];
            (1.0 - eta * a[i]) * (phi2 - target[i])
        })
        .collect();
    assert!(rel(&got, &want) < 1e-15);
}

#[test]
fn hypergradient_matches_finite_differences_shared_mode() {
    for steps in [1, 4, 8] {
        assert_fd(
            &sinusoid_setup(31, steps, momentum()),
            &format!("sinusoid T={steps}"),
        );
    }
    assert_fd(
        &sinusoid_setup(32, 8, HyperParams::sgd(0.05).unwrap()),
        "sinusoid sgd",
    );
    assert_fd(&cluster_setup(33, 6), "clusters");
}

#[test]
fn hypergradient_matches_finite_differences_meta_network() {
    assert_fd(
        &transfer_setup(34, 8, momentum(), true),
        "transfer with final step",
    );
    assert_fd(
        &transfer_setup(35, 2, momentum(), false),
        "transfer K=1 N=2 exact",
    );
    assert_fd(&coupled_setup(36, 8, momentum()), "coupled");
}

#[test]
fn multistep_matches_finite_differences_of_its_own_dynamics() {
    let s = transfer_setup(37, 2, momentum(), false);
    let est = Unrolled::multistep(2).unwrap();
    let got = s.estimate(&est).report.grad_theta;
    let f = |x: &[f64]| {
        let theta = s.theta.unflatten(x).unwrap();
        let traj = s.problem(&theta).unroll(2, false).unwrap();
        value(
            s.outer.as_ref(),
            &traj.final_phi(),
            traj.theta(),
            &s.outer_batch,
        )
        .unwrap()
    };
    let fd = fd_gradient(f, &s.theta.flatten(), 1e-5);
    assert!(rel(&got, &fd) <= 1e-4);
}

#[test]
fn naive_sgd_closure() {
    let eta = 0.03;
    for build in [
        |hp: HyperParams, t: usize| sinusoid_setup(41, t, hp),
        |hp: HyperParams, t: usize| transfer_setup(42, t, hp, false),
    ] {
        for n in [2, 4] {
            let multi = build(HyperParams::sgd(eta).unwrap(), 8);
            let single = build(HyperParams::sgd(n as f64 * eta).unwrap(), 8 / n);
            let a = multi.estimate(&Unrolled::multistep(n).unwrap());
            let b = single.estimate(&Unrolled::exact());
            let (pa, pb) = (a.trajectory.final_state(), b.trajectory.final_state());
            assert!(rel(pa.phi.data(), pb.phi.data()) <= 1e-10, "n={n} φ");
            assert!(
                rel(&a.report.grad_theta, &b.report.grad_theta) <= 1e-10,
                "n={n} ∂L/∂θ"
            );
        }
    }
}

#[test]
fn counter_law() {
    let s = transfer_setup(43, 8, momentum(), false);
    for (n, want) in [(1, 8), (2, 4), (4, 2), (8, 1)] {
        let r = s.estimate(&Unrolled::multistep(n).unwrap()).report;
        assert_eq!((r.hvp_count, r.cross_vp_count), (want, want), "n={n}");
        assert_eq!(r.first_order_grad_count, want + 1);
    }
    let r = s.estimate(&Unrolled::exact()).report;
    assert_eq!(r.hvp_count, 8);
}

#[test]
fn truncated_last_window_counts_anchors() {
    let s = sinusoid_setup(44, 7, momentum());
    let r = s.estimate(&Unrolled::multistep(3).unwrap()).report;
    assert_eq!(r.hvp_count, 3);
}

#[test]
fn multistep_one_is_exact() {
    for s in [
        sinusoid_setup(45, 8, momentum()),
        transfer_setup(46, 8, momentum(), true),
    ] {
        let a = s.estimate(&Unrolled::exact()).report.grad_theta;
        let b = s
            .estimate(&Unrolled::multistep(1).unwrap())
            .report
            .grad_theta;
        assert!(rel(&b, &a) <= 1e-15);
    }
}

#[test]
fn constant_gradient_makes_multistep_exact() {
    let affine: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "affine",
        |_t: &Tape, phi: &[Var<'_>], theta: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            Ok((phi[0] * theta[0].tanh()).sum())
        },
    ));
    let mut s = coupled_setup(47, 8, momentum());
    s.inner = affine;
    s.theta = ParamGroup::new().with("c", Tensor::vector(randn(&mut rng(5), 6)));
    let exact = s.estimate(&Unrolled::exact());
    for n in [2, 3, 4, 8] {
        let m = s.estimate(&Unrolled::multistep(n).unwrap());
        assert!(
            rel(
                m.trajectory.final_state().phi.data(),
                exact.trajectory.final_state().phi.data()
            ) <= 1e-12
        );
        assert!(
            rel(&m.report.grad_theta, &exact.report.grad_theta) <= 1e-12,
            "n={n}"
        );
    }
}

#[test]
fn exact_unroll_matches_reference_loop() {
    let s = sinusoid_setup(48, 6, momentum());
    let traj = s.problem(&s.theta).unroll(1, false).unwrap();
    let mut state = OptState::initial(Tensor::vector(s.theta.flatten()));
    for t in 0..6 {
        let phi = s.theta.unflatten(state.phi.data()).unwrap();
        let g = grad(
            s.inner.as_ref(),
            &phi,
            &ParamGroup::new(),
            &s.inner_batches[0],
        )
        .unwrap();
        state = dynamics::step(&state, &g, &s.hp).unwrap();
        assert_eq!(&traj.states()[t + 1], &state);
    }
}

#[test]
fn two_step_windows_equal_doubled_rate_unroll() {
    let eta = 0.04;
    let a = sinusoid_setup(49, 4, HyperParams::sgd(eta).unwrap());
    let b = sinusoid_setup(49, 2, HyperParams::sgd(2.0 * eta).unwrap());
    let ta = a.problem(&a.theta).unroll(2, false).unwrap();
    let tb = b.problem(&b.theta).unroll(1, false).unwrap();
    assert!(rel(ta.final_state().phi.data(), tb.final_state().phi.data()) <= 1e-12);
    assert_eq!(ta.windows().len(), 2);
}

#[test]
fn first_order_has_no_theta_path_in_meta_network_mode() {
    let s = transfer_setup(50, 8, momentum(), true);
    let fo = s.estimate(&FirstOrder).report;
    assert_eq!(fo.grad_theta.len(), s.theta.flat_len());
    assert!(fo.grad_theta.iter().all(|&x| x == 0.0));
    assert_eq!(fo.hvp_count, 0);
    let exact = s.estimate(&Unrolled::exact()).report;
    assert!(Tensor::vector(exact.grad_theta).norm() > 1e-8);
}

#[test]
fn first_order_with_no_steps_is_outer_gradient() {
    let s = sinusoid_setup(51, 0, momentum());
    let fo = s.estimate(&FirstOrder).report.grad_theta;
    let g = grad(
        s.outer.as_ref(),
        &s.theta,
        &ParamGroup::new(),
        &s.outer_batch,
    )
    .unwrap();
    assert_eq!(fo, g.into_data());
}

#[test]
fn first_order_equals_exact_with_identity_transport() {
    let s = sinusoid_setup(52, 4, momentum());
    let fo = s.estimate(&FirstOrder);
    let g = grad(
        s.outer.as_ref(),
        &fo.trajectory.final_phi(),
        &ParamGroup::new(),
        &s.outer_batch,
    )
    .unwrap();
    assert_eq!(fo.report.grad_theta, g.into_data());
}

#[test]
fn first_order_shared_mode_checks_sizes() {
    let mut s = sinusoid_setup(53, 2, momentum());
    s.space = MetaSpace::MetaNetwork;
    s.phi1 = Some(s.theta.clone());
    s.theta = ParamGroup::new().with("x", Tensor::scalar(1.0));
    let traj = s.problem(&s.theta).unroll(1, false).unwrap();
    let r = metastep_core::metagrad::meta_gradient_first_order(
        &traj,
        s.outer.as_ref(),
        &s.outer_batch,
        &s.theta,
        MetaSpace::SharedInit,
    );
    assert!(matches!(r, Err(Error::SpaceMismatch(_))));
}

#[test]
fn reptile_examples() {
    let zero: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "zero",
        |_t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            Ok(phi[0].sum().scale(0.0))
        },
    ));
    let tilt: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "tilt",
        |t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            Ok((phi[0] * t.constant(Tensor::vector(vec![2.0, -2.0]))).sum())
        },
    ));
    let theta = ParamGroup::new().with("p", Tensor::vector(vec![1.0, 1.0]));
    let batch = Batch::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
    let batches = [batch.clone()];
    let hp = HyperParams::sgd(0.1).unwrap();
    let run = |inner: &Arc<dyn Objective>, steps| {
        let p = MetaProblem::shared(
            inner.clone(),
            zero.clone(),
            &batches,
            &batch,
            hp,
            steps,
            &theta,
        );
        Reptile.estimate(&p).unwrap().report.grad_theta
    };
    assert_eq!(run(&zero, 3), vec![0.0, 0.0]);
    assert_eq!(run(&tilt, 0), vec![0.0, 0.0]);
    let d = run(&tilt, 1);
    assert!(rel(&d, &[0.2, -0.2]) < 1e-15);
    let p = MetaProblem::shared(tilt.clone(), zero.clone(), &batches, &batch, hp, 1, &theta);
    let traj = p.unroll(1, false).unwrap();
    assert_eq!(reptile_delta(&theta, &traj).unwrap().data(), &d[..]);
}

#[test]
fn reptile_rejects_meta_network_mode() {
    let s = transfer_setup(54, 2, momentum(), false);
    assert!(matches!(
        Reptile.estimate(&s.problem(&s.theta)),
        Err(Error::SpaceMismatch(_))
    ));
}

#[test]
fn meta_gradient_needs_retained_graphs() {
    let s = sinusoid_setup(55, 3, momentum());
    let traj = s.problem(&s.theta).unroll(1, false).unwrap();
    assert!(matches!(
        meta_gradient(
            &traj,
            s.outer.as_ref(),
            &s.outer_batch,
            MetaSpace::SharedInit
        ),
        Err(Error::IncompleteTrajectory(_))
    ));
}

#[test]
fn divergence_reports_step() {
    let theta = ParamGroup::new().with("p", Tensor::vector(vec![-1.0]));
    let batch = Batch::new(Tensor::zeros(&[1, 1]), Tensor::zeros(&[1, 1])).unwrap();
    let batches = [batch.clone()];
    let hp = HyperParams::new(1.0, 0.0, 0.0).unwrap();
    let neg: Arc<dyn Objective> = Arc::new(FnObjective::new(
        "neg",
        |_t: &Tape, phi: &[Var<'_>], _th: &[Var<'_>], _b: &Batch| -> Result<Var<'_>> {
            Ok(-(phi[0].exp().sum()))
        },
    ));
    let p = MetaProblem::shared(neg.clone(), neg, &batches, &batch, hp, 20, &theta);
    match p.unroll(1, false) {
        Err(Error::AtStep { step, source }) => {
            assert!(step > 1);
            assert!(matches!(*source, Error::NonFiniteLoss { .. }));
        }
        other => panic!("expected AtStep, got {other:?}"),
    }
}

fn sinusoid_tasks(seed: u64, m: usize) -> (ParamGroup, Vec<FewShotTask>) {
    let mut r = rng(seed);
    let (mlp, f) = mlp_mse(vec![1, 8, 1]);
    let theta = mlp.init(&mut r);
    let tasks = (0..m)
        .map(|_| {
            let ep = sample_sinusoid(&mut r, 5, 5);
            FewShotTask {
                inner: f.clone(),
                outer: f.clone(),
                support: vec![ep.support],
                query: ep.query,
            }
        })
        .collect();
    (theta, tasks)
}

#[test]
fn maml_zero_rate_keeps_theta() {
    let (theta, tasks) = sinusoid_tasks(60, 1);
    let (next, report) =
        maml_outer_step(&theta, &tasks, momentum(), 0.0, 3, &Unrolled::exact()).unwrap();
    assert_eq!(next, theta);
    assert_eq!(report.hvp_count, 3);
}

#[test]
fn maml_duplicate_tasks_average_to_one() {
    let (theta, tasks) = sinusoid_tasks(61, 1);
    let twice = vec![tasks[0].clone(), tasks[0].clone()];
    let est = Unrolled::multistep(2).unwrap();
    let (a, _) = maml_outer_step(&theta, &tasks, momentum(), 0.1, 4, &est).unwrap();
    let (b, rb) = maml_outer_step(&theta, &twice, momentum(), 0.1, 4, &est).unwrap();
    assert!(rel(&b.flatten(), &a.flatten()) < 1e-15);
    assert_eq!(rb.hvp_count, 4);
}

#[test]
fn maml_is_deterministic_under_parallelism() {
    let (theta, tasks) = sinusoid_tasks(62, 8);
    let run = || {
        maml_outer_step(&theta, &tasks, momentum(), 0.1, 4, &Unrolled::exact())
            .unwrap()
            .0
    };
    let first = run();
    for _ in 0..3 {
        assert_eq!(run(), first);
    }
}

#[test]
fn maml_tags_failing_task() {
    let (theta, mut tasks) = sinusoid_tasks(63, 3);
    tasks[2].support = vec![Batch::new(Tensor::zeros(&[2, 3]), Tensor::zeros(&[2, 1])).unwrap()];
    let err = maml_outer_step(&theta, &tasks, momentum(), 0.1, 2, &Unrolled::exact()).unwrap_err();
    assert!(matches!(err, Error::InTask { task: 2, .. }), "{err:?}");
}

#[test]
fn metanet_without_theta_path_keeps_theta() {
    let (task, phi, theta, batch) = small_transfer(64);
    let acc = task.objectives().accuracy;
    let objectives = TransferObjectives {
        total: acc.clone(),
        transfer: acc.clone(),
        accuracy: acc,
    };
    let (next, step) = metanet_outer_step(
        &theta,
        &phi,
        &batch,
        &objectives,
        momentum(),
        4,
        true,
        0.5,
        &Unrolled::exact(),
    )
    .unwrap();
    assert_eq!(next, theta);
    assert_ne!(step.phi, phi);
}

#[test]
fn metanet_degenerate_window_is_exact() {
    let (task, phi, theta, batch) = small_transfer(65);
    let objectives = task.objectives();
    let run = |est: &dyn MetaEstimator| {
        metanet_outer_step(
            &theta,
            &phi,
            &batch,
            &objectives,
            momentum(),
            1,
            true,
            0.5,
            est,
        )
        .unwrap()
    };
    let (a, sa) = run(&Unrolled::exact());
    let (b, sb) = run(&Unrolled::multistep(1).unwrap());
    assert_eq!(a, b);
    assert_eq!(sa.phi, sb.phi);
    assert_eq!(sa.report.hvp_count, 2);
}

#[test]
fn metanet_line_five_update_is_one_plain_step() {
    let (task, phi, theta, batch) = small_transfer(66);
    let objectives = task.objectives();
    let (_, step) = metanet_outer_step(
        &theta,
        &phi,
        &batch,
        &objectives,
        momentum(),
        2,
        true,
        0.5,
        &Unrolled::exact(),
    )
    .unwrap();
    let g = grad(objectives.total.as_ref(), &phi, &theta, &batch).unwrap();
    let want = dynamics::step(
        &OptState::initial(Tensor::vector(phi.flatten())),
        &g,
        &momentum(),
    )
    .unwrap();
    assert_eq!(step.phi.flatten(), want.phi.into_data());
}

#[test]
fn registry_estimators_agree_with_direct_construction() {
    let reg = EstimatorRegistry::with_builtins();
    let s = sinusoid_setup(67, 4, momentum());
    let spec = EstimatorSpec { window: 2 };
    let a = s
        .estimate(reg.create("multistep", &spec).unwrap().as_ref())
        .report
        .grad_theta;
    let b = s
        .estimate(&Unrolled::multistep(2).unwrap())
        .report
        .grad_theta;
    assert_eq!(a, b);
}

#[test]
fn peak_bytes_grow_with_retained_graphs() {
    let s = transfer_setup(68, 8, momentum(), false);
    let exact = s.estimate(&Unrolled::exact()).report.peak_bytes;
    let multi = s
        .estimate(&Unrolled::multistep(4).unwrap())
        .report
        .peak_bytes;
    let fo = s.estimate(&FirstOrder).report.peak_bytes;
    assert!(exact > multi && multi > fo);
}
