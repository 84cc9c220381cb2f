use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use metastep_core::ad::{value, Objective};
use metastep_core::coeff::{matching_gaps, prop1_witness, Prop1Witness};
use metastep_core::dynamics::HyperParams;
use metastep_core::metagrad::{
    maml_direction, metanet_direction, unroll_inner, EstimatorRegistry, EstimatorSpec, FewShotTask,
    InnerSpec, MetaEstimator, MetaOptimizer, MetaProblem, MetaSpace, WindowSchedule,
};
use metastep_core::tasks::{
    accuracy, grad_diff_series, median, sample_cluster_episode, sample_sinusoid, Activation,
    CrossEntropyObjective, Episode, Mlp, MseObjective, TransferSpec, TransferTask,
};
use metastep_core::{Batch, ParamGroup};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::config::{MetaOptimizerKind, Mode, RunConfig};
use crate::error::{Context, HarnessError};
use crate::output::{write_json, MetricsRecord, MetricsWriter, RunOutcome, RunTotals};

/// Independent deterministic stream `k` of the run seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

fn estimator(cfg: &RunConfig) -> Result<Box<dyn MetaEstimator>, HarnessError> {
    EstimatorRegistry::with_builtins()
        .create(&cfg.estimator, &EstimatorSpec { window: cfg.window })
        .context(|| format!("creating estimator `{}`", cfg.estimator))
}

fn meta_optimizer(cfg: &RunConfig) -> MetaOptimizer {
    match cfg.meta_optimizer {
        MetaOptimizerKind::Sgd => MetaOptimizer::sgd(cfg.eta_meta),
        MetaOptimizerKind::Adam => MetaOptimizer::adam(cfg.eta_meta),
    }
}

fn hp(cfg: &RunConfig) -> Result<HyperParams, HarnessError> {
    cfg.hyper_params()
        .context(|| "inner hyper-parameters".into())
}

fn is_eval_iter(cfg: &RunConfig, it: usize) -> bool {
    (it + 1).is_multiple_of(cfg.eval_every) || it + 1 == cfg.outer_iters
}

/// Dispatches on `cfg.mode`, streaming rows to `writer`.
pub fn run_experiment(
    cfg: &RunConfig,
    writer: &mut MetricsWriter,
) -> Result<RunOutcome, HarnessError> {
    match cfg.mode {
        Mode::MamlSinusoid | Mode::MamlCluster => run_maml(cfg, writer),
        Mode::Metatransfer | Mode::Graddiff | Mode::Bench => run_metatransfer(cfg, writer),
        Mode::Prop1 => run_prop1(cfg),
    }
}

/// Pre- and post-adaptation loss and metric averaged over evaluation episodes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdaptationEval {
    pub pre_loss: f64,
    pub post_loss: f64,
    pub pre_metric: f64,
    pub post_metric: f64,
}

struct FewShotSetup {
    mlp: Mlp,
    objective: Arc<dyn Objective>,
    classify: bool,
}

impl FewShotSetup {
    fn new(cfg: &RunConfig) -> Self {
        let (input, output, classify) = match cfg.mode {
            Mode::MamlCluster => (cfg.dim, cfg.n_way, true),
            _ => (1, 1, false),
        };
        let mut sizes = vec![input];
        sizes.extend(&cfg.hidden);
        sizes.push(output);
        let mlp = Mlp::new(sizes, Activation::Tanh);
        let objective: Arc<dyn Objective> = if classify {
            Arc::new(CrossEntropyObjective { mlp: mlp.clone() })
        } else {
            Arc::new(MseObjective { mlp: mlp.clone() })
        };
        Self {
            mlp,
            objective,
            classify,
        }
    }

    fn sample<R: Rng>(&self, cfg: &RunConfig, rng: &mut R) -> Result<Episode, HarnessError> {
        if self.classify {
            sample_cluster_episode(rng, cfg.n_way, cfg.k_shot, cfg.q_query, cfg.dim)
                .context(|| "sampling cluster episode".into())
        } else {
            Ok(sample_sinusoid(rng, cfg.k_shot, cfg.q_query))
        }
    }

    /// Query accuracy for classification, query MSE for regression.
    fn metric(&self, phi: &ParamGroup, batch: &Batch, loss: f64) -> Result<f64, HarnessError> {
        if self.classify {
            let logits = self
                .mlp
                .predict(phi, &batch.inputs)
                .context(|| "predict".into())?;
            accuracy(&logits, &batch.targets).context(|| "accuracy".into())
        } else {
            Ok(loss)
        }
    }
}

/// Adapts `theta` on every episode's support set with the run's inner loop
/// (same window as training) and scores the query set before and after.
pub fn evaluate_adaptation(
    cfg: &RunConfig,
    objective: &Arc<dyn Objective>,
    mlp: &Mlp,
    classify: bool,
    theta: &ParamGroup,
    episodes: &[Episode],
) -> Result<AdaptationEval, HarnessError> {
    let setup = FewShotSetup {
        mlp: mlp.clone(),
        objective: objective.clone(),
        classify,
    };
    let hp = hp(cfg)?;
    let empty = ParamGroup::new();
    let schedule = WindowSchedule::new(cfg.inner_steps, cfg.effective_window())
        .context(|| "evaluation schedule".into())?;
    let mut acc = AdaptationEval {
        pre_loss: 0.0,
        post_loss: 0.0,
        pre_metric: 0.0,
        post_metric: 0.0,
    };
    for (i, ep) in episodes.iter().enumerate() {
        let spec = InnerSpec {
            objective: objective.clone(),
            theta: &empty,
            hp,
            schedule: schedule.clone(),
            batches: std::slice::from_ref(&ep.support),
            retain_graphs: false,
        };
        let traj = unroll_inner(&spec, theta).context(|| format!("adapting eval task {i}"))?;
        let phi = traj.final_phi();
        let f = objective.as_ref();
        let pre = value(f, theta, &empty, &ep.query).context(|| format!("eval task {i}"))?;
        let post = value(f, &phi, &empty, &ep.query).context(|| format!("eval task {i}"))?;
        acc.pre_loss += pre;
        acc.post_loss += post;
        acc.pre_metric += setup.metric(theta, &ep.query, pre)?;
        acc.post_metric += setup.metric(&phi, &ep.query, post)?;
    }
    let m = episodes.len() as f64;
    acc.pre_loss /= m;
    acc.post_loss /= m;
    acc.pre_metric /= m;
    acc.post_metric /= m;
    Ok(acc)
}

fn run_maml(cfg: &RunConfig, writer: &mut MetricsWriter) -> Result<RunOutcome, HarnessError> {
    let setup = FewShotSetup::new(cfg);
    let hp = hp(cfg)?;
    let est = estimator(cfg)?;
    let mut opt = meta_optimizer(cfg);
    let mut theta = setup.mlp.init(&mut stream(cfg.seed, INIT_STREAM));
    let mut train_rng = stream(cfg.seed, TRAIN_STREAM);
    let mut eval_rng = stream(cfg.seed, EVAL_STREAM);
    let eval_eps = (0..cfg.eval_tasks)
        .map(|_| setup.sample(cfg, &mut eval_rng))
        .collect::<Result<Vec<_>, _>>()?;
    let evaluate = |theta: &ParamGroup| {
        evaluate_adaptation(
            cfg,
            &setup.objective,
            &setup.mlp,
            setup.classify,
            theta,
            &eval_eps,
        )
    };
    let initial = evaluate(&theta)?;

    let mut totals = RunTotals::default();
    let mut last_eval = initial;
    for it in 0..cfg.outer_iters {
        let tasks = (0..cfg.meta_batch)
            .map(|_| {
                let ep = setup.sample(cfg, &mut train_rng)?;
                Ok(FewShotTask {
                    inner: setup.objective.clone(),
                    outer: setup.objective.clone(),
                    support: vec![ep.support],
                    query: ep.query,
                })
            })
            .collect::<Result<Vec<_>, HarnessError>>()?;
        let started = Instant::now();
        let report = maml_direction(&theta, &tasks, hp, cfg.inner_steps, est.as_ref())
            .context(|| format!("outer iteration {it}"))?;
        let mut flat = theta.flatten();
        opt.apply(&mut flat, &report.direction)
            .context(|| format!("meta update {it}"))?;
        theta = theta.unflatten(&flat).context(|| "meta update".into())?;
        let wall = started.elapsed().as_secs_f64();

        totals.train_wall_seconds += wall;
        totals.hvp_total += report.hvp_count;
        totals.cross_vp_total += report.cross_vp_count;
        totals.peak_tape_bytes = totals.peak_tape_bytes.max(report.peak_bytes);
        let eval = if is_eval_iter(cfg, it) {
            last_eval = evaluate(&theta)?;
            Some(last_eval)
        } else {
            None
        };
        let record = MetricsRecord {
            outer_iter: it,
            train_loss: report.mean_outer_loss,
            eval_pre_loss: eval.map(|e| e.pre_loss),
            eval_loss: eval.map(|e| e.post_loss),
            post_adapt_metric: eval.map(|e| e.post_metric),
            hvp_count: report.hvp_count,
            cross_vp_count: report.cross_vp_count,
            first_order_grad_count: report.first_order_grad_count,
            hvp_total: totals.hvp_total,
            peak_tape_bytes: report.peak_bytes,
            grad_diff_median: None,
        };
        writer.append(&record, wall)?;
        totals.final_train_loss = Some(report.mean_outer_loss);
    }
    totals.outer_iters = cfg.outer_iters;
    totals.final_eval_loss = Some(last_eval.post_loss);
    totals.final_eval_metric = Some(last_eval.post_metric);

    let mut metrics = BTreeMap::new();
    let as_json = |e: &AdaptationEval| {
        json!({
            "pre_loss": e.pre_loss,
            "post_loss": e.post_loss,
            "pre_metric": e.pre_metric,
            "post_metric": e.post_metric,
        })
    };
    metrics.insert("initial_eval".into(), as_json(&initial));
    metrics.insert("final_eval".into(), as_json(&last_eval));
    if !setup.classify {
        metrics.insert(
            "mse_reduction".into(),
            json!(last_eval.pre_loss / last_eval.post_loss),
        );
    } else {
        metrics.insert(
            "accuracy_gain_over_untrained".into(),
            json!(last_eval.post_metric - initial.post_metric),
        );
    }
    Ok(RunOutcome { totals, metrics })
}

/// Builds the toy transfer task with the run's seed and sizes.
pub fn build_transfer(
    cfg: &RunConfig,
) -> Result<(Arc<TransferTask>, ParamGroup, ParamGroup), HarnessError> {
    let mut rng = stream(cfg.seed, INIT_STREAM);
    let spec = TransferSpec {
        beta: cfg.beta,
        pretrain_steps: cfg.pretrain_steps,
        ..TransferSpec::default()
    };
    let task = TransferTask::build(&mut rng, spec).context(|| "pretraining source".into())?;
    let phi = task.init_phi(&mut rng);
    let theta = task.init_theta(&mut rng);
    Ok((Arc::new(task), phi, theta))
}

fn run_metatransfer(
    cfg: &RunConfig,
    writer: &mut MetricsWriter,
) -> Result<RunOutcome, HarnessError> {
    let hp = hp(cfg)?;
    let est = estimator(cfg)?;
    let mut opt = meta_optimizer(cfg);
    let (task, mut phi, mut theta) = build_transfer(cfg)?;
    let objectives = task.objectives();
    let mut train_rng = stream(cfg.seed, TRAIN_STREAM);
    let eval_batch = task.sample_batch(&mut stream(cfg.seed, EVAL_STREAM), cfg.eval_tasks);
    let mut graddiff_rows: Vec<(usize, usize, Option<f64>)> = Vec::new();
    let mut graddiff_medians: Vec<Option<f64>> = Vec::new();

    let mut totals = RunTotals::default();
    for it in 0..cfg.outer_iters {
        let batch = task.sample_batch(&mut train_rng, cfg.batch_size);
        let started = Instant::now();
        let step = metanet_direction(
            &theta,
            &phi,
            &batch,
            &objectives,
            hp,
            cfg.inner_steps,
            cfg.final_acc_step,
            est.as_ref(),
        )
        .context(|| format!("outer iteration {it}"))?;
        let mut flat = theta.flatten();
        opt.apply(&mut flat, &step.report.grad_theta)
            .context(|| format!("meta update {it}"))?;
        let updated = theta.unflatten(&flat).context(|| "meta update".into())?;
        let theta_used = std::mem::replace(&mut theta, updated);
        let wall = started.elapsed().as_secs_f64();

        let grad_diff_median = if cfg.graddiff {
            let batches = std::slice::from_ref(&batch);
            let problem = MetaProblem {
                inner: objectives.transfer.clone(),
                outer: objectives.accuracy.clone(),
                inner_batches: batches,
                outer_batch: &batch,
                hp,
                total_steps: cfg.inner_steps,
                space: MetaSpace::MetaNetwork,
                theta: &theta_used,
                phi1: Some(&step.phi),
                final_step: None,
            };
            let traj = problem
                .unroll(1, false)
                .context(|| format!("graddiff unroll {it}"))?;
            let series = grad_diff_series(&traj, objectives.transfer.as_ref(), &theta_used, it)
                .context(|| format!("graddiff {it}"))?;
            for (t, v) in series.values.iter().enumerate() {
                graddiff_rows.push((it, t + 1, *v));
            }
            let m = median(series.defined());
            graddiff_medians.push(m);
            m
        } else {
            None
        };
        phi = step.phi;

        totals.train_wall_seconds += wall;
        totals.hvp_total += step.report.hvp_count;
        totals.cross_vp_total += step.report.cross_vp_count;
        totals.peak_tape_bytes = totals.peak_tape_bytes.max(step.report.peak_bytes);
        let (eval_loss, eval_acc) = if is_eval_iter(cfg, it) {
            let l = value(objectives.accuracy.as_ref(), &phi, &theta, &eval_batch)
                .context(|| "eval loss".into())?;
            let a = task
                .target_accuracy(&phi, &eval_batch)
                .context(|| "eval accuracy".into())?;
            totals.final_eval_loss = Some(l);
            totals.final_eval_metric = Some(a);
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        let record = MetricsRecord {
            outer_iter: it,
            train_loss: step.total_loss,
            eval_pre_loss: None,
            eval_loss,
            post_adapt_metric: eval_acc,
            hvp_count: step.report.hvp_count,
            cross_vp_count: step.report.cross_vp_count,
            first_order_grad_count: step.report.first_order_grad_count,
            hvp_total: totals.hvp_total,
            peak_tape_bytes: step.report.peak_bytes,
            grad_diff_median,
        };
        writer.append(&record, wall)?;
        totals.final_train_loss = Some(step.total_loss);
    }
    totals.outer_iters = cfg.outer_iters;

    let mut metrics = BTreeMap::new();
    let source_batch = task.source_batch(&mut stream(cfg.seed, EVAL_STREAM), cfg.eval_tasks);
    metrics.insert(
        "source_accuracy".into(),
        json!(task
            .source_accuracy(&source_batch)
            .context(|| "source accuracy".into())?),
    );
    if cfg.graddiff {
        let trend = graddiff_trend(&graddiff_medians);
        metrics.insert("graddiff".into(), trend);
        write_graddiff_csv(cfg, &graddiff_rows)?;
    }
    Ok(RunOutcome { totals, metrics })
}

/// Medians of the per-iteration medians over the first and last 10%.
pub fn graddiff_trend(per_iter: &[Option<f64>]) -> Value {
    let n = per_iter.len();
    let k = (n / 10).max(1).min(n);
    let first = median(per_iter[..k].iter().flatten().copied());
    let last = median(per_iter[n - k..].iter().flatten().copied());
    let holds = matches!((first, last), (Some(f), Some(l)) if l < f);
    json!({
        "window_iters": k,
        "first_median": first,
        "last_median": last,
        "decreasing": holds,
    })
}

fn write_graddiff_csv(
    cfg: &RunConfig,
    rows: &[(usize, usize, Option<f64>)],
) -> Result<(), HarnessError> {
    let path = cfg.out_dir.join("graddiff.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| HarnessError::io(&path, e))?;
    w.write_record(["outer_iter", "step", "normalized_diff"])
        .map_err(|e| HarnessError::io(&path, e))?;
    for (it, t, v) in rows {
        w.serialize((it, t, v))
            .map_err(|e| HarnessError::io(&path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))
}

/// Witness JSON record for one hyper-parameter triple.
pub fn witness_json(w: &Prop1Witness) -> Value {
    json!({
        "hp": {"eta": w.hp.eta, "mu": w.hp.mu, "omega": w.hp.omega},
        "b_tilde_4": w.b_tilde_4,
        "b_7": w.b_7,
        "gap": w.gap,
    })
}

/// Gaps over `count` random triples with `μ ∈ [0.5, 0.99]`, `ω ∈ [0, 1e-3]`,
/// `η ∈ [0.01, 0.5]`.
pub fn prop1_sweep(seed: u64, count: usize) -> Result<Vec<Prop1Witness>, HarnessError> {
    let mut rng = stream(seed, 7);
    (0..count)
        .map(|_| {
            let hp = HyperParams::new(
                rng.random_range(0.01..=0.5),
                rng.random_range(0.5..=0.99),
                rng.random_range(0.0..=1e-3),
            )
            .context(|| "sweep hyper-parameters".into())?;
            prop1_witness(&hp).context(|| format!("witness at {hp:?}"))
        })
        .collect()
}

fn run_prop1(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let hp = hp(cfg)?;
    let w = prop1_witness(&hp).context(|| "witness".into())?;
    let record = witness_json(&w);
    write_json(&cfg.out_dir.join("prop1.json"), &record)?;

    let sweep = prop1_sweep(cfg.seed, cfg.prop1_sweep)?;
    let min_gap = sweep.iter().map(|w| w.gap).fold(f64::INFINITY, f64::min);
    let zero_gap: Vec<Value> = sweep
        .iter()
        .filter(|w| w.gap <= 1e-6)
        .map(witness_json)
        .collect();
    let late_gaps = sweep
        .iter()
        .map(|w| matching_gaps(&w.hp, 6).map(|g| g[3..].iter().all(|&x| x > 0.0)))
        .collect::<metastep_core::Result<Vec<bool>>>()
        .context(|| "matching gaps".into())?;

    let mut metrics = BTreeMap::new();
    metrics.insert("b_tilde_4".into(), json!(w.b_tilde_4));
    metrics.insert("b_7".into(), json!(w.b_7));
    metrics.insert("gap".into(), json!(w.gap));
    metrics.insert(
        "induced".into(),
        json!({"eta_t": w.induced.eta_t, "omega_t": w.induced.omega_t, "mu_t": w.induced.mu_t}),
    );
    metrics.insert(
        "sweep".into(),
        json!({
            "count": sweep.len(),
            "min_gap": if sweep.is_empty() { Value::Null } else { json!(min_gap) },
            "zero_gap_cases": zero_gap,
            "all_later_indices_differ": late_gaps.iter().all(|&b| b),
        }),
    );
    Ok(RunOutcome {
        totals: RunTotals::default(),
        metrics,
    })
}
