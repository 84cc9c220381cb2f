use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::HarnessError;
use crate::output::{write_json, RunTotals};

/// Side-by-side figures for two runs that differ only in estimator or window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub a: BenchSide,
    pub b: BenchSide,
    /// `a / b` for wall time, hvp count and peak tape bytes.
    pub wall_ratio: f64,
    pub hvp_ratio: f64,
    pub peak_ratio: f64,
    /// `a − b` on the final evaluation loss and metric.
    pub final_loss_delta: Option<f64>,
    pub final_metric_delta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSide {
    pub estimator: String,
    pub window: usize,
    pub totals: RunTotals,
}

fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

fn delta(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

/// Runs both configs and compares them. Each run writes into its own
/// `out_dir`; the report goes to `out/bench.json` when `out` is given.
pub fn bench_compare(
    a: &RunConfig,
    b: &RunConfig,
    out: Option<&Path>,
) -> Result<BenchReport, HarnessError> {
    let differ: Vec<String> = a
        .differing_keys(b)
        .into_iter()
        .filter(|k| k != "estimator" && k != "window")
        .collect();
    if !differ.is_empty() {
        return Err(HarnessError::ConfigMismatch(differ));
    }
    let ra = crate::run(a)?;
    let rb = crate::run(b)?;
    let (ta, tb) = (ra.totals, rb.totals);
    let report = BenchReport {
        wall_ratio: ratio(ta.train_wall_seconds, tb.train_wall_seconds),
        hvp_ratio: ratio(ta.hvp_total as f64, tb.hvp_total as f64),
        peak_ratio: ratio(ta.peak_tape_bytes as f64, tb.peak_tape_bytes as f64),
        final_loss_delta: delta(ta.final_eval_loss, tb.final_eval_loss),
        final_metric_delta: delta(ta.final_eval_metric, tb.final_eval_metric),
        a: BenchSide {
            estimator: a.estimator.clone(),
            window: a.effective_window(),
            totals: ta,
        },
        b: BenchSide {
            estimator: b.estimator.clone(),
            window: b.effective_window(),
            totals: tb,
        },
    };
    if let Some(dir) = out {
        write_json(&dir.join("bench.json"), &report)?;
    }
    Ok(report)
}
