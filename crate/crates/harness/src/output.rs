use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::HarnessError;

/// Bumped whenever a column or summary key changes meaning.
pub const SCHEMA_VERSION: u32 = 1;

pub fn version_string() -> String {
    format!(
        "v{}-{}",
        env!("CARGO_PKG_VERSION"),
        env!("METASTEP_GIT_DESCRIBE")
    )
}

/// One row of `metrics.csv`. Evaluation columns are empty on iterations
/// without an evaluation pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub outer_iter: usize,
    pub train_loss: f64,
    pub eval_pre_loss: Option<f64>,
    pub eval_loss: Option<f64>,
    pub post_adapt_metric: Option<f64>,
    pub hvp_count: usize,
    pub cross_vp_count: usize,
    pub first_order_grad_count: usize,
    pub hvp_total: usize,
    pub peak_tape_bytes: usize,
    pub grad_diff_median: Option<f64>,
}

/// Appends rows to `metrics.csv` and `timings.csv`, flushing after each.
pub struct MetricsWriter {
    metrics: csv::Writer<File>,
    timings: csv::Writer<File>,
    dir: PathBuf,
}

#[derive(Serialize)]
struct TimingRow {
    outer_iter: usize,
    wall_time_seconds: f64,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> Result<Self, HarnessError> {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
        let open = |name: &str, headers: bool| {
            let p = dir.join(name);
            csv::WriterBuilder::new()
                .has_headers(headers)
                .from_path(&p)
                .map_err(|e| HarnessError::io(&p, e))
        };
        let mut w = Self {
            metrics: open("metrics.csv", false)?,
            timings: open("timings.csv", true)?,
            dir: dir.to_path_buf(),
        };
        w.metrics
            .write_record(metrics_header())
            .map_err(|e| HarnessError::io(&w.dir.join("metrics.csv"), e))?;
        w.metrics
            .flush()
            .map_err(|e| HarnessError::io(&w.dir.join("metrics.csv"), e))?;
        Ok(w)
    }

    pub fn append(
        &mut self,
        record: &MetricsRecord,
        wall_time_seconds: f64,
    ) -> Result<(), HarnessError> {
        let mp = self.dir.join("metrics.csv");
        let tp = self.dir.join("timings.csv");
        self.metrics
            .serialize(record)
            .map_err(|e| HarnessError::io(&mp, e))?;
        self.metrics.flush().map_err(|e| HarnessError::io(&mp, e))?;
        self.timings
            .serialize(TimingRow {
                outer_iter: record.outer_iter,
                wall_time_seconds,
            })
            .map_err(|e| HarnessError::io(&tp, e))?;
        self.timings.flush().map_err(|e| HarnessError::io(&tp, e))
    }
}

pub fn metrics_header() -> [&'static str; 11] {
    [
        "outer_iter",
        "train_loss",
        "eval_pre_loss",
        "eval_loss",
        "post_adapt_metric",
        "hvp_count",
        "cross_vp_count",
        "first_order_grad_count",
        "hvp_total",
        "peak_tape_bytes",
        "grad_diff_median",
    ]
}

/// Whole-run figures used by summaries and benchmark comparisons.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunTotals {
    pub outer_iters: usize,
    pub train_wall_seconds: f64,
    pub hvp_total: usize,
    pub cross_vp_total: usize,
    pub peak_tape_bytes: usize,
    pub final_train_loss: Option<f64>,
    pub final_eval_metric: Option<f64>,
    pub final_eval_loss: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub totals: RunTotals,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub version: String,
    pub status: String,
    pub error: Option<String>,
    pub config: RunConfig,
    pub metrics_columns: Vec<String>,
    pub totals: RunTotals,
    pub metrics: BTreeMap<String, serde_json::Value>,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), HarnessError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| HarnessError::io(path, e))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// Writes `summary.json` for a finished or failed run.
pub fn write_summary(
    cfg: &RunConfig,
    result: &Result<RunOutcome, HarnessError>,
) -> Result<(), HarnessError> {
    let (status, error, outcome) = match result {
        Ok(o) => ("ok", None, o.clone()),
        Err(e) => ("error", Some(error_chain(e)), RunOutcome::default()),
    };
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        version: version_string(),
        status: status.into(),
        error,
        config: cfg.clone(),
        metrics_columns: metrics_header().iter().map(|s| s.to_string()).collect(),
        totals: outcome.totals,
        metrics: outcome.metrics,
    };
    write_json(&cfg.out_dir.join("summary.json"), &summary)
}

/// `outer: inner: innermost` for an error and its sources.
pub fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cur = e.source();
    while let Some(s) = cur {
        out.push_str(": ");
        out.push_str(&s.to_string());
        cur = s.source();
    }
    out
}
