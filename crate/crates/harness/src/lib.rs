//! Config-driven experiment runner for the `metastep` meta-gradient library.
//!
//! Every run writes `metrics.csv`, `timings.csv` and `summary.json` into its
//! output directory. `summary.json` is written even when the run fails.

pub mod bench;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;

pub use bench::{bench_compare, BenchReport};
pub use config::{MetaOptimizerKind, Mode, RunConfig};
pub use error::HarnessError;
pub use experiments::run_experiment;
pub use output::{RunOutcome, RunTotals, Summary};

/// Runs one configured experiment end to end.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, HarnessError> {
    let result = output::MetricsWriter::create(&cfg.out_dir)
        .and_then(|mut w| experiments::run_experiment(cfg, &mut w));
    output::write_summary(cfg, &result)?;
    result
}
