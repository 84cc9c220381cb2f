use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metastep_core::coeff::prop1_witness;
use metastep_core::dynamics::HyperParams;
use metastep_harness::experiments::witness_json;
use metastep_harness::output::error_chain;
use metastep_harness::{bench_compare, run, HarnessError, Mode, RunConfig};

#[derive(Parser)]
#[command(
    name = "metastep",
    version,
    about = "Multi-step meta-gradient experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a config file; `--key value` pairs override it.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
    /// Run two configs that differ only in estimator or window and compare them.
    Bench {
        #[arg(long)]
        config_a: PathBuf,
        #[arg(long)]
        config_b: PathBuf,
        #[arg(long, default_value = "runs/bench")]
        out: PathBuf,
    },
    /// Print the induced-hyper-parameter counterexample for one triple.
    Prop1 {
        #[arg(long, default_value_t = 0.1)]
        eta: f64,
        #[arg(long, default_value_t = 0.9)]
        mu: f64,
        #[arg(long, default_value_t = 1e-4)]
        omega: f64,
    },
    /// Meta-transfer run with the per-step gradient-difference diagnostic.
    Graddiff {
        #[arg(long)]
        config: PathBuf,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
        overrides: Vec<String>,
    },
}

fn execute(cmd: Command) -> Result<String, HarnessError> {
    match cmd {
        Command::Run { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            run(&cfg)?;
            Ok(format!("wrote {}", cfg.out_dir.display()))
        }
        Command::Graddiff {
            config,
            mut overrides,
        } => {
            overrides.extend(["--graddiff".into(), "true".into()]);
            let cfg = RunConfig::load(&config, &overrides)?;
            if cfg.mode != Mode::Graddiff && cfg.mode != Mode::Metatransfer {
                return Err(HarnessError::Config {
                    at: metastep_harness::error::Where::Validation,
                    key: "mode".into(),
                    message: format!("graddiff needs a transfer config, got `{}`", cfg.mode),
                });
            }
            run(&cfg)?;
            Ok(format!(
                "wrote {}",
                cfg.out_dir.join("graddiff.csv").display()
            ))
        }
        Command::Bench {
            config_a,
            config_b,
            out,
        } => {
            let a = RunConfig::load(&config_a, &[])?;
            let b = RunConfig::load(&config_b, &[])?;
            let report = bench_compare(&a, &b, Some(&out))?;
            Ok(serde_json::to_string_pretty(&report).expect("report serializes"))
        }
        Command::Prop1 { eta, mu, omega } => {
            let hp = HyperParams::new(eta, mu, omega).map_err(|source| HarnessError::Task {
                context: "hyper-parameters".into(),
                source,
            })?;
            let w = prop1_witness(&hp).map_err(|source| HarnessError::Task {
                context: "witness".into(),
                source,
            })?;
            Ok(serde_json::to_string_pretty(&witness_json(&w)).expect("witness serializes"))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}
