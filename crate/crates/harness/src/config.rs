//! Line-based `key = value` run configuration.
//!
//! ```text
//! # toy meta-transfer, 4-step windows
//! mode = metatransfer
//! estimator = multistep
//! window = 4
//! inner_steps = 8
//! ```
//!
//! Command-line flags `--key value` override file keys; `SEED` in the
//! environment overrides `seed`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use metastep_core::dynamics::HyperParams;
use metastep_core::metagrad::EstimatorRegistry;
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Where};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    MamlSinusoid,
    MamlCluster,
    Metatransfer,
    Prop1,
    Graddiff,
    Bench,
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Ok(match s {
            "maml-sinusoid" => Mode::MamlSinusoid,
            "maml-cluster" => Mode::MamlCluster,
            "metatransfer" => Mode::Metatransfer,
            "prop1" => Mode::Prop1,
            "graddiff" => Mode::Graddiff,
            "bench" => Mode::Bench,
            other => {
                return Err(format!(
                    "unknown mode `{other}` (expected maml-sinusoid, maml-cluster, metatransfer, prop1, graddiff or bench)"
                ))
            }
        })
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::MamlSinusoid => "maml-sinusoid",
            Mode::MamlCluster => "maml-cluster",
            Mode::Metatransfer => "metatransfer",
            Mode::Prop1 => "prop1",
            Mode::Graddiff => "graddiff",
            Mode::Bench => "bench",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetaOptimizerKind {
    Sgd,
    Adam,
}

impl FromStr for MetaOptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            other => Err(format!(
                "unknown meta optimizer `{other}` (expected sgd or adam)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub estimator: String,
    pub window: usize,
    pub inner_steps: usize,
    pub eta: f64,
    pub mu: f64,
    pub omega: f64,
    pub eta_meta: f64,
    pub meta_optimizer: MetaOptimizerKind,
    pub meta_batch: usize,
    pub outer_iters: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub k_shot: usize,
    pub q_query: usize,
    pub n_way: usize,
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub eval_tasks: usize,
    pub eval_every: usize,
    pub beta: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub final_acc_step: bool,
    pub graddiff: bool,
    pub prop1_sweep: usize,
}

impl RunConfig {
    pub fn defaults(mode: Mode) -> Self {
        let base = RunConfig {
            mode,
            estimator: "exact".into(),
            window: 1,
            inner_steps: 4,
            eta: 0.1,
            mu: 0.9,
            omega: 1e-4,
            eta_meta: 1e-3,
            meta_optimizer: MetaOptimizerKind::Adam,
            meta_batch: 10,
            outer_iters: 2000,
            seed: 0,
            out_dir: PathBuf::from(format!("runs/{mode}")),
            k_shot: 5,
            q_query: 10,
            n_way: 5,
            dim: 16,
            hidden: vec![40, 40],
            eval_tasks: 100,
            eval_every: 100,
            beta: 0.5,
            batch_size: 32,
            pretrain_steps: 500,
            final_acc_step: true,
            graddiff: false,
            prop1_sweep: 100,
        };
        match mode {
            Mode::Prop1 => base,
            Mode::MamlSinusoid => RunConfig {
                inner_steps: 8,
                eta: 0.01,
                mu: 0.5,
                eta_meta: 5e-3,
                meta_batch: 25,
                ..base
            },
            Mode::MamlCluster => RunConfig {
                k_shot: 1,
                q_query: 5,
                hidden: vec![32],
                meta_batch: 8,
                outer_iters: 500,
                eval_tasks: 200,
                ..base
            },
            Mode::Metatransfer | Mode::Graddiff | Mode::Bench => RunConfig {
                inner_steps: 8,
                outer_iters: 200,
                eval_tasks: 256,
                eval_every: 10,
                final_acc_step: mode != Mode::Bench,
                graddiff: mode == Mode::Graddiff,
                ..base
            },
        }
    }

    pub fn hyper_params(&self) -> metastep_core::Result<HyperParams> {
        HyperParams::new(self.eta, self.mu, self.omega)
    }

    /// Window length the estimator actually runs with.
    pub fn effective_window(&self) -> usize {
        if self.estimator == "multistep" {
            self.window
        } else {
            1
        }
    }

    /// Parses a config file and applies `--key value` overrides and `SEED`.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.apply_overrides(overrides)?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses file text only; no overrides, no validation.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut entries: Vec<(usize, String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| HarnessError::Config {
                    at: Where::Line(line),
                    key: content.to_string(),
                    message: "expected `key = value`".into(),
                })?;
            let (key, value) = (key.trim().to_string(), value.trim().to_string());
            if entries.iter().any(|(_, k, _)| *k == key) {
                return Err(HarnessError::Config {
                    at: Where::Line(line),
                    key,
                    message: "duplicate key".into(),
                });
            }
            entries.push((line, key, value));
        }
        let mode = match entries.iter().find(|(_, k, _)| k == "mode") {
            Some((line, _, v)) => v.parse::<Mode>().map_err(|message| HarnessError::Config {
                at: Where::Line(*line),
                key: "mode".into(),
                message,
            })?,
            None => {
                return Err(HarnessError::Config {
                    at: Where::File,
                    key: "mode".into(),
                    message: "missing required key".into(),
                })
            }
        };
        let mut cfg = Self::defaults(mode);
        for (line, key, value) in &entries {
            if key != "mode" {
                cfg.set(key, value)
                    .map_err(|message| HarnessError::Config {
                        at: Where::Line(*line),
                        key: key.clone(),
                        message,
                    })?;
            }
        }
        Ok(cfg)
    }

    pub fn apply_overrides(&mut self, args: &[String]) -> Result<(), HarnessError> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg.strip_prefix("--").ok_or_else(|| HarnessError::Config {
                at: Where::Flag,
                key: arg.clone(),
                message: "overrides must look like `--key value`".into(),
            })?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| HarnessError::Config {
                        at: Where::Flag,
                        key: flag.to_string(),
                        message: "missing value".into(),
                    })?;
                    (flag.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            let result = if key == "mode" {
                value.parse::<Mode>().map(|m| self.mode = m)
            } else {
                self.set(&key, &value)
            };
            result.map_err(|message| HarnessError::Config {
                at: Where::Flag,
                key,
                message,
            })?;
        }
        Ok(())
    }

    pub fn apply_env(&mut self) -> Result<(), HarnessError> {
        if let Ok(seed) = std::env::var("SEED") {
            self.seed = seed.trim().parse().map_err(|_| HarnessError::Config {
                at: Where::Env,
                key: "SEED".into(),
                message: format!("`{seed}` is not an unsigned integer"),
            })?;
        }
        Ok(())
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(v: &str) -> Result<T, String> {
            v.parse::<T>().map_err(|_| format!("cannot parse `{v}`"))
        }
        fn flag(v: &str) -> Result<bool, String> {
            match v {
                "true" | "1" | "yes" => Ok(true),
                "false" | "0" | "no" => Ok(false),
                _ => Err(format!("expected true or false, got `{v}`")),
            }
        }
        match key {
            "estimator" => self.estimator = value.to_string(),
            "window" => self.window = num(value)?,
            "inner_steps" => self.inner_steps = num(value)?,
            "eta" => self.eta = num(value)?,
            "mu" => self.mu = num(value)?,
            "omega" => self.omega = num(value)?,
            "eta_meta" => self.eta_meta = num(value)?,
            "meta_optimizer" => self.meta_optimizer = value.parse()?,
            "meta_batch" => self.meta_batch = num(value)?,
            "outer_iters" => self.outer_iters = num(value)?,
            "seed" => self.seed = num(value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "k_shot" => self.k_shot = num(value)?,
            "q_query" => self.q_query = num(value)?,
            "n_way" => self.n_way = num(value)?,
            "dim" => self.dim = num(value)?,
            "hidden" => {
                self.hidden = value
                    .split(',')
                    .map(|s| num::<usize>(s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "eval_tasks" => self.eval_tasks = num(value)?,
            "eval_every" => self.eval_every = num(value)?,
            "beta" => self.beta = num(value)?,
            "batch_size" => self.batch_size = num(value)?,
            "pretrain_steps" => self.pretrain_steps = num(value)?,
            "final_acc_step" => self.final_acc_step = flag(value)?,
            "graddiff" => self.graddiff = flag(value)?,
            "prop1_sweep" => self.prop1_sweep = num(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |key: &str, message: String| {
            Err(HarnessError::Config {
                at: Where::Validation,
                key: key.into(),
                message,
            })
        };
        if !EstimatorRegistry::with_builtins().contains(&self.estimator) {
            return bad(
                "estimator",
                format!("unknown estimator `{}`", self.estimator),
            );
        }
        if self.window == 0 {
            return bad("window", "must be >= 1".into());
        }
        if let Err(e) = self.hyper_params() {
            return bad("eta/mu/omega", e.to_string());
        }
        if !(self.eta_meta >= 0.0 && self.eta_meta.is_finite()) {
            return bad("eta_meta", "must be finite and >= 0".into());
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta", "must be finite and >= 0".into());
        }
        let positive = [
            ("meta_batch", self.meta_batch),
            ("k_shot", self.k_shot),
            ("q_query", self.q_query),
            ("eval_tasks", self.eval_tasks),
            ("eval_every", self.eval_every),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in positive {
            if v == 0 {
                return bad(key, "must be >= 1".into());
            }
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden", "needs one or more positive widths".into());
        }
        if self.mode == Mode::MamlCluster && (self.n_way < 2 || self.dim < 2) {
            return bad(
                "n_way/dim",
                "cluster episodes need n_way >= 2 and dim >= 2".into(),
            );
        }
        if self.mode == Mode::Graddiff && self.effective_window() != 1 {
            return bad("window", "graddiff runs on one-step windows".into());
        }
        if matches!(self.mode, Mode::Metatransfer | Mode::Graddiff | Mode::Bench)
            && self.estimator == "reptile"
        {
            return bad(
                "estimator",
                "reptile needs θ to be the initialization".into(),
            );
        }
        Ok(())
    }

    /// Keys whose values differ between two configs, ignoring `out_dir`.
    pub fn differing_keys(&self, other: &Self) -> Vec<String> {
        let a = self.as_map();
        let b = other.as_map();
        a.keys()
            .filter(|k| k.as_str() != "out_dir" && a.get(*k) != b.get(*k))
            .cloned()
            .collect()
    }

    pub fn as_map(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self).expect("config serializes") {
            serde_json::Value::Object(m) => m.into_iter().collect(),
            _ => unreachable!(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_with_comments_and_defaults() {
        let cfg =
            RunConfig::parse("# bench\nmode = bench\nestimator=multistep # four\nwindow = 4\n")
                .unwrap();
        assert_eq!(cfg.mode, Mode::Bench);
        assert_eq!(cfg.effective_window(), 4);
        assert!(!cfg.final_acc_step);
        assert_eq!(cfg.inner_steps, 8);
        cfg.validate().unwrap();
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::parse("mode = prop1\n\neta = fast\n").unwrap_err();
        assert_eq!(
            err.to_string(),
            "config line 3, key `eta`: cannot parse `fast`"
        );
        let err = RunConfig::parse("mode = prop1\nbogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("line 2"));
        assert!(RunConfig::parse("eta = 1\n").is_err());
        assert!(RunConfig::parse("mode = prop1\nmode = bench\n").is_err());
        assert!(RunConfig::parse("mode = prop1\njust words\n").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut cfg = RunConfig::parse("mode = metatransfer\nwindow = 2\n").unwrap();
        cfg.apply_overrides(&["--window".into(), "4".into(), "--eta-meta=0.01".into()])
            .unwrap();
        assert_eq!((cfg.window, cfg.eta_meta), (4, 0.01));
        assert!(cfg.apply_overrides(&["--window".into()]).is_err());
        assert!(cfg.apply_overrides(&["window".into(), "3".into()]).is_err());
    }

    #[test]
    fn validation() {
        let mut cfg = RunConfig::defaults(Mode::Metatransfer);
        cfg.validate().unwrap();
        cfg.mu = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::defaults(Mode::Metatransfer);
        cfg.estimator = "imaml".into();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::defaults(Mode::Graddiff);
        cfg.estimator = "multistep".into();
        cfg.window = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn differing_keys_ignore_out_dir() {
        let a = RunConfig::defaults(Mode::Bench);
        let mut b = a.clone();
        b.out_dir = "elsewhere".into();
        b.estimator = "multistep".into();
        b.window = 4;
        assert_eq!(a.differing_keys(&b), vec!["estimator", "window"]);
    }
}
