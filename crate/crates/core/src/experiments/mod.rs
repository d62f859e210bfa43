//! Named experiments, their configuration, CSV output and summaries.
//!
//! Every experiment writes one CSV per replicate (and variant) plus
//! `<experiment>_aggregate.csv` into the output directory. The aggregate has
//! columns `experiment,variant,x,metric,mean,ci95_low,ci95_high,rep_0,..`
//! where the interval is `mean ± 1.96·s/√R`. Floats are printed like C's
//! `%.10e`. [`summarize`] reads aggregates back and evaluates the checks
//! attached to each experiment.
//!
//! Configuration comes from defaults, then a flat `key = value` file, then
//! explicit overrides. Keys are the field names of [`ExperimentConfig`];
//! `-` and `_` are interchangeable.

mod csv;
mod runners;
mod summary;

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

pub use csv::{
    aggregate_csv, chain_csv, fmt_sci, mean_ci95, parse_aggregate, parse_float, AggregateRow, Cell, Table,
    AGGREGATE_PREFIX, CHAIN_HEADER,
};
pub use runners::{aggregate_path, run_experiment};
pub use summary::{fit_loglog, summarize, summarize_rows, LogLogFit, SlopeFit, Summary, Verdict};

use crate::chain::{parse_gamma, ReluPlacement};
use crate::init::InitKind;
use crate::network::PretrainMode;
use crate::{Error, Result};

/// Environment variable consulted for the seed when no explicit seed is
/// given.
pub const SEED_ENV: &str = "BNRANK_SEED";

/// The available experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ExperimentName {
    RankVsDepth,
    RankVsWidth,
    CollinearTopk,
    Regularity,
    FroNorm,
    PretrainCompare,
    BreakBn,
    GradAlign,
}

impl ExperimentName {
    pub const ALL: [ExperimentName; 8] = [
        ExperimentName::RankVsDepth,
        ExperimentName::RankVsWidth,
        ExperimentName::CollinearTopk,
        ExperimentName::Regularity,
        ExperimentName::FroNorm,
        ExperimentName::PretrainCompare,
        ExperimentName::BreakBn,
        ExperimentName::GradAlign,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentName::RankVsDepth => "rank-vs-depth",
            ExperimentName::RankVsWidth => "rank-vs-width",
            ExperimentName::CollinearTopk => "collinear-topk",
            ExperimentName::Regularity => "regularity",
            ExperimentName::FroNorm => "fro-norm",
            ExperimentName::PretrainCompare => "pretrain-compare",
            ExperimentName::BreakBn => "break-bn",
            ExperimentName::GradAlign => "grad-align",
        }
    }
}

impl fmt::Display for ExperimentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentName::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = ExperimentName::ALL.iter().map(|e| e.as_str()).collect();
                Error::Config(format!("unknown experiment `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

/// Every parameter of an experiment run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentName,
    /// Chain width for single-width experiments.
    pub d: usize,
    /// Batch size of the chain; 0 means `n = d`.
    pub n: usize,
    /// Widths of the sweep experiments.
    pub ds: Vec<usize>,
    /// Skip strengths; `inf` drops the identity branch.
    pub gammas: Vec<f64>,
    /// Chain depth.
    pub depth: usize,
    pub replicates: usize,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Soft-rank threshold.
    pub tau: f64,
    pub init: InitKind,
    /// BN epsilon of linear chains and networks.
    pub bn_epsilon: f64,
    /// BN epsilon of ReLU chains and networks.
    pub relu_bn_epsilon: f64,
    pub relu_placement: ReluPlacement,
    /// Trajectory stride; 0 picks the chain default.
    pub record_every: usize,
    /// Noise level of the near-collinear input.
    pub epsilon: f64,
    /// Singular values tracked by `collinear-topk`.
    pub top_k: usize,
    /// Hidden width of the MLP experiments.
    pub width: usize,
    /// Hidden depth of the MLP experiments.
    pub net_depth: usize,
    /// Samples of the synthetic classification data.
    pub samples: usize,
    pub classes: usize,
    /// Distance between blob centers.
    pub separation: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Weight scale: std `gain/√fan_in`.
    pub init_gain: f64,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_minibatches: usize,
    pub pretrain_step: f64,
    pub pretrain_mode: PretrainMode,
    /// Worker threads; 0 uses the global pool.
    pub threads: usize,
    pub check_invariants: bool,
}

impl ExperimentConfig {
    /// Defaults of `experiment`.
    pub fn new(experiment: ExperimentName) -> Self {
        let mut cfg = ExperimentConfig {
            experiment,
            d: 32,
            n: 0,
            ds: vec![8, 16, 32, 64, 128],
            gammas: vec![1.0, f64::INFINITY],
            depth: 10_000,
            replicates: 5,
            seed: 0,
            out_dir: PathBuf::from("out"),
            tau: 0.5,
            init: InitKind::Gaussian,
            bn_epsilon: 0.0,
            relu_bn_epsilon: 1e-5,
            relu_placement: ReluPlacement::PreBn,
            record_every: 0,
            epsilon: 0.01,
            top_k: 10,
            width: 32,
            net_depth: 32,
            samples: 256,
            classes: 2,
            separation: 6.0,
            epochs: 100,
            batch_size: 32,
            lr: 0.1,
            init_gain: 1.0,
            pretrain_steps: 75,
            pretrain_batch: 64,
            pretrain_minibatches: 1,
            pretrain_step: 0.1,
            pretrain_mode: PretrainMode::LayerWise,
            threads: 0,
            check_invariants: true,
        };
        match experiment {
            ExperimentName::RankVsDepth => {}
            ExperimentName::RankVsWidth => {
                cfg.gammas = vec![0.5, 1.0, f64::INFINITY];
                cfg.replicates = 1;
            }
            ExperimentName::CollinearTopk => {
                cfg.gammas = vec![1.0];
                cfg.depth = 1000;
            }
            ExperimentName::Regularity | ExperimentName::FroNorm => {
                cfg.ds = vec![16, 32, 64];
                cfg.gammas = vec![0.1, 1.0];
                cfg.replicates = 1;
            }
            ExperimentName::PretrainCompare => {
                cfg.init = InitKind::UniformSymmetric;
                cfg.init_gain = 1.0 / 3f64.sqrt();
            }
            ExperimentName::BreakBn => {
                cfg.d = 16;
                cfg.gammas = vec![1.0];
            }
            ExperimentName::GradAlign => {
                cfg.net_depth = 64;
                cfg.samples = 64;
            }
        }
        cfg
    }

    /// Defaults of `experiment`, overlaid with the file entries and then the
    /// explicit overrides. `seed_env` (the value of [`SEED_ENV`]) sits
    /// between the file and the overrides.
    pub fn resolve(
        experiment: ExperimentName,
        file_text: Option<&str>,
        overrides: &[(String, String)],
        seed_env: Option<&str>,
    ) -> Result<Self> {
        let mut cfg = ExperimentConfig::new(experiment);
        if let Some(text) = file_text {
            for (key, value) in parse_config_text(text)? {
                cfg.set(&key, &value)?;
            }
        }
        let seed_given = overrides.iter().any(|(k, _)| normalize_key(k) == "seed");
        if !seed_given {
            if let Some(seed) = seed_env {
                cfg.set("seed", seed)?;
            }
        }
        for (key, value) in overrides {
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let key = normalize_key(key);
        match key.as_str() {
            "experiment" => self.experiment = v.parse()?,
            "d" => self.d = parse_num(&key, v)?,
            "n" => self.n = parse_num(&key, v)?,
            "ds" => self.ds = parse_list(v, |s| parse_num("ds", s))?,
            "gamma" | "gammas" => self.gammas = parse_list(v, parse_gamma)?,
            "depth" => self.depth = parse_num(&key, v)?,
            "replicates" => self.replicates = parse_num(&key, v)?,
            "seed" => self.seed = parse_num(&key, v)?,
            "out_dir" | "out" => self.out_dir = PathBuf::from(v),
            "tau" => self.tau = parse_num(&key, v)?,
            "init" => self.init = v.parse()?,
            "bn_epsilon" => self.bn_epsilon = parse_num(&key, v)?,
            "relu_bn_epsilon" => self.relu_bn_epsilon = parse_num(&key, v)?,
            "relu_placement" => self.relu_placement = v.parse()?,
            "record_every" => self.record_every = parse_num(&key, v)?,
            "epsilon" => self.epsilon = parse_num(&key, v)?,
            "top_k" => self.top_k = parse_num(&key, v)?,
            "width" => self.width = parse_num(&key, v)?,
            "net_depth" => self.net_depth = parse_num(&key, v)?,
            "samples" => self.samples = parse_num(&key, v)?,
            "classes" => self.classes = parse_num(&key, v)?,
            "separation" => self.separation = parse_num(&key, v)?,
            "epochs" => self.epochs = parse_num(&key, v)?,
            "batch_size" => self.batch_size = parse_num(&key, v)?,
            "lr" => self.lr = parse_num(&key, v)?,
            "init_gain" => self.init_gain = parse_num(&key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse_num(&key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse_num(&key, v)?,
            "pretrain_minibatches" => self.pretrain_minibatches = parse_num(&key, v)?,
            "pretrain_step" => self.pretrain_step = parse_num(&key, v)?,
            "pretrain_mode" => {
                self.pretrain_mode = match v {
                    "layer_wise" | "layerwise" => PretrainMode::LayerWise,
                    "end_to_end" => PretrainMode::EndToEnd,
                    other => return Err(Error::Config(format!("unknown pretrain mode `{other}`"))),
                }
            }
            "threads" => self.threads = parse_num(&key, v)?,
            "check_invariants" => self.check_invariants = parse_num(&key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Batch size of the chain.
    pub fn batch(&self, d: usize) -> usize {
        if self.n == 0 {
            d
        } else {
            self.n
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.replicates == 0 {
            return fail("replicates must be >= 1");
        }
        if self.depth == 0 {
            return fail("depth must be >= 1");
        }
        if self.d < 2 || self.ds.iter().any(|&d| d < 2) {
            return fail("widths must be >= 2");
        }
        if self.ds.is_empty() || self.gammas.is_empty() {
            return fail("ds and gammas must be non-empty");
        }
        if !(self.tau >= 0.0) {
            return fail("tau must be >= 0");
        }
        if !(self.bn_epsilon >= 0.0) || !(self.relu_bn_epsilon >= 0.0) {
            return fail("BN epsilons must be >= 0");
        }
        if self.width < 1 || self.net_depth < 1 || self.samples < 2 || self.classes < 2 {
            return fail("width and net_depth must be >= 1, samples and classes >= 2");
        }
        if self.batch_size == 0 || self.pretrain_batch == 0 || self.pretrain_minibatches == 0 {
            return fail("batch sizes must be >= 1");
        }
        if !(self.lr >= 0.0) || !(self.init_gain > 0.0) || !(self.pretrain_step > 0.0) {
            return fail("lr must be >= 0, init_gain and pretrain_step > 0");
        }
        if self.top_k == 0 {
            return fail("top_k must be >= 1");
        }
        Ok(())
    }
}

fn normalize_key(key: &str) -> String {
    key.trim().trim_start_matches("--").replace('-', "_")
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_list<T>(v: &str, item: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',').map(|s| item(s.trim())).collect()
}

/// Parses flat `key = value` text. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_config_text(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
        if key.trim().is_empty() {
            return Err(Error::Config(format!("line {}: empty key", i + 1)));
        }
        entries.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(entries)
}

/// Files and summary produced by [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub replicate_files: Vec<PathBuf>,
    pub aggregate_file: PathBuf,
    pub rows: Vec<AggregateRow>,
    pub summary: Summary,
}
