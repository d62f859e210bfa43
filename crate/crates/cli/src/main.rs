use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use bnrank::experiments::{run_experiment, summarize, ExperimentConfig, ExperimentName, SEED_ENV};
use bnrank::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "bnrank", version, about = "Rank dynamics of batch-normalized random networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hard and soft rank along the BN and vanilla chains.
    RankVsDepth(RunArgs),
    /// Depth-averaged soft rank across widths.
    RankVsWidth(RunArgs),
    /// Top singular values of a chain started near rank one.
    CollinearTopk(RunArgs),
    /// Regularity constant across widths and skip strengths.
    Regularity(RunArgs),
    /// Average squared Frobenius norm of M across widths.
    FroNorm(RunArgs),
    /// SGD with and without rank-maximizing pretraining.
    PretrainCompare(RunArgs),
    /// Off-diagonal drift under asymmetric weights.
    BreakBn(RunArgs),
    /// Alignment of per-sample output gradients.
    GradAlign(RunArgs),
    /// Fit slopes and evaluate checks on aggregate CSV files.
    Summarize {
        #[arg(required = true)]
        paths: Vec<PathBuf>,
    },
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// Flat key = value file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<String>,
    #[arg(long)]
    n: Option<String>,
    /// Comma-separated widths of the sweep experiments.
    #[arg(long)]
    ds: Option<String>,
    /// Comma-separated skip strengths; `inf` drops the identity branch.
    #[arg(long, alias = "gamma")]
    gammas: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    replicates: Option<String>,
    /// Seed; falls back to the BNRANK_SEED environment variable.
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    out_dir: Option<String>,
    #[arg(long)]
    tau: Option<String>,
    /// gaussian, uniform_symmetric or uniform_asymmetric.
    #[arg(long)]
    init: Option<String>,
    #[arg(long)]
    bn_epsilon: Option<String>,
    #[arg(long)]
    relu_bn_epsilon: Option<String>,
    /// pre_bn or post_bn.
    #[arg(long)]
    relu_placement: Option<String>,
    #[arg(long)]
    record_every: Option<String>,
    #[arg(long)]
    epsilon: Option<String>,
    #[arg(long)]
    top_k: Option<String>,
    #[arg(long)]
    width: Option<String>,
    #[arg(long)]
    net_depth: Option<String>,
    #[arg(long)]
    samples: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    separation: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    init_gain: Option<String>,
    #[arg(long)]
    pretrain_steps: Option<String>,
    #[arg(long)]
    pretrain_batch: Option<String>,
    #[arg(long)]
    pretrain_minibatches: Option<String>,
    #[arg(long)]
    pretrain_step: Option<String>,
    /// layer_wise or end_to_end.
    #[arg(long)]
    pretrain_mode: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    check_invariants: Option<String>,
}

impl RunArgs {
    fn overrides(&self) -> Vec<(String, String)> {
        let fields = [
            ("d", &self.d),
            ("n", &self.n),
            ("ds", &self.ds),
            ("gammas", &self.gammas),
            ("depth", &self.depth),
            ("replicates", &self.replicates),
            ("seed", &self.seed),
            ("out_dir", &self.out_dir),
            ("tau", &self.tau),
            ("init", &self.init),
            ("bn_epsilon", &self.bn_epsilon),
            ("relu_bn_epsilon", &self.relu_bn_epsilon),
            ("relu_placement", &self.relu_placement),
            ("record_every", &self.record_every),
            ("epsilon", &self.epsilon),
            ("top_k", &self.top_k),
            ("width", &self.width),
            ("net_depth", &self.net_depth),
            ("samples", &self.samples),
            ("classes", &self.classes),
            ("separation", &self.separation),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("init_gain", &self.init_gain),
            ("pretrain_steps", &self.pretrain_steps),
            ("pretrain_batch", &self.pretrain_batch),
            ("pretrain_minibatches", &self.pretrain_minibatches),
            ("pretrain_step", &self.pretrain_step),
            ("pretrain_mode", &self.pretrain_mode),
            ("threads", &self.threads),
            ("check_invariants", &self.check_invariants),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

fn run(experiment: ExperimentName, args: &RunArgs) -> ExitCode {
    let file_text = match &args.config {
        Some(path) => match fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) => {
                eprintln!("error: cannot read config {}: {e}", path.display());
                return ExitCode::from(EXIT_USAGE);
            }
        },
        None => None,
    };
    let seed_env = std::env::var(SEED_ENV).ok();
    let cfg = match ExperimentConfig::resolve(experiment, file_text.as_deref(), &args.overrides(), seed_env.as_deref()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run_experiment(&cfg) {
        Ok(output) => {
            println!(
                "{}: seed {}, {} replicate file(s), aggregate {}",
                cfg.experiment,
                cfg.seed,
                output.replicate_files.len(),
                output.aggregate_file.display()
            );
            print!("{}", output.summary);
            ExitCode::SUCCESS
        }
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FAILURE)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (experiment, args) = match &cli.command {
        Command::RankVsDepth(a) => (ExperimentName::RankVsDepth, a),
        Command::RankVsWidth(a) => (ExperimentName::RankVsWidth, a),
        Command::CollinearTopk(a) => (ExperimentName::CollinearTopk, a),
        Command::Regularity(a) => (ExperimentName::Regularity, a),
        Command::FroNorm(a) => (ExperimentName::FroNorm, a),
        Command::PretrainCompare(a) => (ExperimentName::PretrainCompare, a),
        Command::BreakBn(a) => (ExperimentName::BreakBn, a),
        Command::GradAlign(a) => (ExperimentName::GradAlign, a),
        Command::Summarize { paths } => {
            return match summarize(paths) {
                Ok(summary) => {
                    print!("{summary}");
                    if summary.all_passed() {
                        ExitCode::SUCCESS
                    } else {
                        ExitCode::from(EXIT_FAILURE)
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(EXIT_FAILURE)
                }
            };
        }
    };
    run(experiment, args)
}
