use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::chain::{
    estimate_regularity, format_gamma, offdiag_mean_track, run_bn_chain, run_vanilla_chain, Activation,
    BnChainConfig, HiddenState, LayerRecord,
};
use crate::datasets::{generate, DatasetSpec};
use crate::init::{InitKind, InitSpec, RngHandle};
use crate::network::{
    alignment_of_features, gradient_alignment, pretrain, sgd_train, MlpModel, PretrainConfig, PretrainReport,
    TrainTrace,
};
use crate::{Error, Result};

use super::csv::{aggregate_csv, chain_csv, write_file, AggregateRow, Cell, Table};
use super::summary::summarize_rows;
use super::{ExperimentConfig, ExperimentName, ExperimentOutput};

const INPUT_SALT: u64 = 0x696e_7075_74;
const TRAIN_SALT: u64 = 0x7472_6169_6e;
const PRETRAIN_SALT: u64 = 0x7072_6574_72;

/// Threshold on `σ₂²/σ₁²` that marks the end of the collinear phase.
const AMPLIFICATION_RATIO: f64 = 0.1;

/// Runs `cfg.experiment`, writes its CSV files and summarizes the aggregate.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let (replicate_files, rows) = in_pool(cfg.threads, || match cfg.experiment {
        ExperimentName::RankVsDepth => rank_vs_depth(cfg),
        ExperimentName::RankVsWidth | ExperimentName::Regularity | ExperimentName::FroNorm => width_sweep(cfg),
        ExperimentName::CollinearTopk => collinear_topk(cfg),
        ExperimentName::BreakBn => break_bn(cfg),
        ExperimentName::PretrainCompare => pretrain_compare(cfg),
        ExperimentName::GradAlign => grad_align(cfg),
    })?;
    let aggregate_file = aggregate_path(&cfg.out_dir, cfg.experiment);
    write_file(&aggregate_file, &aggregate_csv(&rows, cfg.replicates)?)?;
    let summary = summarize_rows(&rows);
    Ok(ExperimentOutput {
        replicate_files,
        aggregate_file,
        rows,
        summary,
    })
}

type Produced = (Vec<PathBuf>, Vec<AggregateRow>);

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    if threads == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?
        .install(f)
}

/// FNV-1a of `label`, used to give every variant its own weight stream.
fn label_salt(label: &str) -> u64 {
    label
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Input stream of a replicate, shared by all variants of the same width so
/// that they start from the same data.
fn input_rng(cfg: &ExperimentConfig, replicate: usize, d: usize) -> RngHandle {
    RngHandle::new(cfg.seed, replicate as u64)
        .substream(INPUT_SALT)
        .substream(d as u64)
}

fn variant_rng(cfg: &ExperimentConfig, replicate: usize, variant: &str) -> RngHandle {
    RngHandle::new(cfg.seed, replicate as u64).substream(label_salt(variant))
}

fn replicate_path(cfg: &ExperimentConfig, variant: &str, replicate: usize, suffix: &str) -> PathBuf {
    let stem = if variant.is_empty() {
        format!("{}_rep{replicate}", cfg.experiment)
    } else {
        format!("{}_{variant}_rep{replicate}", cfg.experiment)
    };
    cfg.out_dir.join(format!("{stem}{suffix}.csv"))
}

fn gamma_label(gamma: f64) -> String {
    format!("g{}", format_gamma(gamma))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum ChainKind {
    Bn,
    Vanilla,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InputKind {
    Gaussian,
    NearCollinear,
}

/// One chain run: a variant at width `d` for one replicate.
#[derive(Debug, Clone)]
struct ChainJob {
    variant: String,
    file_label: String,
    x: f64,
    replicate: usize,
    kind: ChainKind,
    input: InputKind,
    chain: BnChainConfig,
    keep_records: bool,
}

#[derive(Debug)]
struct ChainOutcome {
    file: PathBuf,
    records: Vec<LayerRecord>,
    metrics: Vec<(&'static str, f64)>,
}

fn chain_config(cfg: &ExperimentConfig, d: usize, gamma: f64, activation: Activation, init: InitKind) -> BnChainConfig {
    let mut chain = BnChainConfig::new(d, cfg.batch(d), gamma, cfg.depth)
        .with_activation(activation)
        .with_init(InitSpec::new(init))
        .with_record_every(cfg.record_every);
    chain.tau = cfg.tau;
    chain.relu_placement = cfg.relu_placement;
    chain.bn_epsilon = match activation {
        Activation::Linear => cfg.bn_epsilon,
        Activation::Relu => cfg.relu_bn_epsilon,
    };
    chain.check_invariants = cfg.check_invariants;
    chain
}

fn min_of(records: &[LayerRecord], f: impl Fn(&LayerRecord) -> usize) -> f64 {
    records.iter().map(f).min().map_or(f64::NAN, |v| v as f64)
}

fn run_chain_job(cfg: &ExperimentConfig, job: &ChainJob) -> Result<ChainOutcome> {
    let d = job.chain.d;
    let n = job.chain.n;
    let mut data_rng = input_rng(cfg, job.replicate, d);
    let spec = match job.input {
        InputKind::Gaussian => DatasetSpec::gaussian_matrix(d, n),
        InputKind::NearCollinear => DatasetSpec::near_collinear(d, n, cfg.epsilon),
    };
    let x = HiddenState::new(generate(&spec, &mut data_rng)?.x)?;
    let mut rng = variant_rng(cfg, job.replicate, &job.variant);

    let (records, mut metrics) = match job.kind {
        ChainKind::Bn => {
            let run = run_bn_chain(&job.chain, &x, &mut rng)?;
            let s = &run.stats;
            let metrics = vec![
                ("avg_soft_rank", s.mean_soft_rank()),
                ("avg_hard_rank", s.mean_hard_rank()),
                ("avg_r_lower", s.mean_r_lower()),
                ("avg_fro_m_sq", s.mean_fro_m_sq()),
                ("avg_tr_m3", s.mean_tr_m3()),
                ("avg_tr_diag_m2_sq", s.mean_tr_diag_m2_sq()),
                ("alpha", estimate_regularity(s).unwrap_or(f64::NAN)),
                ("offdiag_mean", offdiag_mean_track(s)),
            ];
            (run.records, metrics)
        }
        ChainKind::Vanilla => {
            let run = run_vanilla_chain(&job.chain, &x, &mut rng)?;
            let collapse = run.collapse_layer().map_or(f64::NAN, |l| l as f64);
            let last = run.records.last().expect("layer 0 is always recorded");
            let metrics = vec![
                ("collapse_layer", collapse),
                ("final_hard_rank", last.hard_rank as f64),
                ("final_soft_rank", last.soft_rank as f64),
            ];
            (run.records, metrics)
        }
    };
    metrics.push(("min_soft_rank", min_of(&records, |r| r.soft_rank)));
    metrics.push(("min_hard_rank", min_of(&records, |r| r.hard_rank)));

    let file = replicate_path(cfg, &job.file_label, job.replicate, "");
    write_file(&file, &chain_csv(&records, job.replicate))?;
    let records = if job.keep_records { records } else { Vec::new() };
    Ok(ChainOutcome { file, records, metrics })
}

/// Runs `jobs` (ordered variant-major, `cfg.replicates` per variant) on the
/// pool, keeping the job order.
fn run_chain_jobs(cfg: &ExperimentConfig, jobs: &[ChainJob]) -> Result<Vec<ChainOutcome>> {
    jobs.par_iter().map(|job| run_chain_job(cfg, job)).collect()
}

/// Aggregate rows of the scalar metrics of each variant.
fn metric_rows(cfg: &ExperimentConfig, jobs: &[ChainJob], outcomes: &[ChainOutcome]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for (group, outs) in jobs.chunks(cfg.replicates).zip(outcomes.chunks(cfg.replicates)) {
        let head = &group[0];
        for (k, &(metric, _)) in outs[0].metrics.iter().enumerate() {
            let values = outs.iter().map(|o| o.metrics[k].1).collect();
            rows.push(AggregateRow::new(cfg.experiment.as_str(), &head.variant, head.x, metric, values));
        }
    }
    rows
}

/// Per-layer rows of `fields` for each variant with kept records.
fn layer_rows(
    cfg: &ExperimentConfig,
    jobs: &[ChainJob],
    outcomes: &[ChainOutcome],
    fields: &[(&str, fn(&LayerRecord) -> f64)],
) -> Result<Vec<AggregateRow>> {
    let mut rows = Vec::new();
    for (group, outs) in jobs.chunks(cfg.replicates).zip(outcomes.chunks(cfg.replicates)) {
        let len = outs[0].records.len();
        if outs.iter().any(|o| o.records.len() != len) {
            return Err(Error::InvariantViolation(format!(
                "replicates of {} recorded different layers",
                group[0].variant
            )));
        }
        for i in 0..len {
            let layer = outs[0].records[i].layer;
            for (metric, get) in fields {
                let values = outs.iter().map(|o| get(&o.records[i])).collect();
                rows.push(AggregateRow::new(cfg.experiment.as_str(), &group[0].variant, layer as f64, metric, values));
            }
        }
    }
    Ok(rows)
}

fn replicate_jobs(cfg: &ExperimentConfig, template: ChainJob) -> impl Iterator<Item = ChainJob> + '_ {
    (0..cfg.replicates).map(move |replicate| ChainJob {
        replicate,
        ..template.clone()
    })
}

fn rank_vs_depth(cfg: &ExperimentConfig) -> Result<Produced> {
    let mut jobs = Vec::new();
    for activation in [Activation::Linear, Activation::Relu] {
        for &gamma in &cfg.gammas {
            let variant = format!("bn-{activation}-{}", gamma_label(gamma));
            jobs.extend(replicate_jobs(
                cfg,
                ChainJob {
                    file_label: variant.clone(),
                    variant,
                    x: cfg.d as f64,
                    replicate: 0,
                    kind: ChainKind::Bn,
                    input: InputKind::Gaussian,
                    chain: chain_config(cfg, cfg.d, gamma, activation, cfg.init),
                    keep_records: true,
                },
            ));
        }
        let variant = format!("vanilla-{activation}");
        jobs.extend(replicate_jobs(
            cfg,
            ChainJob {
                file_label: variant.clone(),
                variant,
                x: cfg.d as f64,
                replicate: 0,
                kind: ChainKind::Vanilla,
                input: InputKind::Gaussian,
                chain: chain_config(cfg, cfg.d, f64::INFINITY, activation, cfg.init),
                keep_records: true,
            },
        ));
    }
    let outcomes = run_chain_jobs(cfg, &jobs)?;
    let mut rows = metric_rows(cfg, &jobs, &outcomes);
    rows.extend(layer_rows(
        cfg,
        &jobs,
        &outcomes,
        &[("hard_rank", |r| r.hard_rank as f64), ("soft_rank", |r| r.soft_rank as f64)],
    )?);
    Ok((outcomes.into_iter().map(|o| o.file).collect(), rows))
}

fn width_sweep(cfg: &ExperimentConfig) -> Result<Produced> {
    let mut jobs = Vec::new();
    for &gamma in &cfg.gammas {
        for &d in &cfg.ds {
            let variant = gamma_label(gamma);
            jobs.extend(replicate_jobs(
                cfg,
                ChainJob {
                    file_label: format!("{variant}_d{d}"),
                    variant,
                    x: d as f64,
                    replicate: 0,
                    kind: ChainKind::Bn,
                    input: InputKind::Gaussian,
                    chain: chain_config(cfg, d, gamma, Activation::Linear, cfg.init),
                    keep_records: false,
                },
            ));
        }
    }
    let outcomes = run_chain_jobs(cfg, &jobs)?;
    let rows = metric_rows(cfg, &jobs, &outcomes);
    Ok((outcomes.into_iter().map(|o| o.file).collect(), rows))
}

fn break_bn(cfg: &ExperimentConfig) -> Result<Produced> {
    let variants = [
        ("symmetric", InitKind::Gaussian, false),
        ("asymmetric", InitKind::UniformAsymmetric, false),
        ("asymmetric-centered", InitKind::UniformAsymmetric, true),
    ];
    let mut jobs = Vec::new();
    for &gamma in &cfg.gammas {
        for (name, init, centering) in variants {
            let variant = if cfg.gammas.len() == 1 {
                name.to_string()
            } else {
                format!("{name}-{}", gamma_label(gamma))
            };
            let mut chain = chain_config(cfg, cfg.d, gamma, Activation::Linear, init);
            chain.centering = centering;
            jobs.extend(replicate_jobs(
                cfg,
                ChainJob {
                    file_label: variant.clone(),
                    variant,
                    x: cfg.d as f64,
                    replicate: 0,
                    kind: ChainKind::Bn,
                    input: InputKind::Gaussian,
                    chain,
                    keep_records: false,
                },
            ));
        }
    }
    let outcomes = run_chain_jobs(cfg, &jobs)?;
    let mut rows = metric_rows(cfg, &jobs, &outcomes);
    for (group, outs) in jobs.chunks(cfg.replicates).zip(outcomes.chunks(cfg.replicates)) {
        let k = outs[0]
            .metrics
            .iter()
            .position(|&(m, _)| m == "offdiag_mean")
            .expect("BN runs report offdiag_mean");
        let values = outs.iter().map(|o| o.metrics[k].1.abs()).collect();
        rows.push(AggregateRow::new(cfg.experiment.as_str(), &group[0].variant, group[0].x, "abs_offdiag_mean", values));
    }
    Ok((outcomes.into_iter().map(|o| o.file).collect(), rows))
}

fn collinear_topk(cfg: &ExperimentConfig) -> Result<Produced> {
    let mut jobs = Vec::new();
    for &gamma in &cfg.gammas {
        let variant = gamma_label(gamma);
        let mut chain = chain_config(cfg, cfg.d, gamma, Activation::Linear, cfg.init);
        chain.top_k = cfg.top_k;
        jobs.extend(replicate_jobs(
            cfg,
            ChainJob {
                file_label: variant.clone(),
                variant,
                x: cfg.d as f64,
                replicate: 0,
                kind: ChainKind::Bn,
                input: InputKind::NearCollinear,
                chain,
                keep_records: true,
            },
        ));
    }
    let outcomes = run_chain_jobs(cfg, &jobs)?;
    let mut files = Vec::new();
    let mut rows = metric_rows(cfg, &jobs, &outcomes);
    let k = cfg.top_k.min(cfg.d);
    let sigma_names: Vec<String> = (1..=k).map(|i| format!("sigma_{i}")).collect();
    for (group, outs) in jobs.chunks(cfg.replicates).zip(outcomes.chunks(cfg.replicates)) {
        let n = group[0].chain.n as f64;
        let sigma = |r: &LayerRecord, i: usize| r.top_eigs.get(i).map_or(f64::NAN, |&l| (n * l.max(0.0)).sqrt());
        let amplification: Vec<f64> = outs
            .iter()
            .map(|o| {
                o.records
                    .iter()
                    .find(|r| r.top_eigs.len() > 1 && r.top_eigs[1] > AMPLIFICATION_RATIO * r.top_eigs[0])
                    .map_or(f64::NAN, |r| r.layer as f64)
            })
            .collect();
        rows.push(AggregateRow::new(
            cfg.experiment.as_str(),
            &group[0].variant,
            group[0].x,
            "amplification_layer",
            amplification,
        ));
        for i in 0..outs[0].records.len() {
            let layer = outs[0].records[i].layer;
            for (j, name) in sigma_names.iter().enumerate() {
                let values = outs.iter().map(|o| sigma(&o.records[i], j)).collect();
                rows.push(AggregateRow::new(cfg.experiment.as_str(), &group[0].variant, layer as f64, name, values));
            }
        }
        for (job, out) in group.iter().zip(outs) {
            let mut header = vec!["layer", "replicate"];
            header.extend(sigma_names.iter().map(String::as_str));
            let mut table = Table::new(&header);
            for r in &out.records {
                let mut row = vec![Cell::Int(r.layer as i64), Cell::Int(job.replicate as i64)];
                row.extend((0..k).map(|j| Cell::Float(sigma(r, j))));
                table.push(row);
            }
            let path = replicate_path(cfg, &job.file_label, job.replicate, "_topk");
            write_file(&path, &table.to_csv())?;
            files.push(out.file.clone());
            files.push(path);
        }
    }
    Ok((files, rows))
}

fn blobs(cfg: &ExperimentConfig, replicate: usize) -> Result<(crate::Matrix, Vec<usize>)> {
    let spec = DatasetSpec::gaussian_blobs(cfg.width, cfg.samples, cfg.classes, cfg.separation);
    let data = generate(&spec, &mut input_rng(cfg, replicate, cfg.width))?;
    Ok((data.x, data.labels.expect("blobs are labeled")))
}

fn mlp_dims(cfg: &ExperimentConfig) -> Vec<usize> {
    let mut dims = vec![cfg.width; cfg.net_depth + 1];
    dims.push(cfg.classes);
    dims
}

fn random_mlp(cfg: &ExperimentConfig, activation: Activation, bn: bool, rng: &mut RngHandle) -> Result<MlpModel> {
    let eps = match activation {
        Activation::Linear => cfg.bn_epsilon,
        Activation::Relu => cfg.relu_bn_epsilon,
    };
    Ok(MlpModel::random(
        mlp_dims(cfg),
        activation,
        vec![bn; cfg.net_depth],
        f64::INFINITY,
        cfg.init,
        cfg.init_gain,
        rng,
    )?
    .with_bn_epsilon(eps))
}

const PRETRAIN_VARIANTS: [&str; 3] = ["plain", "pretrained", "bn"];

struct PretrainOutcome {
    files: Vec<PathBuf>,
    traces: Vec<TrainTrace>,
    report: PretrainReport,
}

fn pretrain_replicate(cfg: &ExperimentConfig, replicate: usize) -> Result<PretrainOutcome> {
    let (x, labels) = blobs(cfg, replicate)?;
    let base = random_mlp(cfg, Activation::Relu, false, &mut variant_rng(cfg, replicate, "plain"))?;
    let train_rng = RngHandle::new(cfg.seed, replicate as u64).substream(TRAIN_SALT);

    let mut plain = base.clone();
    let plain_trace = sgd_train(&mut plain, &x, &labels, cfg.epochs, cfg.batch_size, cfg.lr, &mut train_rng.clone())?;

    let mut pretrained = base;
    let pcfg = PretrainConfig {
        minibatch_size: cfg.pretrain_batch,
        num_minibatches: cfg.pretrain_minibatches,
        steps_per_minibatch: cfg.pretrain_steps,
        step_size: cfg.pretrain_step,
        mode: cfg.pretrain_mode,
        ..PretrainConfig::default()
    };
    let mut pre_rng = RngHandle::new(cfg.seed, replicate as u64).substream(PRETRAIN_SALT);
    let report = pretrain(&mut pretrained, &x, &pcfg, &mut pre_rng)?;
    let pre_trace = sgd_train(&mut pretrained, &x, &labels, cfg.epochs, cfg.batch_size, cfg.lr, &mut train_rng.clone())?;

    let mut bn = random_mlp(cfg, Activation::Relu, true, &mut variant_rng(cfg, replicate, "bn"))?;
    let bn_trace = sgd_train(&mut bn, &x, &labels, cfg.epochs, cfg.batch_size, cfg.lr, &mut train_rng.clone())?;

    let traces = vec![plain_trace, pre_trace, bn_trace];
    let mut table = Table::new(&["epoch", "replicate", "variant", "loss", "accuracy", "hard_rank"]);
    for (name, trace) in PRETRAIN_VARIANTS.iter().zip(&traces) {
        for e in &trace.epochs {
            table.push(vec![
                Cell::Int(e.epoch as i64),
                Cell::Int(replicate as i64),
                Cell::Text(name.to_string()),
                Cell::Float(e.loss),
                Cell::Float(e.accuracy),
                Cell::Int(e.hard_rank as i64),
            ]);
        }
    }
    let train_file = replicate_path(cfg, "", replicate, "");
    write_file(&train_file, &table.to_csv())?;

    let mut steps = Table::new(&["step", "replicate", "layer", "r"]);
    for (i, &(layer, r)) in report.trace.iter().enumerate() {
        steps.push(vec![
            Cell::Int(i as i64 + 1),
            Cell::Int(replicate as i64),
            Cell::Int(layer as i64),
            Cell::Float(r),
        ]);
    }
    let pretrain_file = replicate_path(cfg, "", replicate, "_pretrain");
    write_file(&pretrain_file, &steps.to_csv())?;

    Ok(PretrainOutcome {
        files: vec![train_file, pretrain_file],
        traces,
        report,
    })
}

fn pretrain_compare(cfg: &ExperimentConfig) -> Result<Produced> {
    let outcomes: Vec<PretrainOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| pretrain_replicate(cfg, r))
        .collect::<Result<_>>()?;
    let exp = cfg.experiment.as_str();
    let mut rows = Vec::new();
    for (v, name) in PRETRAIN_VARIANTS.iter().enumerate() {
        let traces: Vec<&TrainTrace> = outcomes.iter().map(|o| &o.traces[v]).collect();
        let last = cfg.epochs as f64;
        rows.push(AggregateRow::new(exp, name, last, "best_accuracy", traces.iter().map(|t| t.best_accuracy()).collect()));
        rows.push(AggregateRow::new(exp, name, last, "final_accuracy", traces.iter().map(|t| t.final_accuracy()).collect()));
        for e in 0..=cfg.epochs {
            let at = |f: fn(&crate::network::EpochRecord) -> f64| traces.iter().map(|t| f(&t.epochs[e])).collect();
            rows.push(AggregateRow::new(exp, name, e as f64, "accuracy", at(|r| r.accuracy)));
            rows.push(AggregateRow::new(exp, name, e as f64, "loss", at(|r| r.loss)));
            rows.push(AggregateRow::new(exp, name, e as f64, "hard_rank", at(|r| r.hard_rank as f64)));
        }
    }
    let depth = cfg.net_depth as f64;
    let reports: Vec<&PretrainReport> = outcomes.iter().map(|o| &o.report).collect();
    rows.push(AggregateRow::new(exp, "pretrained", depth, "r_initial", reports.iter().map(|r| r.initial_r).collect()));
    rows.push(AggregateRow::new(exp, "pretrained", depth, "r_final", reports.iter().map(|r| r.final_r).collect()));
    rows.push(AggregateRow::new(
        exp,
        "pretrained",
        depth,
        "r_ratio",
        reports.iter().map(|r| r.final_r / r.initial_r).collect(),
    ));
    rows.push(AggregateRow::new(
        exp,
        "pretrained",
        depth,
        "guard_flags",
        reports.iter().map(|r| r.guard_flags.len() as f64).collect(),
    ));
    Ok((outcomes.into_iter().flat_map(|o| o.files).collect(), rows))
}

const ALIGN_VARIANTS: [(&str, Option<(Activation, bool)>); 5] = [
    ("rank-one", None),
    ("vanilla-linear", Some((Activation::Linear, false))),
    ("vanilla-relu", Some((Activation::Relu, false))),
    ("bn-linear", Some((Activation::Linear, true))),
    ("bn-relu", Some((Activation::Relu, true))),
];

fn align_replicate(cfg: &ExperimentConfig, replicate: usize) -> Result<(PathBuf, Vec<[f64; 3]>)> {
    let (x, labels) = blobs(cfg, replicate)?;
    let mut table = Table::new(&["replicate", "variant", "mean_abs_cos", "min_abs_cos", "excluded"]);
    let mut values = Vec::new();
    for (name, net) in ALIGN_VARIANTS {
        let mut rng = variant_rng(cfg, replicate, name);
        let report = match net {
            None => {
                let u = rng.gaussian_matrix(cfg.width, 1);
                let c = rng.gaussian_matrix(1, cfg.samples);
                let w_out = rng.gaussian_matrix(cfg.classes, cfg.width) / (cfg.width as f64).sqrt();
                alignment_of_features(&(&u * &c), &w_out, &labels)?
            }
            Some((activation, bn)) => {
                let model = random_mlp(cfg, activation, bn, &mut rng)?;
                gradient_alignment(&model, &x, &labels)?
            }
        };
        table.push(vec![
            Cell::Int(replicate as i64),
            Cell::Text(name.to_string()),
            Cell::Float(report.mean_abs_cos),
            Cell::Float(report.min_abs_cos),
            Cell::Int(report.excluded as i64),
        ]);
        values.push([report.mean_abs_cos, report.min_abs_cos, report.excluded as f64]);
    }
    let path = replicate_path(cfg, "", replicate, "");
    write_file(&path, &table.to_csv())?;
    Ok((path, values))
}

fn grad_align(cfg: &ExperimentConfig) -> Result<Produced> {
    let outcomes: Vec<(PathBuf, Vec<[f64; 3]>)> = (0..cfg.replicates)
        .into_par_iter()
        .map(|r| align_replicate(cfg, r))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (v, (name, _)) in ALIGN_VARIANTS.iter().enumerate() {
        for (k, metric) in ["mean_abs_cos", "min_abs_cos", "excluded"].iter().enumerate() {
            rows.push(AggregateRow::new(
                cfg.experiment.as_str(),
                name,
                cfg.net_depth as f64,
                metric,
                outcomes.iter().map(|o| o.1[v][k]).collect(),
            ));
        }
    }
    Ok((outcomes.into_iter().map(|o| o.0).collect(), rows))
}

/// Path of the aggregate file `run_experiment` writes for `experiment`.
pub fn aggregate_path(out_dir: &Path, experiment: ExperimentName) -> PathBuf {
    out_dir.join(format!("{experiment}_aggregate.csv"))
}
