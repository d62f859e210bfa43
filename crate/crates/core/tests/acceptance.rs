mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use bnrank::chain::{bn_chain_step_mspace, run_bn_chain, BnChainConfig, HiddenState};
use bnrank::experiments::{run_experiment, summarize, ExperimentConfig, ExperimentName, Summary};
use bnrank::init::{sample_weight, InitSpec, RngHandle};
use bnrank::rank::{
    delta_f_poly, hard_rank, r_lower_bound, second_moment, MomentTraces, SecondMoment, SingularSpectrum,
};
use bnrank::Matrix;

use common::{gradient_errors, smooth_random_case};

const SEED: u64 = 20_240_601;

struct Outcome {
    passed: bool,
    detail: String,
}

impl Outcome {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Outcome { passed, detail: detail.into() }
    }

    fn error(e: impl std::fmt::Display) -> Self {
        Outcome::new(false, format!("error: {e}"))
    }
}

fn out_root() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn fresh_dir(name: &str) -> PathBuf {
    let dir = out_root().join(name);
    let _ = fs::remove_dir_all(&dir);
    dir
}

/// Runs `experiment` with `settings` and re-reads its aggregate CSV.
fn run_and_summarize(experiment: ExperimentName, dir: &Path, settings: &[(&str, &str)]) -> Result<Summary, String> {
    let mut cfg = ExperimentConfig::new(experiment);
    cfg.seed = SEED;
    cfg.out_dir = dir.to_path_buf();
    for (key, value) in settings {
        cfg.set(key, value).map_err(|e| e.to_string())?;
    }
    let output = run_experiment(&cfg).map_err(|e| e.to_string())?;
    summarize(&[output.aggregate_file]).map_err(|e| e.to_string())
}

/// Combines the verdicts whose check names satisfy `select`.
fn verdicts(summary: &Result<Summary, String>, select: impl Fn(&str) -> bool) -> Outcome {
    let summary = match summary {
        Ok(s) => s,
        Err(e) => return Outcome::error(e),
    };
    let picked: Vec<_> = summary.verdicts.iter().filter(|v| select(&v.check)).collect();
    if picked.is_empty() {
        return Outcome::new(false, "no matching verdicts");
    }
    let passed = picked.iter().all(|v| v.passed);
    let detail: Vec<String> = picked
        .iter()
        .map(|v| format!("[{}] {}: {}", if v.passed { "ok" } else { "x" }, v.check, v.detail))
        .collect();
    Outcome::new(passed, detail.join("; "))
}

fn sorted_csvs(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .map(|entries| {
            entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
                .collect()
        })
        .unwrap_or_default();
    files.sort();
    files
}

/// Nine quadratic functionals of the Gaussian weight `w` at state `m`.
fn control_variates(w: &Matrix, m: &Matrix) -> [f64; 9] {
    let d = m.nrows();
    let b = w * m;
    let c = &b * w.transpose();
    let mut z = [0.0; 9];
    for i in 0..d {
        z[2] += c[(i, i)];
        z[3] += b[(i, i)] * b[(i, i)];
        for j in 0..d {
            let s = b[(i, j)] + b[(j, i)];
            let m2 = m[(i, j)] * m[(i, j)];
            z[0] += s * s;
            z[1] += m[(i, j)] * c[(i, j)];
            z[4] += m[(i, j)] * s * (b[(i, i)] + b[(j, j)]);
            z[5] += m2 * (b[(i, i)] + b[(j, j)]).powi(2);
            z[6] += m2 * (c[(i, i)] + c[(j, j)]);
            z[7] += m2 * b[(i, i)] * b[(j, j)];
            z[8] += m2 * (b[(i, i)].powi(2) + b[(j, j)].powi(2));
        }
    }
    z
}

/// Exact expectations of [`control_variates`] under i.i.d. standard normal weights.
fn control_means(m: &SecondMoment) -> [f64; 9] {
    let d = m.dim() as f64;
    let t = MomentTraces::of(m);
    let f = t.fro_sq;
    [
        2.0 * d * f + 2.0 * f,
        d * d,
        d * d,
        f,
        2.0 * t.tr_m3 + 2.0 * f,
        2.0 * t.tr_diag_m2_sq + 2.0 * f,
        2.0 * d * f,
        f,
        2.0 * t.tr_diag_m2_sq,
    ]
}

/// Unbiased estimate of `E[‖M₊‖²_F − ‖M‖²_F] / γ²` from `draws` weights,
/// using antithetic pairs and regression on centered control variates.
fn drift_estimate(m: &SecondMoment, gamma: f64, draws: usize, rng: &mut RngHandle) -> (f64, f64) {
    let d = m.dim();
    let pairs = draws / 2;
    let f0 = MomentTraces::of(m).fro_sq;
    let mu = control_means(m);
    let mut ys = Vec::with_capacity(pairs);
    let mut zs = Vec::with_capacity(pairs * 10);
    for _ in 0..pairs {
        let w = sample_weight(&InitSpec::gaussian(), d, d, rng);
        let plus = MomentTraces::of(&bn_chain_step_mspace(m, &w, gamma).unwrap()).fro_sq - f0;
        let minus = MomentTraces::of(&bn_chain_step_mspace(m, &(-&w), gamma).unwrap()).fro_sq - f0;
        ys.push((plus + minus) / 2.0 / (gamma * gamma));
        zs.push(1.0);
        let z = control_variates(&w, m.as_matrix());
        zs.extend(z.iter().zip(&mu).map(|(z, mu)| z - mu));
    }
    let y = DVector::from_vec(ys);
    let z = DMatrix::from_row_slice(pairs, 10, &zs);
    let beta = z.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let residual = &y - &z * &beta;
    (beta[0], residual.variance().sqrt() / (pairs as f64).sqrt())
}

fn vanilla_collapse(summary: &Result<Summary, String>) -> Outcome {
    verdicts(summary, |c| c.starts_with("vanilla-linear"))
}

fn bn_stability(summary: &Result<Summary, String>) -> Outcome {
    verdicts(summary, |c| c.starts_with("bn-"))
}

fn sqrt_d_scaling() -> Outcome {
    let summary = run_and_summarize(
        ExperimentName::RankVsWidth,
        &fresh_dir("rank-vs-width"),
        &[("ds", "8,16,32,64,128"), ("gammas", "0.5,1,inf"), ("depth", "100000"), ("replicates", "1")],
    );
    verdicts(&summary, |_| true)
}

fn taylor_check() -> Outcome {
    let gammas = [0.04, 0.02, 0.01];
    let mut passed = true;
    let mut detail = Vec::new();
    for state in 0..4u64 {
        let depth = 200 + 300 * state as usize;
        let cfg = BnChainConfig::new(8, 8, 1.0, depth);
        let x = match HiddenState::new(RngHandle::new(SEED + state, 1).gaussian_matrix(8, 8)) {
            Ok(x) => x,
            Err(e) => return Outcome::error(e),
        };
        let m = match run_bn_chain(&cfg, &x, &mut RngHandle::new(SEED + state, 2)) {
            Ok(run) => run.final_moment,
            Err(e) => return Outcome::error(e),
        };
        let poly = delta_f_poly(&m);
        let errors: Vec<f64> = gammas
            .iter()
            .map(|&g| {
                let mut rng = RngHandle::new(SEED + state, 3);
                (drift_estimate(&m, g, 100_000, &mut rng).0 - poly).abs()
            })
            .collect();
        let monotone = errors.windows(2).all(|w| w[1] < w[0]);
        let small = errors[2] < 0.5;
        passed &= monotone && small;
        detail.push(format!(
            "layer {depth}: poly {poly:.3}, |err| {:.4} > {:.4} > {:.4}",
            errors[0], errors[1], errors[2]
        ));
    }
    Outcome::new(passed, detail.join("; "))
}

fn rank_at_least_two() -> Outcome {
    let d = 16;
    let cfg = BnChainConfig::new(d, d, 1.0 / 128.0, 100_000)
        .with_init(InitSpec::uniform_symmetric())
        .with_record_every(1);
    let x = match HiddenState::new(RngHandle::new(SEED, 1).gaussian_matrix(d, d)) {
        Ok(x) => x,
        Err(e) => return Outcome::error(e),
    };
    match run_bn_chain(&cfg, &x, &mut RngHandle::new(SEED, 2)) {
        Ok(run) => {
            let worst = run.records.iter().min_by_key(|r| r.hard_rank).unwrap();
            Outcome::new(
                run.records.len() == 100_001 && worst.hard_rank >= 2,
                format!(
                    "{} layers recorded, min hard rank {} at layer {}",
                    run.records.len(),
                    worst.hard_rank,
                    worst.layer
                ),
            )
        }
        Err(e) => Outcome::error(e),
    }
}

fn symmetry() -> Outcome {
    let long = run_and_summarize(
        ExperimentName::BreakBn,
        &fresh_dir("break-bn-symmetric"),
        &[("d", "16"), ("depth", "100000")],
    );
    let short = run_and_summarize(
        ExperimentName::BreakBn,
        &fresh_dir("break-bn-asymmetric"),
        &[("d", "16"), ("depth", "10000")],
    );
    let sym = verdicts(&long, |c| c.starts_with("symmetric"));
    let asym = verdicts(&short, |c| c.starts_with("asymmetric"));
    Outcome::new(sym.passed && asym.passed, format!("L=1e5 {}; L=1e4 {}", sym.detail, asym.detail))
}

fn lemma_one_suite() -> Outcome {
    let mut rng = RngHandle::new(SEED, 9);
    let mut violations = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..1000 {
        let d = 2 + rng.below(15);
        let n = 2 + rng.below(30);
        let k = 1 + rng.below(d.min(n));
        let h = rng.gaussian_matrix(d, k) * rng.gaussian_matrix(k, n);
        let hard = hard_rank(&SingularSpectrum::of_matrix(&h));
        let r = match second_moment(&h).and_then(|m| r_lower_bound(&m)) {
            Ok(r) => r,
            Err(e) => return Outcome::error(e),
        };
        if r > hard as f64 * (1.0 + 1e-12) {
            violations += 1;
        }
        tightest = tightest.min(hard as f64 - r);
    }
    let mut chain_checks = 0;
    let mut chain_violations = 0;
    for (i, &d) in [8usize, 16, 32].iter().enumerate() {
        for (j, &gamma) in [0.1, 1.0, f64::INFINITY].iter().enumerate() {
            for &tau in &[0.0, 0.25, 0.5, 0.9] {
                let mut cfg = BnChainConfig::new(d, d, gamma, 2000);
                cfg.tau = tau;
                let stream = (10 * i + j) as u64;
                let x = match HiddenState::new(RngHandle::new(SEED + stream, 1).gaussian_matrix(d, d)) {
                    Ok(x) => x,
                    Err(e) => return Outcome::error(e),
                };
                let run = match run_bn_chain(&cfg, &x, &mut RngHandle::new(SEED + stream, 2)) {
                    Ok(run) => run,
                    Err(e) => return Outcome::error(e),
                };
                for rec in &run.records {
                    chain_checks += 1;
                    if (rec.soft_rank as f64) < (1.0 - tau).powi(2) * rec.r_lower * (1.0 - 1e-12) {
                        chain_violations += 1;
                    }
                }
            }
        }
    }
    Outcome::new(
        violations == 0 && chain_violations == 0,
        format!(
            "r <= hard rank violated in {violations}/1000 matrices (min slack {tightest:.3e}); \
             rank_tau >= (1-tau)^2 r violated in {chain_violations}/{chain_checks} chain states"
        ),
    )
}

fn gradient_correctness() -> Outcome {
    let mut rng = RngHandle::new(SEED, 4);
    let mut worst_loss: f64 = 0.0;
    let mut worst_rank: f64 = 0.0;
    for _ in 0..50 {
        let (model, x, labels) = smooth_random_case(&mut rng);
        let (loss_err, rank_err) = gradient_errors(&model, &x, &labels);
        worst_loss = worst_loss.max(loss_err);
        worst_rank = worst_rank.max(rank_err);
    }
    Outcome::new(
        worst_loss < 1e-5 && worst_rank < 1e-5,
        format!("50 models, max relative error loss {worst_loss:.3e}, rank objective {worst_rank:.3e}"),
    )
}

fn gradient_alignment() -> Outcome {
    let summary = run_and_summarize(
        ExperimentName::GradAlign,
        &fresh_dir("grad-align"),
        &[("net_depth", "64"), ("replicates", "5")],
    );
    verdicts(&summary, |_| true)
}

fn pretraining() -> Outcome {
    let summary = run_and_summarize(
        ExperimentName::PretrainCompare,
        &fresh_dir("pretrain-compare"),
        &[("width", "32"), ("net_depth", "32"), ("epochs", "100"), ("replicates", "5")],
    );
    verdicts(&summary, |_| true)
}

fn determinism() -> Outcome {
    let tiny = [
        ("d", "8"),
        ("ds", "8,16"),
        ("depth", "60"),
        ("replicates", "2"),
        ("top_k", "4"),
        ("width", "8"),
        ("net_depth", "6"),
        ("samples", "16"),
        ("epochs", "3"),
        ("pretrain_steps", "3"),
    ];
    let mut detail = Vec::new();
    let mut passed = true;
    for experiment in ExperimentName::ALL {
        let root = fresh_dir(&format!("determinism/{experiment}"));
        let mut runs = Vec::new();
        for (label, threads) in [("a", "0"), ("b", "1")] {
            let dir = root.join(label);
            let mut settings = tiny.to_vec();
            settings.push(("threads", threads));
            if let Err(e) = run_and_summarize(experiment, &dir, &settings) {
                return Outcome::error(format!("{experiment}: {e}"));
            }
            runs.push(sorted_csvs(&dir));
        }
        let same = !runs[0].is_empty() && runs[0] == runs[1];
        passed &= same;
        detail.push(format!("{experiment} {} files {}", runs[0].len(), if same { "identical" } else { "DIFFER" }));
    }
    Outcome::new(passed, detail.join(", "))
}

fn main() -> ExitCode {
    let _ = fs::create_dir_all(out_root());
    let mut failures = 0;
    let mut report = |name: &str, started: Instant, outcome: Outcome| {
        if !outcome.passed {
            failures += 1;
        }
        println!(
            "{} {name} ({:.1}s): {}",
            if outcome.passed { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64(),
            outcome.detail
        );
    };

    let t = Instant::now();
    let depth_run = run_and_summarize(
        ExperimentName::RankVsDepth,
        &fresh_dir("rank-vs-depth"),
        &[("d", "32"), ("gammas", "1,inf"), ("depth", "10000"), ("replicates", "10")],
    );
    report("vanilla rank collapse", t, vanilla_collapse(&depth_run));
    report("BN rank stability", t, bn_stability(&depth_run));

    let t = Instant::now();
    report("sqrt(d) scaling", t, sqrt_d_scaling());

    let t = Instant::now();
    let regularity_run = run_and_summarize(
        ExperimentName::Regularity,
        &fresh_dir("regularity"),
        &[("ds", "16,32,64"), ("gammas", "0.1,1"), ("depth", "100000"), ("replicates", "1")],
    );
    report("regularity constant", t, verdicts(&regularity_run, |c| c.contains("alpha")));
    report("Frobenius bound", t, verdicts(&regularity_run, |c| c.contains("|M|_F^2")));

    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("delta_F Taylor check", taylor_check),
        ("rank at least two", rank_at_least_two),
        ("symmetry consequence", symmetry),
        ("stable-rank lower bound suite", lemma_one_suite),
        ("gradient correctness", gradient_correctness),
        ("gradient alignment", gradient_alignment),
        ("pretraining efficacy", pretraining),
        ("determinism", determinism),
    ];
    for (name, check) in criteria {
        let t = Instant::now();
        report(name, t, check());
    }

    if failures == 0 {
        println!("all acceptance criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{failures} acceptance criteria failed");
        ExitCode::FAILURE
    }
}
