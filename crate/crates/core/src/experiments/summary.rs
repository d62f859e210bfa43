use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

use super::csv::{parse_aggregate, AggregateRow};

/// Least-squares fit of `log y = intercept + slope·log x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    /// Residuals in natural-log units, one per point.
    pub residuals: Vec<f64>,
}

impl LogLogFit {
    pub fn rms_residual(&self) -> f64 {
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64).sqrt()
    }
}

/// Fits a power law through `(x, y)`; needs two distinct positive `x` and
/// positive `y`.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<LogLogFit> {
    if xs.len() != ys.len() {
        return Err(Error::InvalidInput("x and y lengths differ".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0) || !v.is_finite()) {
        return Err(Error::InvalidInput("log-log fit needs finite positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if lx.len() < 2 || sxx == 0.0 {
        return Err(Error::InvalidInput("log-log fit needs two distinct x values".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residuals = lx.iter().zip(&ly).map(|(x, y)| y - intercept - slope * x).collect();
    Ok(LogLogFit {
        slope,
        intercept,
        residuals,
    })
}

/// A fitted power law of one metric of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub experiment: String,
    pub variant: String,
    pub metric: String,
    pub points: usize,
    pub fit: LogLogFit,
}

/// One pass/fail check.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub check: String,
    pub passed: bool,
    pub detail: String,
}

/// Fits and checks derived from aggregate rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Summary {
    pub fits: Vec<SlopeFit>,
    pub verdicts: Vec<Verdict>,
}

impl Summary {
    pub fn all_passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.passed)
    }

    pub fn fit(&self, variant: &str, metric: &str) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.variant == variant && f.metric == metric)
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.fits.is_empty() {
            writeln!(f, "{:<18} {:<12} {:<16} {:>7} {:>10} {:>12}", "experiment", "variant", "metric", "points", "slope", "rms_resid")?;
            for s in &self.fits {
                writeln!(
                    f,
                    "{:<18} {:<12} {:<16} {:>7} {:>10.4} {:>12.3e}",
                    s.experiment,
                    s.variant,
                    s.metric,
                    s.points,
                    s.fit.slope,
                    s.fit.rms_residual()
                )?;
            }
        }
        for v in &self.verdicts {
            writeln!(f, "{} {}: {}", if v.passed { "PASS" } else { "FAIL" }, v.check, v.detail)?;
        }
        Ok(())
    }
}

/// Metrics fitted against `x` for each experiment; `None` fits every metric.
fn fitted_metrics(experiment: &str) -> Option<&'static [&'static str]> {
    match experiment {
        "rank-vs-width" => Some(&["avg_soft_rank", "avg_hard_rank"]),
        "regularity" | "fro-norm" => Some(&["avg_fro_m_sq"]),
        "rank-vs-depth" | "collinear-topk" | "pretrain-compare" | "break-bn" | "grad-align" => Some(&[]),
        _ => None,
    }
}

type Groups<'a> = BTreeMap<(&'a str, &'a str, &'a str), Vec<&'a AggregateRow>>;

fn group_rows(rows: &[AggregateRow]) -> Groups<'_> {
    let mut groups: Groups<'_> = BTreeMap::new();
    for row in rows {
        groups
            .entry((row.experiment.as_str(), row.variant.as_str(), row.metric.as_str()))
            .or_default()
            .push(row);
    }
    groups
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn fmt_values(values: &[f64]) -> String {
    let parts: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Fits and checks for `rows`, which may mix several experiments.
pub fn summarize_rows(rows: &[AggregateRow]) -> Summary {
    let groups = group_rows(rows);
    let mut summary = Summary::default();
    for (&(experiment, variant, metric), members) in &groups {
        let wanted = fitted_metrics(experiment).is_none_or(|m| m.contains(&metric));
        if !wanted {
            continue;
        }
        let xs: Vec<f64> = members.iter().map(|r| r.x).collect();
        let ys: Vec<f64> = members.iter().map(|r| mean(&r.values)).collect();
        if let Ok(fit) = fit_loglog(&xs, &ys) {
            summary.fits.push(SlopeFit {
                experiment: experiment.to_string(),
                variant: variant.to_string(),
                metric: metric.to_string(),
                points: xs.len(),
                fit,
            });
        }
    }
    let experiments: Vec<&str> = {
        let mut e: Vec<&str> = rows.iter().map(|r| r.experiment.as_str()).collect();
        e.dedup();
        e.sort_unstable();
        e.dedup();
        e
    };
    for experiment in experiments {
        checks(experiment, &groups, &mut summary);
    }
    summary
}

fn checks(experiment: &str, groups: &Groups<'_>, summary: &mut Summary) {
    let of = |metric: &'static str| {
        groups
            .iter()
            .filter(move |((e, _, m), _)| *e == experiment && *m == metric)
            .map(|((_, v, _), rows)| (*v, rows))
    };
    let mut push = |check: String, passed: bool, detail: String| {
        summary.verdicts.push(Verdict { check, passed, detail });
    };
    match experiment {
        "rank-vs-depth" => {
            for (variant, rows) in of("collapse_layer") {
                if !variant.starts_with("vanilla-linear") {
                    continue;
                }
                let layers = &rows[0].values;
                let passed = layers.iter().all(|&l| l <= 200.0);
                push(
                    format!("{variant} hard rank 1 by layer 200 in every replicate"),
                    passed,
                    format!("collapse layers {}", fmt_values(layers)),
                );
            }
            for (variant, rows) in of("min_soft_rank") {
                if !variant.starts_with("bn-") {
                    continue;
                }
                let row = rows[0];
                let bound = row.x.sqrt().ceil();
                let hits = row.values.iter().filter(|&&v| v >= bound).count();
                let needed = (0.9 * row.values.len() as f64).ceil() as usize;
                push(
                    format!("{variant} min rank_tau >= {bound} in >= 90% of replicates"),
                    hits >= needed,
                    format!("{hits}/{} replicates, minima {}", row.values.len(), fmt_values(&row.values)),
                );
            }
        }
        "rank-vs-width" => {
            for (variant, rows) in of("avg_soft_rank") {
                let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
                let ys: Vec<f64> = rows.iter().map(|r| mean(&r.values)).collect();
                match fit_loglog(&xs, &ys) {
                    Ok(fit) => push(
                        format!("{variant} log-log slope of avg rank_tau in [0.35, 0.65]"),
                        (0.35..=0.65).contains(&fit.slope),
                        format!("slope {:.4}, rms residual {:.3e}", fit.slope, fit.rms_residual()),
                    ),
                    Err(e) => push(format!("{variant} slope fit"), false, e.to_string()),
                }
            }
        }
        "regularity" | "fro-norm" => {
            for (variant, rows) in of("alpha") {
                let worst = rows
                    .iter()
                    .flat_map(|r| r.values.iter().copied())
                    .fold(f64::NEG_INFINITY, f64::max);
                let cells: Vec<String> = rows.iter().map(|r| format!("d={}: {:.4}", r.x, mean(&r.values))).collect();
                push(
                    format!("{variant} alpha < 0.9 in every cell"),
                    worst < 0.9,
                    cells.join(", "),
                );
            }
            for (variant, rows) in of("avg_fro_m_sq") {
                let bound_ok = rows
                    .iter()
                    .all(|r| r.values.iter().all(|&v| v.log2() <= 1.5 * r.x.log2() + 0.5));
                let cells: Vec<String> = rows
                    .iter()
                    .map(|r| format!("d={}: {:.3} <= {:.3}", r.x, mean(&r.values).log2(), 1.5 * r.x.log2() + 0.5))
                    .collect();
                push(
                    format!("{variant} log2 avg |M|_F^2 <= 1.5 log2 d + 0.5"),
                    bound_ok,
                    cells.join(", "),
                );
                let xs: Vec<f64> = rows.iter().map(|r| r.x).collect();
                let ys: Vec<f64> = rows.iter().map(|r| mean(&r.values)).collect();
                match fit_loglog(&xs, &ys) {
                    Ok(fit) => push(
                        format!("{variant} log-log slope of avg |M|_F^2 in [1.2, 1.7]"),
                        (1.2..=1.7).contains(&fit.slope),
                        format!("slope {:.4}", fit.slope),
                    ),
                    Err(e) => push(format!("{variant} Frobenius slope fit"), false, e.to_string()),
                }
            }
        }
        "collinear-topk" => {
            for (variant, rows) in of("amplification_layer") {
                let layers = &rows[0].values;
                push(
                    format!("{variant} sigma_2^2 > 0.1 sigma_1^2 within the run"),
                    layers.iter().all(|l| l.is_finite()),
                    format!("first layers {}", fmt_values(layers)),
                );
            }
        }
        "break-bn" => {
            for (variant, rows) in of("abs_offdiag_mean") {
                let values = &rows[0].values;
                let (check, passed) = if variant.starts_with("symmetric") {
                    ("< 0.05", values.iter().all(|&v| v < 0.05))
                } else if variant.starts_with("asymmetric") && !variant.contains("centered") {
                    ("> 0.2", values.iter().all(|&v| v > 0.2))
                } else {
                    continue;
                };
                push(
                    format!("{variant} |off-diagonal ergodic mean| {check}"),
                    passed,
                    fmt_values(values),
                );
            }
        }
        "pretrain-compare" => {
            for (variant, rows) in of("best_accuracy") {
                let values = &rows[0].values;
                let (check, passed) = match variant {
                    "pretrained" => (">= 0.9", values.iter().all(|&v| v >= 0.9)),
                    "plain" => ("< 0.6", values.iter().all(|&v| v < 0.6)),
                    _ => continue,
                };
                push(format!("{variant} best train accuracy {check}"), passed, fmt_values(values));
            }
            for (variant, rows) in of("r_ratio") {
                let values = &rows[0].values;
                push(
                    format!("{variant} r(H_L) after pretraining >= 5x initial"),
                    values.iter().all(|&v| v >= 5.0),
                    fmt_values(values),
                );
            }
        }
        "grad-align" => {
            for (variant, rows) in of("min_abs_cos") {
                if variant == "rank-one" {
                    let values = &rows[0].values;
                    push(
                        "rank-one features min |cos| >= 1 - 1e-6".to_string(),
                        values.iter().all(|&v| v >= 1.0 - 1e-6),
                        fmt_values(values),
                    );
                }
            }
            for (variant, rows) in of("mean_abs_cos") {
                let values = &rows[0].values;
                let (check, passed) = match variant {
                    "vanilla-linear" => ("> 0.99", values.iter().all(|&v| v > 0.99)),
                    "bn-linear" => ("< 0.5", values.iter().all(|&v| v < 0.5)),
                    _ => continue,
                };
                push(format!("{variant} mean |cos| {check}"), passed, fmt_values(values));
            }
        }
        _ => {}
    }
}

/// Reads aggregate CSVs and summarizes them together.
pub fn summarize<P: AsRef<Path>>(paths: &[P]) -> Result<Summary> {
    let mut rows = Vec::new();
    for path in paths {
        let text = fs::read_to_string(path.as_ref())?;
        rows.extend(parse_aggregate(&text)?);
    }
    Ok(summarize_rows(&rows))
}
