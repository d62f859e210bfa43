use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::chain::LayerRecord;
use crate::{Error, Result};

/// Header of every chain trajectory file.
pub const CHAIN_HEADER: &str = "layer,replicate,hard_rank,soft_rank,r_lower,fro_m_sq,tr_m3,tr_diag_m2_sq";

/// Leading columns of every aggregate file; `rep_0..rep_{R-1}` follow.
pub const AGGREGATE_PREFIX: [&str; 7] = ["experiment", "variant", "x", "metric", "mean", "ci95_low", "ci95_high"];

/// Formats `v` like C's `%.10e`: ten fraction digits, a signed exponent of
/// at least two digits.
pub fn fmt_sci(v: f64) -> String {
    if v.is_nan() {
        return "nan".to_string();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf" } else { "-inf" }.to_string();
    }
    let s = format!("{v:.10e}");
    let (mantissa, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mantissa}e{sign}{:02}", exp.abs())
}

/// Parses a float written by [`fmt_sci`] (or any Rust float literal).
pub fn parse_float(s: &str) -> Option<f64> {
    match s {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        _ => s.parse().ok(),
    }
}

/// Chain trajectory of one replicate in the chain CSV schema.
pub fn chain_csv(records: &[LayerRecord], replicate: usize) -> String {
    let mut out = String::with_capacity(records.len() * 96);
    out.push_str(CHAIN_HEADER);
    out.push('\n');
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.layer,
            replicate,
            r.hard_rank,
            r.soft_rank,
            fmt_sci(r.r_lower),
            fmt_sci(r.fro_m_sq),
            fmt_sci(r.tr_m3),
            fmt_sci(r.tr_diag_m2_sq)
        )
        .expect("writing to a String");
    }
    out
}

/// A free-form table: integer-like columns are written verbatim, floats
/// through [`fmt_sci`].
#[derive(Debug, Clone, Default)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

/// One cell of a [`Table`] row.
#[derive(Debug, Clone)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(
            row.into_iter()
                .map(|c| match c {
                    Cell::Int(i) => i.to_string(),
                    Cell::Float(f) => fmt_sci(f),
                    Cell::Text(t) => t,
                })
                .collect(),
        );
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

/// One row of an aggregate file: a metric of one variant at one `x`, with
/// the value of every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub experiment: String,
    pub variant: String,
    pub x: f64,
    pub metric: String,
    pub values: Vec<f64>,
}

impl AggregateRow {
    pub fn new(experiment: &str, variant: &str, x: f64, metric: &str, values: Vec<f64>) -> Self {
        AggregateRow {
            experiment: experiment.to_string(),
            variant: variant.to_string(),
            x,
            metric: metric.to_string(),
            values,
        }
    }

    /// `(mean, ci95_low, ci95_high)` with half-width `1.96·s/√R`.
    pub fn mean_ci(&self) -> (f64, f64, f64) {
        mean_ci95(&self.values)
    }
}

/// Sample mean and normal-approximation 95% interval; a single value gives
/// a zero-width interval.
pub fn mean_ci95(values: &[f64]) -> (f64, f64, f64) {
    let r = values.len();
    if r == 0 {
        return (f64::NAN, f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / r as f64;
    if r == 1 {
        return (mean, mean, mean);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (r - 1) as f64;
    let half = 1.96 * var.sqrt() / (r as f64).sqrt();
    (mean, mean - half, mean + half)
}

/// Aggregate CSV text for `rows`, all of which must carry `replicates`
/// values.
pub fn aggregate_csv(rows: &[AggregateRow], replicates: usize) -> Result<String> {
    let mut out = AGGREGATE_PREFIX.join(",");
    for r in 0..replicates {
        write!(out, ",rep_{r}").expect("writing to a String");
    }
    out.push('\n');
    for row in rows {
        if row.values.len() != replicates {
            return Err(Error::InvariantViolation(format!(
                "aggregate row {}/{} has {} values, expected {replicates}",
                row.variant,
                row.metric,
                row.values.len()
            )));
        }
        let (mean, lo, hi) = row.mean_ci();
        write!(
            out,
            "{},{},{},{},{},{},{}",
            row.experiment,
            row.variant,
            fmt_sci(row.x),
            row.metric,
            fmt_sci(mean),
            fmt_sci(lo),
            fmt_sci(hi)
        )
        .expect("writing to a String");
        for v in &row.values {
            write!(out, ",{}", fmt_sci(*v)).expect("writing to a String");
        }
        out.push('\n');
    }
    Ok(out)
}

/// Parses aggregate CSV text. Byte offsets in errors point at the start of
/// the offending line.
pub fn parse_aggregate(text: &str) -> Result<Vec<AggregateRow>> {
    let mut offset = 0usize;
    let mut lines = text.split_inclusive('\n');
    let header_line = lines
        .next()
        .ok_or_else(|| Error::format(0, "empty aggregate file"))?;
    let header: Vec<&str> = header_line.trim_end_matches('\n').split(',').collect();
    if header.len() < AGGREGATE_PREFIX.len() || header[..AGGREGATE_PREFIX.len()] != AGGREGATE_PREFIX {
        return Err(Error::format(0, format!("aggregate header must start with `{}`", AGGREGATE_PREFIX.join(","))));
    }
    let reps = header.len() - AGGREGATE_PREFIX.len();
    for (r, name) in header[AGGREGATE_PREFIX.len()..].iter().enumerate() {
        if *name != format!("rep_{r}") {
            return Err(Error::format(0, format!("expected column `rep_{r}`, found `{name}`")));
        }
    }
    offset += header_line.len();

    let mut rows = Vec::new();
    for line in lines {
        let here = offset;
        offset += line.len();
        let body = line.trim_end_matches('\n');
        if body.is_empty() {
            continue;
        }
        if body.ends_with('\r') {
            return Err(Error::format(here as u64, "CR line ending"));
        }
        let cells: Vec<&str> = body.split(',').collect();
        if cells.len() != header.len() {
            return Err(Error::format(
                here as u64,
                format!("{} fields, header has {}", cells.len(), header.len()),
            ));
        }
        let num = |i: usize| {
            parse_float(cells[i]).ok_or_else(|| Error::format(here as u64, format!("`{}` is not a number", cells[i])))
        };
        let x = num(2)?;
        for i in 4..7 {
            num(i)?;
        }
        let values = (7..cells.len()).map(num).collect::<Result<Vec<f64>>>()?;
        debug_assert_eq!(values.len(), reps);
        rows.push(AggregateRow {
            experiment: cells[0].to_string(),
            variant: cells[1].to_string(),
            x,
            metric: cells[3].to_string(),
            values,
        });
    }
    Ok(rows)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text)?;
    Ok(())
}
