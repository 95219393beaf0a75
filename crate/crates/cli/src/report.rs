//! Merging metric CSVs into plot-ready long format.
//!
//! Inputs are step CSVs (`step,epoch,loss,…`) or eval CSVs
//! (`step,win_rate,policy_len,ref_len`), recognised by their header. Every
//! numeric column other than `step` and `epoch` becomes a series, so an
//! input with `n` rows and `k` series contributes `n · k` tidy rows.

use anyhow::{bail, Context, Result};
use sampo_core::trainer::{EVAL_COLUMNS, STEP_COLUMNS};
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputKind {
    Steps,
    Evals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub label: String,
    pub kind: InputKind,
    pub series: Vec<String>,
    /// `(step, values aligned with series)`.
    pub rows: Vec<(u64, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub run_label: String,
    pub step: u64,
    pub series: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub run_label: String,
    pub final_step: Option<u64>,
    pub final_delta: Option<f64>,
    pub final_win_rate: Option<f64>,
    pub final_policy_len: Option<f64>,
}

/// `LABEL=PATH`, or a bare path labelled by its parent directory (falling
/// back to the file stem).
pub fn parse_input(arg: &str) -> (String, &Path) {
    if let Some((label, path)) = arg.split_once('=') {
        if !label.is_empty() && !path.is_empty() {
            return (label.to_string(), Path::new(path));
        }
    }
    let path = Path::new(arg);
    let label = path
        .parent()
        .and_then(|p| p.file_name())
        .or_else(|| path.file_stem())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| arg.to_string());
    (label, path)
}

pub fn read_table<R: Read>(label: &str, input: R) -> Result<MetricsTable> {
    let mut rdr = csv::Reader::from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let kind = if header == STEP_COLUMNS {
        InputKind::Steps
    } else if header == EVAL_COLUMNS {
        InputKind::Evals
    } else {
        bail!("unrecognised header: {}", header.join(","));
    };
    let skip = |c: &str| c == "step" || c == "epoch";
    let series: Vec<String> = header.iter().filter(|c| !skip(c)).cloned().collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.with_context(|| format!("row {}", i + 1))?;
        if rec.len() != header.len() {
            bail!("row {} has {} fields, expected {}", i + 1, rec.len(), header.len());
        }
        let step: u64 = rec[0]
            .parse()
            .with_context(|| format!("row {}: bad step `{}`", i + 1, &rec[0]))?;
        let mut values = Vec::with_capacity(series.len());
        for (col, field) in header.iter().zip(rec.iter()) {
            if skip(col) {
                continue;
            }
            let v: f64 = field
                .parse()
                .with_context(|| format!("row {}: bad {col} `{field}`", i + 1))?;
            values.push(v);
        }
        rows.push((step, values));
    }
    Ok(MetricsTable {
        label: label.to_string(),
        kind,
        series,
        rows,
    })
}

pub fn load_table(arg: &str) -> Result<MetricsTable> {
    let (label, path) = parse_input(arg);
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_table(&label, file).with_context(|| format!("reading {}", path.display()))
}

pub fn tidy(tables: &[MetricsTable]) -> Vec<TidyRow> {
    let mut out = Vec::new();
    for t in tables {
        for (step, values) in &t.rows {
            for (name, &value) in t.series.iter().zip(values) {
                out.push(TidyRow {
                    run_label: t.label.clone(),
                    step: *step,
                    series: name.clone(),
                    value,
                });
            }
        }
    }
    out
}

/// Last-row values per run label, in first-seen label order.
pub fn summarize(tables: &[MetricsTable]) -> Vec<SummaryRow> {
    let mut order: Vec<String> = Vec::new();
    let mut rows: BTreeMap<String, SummaryRow> = BTreeMap::new();
    for t in tables {
        let row = rows.entry(t.label.clone()).or_insert_with(|| {
            order.push(t.label.clone());
            SummaryRow {
                run_label: t.label.clone(),
                final_step: None,
                final_delta: None,
                final_win_rate: None,
                final_policy_len: None,
            }
        });
        let Some((step, values)) = t.rows.last() else {
            continue;
        };
        let col = |name: &str| t.series.iter().position(|s| s == name).map(|i| values[i]);
        match t.kind {
            InputKind::Steps => {
                row.final_step = Some(*step);
                row.final_delta = col("delta_mean");
            }
            InputKind::Evals => {
                row.final_win_rate = col("win_rate");
                row.final_policy_len = col("policy_len");
            }
        }
    }
    order.into_iter().map(|l| rows.remove(&l).expect("label recorded")).collect()
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub const TIDY_COLUMNS: [&str; 4] = ["run_label", "step", "series", "value"];
pub const SUMMARY_COLUMNS: [&str; 5] = [
    "run_label",
    "final_step",
    "final_delta",
    "final_win_rate",
    "final_policy_len",
];
