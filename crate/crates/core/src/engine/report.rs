//! Speedup and accuracy per halt value and length bucket.
//!
//! Report columns, in order:
//!
//! ```text
//! tau              halt value; empty when exit heads are off
//! bucket           all | short | middle | long
//! count            examples in the bucket
//! mean_gflops      mean 2·MACs/1e9 actually performed, exit heads included
//! baseline_gflops  mean of the same for full-depth, full-width inference
//! speedup          baseline_gflops / mean_gflops
//! accuracy         fraction of correct predictions
//! mean_exit_layer  mean layer at which inference stopped
//! mean_aux_ops     mean elementwise operations (not part of GFLOPs)
//! note             overhead_only when speedup < 1, empty for empty buckets
//! ```
//!
//! Empty buckets produce a row with count 0 and zeros elsewhere.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::LabeledExample;
use crate::encoder::{Model, CLS_ID};
use crate::engine::flops::macs_to_gflops;
use crate::engine::infer::{mp_infer, ExitPolicy, LayerTrace};
use crate::error::{Error, Result};
use crate::pruning::PruningState;
use crate::scalar::Scalar;

pub const CSV_COLUMNS: [&str; 10] = [
    "tau",
    "bucket",
    "count",
    "mean_gflops",
    "baseline_gflops",
    "speedup",
    "accuracy",
    "mean_exit_layer",
    "mean_aux_ops",
    "note",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LengthBucket {
    /// 1 to 34 tokens (and the empty sequence).
    Short,
    /// 35 to 70 tokens.
    Middle,
    /// More than 70 tokens.
    Long,
}

impl LengthBucket {
    pub const ALL: [LengthBucket; 3] = [LengthBucket::Short, LengthBucket::Middle, LengthBucket::Long];

    pub fn label(self) -> &'static str {
        match self {
            LengthBucket::Short => "short",
            LengthBucket::Middle => "middle",
            LengthBucket::Long => "long",
        }
    }
}

impl fmt::Display for LengthBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Bucket of a sequence of `n` input tokens, `[CLS]` not counted.
pub fn bucket_of(n: usize) -> LengthBucket {
    match n {
        0..=34 => LengthBucket::Short,
        35..=70 => LengthBucket::Middle,
        _ => LengthBucket::Long,
    }
}

/// Input length as bucketed: a leading `[CLS]` id is not counted.
pub fn input_length(ids: &[u32]) -> usize {
    match ids.first() {
        Some(&first) if first == CLS_ID => ids.len() - 1,
        _ => ids.len(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub tau: Option<f64>,
    /// `None` for the row covering every example.
    pub bucket: Option<LengthBucket>,
    pub count: usize,
    pub mean_gflops: f64,
    pub baseline_gflops: f64,
    pub speedup: f64,
    pub accuracy: f64,
    pub mean_exit_layer: f64,
    pub mean_aux_ops: f64,
    pub note: String,
}

/// Per-example record of one inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    pub index: usize,
    pub tau: Option<f64>,
    pub length: usize,
    pub bucket: LengthBucket,
    pub label: usize,
    pub prediction: usize,
    pub exit_layer: usize,
    pub macs: u64,
    pub aux_ops: u64,
    pub baseline_macs: u64,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpeedupReport {
    pub rows: Vec<ReportRow>,
    pub traces: Vec<ExampleTrace>,
}

impl SpeedupReport {
    /// Row for `(tau, bucket)`; `bucket = None` selects the overall row.
    pub fn row(&self, tau: Option<f64>, bucket: Option<LengthBucket>) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.tau == tau && r.bucket == bucket)
    }
}

fn summarize(tau: Option<f64>, bucket: Option<LengthBucket>, traces: &[&ExampleTrace]) -> ReportRow {
    let count = traces.len();
    if count == 0 {
        return ReportRow {
            tau,
            bucket,
            count,
            mean_gflops: 0.0,
            baseline_gflops: 0.0,
            speedup: 0.0,
            accuracy: 0.0,
            mean_exit_layer: 0.0,
            mean_aux_ops: 0.0,
            note: String::new(),
        };
    }
    let c = count as f64;
    let macs: u64 = traces.iter().map(|t| t.macs).sum();
    let base: u64 = traces.iter().map(|t| t.baseline_macs).sum();
    let speedup = base as f64 / macs as f64;
    ReportRow {
        tau,
        bucket,
        count,
        mean_gflops: macs_to_gflops(macs) / c,
        baseline_gflops: macs_to_gflops(base) / c,
        speedup,
        accuracy: traces.iter().filter(|t| t.prediction == t.label).count() as f64 / c,
        mean_exit_layer: traces.iter().map(|t| t.exit_layer as f64).sum::<f64>() / c,
        mean_aux_ops: traces.iter().map(|t| t.aux_ops as f64).sum::<f64>() / c,
        note: if speedup < 1.0 { "overhead_only".into() } else { String::new() },
    }
}

/// Runs every example at every halt value and aggregates per bucket.
///
/// With `exits = false` the grid is ignored and a single sweep with exit
/// heads off is reported under an empty `tau`.
pub fn speedup_report<T: Scalar>(
    model: &Model<T>,
    data: &[LabeledExample],
    pruning: &PruningState<T>,
    tau_grid: &[T],
    exits: bool,
) -> Result<SpeedupReport> {
    if data.is_empty() {
        return Err(Error::Input("speedup report needs at least one example".into()));
    }
    let policies: Vec<(Option<f64>, ExitPolicy<T>)> = if exits {
        if tau_grid.is_empty() {
            return Err(Error::Config("empty halt-value grid".into()));
        }
        tau_grid.iter().map(|&t| (Some(t.as_f64()), ExitPolicy::Threshold(t))).collect()
    } else {
        vec![(None, ExitPolicy::Disabled)]
    };

    let mut report = SpeedupReport::default();
    for (tau, policy) in policies {
        let traces = data
            .par_iter()
            .enumerate()
            .map(|(index, ex)| {
                let r = mp_infer(model, &ex.ids, pruning, policy)?;
                let length = input_length(&ex.ids);
                let actual = r.ledger.actual();
                Ok(ExampleTrace {
                    index,
                    tau,
                    length,
                    bucket: bucket_of(length),
                    label: ex.label,
                    prediction: r.prediction,
                    exit_layer: r.ledger.exit_layer,
                    macs: actual.macs,
                    aux_ops: actual.aux,
                    baseline_macs: r.ledger.baseline.macs,
                    layers: r.trace,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let all: Vec<&ExampleTrace> = traces.iter().collect();
        report.rows.push(summarize(tau, None, &all));
        for b in LengthBucket::ALL {
            let part: Vec<&ExampleTrace> = traces.iter().filter(|t| t.bucket == b).collect();
            report.rows.push(summarize(tau, Some(b), &part));
        }
        report.traces.extend(traces);
    }
    Ok(report)
}

/// Comma-separated rows under a header; the first line is a `#` comment
/// stating the GFLOPs convention.
pub fn write_csv<W: Write>(rows: &[ReportRow], mut out: W) -> Result<()> {
    writeln!(out, "# gflops = 2 * multiply-accumulates / 1e9 per example; exit-head work included")?;
    writeln!(out, "{}", CSV_COLUMNS.join(","))?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{:.9},{:.9},{:.6},{:.6},{:.6},{:.3},{}",
            r.tau.map(|t| format!("{t}")).unwrap_or_default(),
            r.bucket.map_or("all", LengthBucket::label),
            r.count,
            r.mean_gflops,
            r.baseline_gflops,
            r.speedup,
            r.accuracy,
            r.mean_exit_layer,
            r.mean_aux_ops,
            r.note
        )?;
    }
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<W: Write, S: Serialize>(items: &[S], mut out: W) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;

    #[test]
    fn bucket_edges() {
        assert_eq!(bucket_of(1), LengthBucket::Short);
        assert_eq!(bucket_of(34), LengthBucket::Short);
        assert_eq!(bucket_of(35), LengthBucket::Middle);
        assert_eq!(bucket_of(70), LengthBucket::Middle);
        assert_eq!(bucket_of(71), LengthBucket::Long);
        assert_eq!(input_length(&[0, 4, 5]), 2);
        assert_eq!(input_length(&[4, 5]), 2);
    }

    fn data() -> Vec<LabeledExample> {
        (0..12)
            .map(|i| LabeledExample { ids: (0..(3 + 7 * i)).map(|j| 1 + (j * 5 + i) as u32 % 28).collect(), label: i as usize % 3 })
            .collect()
    }

    fn model() -> Model<f64> {
        let mut cfg = ModelConfig::new(3, 8, 2, 16, 3, 30, 100);
        cfg.init_std = 0.3;
        Model::new(cfg, 2).unwrap()
    }

    #[test]
    fn rows_per_tau_and_bucket() {
        let m = model();
        let r = speedup_report(&m, &data(), &PruningState::disabled(3), &[0.1, 0.5, 0.8], true).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert_eq!(r.rows.iter().filter(|r| r.bucket.is_none()).count(), 3);
        assert_eq!(r.traces.len(), 36);
        for row in r.rows.iter().filter(|r| r.bucket.is_none()) {
            assert_eq!(row.count, 12);
        }
        let long = r.row(Some(0.5), Some(LengthBucket::Long)).unwrap();
        assert_eq!(long.count, 2);
    }

    #[test]
    fn overhead_only_is_flagged() {
        let m = model();
        let r = speedup_report(&m, &data(), &PruningState::disabled(3), &[0.0], true).unwrap();
        let all = r.row(Some(0.0), None).unwrap();
        assert!(all.speedup < 1.0);
        assert_eq!(all.note, "overhead_only");
    }

    #[test]
    fn empty_bucket_row() {
        let m = model();
        let short: Vec<_> = data().into_iter().take(2).collect();
        let r = speedup_report(&m, &short, &PruningState::disabled(3), &[], false).unwrap();
        let long = r.row(None, Some(LengthBucket::Long)).unwrap();
        assert_eq!(long.count, 0);
        assert_eq!(long.speedup, 0.0);
        assert_eq!(r.row(None, None).unwrap().speedup, 1.0);
        assert!(speedup_report(&m, &[], &PruningState::disabled(3), &[0.5], true).is_err());
    }

    #[test]
    fn csv_layout() {
        let m = model();
        let r = speedup_report(&m, &data(), &PruningState::disabled(3), &[0.5], true).unwrap();
        let mut buf = Vec::new();
        write_csv(&r.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with('#'));
        assert_eq!(lines[1], CSV_COLUMNS.join(","));
        assert_eq!(lines.len(), 6);
        assert!(lines[2].starts_with("0.5,all,12,"));
        let mut buf = Vec::new();
        write_jsonl(&r.traces, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 12);
    }
}
