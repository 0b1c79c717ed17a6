//! Conditional inference, operation counting and speedup reports.

pub mod flops;
pub mod infer;
pub mod report;

pub use flops::{baseline_cost, block_cost, count_flops, macs_to_gflops, Component, FlopsLedger, LayerLedger, OpCount};
pub use infer::{mp_infer, pruned_equivalence_check, Equivalence, ExitPolicy, Inference, LayerTrace};
pub use report::{
    bucket_of, input_length, speedup_report, write_csv, write_jsonl, ExampleTrace, LengthBucket, ReportRow,
    SpeedupReport, CSV_COLUMNS,
};
