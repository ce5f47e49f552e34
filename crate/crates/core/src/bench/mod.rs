//! Experiment driver: run configs, the training loop, the outer weight
//! search and the comparison table.

mod config;
pub mod fixtures;
mod meta;
mod table;
mod train;

pub use config::{ArchOverrides, BenchOverrides, MetaConfig, RunConfig, DEFAULT_BATCH_SIZE};
pub use train::{
    curves_csv, evaluate, train, train_on, write_run, EpochRecord, RunResult, Session, CURVES_HEADER,
    DECODE_THRESHOLD, EVAL_CHUNK, NMS_IOU,
};
pub use table::{run_benchmark, summarize, BenchConfig, BenchRow, BenchTable, SummaryRow, ROWS_HEADER, TABLE_HEADER};
pub use meta::{meta_curves_csv, run_meta, run_meta_on, MetaEvaluator, MetaResult, META_CURVES_HEADER};
