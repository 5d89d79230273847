//! End-to-end runs: a TOML [`RunConfig`] drives seven stages that each read
//! the previous stages' files from an output directory and write their own.

mod config;
mod stages;

pub use config::{
    AlignmentConfig, ArchConfig, CorpusConfig, DissociationConfig, RunConfig, SweepConfig,
    TrainingConfig,
};
pub use stages::{
    corpus_gen, dissociate, extract, fit_mappers, read_csv, report, run_all, run_sweep, train_pair,
    AlphaRow, ControlRow, CorrelationRow, PeakRow, RunLayout, Splits, SweepRow,
};
