//! File formats, run configuration and the pipeline commands behind the
//! `flowkin` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset_io;
pub mod ply;
pub mod rundir;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
