//! Config-driven experiment runner: dataset generation, stage training into
//! a run directory, report emission, and cross-run comparison.
//!
//! Exit codes of the binary: 0 success, 2 configuration, 3 protocol,
//! 4 integrity or file format, 5 I/O, 6 numeric or parameter errors.

mod commands;
mod config;

use sha2::{Digest, Sha256};

pub use commands::{
    analyze, compare, gen_data, load_run, read_manifest, run, run_config, CheckpointRecord, CompareRow,
    Comparison, RunManifest, Summary, Verbosity, ANALYSIS_DIR, CONFIG_FILE, DATASET_FILE, MANIFEST_FILE,
};
pub use config::{AlgorithmConfig, ExperimentConfig, ScheduleConfig, SplitConfig};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "CILAB_OUTPUT_ROOT";

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}
