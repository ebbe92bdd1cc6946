//! Dataset files, the synthetic desk task and run configuration.

mod commands;
mod config;
mod dataset;
mod synth;

pub use commands::{
    arm_means, arms_csv, comparison_table, k_sweep, k_sweep_csv, k_values, load_or_generate, mmd_diag, run_arms,
    run_experiment, write_run, ArmResult,
};
pub use config::{Config, Preset, KEYS};
pub use dataset::{decode_pixel, Dataset};
pub use synth::{gen_synthetic, templates, SyntheticSpec};
