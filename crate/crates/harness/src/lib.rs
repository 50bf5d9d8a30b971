//! Experiment orchestration for few-step distillation runs: configuration,
//! seeded training and evaluation, ablation grids, diagnostics and the
//! `gdmd` command-line tool.

pub mod cli;
pub mod config;
pub mod diagnose;
pub mod error;
pub mod matrix;
pub mod preset;
pub mod run;

pub use config::{ExperimentConfig, InitConfig, MatrixAxes, TeacherMode};
pub use error::{HarnessError, Result};
pub use matrix::{run_ablation_matrix, MatrixResult};
pub use run::{run_experiment, RunManifest, RunStatus};
