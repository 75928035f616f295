//! Synthetic navigation benchmark: scene generation, run configuration,
//! training runs and sweeps.

pub mod config;
pub mod dataset;
pub mod gradcheck;
pub mod runner;
pub mod sweep;

pub use config::{load_config, AblationSetting, ConfigEcho, MemberConfig, Mode, RunConfig};
pub use dataset::{gen_dataset, load_dataset, write_dataset, DataConfig, Dataset, NavVocab, Scenario};
pub use runner::{run, run_gcl, run_sft, RunReport};
pub use sweep::{ablate_weights, sweep_lr_ratio, sweep_temperature, SweepOutcome, SweepRow};
