//! Configurable training runs: config parsing, the seeded train/eval loop,
//! metrics files, sweeps and the gradient-check suite.

pub mod config;
pub mod gradcheck;
pub mod metrics;
pub mod runner;
pub mod sweep;

pub use config::{parse_config, parse_config_str, DataSource, ExperimentConfig, NoiseSetting};
pub use gradcheck::{run_grad_check_suite, GradCheckReport};
pub use metrics::{delta_h, emit_jsonl, emit_metrics, metrics_csv, EpochRecord};
pub use runner::{prepare_data, run_experiment, train_on, PreparedData, TrainedRun};
pub use sweep::{run_seeds, sweep_lambdas, sweep_noise_rates, SweepPoint};
