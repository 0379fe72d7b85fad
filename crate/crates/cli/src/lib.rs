//! The `animeadapter` command line: dataset building, training, generation,
//! evaluation, ablations and checkpoint inspection.

mod args;
mod dataset;
mod exit;
mod run;

pub use args::{AblateArgs, BuildDatasetArgs, Cli, Command, EvaluateArgs, GenerateArgs, InspectArgs, TrainArgs};
pub use dataset::{build_dataset, load_eval_cases, load_training_samples, DatasetSummary};
pub use exit::{exit_code, UsageError, EXIT_BACKEND, EXIT_DATA, EXIT_USAGE};
pub use run::{ablate, evaluate, generate, inspect, run, train, AblationRow, TrainSummary};
