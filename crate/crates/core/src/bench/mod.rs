//! Synthetic benchmarks, dataset ingestion and experiment drivers.

pub mod csvio;
pub mod experiment;
pub mod synth;

pub use csvio::{load_csv, write_csv};
pub use experiment::{
    run_ablation_grid, run_bound_sweep, run_experiment, run_seed, AblationTable, ExperimentConfig, ExperimentResult,
    RunResult, ABLATION_ROWS, DEFAULT_BOUND_GRID,
};
pub use synth::{gen_synthetic, split_sessions, SyntheticSpec};
