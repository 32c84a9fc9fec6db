//! Experiment orchestration: datasets, training, evaluation, sweeps and reports.

pub mod data;
pub mod eval;
pub mod report;
pub mod sweep;
pub mod train;

pub use data::{build_dataset, derive_seed, write_dataset, write_noisy, Dataset, Pair, Split};
pub use eval::{evaluate, evaluate_network, evaluate_pairs};
pub use report::{report, write_panels, ReportOutcome};
pub use sweep::{expand_sweep, run_cell, run_cells, run_sweep, sweep_dir, SweepAxis, SweepCell, SweepOutcome};
pub use train::{load_network, loss_net_digest, train, train_network, LogRow, TrainOutcome};
