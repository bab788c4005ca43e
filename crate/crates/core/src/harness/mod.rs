//! Configuration, checkpoints, curves, and run orchestration behind the CLI.

pub mod checkpoint;
pub mod config;
pub mod curves;
pub mod run;
pub mod verify;

pub use checkpoint::{agent_checkpoint, agent_from_checkpoint, Checkpoint, Tensor, TrainingMeta};
pub use config::{Preset, RunConfig};
pub use curves::{aggregate, read_seed_curve, write_curves, write_seed_curve, CurveRow};
pub use run::{export_curves, run_dir, run_eval, run_plan, run_train, RunSummary};
