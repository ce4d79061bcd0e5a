//! Instance files, generators, checkpoints and run reports.

pub mod checkpoint;
pub mod generate;
pub mod report;
pub mod tsplib;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError};
pub use generate::{generate_instances, generate_instances_with, GeneratorParams, Pattern};
pub use report::{RunReport, RunRow};
pub use tsplib::{parse_tsplib, read_instance, serialize_tsplib, write_instance, TsplibError};
