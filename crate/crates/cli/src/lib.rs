//! Config-driven driver for teacher training, student recipes, ablations
//! and checkpoint inspection.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_ablate, cmd_eval, cmd_inspect, cmd_run, cmd_train_teacher, run_dir, AblateOutcome,
    InspectReport, OutputDir, RunOutcome, Session, TeacherOutcome, CONFIG_ECHO, INCOMPLETE_MARKER,
    METRICS_FILE, RECORD_FILE, TABLE_JSON, TABLE_TEXT,
};
pub use config::{DistillSection, ModelSize, RunConfig, TrainSection, OUTPUT_DIR_ENV};
