//! Stage definitions, recipe execution and the ablation runner.

mod ablation;
mod recipe;
mod train;

pub use ablation::{
    run_ablation, slug, variants, AblationAxis, AblationOutputs, AblationRow, AblationTable,
    CellEpochHook, Variant, FULL_RECIPE,
};
pub use recipe::{FreezePolicy, Recipe, StageKind, StagePlan, TrainConfig, RECIPE_SWEEP};
pub use train::{
    checkpoint_path, init_seed, jsonl_sink, run_recipe, run_recipe_from, run_stage, train_teacher,
    EpochHook, EpochRecord, RunOutputs, RunRecord, StageSummary, StepHook, StepInfo, TrainContext,
};
