//! Synthetic colored-grid question answering.
//!
//! Pretrain samples caption a whole grid row-major; finetune and eval
//! samples ask for the color of one cell.

mod batch;
mod dataset;
mod eval;
mod features;
mod grid;
mod vocab;

pub use batch::{batches, derive_seed, Batch};
pub use dataset::{
    prompt_for, rule_response, DataConfig, Dataset, Sample, Split, DATASET_FORMAT, DATASET_VERSION,
};
pub use eval::{evaluate, exact_match_eval, exact_match_with, EvalMetrics};
pub use features::Features;
pub use grid::{GridImage, PaletteColor, PALETTE};
pub use vocab::{TokenId, Vocab, BOS, COLOR, DESCRIBE, EOS, PAD};
