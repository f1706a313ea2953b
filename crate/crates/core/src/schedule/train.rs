use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::recipe::{Recipe, StageKind, StagePlan, TrainConfig};
use crate::data::{batches, derive_seed, evaluate, Dataset, EvalMetrics, Features, Split, TokenId};
use crate::error::{Error, Result};
use crate::losses::{objective, LossParts};
use crate::model::{ModelConfig, MultimodalModel, SequenceInput, VisualEncoder};
use crate::tensor::{Adam, GroupKind, Scalar, Tape};

/// Data shared by every stage of a run.
#[derive(Clone, Copy)]
pub struct TrainContext<'a, S: Scalar = f64> {
    pub data: &'a Dataset,
    pub features: &'a Features<S>,
    pub train: &'a TrainConfig,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub recipe: String,
    pub seed: u64,
    pub stage: StageKind,
    /// Zero-based position of the stage in its recipe.
    pub stage_index: usize,
    /// One-based.
    pub epoch: usize,
    pub l_reg: f64,
    pub l_res: f64,
    pub l_vis: f64,
    pub l_prompt: f64,
    pub l_rel: f64,
    pub total: f64,
    pub eval_accuracy: Option<f64>,
    pub eval_ce: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: StageKind,
    pub epochs: usize,
    pub steps: usize,
    /// Sample-weighted means over the last epoch.
    pub final_parts: LossParts,
    pub final_total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub recipe: String,
    pub seed: u64,
    pub stages: Vec<StageSummary>,
    pub eval: EvalMetrics,
    /// Stage index the run was resumed at, when it did not start fresh.
    pub resumed_at: Option<usize>,
    pub checkpoints: Vec<PathBuf>,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    /// The record with its timing removed; two runs of the same
    /// configuration and seed agree on this exactly.
    pub fn outcome(&self) -> RunRecord {
        RunRecord {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Position of an optimizer step within a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepInfo {
    pub stage_index: usize,
    pub epoch: usize,
    /// One-based count of steps taken so far in the stage.
    pub step: usize,
}

pub type EpochHook<'a> = &'a mut dyn FnMut(&EpochRecord) -> Result<()>;
pub type StepHook<'a, S> =
    &'a mut dyn FnMut(StepInfo, &LossParts, &MultimodalModel<S>) -> Result<()>;

/// Sinks for the by-products of a run.
pub struct RunOutputs<'a, S: Scalar = f64> {
    /// Stage checkpoints are written here when set.
    pub checkpoint_dir: Option<&'a Path>,
    /// Receives every epoch record as it is produced.
    pub on_epoch: Option<EpochHook<'a>>,
    /// Called after every optimizer step with the updated student.
    pub on_step: Option<StepHook<'a, S>>,
}

impl<S: Scalar> Default for RunOutputs<'_, S> {
    fn default() -> Self {
        RunOutputs {
            checkpoint_dir: None,
            on_epoch: None,
            on_step: None,
        }
    }
}

/// Appends records to `w` as line-delimited JSON.
pub fn jsonl_sink<W: Write>(mut w: W) -> impl FnMut(&EpochRecord) -> Result<()> {
    move |r| {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }
}

fn check_teacher<S: Scalar>(
    student: &MultimodalModel<S>,
    teacher: &MultimodalModel<S>,
) -> Result<()> {
    if teacher.config().vocab_size != student.config().vocab_size {
        return Err(Error::Config(
            "teacher and student vocabularies differ".into(),
        ));
    }
    if !Arc::ptr_eq(teacher.encoder(), student.encoder())
        && !teacher
            .encoder()
            .params()
            .bit_eq(student.encoder().params())
    {
        return Err(Error::Config(
            "teacher and student must share one visual encoder".into(),
        ));
    }
    Ok(())
}

/// Trains `student` through one stage and returns its epoch records.
///
/// The teacher is only consulted by distillation stages; it runs on its
/// own gradient-free tape and its outputs enter the student's tape as
/// constants.
#[allow(clippy::too_many_arguments)]
pub fn run_stage<S: Scalar>(
    student: &mut MultimodalModel<S>,
    teacher: Option<&MultimodalModel<S>>,
    plan: &StagePlan,
    ctx: TrainContext<'_, S>,
    recipe: &str,
    seed: u64,
    stage_index: usize,
    outputs: &mut RunOutputs<'_, S>,
) -> Result<(StageSummary, Vec<EpochRecord>)> {
    ctx.train.validate()?;
    plan.distill.validate()?;
    let distill = match (plan.kind.distill_stage(), teacher) {
        (Some(stage), Some(t)) => {
            check_teacher(student, t)?;
            Some((stage, t))
        }
        (Some(_), None) => {
            return Err(Error::Config(format!(
                "stage {} needs a teacher model",
                plan.kind
            )));
        }
        (None, _) => None,
    };

    for kind in [GroupKind::Projector, GroupKind::Llm] {
        student.set_trainable(kind, plan.freeze.trains(kind))?;
    }
    let mut optimizer = {
        let groups = student.trainable_groups_mut();
        let refs: Vec<&_> = groups.iter().map(|g| &**g).collect();
        Adam::new(ctx.train.optimizer, &refs)?
    };

    let samples = ctx.data.split(plan.split);
    let feats = ctx.features.split(plan.split);
    if feats.len() != samples.len() {
        return Err(Error::Contract(format!(
            "split {} lacks encoder features",
            plan.split
        )));
    }
    let stage_seed = derive_seed(seed, stage_index as u64);
    let mut records = Vec::with_capacity(plan.epochs);
    let mut steps = 0;
    let mut last = (LossParts::default(), 0.0);

    for epoch in 1..=plan.epochs {
        let order = batches(
            ctx.data,
            plan.split,
            ctx.train.batch_size,
            Some((stage_seed, epoch as u64)),
        )?;
        let mut sums = [0.0f64; 6];
        for batch in &order {
            let inputs: Vec<SequenceInput<'_, S>> = batch
                .indices
                .iter()
                .map(|&i| SequenceInput {
                    features: &feats[i],
                    prompt: &samples[i].prompt,
                    response: &samples[i].response,
                })
                .collect();
            let responses: Vec<&[TokenId]> = batch
                .indices
                .iter()
                .map(|&i| samples[i].response.as_slice())
                .collect();

            let mut tape = Tape::new();
            let out = student.forward_tape(&mut tape, &inputs, batch.pad_to)?;
            let imported = match distill {
                Some((_, t)) => {
                    let mut t_tape = Tape::no_grad();
                    let t_out = t.forward_tape(&mut t_tape, &inputs, out.seq_len)?;
                    Some(t_out.import(&t_tape, &mut tape))
                }
                None => None,
            };
            let stage = distill.map(|(s, _)| s).zip(imported.as_ref());
            let obj = objective(&mut tape, &out, &responses, stage, &plan.distill)?;
            let total = tape.item(obj.total).to_f64().unwrap_or(f64::NAN);
            if !total.is_finite() || !obj.parts.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss",
                });
            }
            tape.backward(obj.total)?;
            student.accumulate_grads(&tape)?;
            optimizer.step(&mut student.trainable_groups_mut())?;
            steps += 1;

            let w = batch.len() as f64;
            let p = &obj.parts;
            for (s, v) in sums
                .iter_mut()
                .zip([p.reg, p.res, p.vis, p.prompt, p.rel, total])
            {
                *s += w * v;
            }
            if let Some(f) = outputs.on_step.as_mut() {
                let info = StepInfo {
                    stage_index,
                    epoch,
                    step: steps,
                };
                f(info, &obj.parts, student)?;
            }
        }
        let n = samples.len() as f64;
        let mean = sums.map(|s| s / n);
        let parts = LossParts {
            reg: mean[0],
            res: mean[1],
            vis: mean[2],
            prompt: mean[3],
            rel: mean[4],
        };
        last = (parts, mean[5]);
        let eval = if ctx.train.eval_every_epoch {
            Some(evaluate(student, ctx.data, ctx.features, Split::Eval)?)
        } else {
            None
        };
        let record = EpochRecord {
            recipe: recipe.to_string(),
            seed,
            stage: plan.kind,
            stage_index,
            epoch,
            l_reg: parts.reg,
            l_res: parts.res,
            l_vis: parts.vis,
            l_prompt: parts.prompt,
            l_rel: parts.rel,
            total: mean[5],
            eval_accuracy: eval.map(|e| e.accuracy),
            eval_ce: eval.map(|e| e.ce),
        };
        if let Some(f) = outputs.on_epoch.as_mut() {
            f(&record)?;
        }
        records.push(record);
    }
    for kind in [GroupKind::Projector, GroupKind::Llm] {
        student.set_trainable(kind, false)?;
    }
    Ok((
        StageSummary {
            stage: plan.kind,
            epochs: plan.epochs,
            steps,
            final_parts: last.0,
            final_total: last.1,
        },
        records,
    ))
}

/// Seed of a fresh model's parameters for run seed `seed`.
pub fn init_seed(seed: u64) -> u64 {
    derive_seed(seed, u64::MAX)
}

pub fn checkpoint_path(
    dir: &Path,
    recipe: &str,
    seed: u64,
    stage_index: usize,
    kind: StageKind,
) -> PathBuf {
    dir.join(format!(
        "{recipe}-seed{seed}-stage{}-{kind}.ckpt",
        stage_index + 1
    ))
}

/// Runs `recipe` on a freshly initialised model of `config`.
#[allow(clippy::too_many_arguments)]
pub fn run_recipe<S: Scalar>(
    recipe: &Recipe,
    config: &ModelConfig,
    encoder: Arc<VisualEncoder<S>>,
    teacher: Option<&MultimodalModel<S>>,
    ctx: TrainContext<'_, S>,
    seed: u64,
    outputs: &mut RunOutputs<'_, S>,
) -> Result<(MultimodalModel<S>, RunRecord)> {
    let student = MultimodalModel::new(config, encoder, init_seed(seed))?;
    run_recipe_from(recipe, student, 0, teacher, ctx, seed, outputs)
}

/// Runs the stages of `recipe` from `first_stage` on, continuing from
/// `student`. Starting at a stage boundary with a model loaded from the
/// previous stage's checkpoint reproduces the uninterrupted run exactly.
pub fn run_recipe_from<S: Scalar>(
    recipe: &Recipe,
    mut student: MultimodalModel<S>,
    first_stage: usize,
    teacher: Option<&MultimodalModel<S>>,
    ctx: TrainContext<'_, S>,
    seed: u64,
    outputs: &mut RunOutputs<'_, S>,
) -> Result<(MultimodalModel<S>, RunRecord)> {
    let start = Instant::now();
    let label = recipe.label();
    if recipe.needs_teacher() && teacher.is_none() {
        return Err(Error::Config(format!(
            "recipe {label} distills from a teacher; train or load one first"
        )));
    }
    if first_stage > recipe.stages.len() {
        return Err(Error::Contract(format!(
            "recipe {label} has no stage {first_stage}"
        )));
    }
    let mut summaries = Vec::new();
    let mut checkpoints = Vec::new();
    for (k, plan) in recipe.stages.iter().enumerate().skip(first_stage) {
        let (summary, _) = run_stage(&mut student, teacher, plan, ctx, &label, seed, k, outputs)?;
        summaries.push(summary);
        if let Some(dir) = outputs.checkpoint_dir {
            let path = checkpoint_path(dir, &label, seed, k, plan.kind);
            student.save_path(&path)?;
            checkpoints.push(path);
        }
    }
    let eval = evaluate(&student, ctx.data, ctx.features, Split::Eval)?;
    if !(eval.accuracy.is_finite() && eval.ce.is_finite()) {
        return Err(Error::NonFinite { op: "evaluation" });
    }
    let record = RunRecord {
        recipe: label,
        seed,
        stages: summaries,
        eval,
        resumed_at: (first_stage > 0).then_some(first_stage),
        checkpoints,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    };
    Ok((student, record))
}

/// PT then SFT on ground truth alone.
pub fn train_teacher<S: Scalar>(
    config: &ModelConfig,
    encoder: Arc<VisualEncoder<S>>,
    ctx: TrainContext<'_, S>,
    seed: u64,
    outputs: &mut RunOutputs<'_, S>,
) -> Result<(MultimodalModel<S>, RunRecord)> {
    let recipe = Recipe::parse("PT-SFT", ctx.train, &Default::default())?;
    run_recipe(&recipe, config, encoder, None, ctx, seed, outputs)
}
