use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use mmkd::data::{evaluate, Dataset, EvalMetrics, Features, Split};
use mmkd::losses::DistillConfig;
use mmkd::model::{inspect, CheckpointInfo, MultimodalModel, Role, VisualEncoder};
use mmkd::schedule::{
    jsonl_sink, run_ablation, run_recipe, train_teacher, variants, AblationAxis, AblationOutputs,
    AblationTable, EpochRecord, Recipe, RunOutputs, RunRecord, TrainConfig, TrainContext,
};
use mmkd::tensor::GroupKind;
use serde::Serialize;

use crate::config::RunConfig;

/// Present in an output directory while its command is still running or
/// after it failed.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";
pub const CONFIG_ECHO: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const RECORD_FILE: &str = "record.json";

/// Everything derived from a config that every command needs.
pub struct Session {
    pub config: RunConfig,
    pub data: Dataset,
    pub encoder: Arc<VisualEncoder>,
    pub features: Features,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

impl Session {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let data = Dataset::generate(&config.data)?;
        let encoder = Arc::new(VisualEncoder::new(&config.encoder)?);
        let features = Features::build(&encoder, &data)?;
        Ok(Session {
            train: config.train_config(),
            distill: config.distill.to_config()?,
            config,
            data,
            encoder,
            features,
            verbose: false,
        })
    }

    pub fn ctx(&self) -> TrainContext<'_> {
        TrainContext {
            data: &self.data,
            features: &self.features,
            train: &self.train,
        }
    }

    fn vocab_size(&self) -> usize {
        self.data.vocab().len()
    }

    /// Loads the teacher checkpoint, or explains how to produce it.
    pub fn load_teacher(&self, small: bool) -> Result<MultimodalModel> {
        let path = self.config.teacher_path(small);
        if !path.exists() {
            let flag = if small { " --small" } else { "" };
            bail!(
                "no teacher checkpoint at {}; run `mmkd train-teacher{flag}` first or set \
                 teacher{}_checkpoint",
                path.display(),
                if small { "_small" } else { "" }
            );
        }
        let teacher = MultimodalModel::load_path(&path, Some(self.encoder.clone()))
            .with_context(|| format!("loading teacher {}", path.display()))?;
        if teacher.config().vocab_size != self.vocab_size() {
            bail!(
                "teacher {} has vocabulary {} but the data needs {}",
                path.display(),
                teacher.config().vocab_size,
                self.vocab_size()
            );
        }
        Ok(teacher)
    }

    fn progress(&self, prefix: &str, r: &EpochRecord) {
        if self.verbose {
            let eval = match (r.eval_accuracy, r.eval_ce) {
                (Some(a), Some(c)) => format!(" eval_acc={a:.4} eval_ce={c:.4}"),
                _ => String::new(),
            };
            eprintln!(
                "{prefix}{} seed {} {} epoch {}: total={:.4} reg={:.4}{eval}",
                r.recipe, r.seed, r.stage, r.epoch, r.total, r.l_reg
            );
        }
    }
}

/// An output directory marked incomplete until [`OutputDir::finish`].
pub struct OutputDir {
    pub path: PathBuf,
}

impl OutputDir {
    pub fn create(path: PathBuf, config: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&path)
            .with_context(|| format!("cannot create output directory {}", path.display()))?;
        fs::write(
            path.join(INCOMPLETE_MARKER),
            "this command did not finish; outputs here are partial\n",
        )?;
        fs::write(path.join(CONFIG_ECHO), config.to_toml())?;
        Ok(OutputDir { path })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    fn metrics(&self) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.file(METRICS_FILE))?))
    }

    fn write_json(&self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(self.file(name), text)?;
        Ok(())
    }

    pub fn finish(self) -> Result<PathBuf> {
        fs::remove_file(self.file(INCOMPLETE_MARKER))?;
        Ok(self.path)
    }
}

pub struct TeacherOutcome {
    pub dir: PathBuf,
    pub checkpoint: PathBuf,
    pub record: RunRecord,
}

/// Trains the teacher (or its small preset) and writes its checkpoint to
/// the configured teacher path.
pub fn cmd_train_teacher(session: &Session, small: bool) -> Result<TeacherOutcome> {
    let checkpoint = session.config.teacher_path(small);
    let dir = checkpoint
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let out = OutputDir::create(dir, &session.config)?;
    let model_config = session
        .config
        .model_config(Role::Teacher, small, session.vocab_size());
    let mut sink = jsonl_sink(out.metrics()?);
    let mut on_epoch = |r: &EpochRecord| {
        session.progress("teacher ", r);
        sink(r)
    };
    let mut outputs = RunOutputs {
        checkpoint_dir: Some(&out.path),
        on_epoch: Some(&mut on_epoch),
        on_step: None,
    };
    let (teacher, record) = train_teacher(
        &model_config,
        session.encoder.clone(),
        session.ctx(),
        session.config.teacher_seed,
        &mut outputs,
    )?;
    teacher.save_path(&checkpoint)?;
    out.write_json(RECORD_FILE, &record)?;
    Ok(TeacherOutcome {
        dir: out.finish()?,
        checkpoint,
        record,
    })
}

pub struct RunOutcome {
    pub dir: PathBuf,
    pub record: RunRecord,
}

pub fn run_dir(config: &RunConfig, recipe: &str, seed: u64) -> PathBuf {
    config
        .output_dir
        .join("runs")
        .join(format!("{recipe}-seed{seed}"))
}

/// Trains a fresh student through `recipe`.
pub fn cmd_run(session: &Session, recipe: &str, seed: u64) -> Result<RunOutcome> {
    let recipe = Recipe::parse(recipe, &session.train, &session.distill)?;
    let teacher = if recipe.needs_teacher() {
        Some(session.load_teacher(false).with_context(|| {
            format!("recipe {recipe} has distillation stages and needs a trained teacher")
        })?)
    } else {
        None
    };
    let label = recipe.label();
    let out = OutputDir::create(run_dir(&session.config, &label, seed), &session.config)?;
    let model_config = session
        .config
        .model_config(Role::Student, false, session.vocab_size());
    let mut sink = jsonl_sink(out.metrics()?);
    let mut on_epoch = |r: &EpochRecord| {
        session.progress("", r);
        sink(r)
    };
    let mut outputs = RunOutputs {
        checkpoint_dir: Some(&out.path),
        on_epoch: Some(&mut on_epoch),
        on_step: None,
    };
    let (_, record) = run_recipe(
        &recipe,
        &model_config,
        session.encoder.clone(),
        teacher.as_ref(),
        session.ctx(),
        seed,
        &mut outputs,
    )?;
    out.write_json(RECORD_FILE, &record)?;
    Ok(RunOutcome {
        dir: out.finish()?,
        record,
    })
}

pub struct AblateOutcome {
    pub dir: PathBuf,
    pub table: AblationTable,
}

pub const TABLE_TEXT: &str = "table.txt";
pub const TABLE_JSON: &str = "table.json";

#[derive(Serialize)]
struct CellRecord<'a> {
    cell: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Runs every cell of `axis` for every configured seed.
pub fn cmd_ablate(session: &Session, axis: AblationAxis) -> Result<AblateOutcome> {
    let mut teachers = vec![session.load_teacher(false)?];
    let mut names = vec!["teacher-large".to_string()];
    if axis == AblationAxis::TeacherSizes {
        teachers.push(session.load_teacher(true)?);
        names.push("teacher-small".to_string());
    }
    let cells = variants(axis, &session.train, &session.distill, &names)?;
    let out = OutputDir::create(
        session
            .config
            .output_dir
            .join("ablations")
            .join(axis.as_str()),
        &session.config,
    )?;
    let cell_root = out.file("cells");
    let mut metrics = out.metrics()?;
    let mut on_epoch = |cell: &str, r: &EpochRecord| {
        session.progress(&format!("[{cell}] "), r);
        serde_json::to_writer(&mut metrics, &CellRecord { cell, record: r })?;
        metrics.write_all(b"\n")?;
        metrics.flush()?;
        Ok(())
    };
    let mut outputs = AblationOutputs {
        checkpoint_root: Some(&cell_root),
        on_epoch: Some(&mut on_epoch),
    };
    let refs: Vec<&MultimodalModel> = teachers.iter().collect();
    let model_config = session
        .config
        .model_config(Role::Student, false, session.vocab_size());
    let table = run_ablation(
        axis,
        &cells,
        &model_config,
        &session.encoder,
        &refs,
        session.ctx(),
        &session.config.seeds,
        &mut outputs,
    )?;
    fs::write(out.file(TABLE_TEXT), table.render())?;
    out.write_json(TABLE_JSON, &table)?;
    Ok(AblateOutcome {
        dir: out.finish()?,
        table,
    })
}

/// Held-out metrics of a checkpoint on the data described by `config`.
pub fn cmd_eval(config: &RunConfig, checkpoint: &Path) -> Result<EvalMetrics> {
    let model: MultimodalModel = MultimodalModel::load_path(checkpoint, None)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let data = Dataset::generate(&config.data)?;
    if model.config().vocab_size != data.vocab().len() {
        bail!(
            "checkpoint vocabulary {} does not match the data's {}",
            model.config().vocab_size,
            data.vocab().len()
        );
    }
    let features = Features::build(model.encoder(), &data)?;
    Ok(evaluate(&model, &data, &features, Split::Eval)?)
}

/// Header, configuration and parameter counts of a checkpoint file.
#[derive(Clone, Debug, Serialize)]
pub struct InspectReport {
    pub info: CheckpointInfo,
    pub group_scalars: Vec<(GroupKind, usize)>,
}

impl InspectReport {
    pub fn scalars(&self, kind: GroupKind) -> usize {
        self.group_scalars
            .iter()
            .find(|(k, _)| *k == kind)
            .map_or(0, |(_, n)| *n)
    }
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "format version: {}", self.info.version)?;
        writeln!(f, "dtype: {}", self.info.dtype)?;
        writeln!(f, "tensors: {}", self.info.tensors.len())?;
        writeln!(f, "parameters:")?;
        for (kind, n) in &self.group_scalars {
            writeln!(f, "  {kind}: {n}")?;
        }
        writeln!(f, "  total: {}", self.info.num_scalars())?;
        let config = serde_json::to_string_pretty(&self.info.config).map_err(|_| fmt::Error)?;
        writeln!(f, "config: {config}")
    }
}

pub fn cmd_inspect(checkpoint: &Path) -> Result<InspectReport> {
    let file = File::open(checkpoint)
        .with_context(|| format!("cannot open checkpoint {}", checkpoint.display()))?;
    let info = inspect(BufReader::new(file))
        .with_context(|| format!("reading checkpoint {}", checkpoint.display()))?;
    let group_scalars = GroupKind::ALL
        .into_iter()
        .map(|kind| {
            let prefix = format!("{}/", kind.as_str());
            let n = info
                .tensors
                .iter()
                .filter(|t| t.name.starts_with(&prefix))
                .map(|t| t.shape.iter().product::<usize>())
                .sum();
            (kind, n)
        })
        .collect();
    Ok(InspectReport {
        info,
        group_scalars,
    })
}
