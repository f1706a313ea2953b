//! The run configuration file: TOML with top-level keys and one level of
//! sections. Unknown keys anywhere are errors.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmkd::data::DataConfig;
use mmkd::losses::{DistillConfig, Divergence, Reduction, StageWeights, TargetMask};
use mmkd::model::{EncoderConfig, ModelConfig, Role};
use mmkd::schedule::TrainConfig;
use mmkd::tensor::AdamConfig;
use serde::{Deserialize, Serialize};

/// Overrides `output_dir` when set.
pub const OUTPUT_DIR_ENV: &str = "MMKD_OUTPUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    /// Seed of teacher initialisation and shuffling.
    pub teacher_seed: u64,
    /// Student seeds; `run` uses the first unless given one, `ablate` uses all.
    pub seeds: Vec<u64>,
    /// Recipe `run` executes when none is given on the command line.
    pub recipe: String,
    /// Defaults to `<output_dir>/teacher/teacher.ckpt`.
    pub teacher_checkpoint: Option<PathBuf>,
    /// Defaults to `<output_dir>/teacher-small/teacher.ckpt`.
    pub teacher_small_checkpoint: Option<PathBuf>,
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub teacher: ModelSize,
    pub teacher_small: ModelSize,
    pub student: ModelSize,
    pub train: TrainSection,
    pub distill: DistillSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            output_dir: PathBuf::from("runs"),
            teacher_seed: 0,
            seeds: vec![1, 2, 3],
            recipe: "DPT-SFT-DFT".into(),
            teacher_checkpoint: None,
            teacher_small_checkpoint: None,
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            teacher: ModelSize::new(128, 4),
            teacher_small: ModelSize::new(64, 2),
            student: ModelSize::new(48, 2),
            train: TrainSection::default(),
            distill: DistillSection::default(),
        }
    }
}

/// Width and depth of one model's projector and language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSize {
    pub embed_dim: usize,
    pub layers: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Defaults to `embed_dim`.
    #[serde(default)]
    pub projector_hidden: Option<usize>,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_max_seq_len")]
    pub max_seq_len: usize,
}

fn default_heads() -> usize {
    4
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_max_seq_len() -> usize {
    32
}

impl ModelSize {
    pub fn new(embed_dim: usize, layers: usize) -> Self {
        ModelSize {
            embed_dim,
            layers,
            heads: default_heads(),
            projector_hidden: None,
            mlp_ratio: default_mlp_ratio(),
            max_seq_len: default_max_seq_len(),
        }
    }
}

/// Optimizer settings flattened into one section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub eval_every_epoch: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            lr: t.optimizer.lr,
            beta1: t.optimizer.beta1,
            beta2: t.optimizer.beta2,
            eps: t.optimizer.eps,
            batch_size: t.batch_size,
            pretrain_epochs: t.pretrain_epochs,
            finetune_epochs: t.finetune_epochs,
            eval_every_epoch: t.eval_every_epoch,
        }
    }
}

/// Distillation settings flattened into one section; targets are written
/// like `"response+visual"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillSection {
    pub divergence: String,
    pub temperature: f64,
    pub reduction: Reduction,
    pub dpt_alpha: f64,
    pub dpt_beta: f64,
    pub dpt_gamma: f64,
    pub dpt_targets: String,
    pub dft_alpha: f64,
    pub dft_beta: f64,
    pub dft_gamma: f64,
    pub dft_targets: String,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        DistillSection {
            divergence: d.divergence.to_string(),
            temperature: d.temperature,
            reduction: d.reduction,
            dpt_alpha: d.dpt.alpha,
            dpt_beta: d.dpt.beta,
            dpt_gamma: d.dpt.gamma,
            dpt_targets: d.dpt.targets.to_string(),
            dft_alpha: d.dft.alpha,
            dft_beta: d.dft.beta,
            dft_gamma: d.dft.gamma,
            dft_targets: d.dft.targets.to_string(),
        }
    }
}

impl DistillSection {
    pub fn to_config(&self) -> Result<DistillConfig> {
        let targets = |s: &str, key: &str| -> Result<TargetMask> {
            s.parse().with_context(|| format!("distill.{key}"))
        };
        let c = DistillConfig {
            dpt: StageWeights {
                alpha: self.dpt_alpha,
                beta: self.dpt_beta,
                gamma: self.dpt_gamma,
                targets: targets(&self.dpt_targets, "dpt_targets")?,
            },
            dft: StageWeights {
                alpha: self.dft_alpha,
                beta: self.dft_beta,
                gamma: self.dft_gamma,
                targets: targets(&self.dft_targets, "dft_targets")?,
            },
            divergence: self
                .divergence
                .parse::<Divergence>()
                .context("distill.divergence")?,
            temperature: self.temperature,
            reduction: self.reduction,
        };
        c.validate()?;
        Ok(c)
    }
}

impl RunConfig {
    /// Reads and validates `path`, then applies the output directory
    /// override from the environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))?;
        let mut config = Self::parse(&text)
            .with_context(|| format!("invalid config file {}", path.display()))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            config.output_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        if self.encoder.image_size != self.data.image_size {
            bail!(
                "encoder.image_size {} differs from data.image_size {}",
                self.encoder.image_size,
                self.data.image_size
            );
        }
        if self.seeds.is_empty() {
            bail!("seeds must list at least one seed");
        }
        mmkd::schedule::Recipe::parse_kinds(&self.recipe).context("recipe")?;
        for role in [Role::Teacher, Role::Student] {
            self.model_config(role, false, 1).validate()?;
        }
        self.model_config(Role::Teacher, true, 1).validate()?;
        self.train_config().validate()?;
        self.distill.to_config()?;
        Ok(())
    }

    pub fn model_config(&self, role: Role, small: bool, vocab_size: usize) -> ModelConfig {
        let size = match (role, small) {
            (Role::Student, _) => &self.student,
            (Role::Teacher, false) => &self.teacher,
            (Role::Teacher, true) => &self.teacher_small,
        };
        ModelConfig {
            role,
            encoder: self.encoder.clone(),
            embed_dim: size.embed_dim,
            projector_hidden: size.projector_hidden.unwrap_or(size.embed_dim),
            llm_layers: size.layers,
            llm_heads: size.heads,
            mlp_ratio: size.mlp_ratio,
            vocab_size,
            max_seq_len: size.max_seq_len,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            optimizer: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
            },
            batch_size: t.batch_size,
            pretrain_epochs: t.pretrain_epochs,
            finetune_epochs: t.finetune_epochs,
            eval_every_epoch: t.eval_every_epoch,
        }
    }

    pub fn teacher_path(&self, small: bool) -> PathBuf {
        let (explicit, dir) = if small {
            (&self.teacher_small_checkpoint, "teacher-small")
        } else {
            (&self.teacher_checkpoint, "teacher")
        };
        explicit
            .clone()
            .unwrap_or_else(|| self.output_dir.join(dir).join("teacher.ckpt"))
    }
}
