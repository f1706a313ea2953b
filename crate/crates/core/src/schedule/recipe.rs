use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::{Error, Result};
use crate::losses::{DistillConfig, DistillStage};
use crate::tensor::{AdamConfig, GroupKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "PT")]
    Pt,
    #[serde(rename = "DPT")]
    Dpt,
    #[serde(rename = "SFT")]
    Sft,
    #[serde(rename = "DFT")]
    Dft,
}

impl StageKind {
    pub const ALL: [StageKind; 4] = [
        StageKind::Pt,
        StageKind::Dpt,
        StageKind::Sft,
        StageKind::Dft,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Pt => "PT",
            StageKind::Dpt => "DPT",
            StageKind::Sft => "SFT",
            StageKind::Dft => "DFT",
        }
    }

    /// PT and DPT align the projector on captions.
    pub fn is_pretraining(self) -> bool {
        matches!(self, StageKind::Pt | StageKind::Dpt)
    }

    pub fn needs_teacher(self) -> bool {
        self.distill_stage().is_some()
    }

    pub fn distill_stage(self) -> Option<DistillStage> {
        match self {
            StageKind::Dpt => Some(DistillStage::Pretrain),
            StageKind::Dft => Some(DistillStage::Finetune),
            StageKind::Pt | StageKind::Sft => None,
        }
    }

    pub fn split(self) -> Split {
        if self.is_pretraining() {
            Split::Pretrain
        } else {
            Split::Finetune
        }
    }

    pub fn freeze_policy(self) -> FreezePolicy {
        if self.is_pretraining() {
            FreezePolicy::PROJECTOR
        } else {
            FreezePolicy::PROJECTOR_LLM
        }
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Parse(format!("unknown stage {s:?}; expected PT, DPT, SFT or DFT"))
            })
    }
}

/// The groups an optimizer updates during a stage. The visual encoder is
/// never among them.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub projector: bool,
    pub llm: bool,
}

impl FreezePolicy {
    pub const PROJECTOR: FreezePolicy = FreezePolicy {
        projector: true,
        llm: false,
    };
    pub const PROJECTOR_LLM: FreezePolicy = FreezePolicy {
        projector: true,
        llm: true,
    };

    pub fn trains(self, kind: GroupKind) -> bool {
        match kind {
            GroupKind::VisualEncoder => false,
            GroupKind::Projector => self.projector,
            GroupKind::Llm => self.llm,
        }
    }

    pub fn trainable_groups(self) -> Vec<GroupKind> {
        GroupKind::ALL
            .into_iter()
            .filter(|&k| self.trains(k))
            .collect()
    }
}

/// Optimisation settings shared by every stage of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    /// Epochs of a PT or DPT stage.
    pub pretrain_epochs: usize,
    /// Epochs of an SFT or DFT stage.
    pub finetune_epochs: usize,
    /// Evaluate on the held-out split after every epoch rather than only
    /// at the end of the run.
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            batch_size: 16,
            pretrain_epochs: 3,
            finetune_epochs: 5,
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn epochs(&self, kind: StageKind) -> usize {
        if kind.is_pretraining() {
            self.pretrain_epochs
        } else {
            self.finetune_epochs
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StagePlan {
    pub kind: StageKind,
    pub epochs: usize,
    pub split: Split,
    pub freeze: FreezePolicy,
    pub distill: DistillConfig,
}

/// An ordered list of stages such as `DPT-SFT-DFT`. At most one
/// pre-training stage, and only in first position.
#[derive(Clone, Debug, PartialEq)]
pub struct Recipe {
    pub stages: Vec<StagePlan>,
}

/// The six stage combinations of the recipe ablation.
pub const RECIPE_SWEEP: [&str; 6] = [
    "PT-SFT",
    "DPT-SFT",
    "PT-DFT",
    "DPT-DFT",
    "PT-SFT-DFT",
    "DPT-SFT-DFT",
];

impl Recipe {
    pub fn parse(label: &str, train: &TrainConfig, distill: &DistillConfig) -> Result<Self> {
        let kinds = Self::parse_kinds(label)?;
        Ok(Recipe {
            stages: kinds
                .into_iter()
                .map(|kind| StagePlan {
                    kind,
                    epochs: train.epochs(kind),
                    split: kind.split(),
                    freeze: kind.freeze_policy(),
                    distill: distill.clone(),
                })
                .collect(),
        })
    }

    /// Validates a label and returns its stage kinds.
    pub fn parse_kinds(label: &str) -> Result<Vec<StageKind>> {
        if label.trim().is_empty() {
            return Err(Error::Parse("empty recipe".into()));
        }
        let kinds = label
            .split('-')
            .map(|t| t.trim().parse::<StageKind>())
            .collect::<Result<Vec<_>>>()?;
        for (i, k) in kinds.iter().enumerate() {
            if k.is_pretraining() && i != 0 {
                return Err(Error::Parse(format!(
                    "recipe {label:?}: {k} must be the first and only pre-training stage"
                )));
            }
        }
        Ok(kinds)
    }

    pub fn label(&self) -> String {
        self.stages
            .iter()
            .map(|s| s.kind.as_str())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn needs_teacher(&self) -> bool {
        self.stages.iter().any(|s| s.kind.needs_teacher())
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}
