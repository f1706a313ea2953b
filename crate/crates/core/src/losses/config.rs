use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Segment;

/// Per-token divergence between teacher and student distributions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Divergence {
    /// `sum p_t ln(p_t / p_s)`
    Fkl,
    /// `sum p_s ln(p_s / p_t)`
    Rkl,
    /// Mean of both KLs to the midpoint distribution.
    Jsd,
}

impl Divergence {
    pub const ALL: [Divergence; 3] = [Divergence::Fkl, Divergence::Rkl, Divergence::Jsd];

    pub fn as_str(self) -> &'static str {
        match self {
            Divergence::Fkl => "FKL",
            Divergence::Rkl => "RKL",
            Divergence::Jsd => "JSD",
        }
    }
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Divergence {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Divergence::ALL
            .into_iter()
            .find(|d| d.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::Parse(format!(
                    "unknown divergence {s:?}; expected FKL, RKL or JSD"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over the segment's tokens, then over the batch.
    #[default]
    TokenMean,
    /// Sum over the segment's tokens, then mean over the batch.
    Sum,
}

/// Segments whose output distributions are distilled. The response is
/// always included.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Segment>", into = "Vec<Segment>")]
pub struct TargetMask {
    pub prompt: bool,
    pub visual: bool,
}

impl TargetMask {
    pub const RESPONSE: TargetMask = TargetMask {
        prompt: false,
        visual: false,
    };
    pub const RESPONSE_PROMPT: TargetMask = TargetMask {
        prompt: true,
        visual: false,
    };
    pub const RESPONSE_VISUAL: TargetMask = TargetMask {
        prompt: false,
        visual: true,
    };
    pub const ALL: TargetMask = TargetMask {
        prompt: true,
        visual: true,
    };
    /// The four masks in ablation order.
    pub const SWEEP: [TargetMask; 4] = [
        Self::RESPONSE,
        Self::RESPONSE_PROMPT,
        Self::RESPONSE_VISUAL,
        Self::ALL,
    ];

    pub fn contains(self, segment: Segment) -> bool {
        match segment {
            Segment::Response => true,
            Segment::Prompt => self.prompt,
            Segment::Visual => self.visual,
        }
    }

    pub fn label(self) -> &'static str {
        match (self.prompt, self.visual) {
            (false, false) => "response",
            (true, false) => "response+prompt",
            (false, true) => "response+visual",
            (true, true) => "response+prompt+visual",
        }
    }
}

impl Default for TargetMask {
    fn default() -> Self {
        TargetMask::RESPONSE_VISUAL
    }
}

impl fmt::Display for TargetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl TryFrom<Vec<Segment>> for TargetMask {
    type Error = Error;

    fn try_from(segments: Vec<Segment>) -> Result<Self> {
        if !segments.contains(&Segment::Response) {
            return Err(Error::Config(
                "distillation targets must include the response".into(),
            ));
        }
        Ok(TargetMask {
            prompt: segments.contains(&Segment::Prompt),
            visual: segments.contains(&Segment::Visual),
        })
    }
}

impl From<TargetMask> for Vec<Segment> {
    fn from(m: TargetMask) -> Self {
        [Segment::Response, Segment::Prompt, Segment::Visual]
            .into_iter()
            .filter(|&s| m.contains(s))
            .collect()
    }
}

impl FromStr for TargetMask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let segments = s
            .split('+')
            .map(|t| match t.trim() {
                "response" => Ok(Segment::Response),
                "prompt" => Ok(Segment::Prompt),
                "visual" => Ok(Segment::Visual),
                other => Err(Error::Parse(format!(
                    "unknown distillation target {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        TargetMask::try_from(segments)
    }
}

/// Weights of one distillation stage:
/// `L = L_reg + alpha (L_res + L_prompt) + beta L_vis + gamma L_rel`.
/// Masked-off targets contribute nothing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub targets: TargetMask,
}

impl Default for StageWeights {
    fn default() -> Self {
        StageWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            targets: TargetMask::default(),
        }
    }
}

impl StageWeights {
    pub const ZERO: StageWeights = StageWeights {
        alpha: 0.0,
        beta: 0.0,
        gamma: 0.0,
        targets: TargetMask::ALL,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "weight {name} must be finite and >= 0, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Effective multiplier of each part, zero when masked off.
    pub fn coefficients(&self) -> PartCoefficients {
        PartCoefficients {
            res: self.alpha,
            prompt: if self.targets.prompt { self.alpha } else { 0.0 },
            vis: if self.targets.visual { self.beta } else { 0.0 },
            rel: self.gamma,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PartCoefficients {
    pub res: f64,
    pub prompt: f64,
    pub vis: f64,
    pub rel: f64,
}

/// Which distillation stage a loss is composed for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillStage {
    Pretrain,
    Finetune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    /// Weights used by distilled pre-training.
    pub dpt: StageWeights,
    /// Weights used by distilled fine-tuning.
    pub dft: StageWeights,
    pub divergence: Divergence,
    pub temperature: f64,
    pub reduction: Reduction,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            dpt: StageWeights::default(),
            dft: StageWeights::default(),
            divergence: Divergence::Fkl,
            temperature: 1.0,
            reduction: Reduction::TokenMean,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        self.dpt.validate()?;
        self.dft.validate()?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    pub fn weights(&self, stage: DistillStage) -> &StageWeights {
        match stage {
            DistillStage::Pretrain => &self.dpt,
            DistillStage::Finetune => &self.dft,
        }
    }

    pub fn mdist(&self, stage: DistillStage) -> MdistConfig {
        MdistConfig {
            divergence: self.divergence,
            temperature: self.temperature,
            reduction: self.reduction,
            targets: self.weights(stage).targets,
        }
    }
}

/// Everything a segment divergence needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MdistConfig {
    pub divergence: Divergence,
    pub temperature: f64,
    pub reduction: Reduction,
    pub targets: TargetMask,
}

impl Default for MdistConfig {
    fn default() -> Self {
        DistillConfig::default().mdist(DistillStage::Finetune)
    }
}
