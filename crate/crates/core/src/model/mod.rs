//! Frozen visual encoder, GELU projector and causal decoder.
//!
//! A sequence is laid out as `[prompt, visual, response]`: prompt token
//! embeddings, then one projected feature per image patch, then response
//! token embeddings. Logits row `t` is the distribution of the token at
//! position `t + 1`.

mod checkpoint;
mod encoder;
mod layers;
mod mllm;

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

pub use checkpoint::{inspect, CheckpointInfo, TensorInfo, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::VisualEncoder;
pub use mllm::{argmax, ForwardOutput, MultimodalModel, SequenceInput, TapeOutput};

use crate::error::{Error, Result};

/// An `height x width x 3` image with channel-last pixels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * 3 {
            return Err(Error::dim("image", &[height, width, 3], &[pixels.len()]));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        })
    }
}

/// Shape of the shared visual encoder. Teacher and student must agree on it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 24,
            patch_size: 8,
            dim: 64,
            layers: 1,
            heads: 4,
            seed: 7,
        }
    }
}

impl EncoderConfig {
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || self.image_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub role: Role,
    pub encoder: EncoderConfig,
    pub embed_dim: usize,
    pub projector_hidden: usize,
    pub llm_layers: usize,
    pub llm_heads: usize,
    pub mlp_ratio: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn with_width(role: Role, vocab_size: usize, embed_dim: usize, layers: usize) -> Self {
        ModelConfig {
            role,
            encoder: EncoderConfig::default(),
            embed_dim,
            projector_hidden: embed_dim,
            llm_layers: layers,
            llm_heads: 4,
            mlp_ratio: 4,
            vocab_size,
            max_seq_len: 32,
        }
    }

    /// D = 128, 4 layers.
    pub fn teacher(vocab_size: usize) -> Self {
        Self::with_width(Role::Teacher, vocab_size, 128, 4)
    }

    /// D = 64, 2 layers; the smaller of the two teacher presets.
    pub fn teacher_small(vocab_size: usize) -> Self {
        Self::with_width(Role::Teacher, vocab_size, 64, 2)
    }

    /// D = 48, 2 layers.
    pub fn student(vocab_size: usize) -> Self {
        Self::with_width(Role::Student, vocab_size, 48, 2)
    }

    pub fn num_patches(&self) -> usize {
        self.encoder.num_patches()
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let d = self.embed_dim;
        if d == 0 || self.llm_heads == 0 || !d.is_multiple_of(self.llm_heads) {
            return Err(Error::Config(format!(
                "embed dim {d} is not divisible by {} heads",
                self.llm_heads
            )));
        }
        if self.projector_hidden == 0 || self.mlp_ratio == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "projector width, mlp ratio and vocab must be positive".into(),
            ));
        }
        if self.max_seq_len <= self.num_patches() {
            return Err(Error::Config(format!(
                "max_seq_len {} leaves no room beside {} visual tokens",
                self.max_seq_len,
                self.num_patches()
            )));
        }
        Ok(())
    }

    /// Scalars in the projector: `C*H + H + H*D + D`.
    pub fn projector_params(&self) -> usize {
        let (c, h, d) = (self.encoder.dim, self.projector_hidden, self.embed_dim);
        c * h + h + h * d + d
    }
}

/// Half-open position ranges of one sequence, in layout order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSegments {
    pub prompt: Range<usize>,
    pub visual: Range<usize>,
    pub response: Range<usize>,
}

/// The three distillation targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Prompt,
    Visual,
    Response,
}

impl TokenSegments {
    pub fn new(prompt_len: usize, visual_len: usize, response_len: usize) -> Self {
        let v0 = prompt_len;
        let r0 = v0 + visual_len;
        TokenSegments {
            prompt: 0..v0,
            visual: v0..r0,
            response: r0..r0 + response_len,
        }
    }

    /// Sequence length T.
    pub fn len(&self) -> usize {
        self.response.end
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, segment: Segment) -> Range<usize> {
        match segment {
            Segment::Prompt => self.prompt.clone(),
            Segment::Visual => self.visual.clone(),
            Segment::Response => self.response.clone(),
        }
    }

    /// Logit rows that predict the tokens of `segment`: row `t - 1` for every
    /// position `t >= 1` in it. The three row sets are disjoint.
    pub fn prediction_rows(&self, segment: Segment) -> Range<usize> {
        let r = self.range(segment);
        r.start.max(1) - 1..r.end.max(1) - 1
    }

    /// Ordered, disjoint, contiguous cover of `[0, T)`.
    pub fn is_partition(&self) -> bool {
        self.prompt.start == 0
            && self.prompt.end == self.visual.start
            && self.visual.end == self.response.start
            && self.prompt.start <= self.prompt.end
            && self.visual.start <= self.visual.end
            && self.response.start <= self.response.end
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segments_partition_the_sequence() {
        let s = TokenSegments::new(4, 9, 2);
        assert!(s.is_partition());
        assert_eq!(s.len(), 15);
        assert_eq!(s.prediction_rows(Segment::Prompt), 0..3);
        assert_eq!(s.prediction_rows(Segment::Visual), 3..12);
        assert_eq!(s.prediction_rows(Segment::Response), 12..14);
    }

    #[test]
    fn empty_prompt_has_no_prompt_rows() {
        let s = TokenSegments::new(0, 4, 1);
        assert_eq!(s.prediction_rows(Segment::Prompt), 0..0);
        assert_eq!(s.prediction_rows(Segment::Visual), 0..3);
        assert_eq!(s.prediction_rows(Segment::Response), 3..4);
    }

    #[test]
    fn patch_arithmetic() {
        let e = EncoderConfig {
            image_size: 16,
            patch_size: 4,
            ..EncoderConfig::default()
        };
        assert_eq!(e.num_patches(), 16);
        let bad = EncoderConfig {
            image_size: 15,
            patch_size: 4,
            ..EncoderConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn presets_share_the_vocabulary() {
        let (t, s) = (ModelConfig::teacher(14), ModelConfig::student(14));
        assert_eq!(t.vocab_size, s.vocab_size);
        assert!(t.embed_dim >= s.embed_dim);
        t.validate().unwrap();
        s.validate().unwrap();
        ModelConfig::teacher_small(14).validate().unwrap();
    }
}
