use std::ops::Range;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encoder::VisualEncoder;
use super::layers::{bind, expect_shape, locate, normal, Block, Linear, Norm};
use super::{Image, ModelConfig, Segment, TokenSegments};
use crate::data::{TokenId, EOS, PAD};
use crate::error::{Error, Result};
use crate::tensor::{GroupKind, ParameterGroup, Scalar, Tape, Tensor, Var};

/// One sequence to run: precomputed patch features plus token ids.
#[derive(Clone, Copy, Debug)]
pub struct SequenceInput<'a, S: Scalar = f64> {
    /// `[N_p, C]` encoder output.
    pub features: &'a Tensor<S>,
    pub prompt: &'a [TokenId],
    pub response: &'a [TokenId],
}

/// Logits and visual hidden states of one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput<S: Scalar = f64> {
    /// `[T, V]`.
    pub logits: Tensor<S>,
    /// `[N_p, D]`, after the final norm.
    pub visual_hidden: Tensor<S>,
}

/// A batched forward recorded on a tape. Sample `b` occupies rows
/// `b * seq_len .. (b + 1) * seq_len` of `logits`; sequences are
/// right-padded, which causal attention makes invisible to real positions.
#[derive(Clone, Debug)]
pub struct TapeOutput {
    /// `[B * T, V]`.
    pub logits: Var,
    /// `[B * N_p, D]`.
    pub visual_hidden: Var,
    pub segments: Vec<TokenSegments>,
    pub seq_len: usize,
    pub num_visual: usize,
}

impl TapeOutput {
    pub fn batch(&self) -> usize {
        self.segments.len()
    }

    /// Rows of `logits` that predict the tokens of `segment` in sample `b`.
    pub fn prediction_rows(&self, b: usize, segment: Segment) -> Range<usize> {
        let r = self.segments[b].prediction_rows(segment);
        b * self.seq_len + r.start..b * self.seq_len + r.end
    }

    /// Copies the values into `dst` as constants. Used to hand a frozen
    /// model's outputs to another model's tape with no path back.
    pub fn import<S: Scalar>(&self, src: &Tape<S>, dst: &mut Tape<S>) -> TapeOutput {
        TapeOutput {
            logits: dst.constant(src.value(self.logits)),
            visual_hidden: dst.constant(src.value(self.visual_hidden)),
            segments: self.segments.clone(),
            seq_len: self.seq_len,
            num_visual: self.num_visual,
        }
    }

    /// Row of `logits` at the last real position of sample `b`.
    pub fn last_row(&self, b: usize) -> usize {
        b * self.seq_len + self.segments[b].len() - 1
    }
}

#[derive(Clone, Debug)]
struct Layout {
    fc1: Linear,
    fc2: Linear,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<Block>,
    ln_f: Norm,
    head: Linear,
}

/// Frozen encoder, GELU projector and causal decoder.
#[derive(Clone, Debug)]
pub struct MultimodalModel<S: Scalar = f64> {
    config: ModelConfig,
    encoder: Arc<VisualEncoder<S>>,
    projector: ParameterGroup<S>,
    llm: ParameterGroup<S>,
    layout: Layout,
}

impl<S: Scalar> MultimodalModel<S> {
    /// Random projector and decoder around a shared encoder.
    pub fn new(config: &ModelConfig, encoder: Arc<VisualEncoder<S>>, seed: u64) -> Result<Self> {
        config.validate()?;
        check_encoder(config, &encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (c, h, d, v) = (
            config.encoder.dim,
            config.projector_hidden,
            config.embed_dim,
            config.vocab_size,
        );
        let mut proj = ParameterGroup::new(GroupKind::Projector);
        let fc1 = Linear::init(&mut proj, "fc1", c, h, 1.0, &mut rng)?;
        let fc2 = Linear::init(&mut proj, "fc2", h, d, 1.0, &mut rng)?;

        let mut llm = ParameterGroup::new(GroupKind::Llm);
        let tok_emb = llm.push("tok_emb", normal(&mut rng, vec![v, d], 0.1))?;
        let pos_emb = llm.push(
            "pos_emb",
            normal(&mut rng, vec![config.max_seq_len, d], 0.1),
        )?;
        let blocks = (0..config.llm_layers)
            .map(|i| {
                Block::init(
                    &mut llm,
                    &format!("blocks.{i}"),
                    d,
                    d * config.mlp_ratio,
                    config.llm_heads,
                    config.llm_layers,
                    &mut rng,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = Norm::init(&mut llm, "ln_f", d)?;
        let head = Linear::init(&mut llm, "head", d, v, 1.0, &mut rng)?;
        Ok(MultimodalModel {
            config: config.clone(),
            encoder,
            projector: proj,
            llm,
            layout: Layout {
                fc1,
                fc2,
                tok_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
        })
    }

    /// Reassembles a model from stored groups, checking every name and shape.
    pub fn from_parts(
        config: &ModelConfig,
        encoder: Arc<VisualEncoder<S>>,
        projector: ParameterGroup<S>,
        llm: ParameterGroup<S>,
    ) -> Result<Self> {
        config.validate()?;
        check_encoder(config, &encoder)?;
        if projector.kind() != GroupKind::Projector || llm.kind() != GroupKind::Llm {
            return Err(Error::Checkpoint(
                "parameter groups are out of place".into(),
            ));
        }
        let (c, h, d, v) = (
            config.encoder.dim,
            config.projector_hidden,
            config.embed_dim,
            config.vocab_size,
        );
        let fc1 = Linear::locate(&projector, "fc1", c, h)?;
        let fc2 = Linear::locate(&projector, "fc2", h, d)?;
        let tok_emb = locate(&llm, "tok_emb")?;
        expect_shape(&llm, tok_emb, &[v, d])?;
        let pos_emb = locate(&llm, "pos_emb")?;
        expect_shape(&llm, pos_emb, &[config.max_seq_len, d])?;
        let blocks = (0..config.llm_layers)
            .map(|i| {
                Block::locate(
                    &llm,
                    &format!("blocks.{i}"),
                    d,
                    d * config.mlp_ratio,
                    config.llm_heads,
                )
            })
            .collect::<Result<_>>()?;
        let ln_f = Norm::locate(&llm, "ln_f", d)?;
        let head = Linear::locate(&llm, "head", d, v)?;
        // embeddings, 16 tensors per block, final norm, head
        if projector.len() != 4 || llm.len() != 2 + 16 * config.llm_layers + 4 {
            return Err(Error::Checkpoint("unexpected extra parameters".into()));
        }
        Ok(MultimodalModel {
            config: config.clone(),
            encoder,
            projector,
            llm,
            layout: Layout {
                fc1,
                fc2,
                tok_emb,
                pos_emb,
                blocks,
                ln_f,
                head,
            },
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Arc<VisualEncoder<S>> {
        &self.encoder
    }

    pub fn projector(&self) -> &ParameterGroup<S> {
        &self.projector
    }

    pub fn llm(&self) -> &ParameterGroup<S> {
        &self.llm
    }

    pub fn projector_mut(&mut self) -> &mut ParameterGroup<S> {
        &mut self.projector
    }

    pub fn llm_mut(&mut self) -> &mut ParameterGroup<S> {
        &mut self.llm
    }

    pub fn group(&self, kind: GroupKind) -> &ParameterGroup<S> {
        match kind {
            GroupKind::VisualEncoder => self.encoder.params(),
            GroupKind::Projector => &self.projector,
            GroupKind::Llm => &self.llm,
        }
    }

    /// The groups an optimizer may touch. The encoder is never among them.
    pub fn trainable_groups_mut(&mut self) -> [&mut ParameterGroup<S>; 2] {
        [&mut self.projector, &mut self.llm]
    }

    pub fn set_trainable(&mut self, kind: GroupKind, trainable: bool) -> Result<()> {
        match kind {
            GroupKind::VisualEncoder if trainable => Err(Error::Contract(
                "the visual encoder is always frozen".into(),
            )),
            GroupKind::VisualEncoder => Ok(()),
            GroupKind::Projector => self.projector.set_trainable(trainable),
            GroupKind::Llm => self.llm.set_trainable(trainable),
        }
    }

    pub fn num_parameters(&self) -> usize {
        GroupKind::ALL
            .iter()
            .map(|&k| self.group(k).num_scalars())
            .sum()
    }

    pub fn encode_image(&self, image: &Image) -> Result<Tensor<S>> {
        self.encoder.encode_image(image)
    }

    /// `H_v = fc2(GELU(fc1(Z_v)))` without recording gradients.
    pub fn project(&self, features: &Tensor<S>) -> Result<Tensor<S>> {
        let mut tape = Tape::no_grad();
        let p = bind(&mut tape, &self.projector);
        let z = tape.constant(features.clone());
        let h = self.project_on(&mut tape, &p, z)?;
        Ok(tape.value(h))
    }

    fn project_on(&self, tape: &mut Tape<S>, p: &[Var], z: Var) -> Result<Var> {
        let c = self.config.encoder.dim;
        if tape.shape(z).len() != 2 || tape.shape(z)[1] != c {
            return Err(Error::dim(
                "project",
                tape.shape(z),
                &[self.config.num_patches(), c],
            ));
        }
        let h = self.layout.fc1.apply(tape, p, z)?;
        let h = tape.gelu(h)?;
        self.layout.fc2.apply(tape, p, h)
    }

    /// Records a batched forward. Every sequence is right-padded with
    /// `<pad>` to `max(longest, pad_to)` positions.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<S>,
        inputs: &[SequenceInput<'_, S>],
        pad_to: usize,
    ) -> Result<TapeOutput> {
        if inputs.is_empty() {
            return Err(Error::Contract("forward of an empty batch".into()));
        }
        let n = self.config.num_patches();
        let (v, max) = (self.config.vocab_size, self.config.max_seq_len);
        let segments: Vec<TokenSegments> = inputs
            .iter()
            .map(|x| TokenSegments::new(x.prompt.len(), n, x.response.len()))
            .collect();
        let longest = segments.iter().map(TokenSegments::len).max().unwrap_or(0);
        let t = longest.max(pad_to);
        if t > max {
            return Err(Error::Capacity { len: t, max });
        }

        let mut feats = Vec::with_capacity(inputs.len() * n * self.config.encoder.dim);
        for x in inputs {
            if x.features.shape() != [n, self.config.encoder.dim] {
                return Err(Error::dim(
                    "forward",
                    x.features.shape(),
                    &[n, self.config.encoder.dim],
                ));
            }
            feats.extend_from_slice(x.features.data());
        }
        let pp = bind(tape, &self.projector);
        let pl = bind(tape, &self.llm);
        let z = tape.constant(Tensor::new(
            vec![inputs.len() * n, self.config.encoder.dim],
            feats,
        )?);
        let hv = self.project_on(tape, &pp, z)?;

        // Token rows index the embedding table; visual rows index the
        // projected features appended below it.
        let table = tape.concat_rows(&[pl[self.layout.tok_emb], hv])?;
        let mut ids = Vec::with_capacity(inputs.len() * t);
        for (b, x) in inputs.iter().enumerate() {
            if let Some(&bad) = x.prompt.iter().chain(x.response).find(|&&id| id >= v) {
                return Err(Error::Tokenize(format!(
                    "token id {bad} outside vocabulary of {v}"
                )));
            }
            ids.extend_from_slice(x.prompt);
            ids.extend((0..n).map(|j| v + b * n + j));
            ids.extend_from_slice(x.response);
            ids.resize((b + 1) * t, PAD);
        }
        let x = tape.gather_rows(table, &ids)?;
        let positions: Vec<usize> = (0..inputs.len()).flat_map(|_| 0..t).collect();
        let pos = tape.gather_rows(pl[self.layout.pos_emb], &positions)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.layout.blocks {
            x = block.apply(tape, &pl, x, inputs.len(), t, true)?;
        }
        let hidden = self.layout.ln_f.apply(tape, &pl, x)?;
        let logits = self.layout.head.apply(tape, &pl, hidden)?;
        let visual_rows: Vec<usize> = segments
            .iter()
            .enumerate()
            .flat_map(|(b, s)| s.visual.clone().map(move |r| b * t + r))
            .collect();
        let visual_hidden = tape.gather_rows(hidden, &visual_rows)?;
        Ok(TapeOutput {
            logits,
            visual_hidden,
            segments,
            seq_len: t,
            num_visual: n,
        })
    }

    /// Single-sequence forward with no gradient recording.
    pub fn forward(
        &self,
        image: &Image,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<(ForwardOutput<S>, TokenSegments)> {
        let features = self.encode_image(image)?;
        self.forward_features(&features, prompt, response)
    }

    pub fn forward_features(
        &self,
        features: &Tensor<S>,
        prompt: &[TokenId],
        response: &[TokenId],
    ) -> Result<(ForwardOutput<S>, TokenSegments)> {
        let mut tape = Tape::no_grad();
        let input = SequenceInput {
            features,
            prompt,
            response,
        };
        let out = self.forward_tape(&mut tape, &[input], 0)?;
        let seg = out.segments[0].clone();
        Ok((
            ForwardOutput {
                logits: tape.value(out.logits),
                visual_hidden: tape.value(out.visual_hidden),
            },
            seg,
        ))
    }

    /// Moves gradients of bound parameters from `tape` into the groups.
    pub fn accumulate_grads(&mut self, tape: &Tape<S>) -> Result<()> {
        for (tag, g) in tape.param_grads() {
            match tag.group {
                GroupKind::Projector => self.projector.get_mut(tag.index).accumulate_grad(g)?,
                GroupKind::Llm => self.llm.get_mut(tag.index).accumulate_grad(g)?,
                GroupKind::VisualEncoder => {
                    return Err(Error::Contract(
                        "gradient reached the frozen visual encoder".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    /// Argmax decoding until `<eos>` (kept) or `max_new` tokens.
    pub fn greedy_decode(
        &self,
        image: &Image,
        prompt: &[TokenId],
        max_new: usize,
    ) -> Result<Vec<TokenId>> {
        let features = self.encode_image(image)?;
        self.decode_features(&features, prompt, max_new, None)
    }

    /// Greedy decoding from features; `allowed` restricts the argmax to a
    /// token subset. Ties go to the lowest id.
    pub fn decode_features(
        &self,
        features: &Tensor<S>,
        prompt: &[TokenId],
        max_new: usize,
        allowed: Option<&[TokenId]>,
    ) -> Result<Vec<TokenId>> {
        if max_new == 0 {
            return Err(Error::Contract("max_new must be at least 1".into()));
        }
        let mut out = Vec::new();
        while out.len() < max_new {
            let (fwd, seg) = self.forward_features(features, prompt, &out)?;
            let next = argmax(fwd.logits.row(seg.len() - 1), allowed);
            out.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(out)
    }
}

/// Index of the largest entry, restricted to `allowed` when given; the
/// lowest index wins ties.
pub fn argmax<S: Scalar>(row: &[S], allowed: Option<&[TokenId]>) -> TokenId {
    let mut best: Option<(TokenId, S)> = None;
    let mut consider = |i: TokenId| {
        let v = row[i];
        match best {
            Some((j, b)) if v < b || (v == b && j < i) || v.is_nan() => {}
            _ => best = Some((i, v)),
        }
    };
    match allowed {
        Some(ids) => ids.iter().copied().for_each(&mut consider),
        None => (0..row.len()).for_each(&mut consider),
    }
    best.map_or(0, |(i, _)| i)
}

fn check_encoder<S: Scalar>(config: &ModelConfig, encoder: &VisualEncoder<S>) -> Result<()> {
    if encoder.config() != &config.encoder {
        return Err(Error::Config(
            "model and shared encoder disagree on encoder shape".into(),
        ));
    }
    Ok(())
}
