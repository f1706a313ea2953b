//! Autoregressive loss, per-segment output distillation, relation
//! distillation on visual-token Gram matrices, and their composition.
//!
//! Every loss is built on a [`Tape`]; the `Tensor` functions are thin
//! wrappers that run one sequence on a fresh tape. Teacher operands are
//! always detached.

mod config;

pub use config::{
    DistillConfig, DistillStage, Divergence, MdistConfig, PartCoefficients, Reduction,
    StageWeights, TargetMask,
};

use serde::{Deserialize, Serialize};

use crate::data::TokenId;
use crate::error::{Error, Result};
use crate::model::{ForwardOutput, Segment, TapeOutput, TokenSegments};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped here before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Divergence of every row: `teacher` and `student` are `[rows, V]`
/// logits, the result is `[rows]`. The teacher operand is detached.
pub fn row_divergence<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: Var,
    student: Var,
    kind: Divergence,
    temperature: f64,
) -> Result<Var> {
    if tape.shape(teacher) != tape.shape(student) {
        return Err(Error::dim(
            "token_divergence",
            tape.shape(teacher),
            tape.shape(student),
        ));
    }
    let temp = S::lit(temperature);
    let teacher = tape.detach(teacher);
    let pt = tape.softmax(teacher, temp)?;
    let ps = tape.softmax(student, temp)?;
    let floor = S::lit(PROB_FLOOR);
    let lt = tape.log_floor(pt, floor)?;
    let ls = tape.log_floor(ps, floor)?;
    match kind {
        Divergence::Fkl => kl_rows(tape, pt, lt, ls),
        Divergence::Rkl => kl_rows(tape, ps, ls, lt),
        Divergence::Jsd => {
            let sum = tape.add(pt, ps)?;
            let m = tape.scale(sum, S::lit(0.5))?;
            let lm = tape.log_floor(m, floor)?;
            let a = kl_rows(tape, pt, lt, lm)?;
            let b = kl_rows(tape, ps, ls, lm)?;
            let ab = tape.add(a, b)?;
            tape.scale(ab, S::lit(0.5))
        }
    }
}

/// `sum_j p_j (lp_j - lq_j)` per row.
fn kl_rows<S: Scalar>(tape: &mut Tape<S>, p: Var, lp: Var, lq: Var) -> Result<Var> {
    let d = tape.sub(lp, lq)?;
    let pd = tape.mul(p, d)?;
    tape.sum_rows(pd)
}

/// Logit rows of `segment` over the batch, and the per-row weight that
/// applies `reduction` and then averages over samples.
fn segment_rows<S: Scalar>(
    out: &TapeOutput,
    segment: Segment,
    reduction: Reduction,
) -> (Vec<usize>, Vec<S>) {
    let b = out.batch() as f64;
    let (mut rows, mut weights) = (Vec::new(), Vec::new());
    for s in 0..out.batch() {
        let r = out.prediction_rows(s, segment);
        let w = match reduction {
            Reduction::TokenMean => 1.0 / (r.len() as f64 * b),
            Reduction::Sum => 1.0 / b,
        };
        weights.extend(std::iter::repeat_n(S::lit(w), r.len()));
        rows.extend(r);
    }
    (rows, weights)
}

/// Response negative log-likelihood. `responses[b]` holds the response
/// tokens of sample `b`; nothing else is supervised.
pub fn autoregressive_loss_tape<S: Scalar>(
    tape: &mut Tape<S>,
    out: &TapeOutput,
    responses: &[&[TokenId]],
    reduction: Reduction,
) -> Result<Var> {
    if responses.len() != out.batch() {
        return Err(Error::Contract(format!(
            "{} responses for a batch of {}",
            responses.len(),
            out.batch()
        )));
    }
    let mut targets = Vec::new();
    for (b, r) in responses.iter().enumerate() {
        if r.is_empty() || r.len() != out.segments[b].response.len() {
            return Err(Error::Contract(format!(
                "sample {b}: response of {} tokens against a segment of {}",
                r.len(),
                out.segments[b].response.len()
            )));
        }
        targets.extend_from_slice(r);
    }
    let (rows, weights) = segment_rows::<S>(out, Segment::Response, reduction);
    let logits = tape.gather_rows(out.logits, &rows)?;
    let logp = tape.log_softmax_rows(logits)?;
    let picked = tape.pick(logp, &targets)?;
    let neg: Vec<S> = weights.into_iter().map(|w| -w).collect();
    tape.weighted_sum(picked, &neg)
}

/// Output distillation over one segment. `teacher` must have been run on
/// the same inputs as `student` (equal segments and padding).
pub fn segment_distill_tape<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &TapeOutput,
    student: &TapeOutput,
    segment: Segment,
    config: &MdistConfig,
) -> Result<Var> {
    if !config.targets.contains(segment) {
        return Err(Error::Config(format!(
            "{segment:?} is not among the distillation targets ({})",
            config.targets
        )));
    }
    if teacher.segments != student.segments || teacher.seq_len != student.seq_len {
        return Err(Error::Contract(
            "teacher and student disagree on the sequence layout".into(),
        ));
    }
    let (rows, weights) = segment_rows::<S>(student, segment, config.reduction);
    if rows.is_empty() {
        return Ok(tape.scalar(S::zero()));
    }
    let t = tape.gather_rows(teacher.logits, &rows)?;
    let s = tape.gather_rows(student.logits, &rows)?;
    let d = row_divergence(tape, t, s, config.divergence, config.temperature)?;
    tape.weighted_sum(d, &weights)
}

/// `R = Y Y^T`.
pub fn relation_matrix_tape<S: Scalar>(tape: &mut Tape<S>, y: Var) -> Result<Var> {
    let yt = tape.transpose(y)?;
    tape.matmul(y, yt)
}

fn squared_norm<S: Scalar>(data: &[S]) -> S {
    data.iter().map(|&x| x * x).sum()
}

/// `1 - <R_s, R_t>_F / (|R_s|_F |R_t|_F)`, with `R_t` detached. The
/// denominator is `sqrt(|R_s|^2 |R_t|^2)`, which makes identical operands
/// give exactly zero.
pub fn relation_cosine_tape<S: Scalar>(tape: &mut Tape<S>, rs: Var, rt: Var) -> Result<Var> {
    if tape.shape(rs) != tape.shape(rt) {
        return Err(Error::dim("relation_loss", tape.shape(rs), tape.shape(rt)));
    }
    let (ns, nt) = (squared_norm(tape.data(rs)), squared_norm(tape.data(rt)));
    if !(ns.is_finite() && nt.is_finite()) {
        return Err(Error::NonFinite {
            op: "relation_loss",
        });
    }
    if ns == S::zero() || nt == S::zero() {
        return Err(Error::Numeric(
            "relation matrix has zero norm (degenerate visual hidden states)".into(),
        ));
    }
    let rt = tape.detach(rt);
    let prod = tape.mul(rs, rt)?;
    let inner = tape.sum(prod)?;
    let sq = tape.mul(rs, rs)?;
    let sq = tape.sum(sq)?;
    let sq = tape.scale(sq, nt)?;
    let denom = tape.sqrt(sq)?;
    let cos = tape.div(inner, denom)?;
    let one = tape.scalar(S::one());
    tape.sub(one, cos)
}

/// Relation loss of every sample's visual hidden states, averaged.
pub fn relation_distill_tape<S: Scalar>(
    tape: &mut Tape<S>,
    teacher: &TapeOutput,
    student: &TapeOutput,
) -> Result<Var> {
    if teacher.batch() != student.batch() || teacher.num_visual != student.num_visual {
        return Err(Error::Contract(
            "teacher and student disagree on visual tokens".into(),
        ));
    }
    let n = student.num_visual;
    let mut total: Option<Var> = None;
    for b in 0..student.batch() {
        let ys = tape.slice_rows(student.visual_hidden, b * n, n)?;
        let yt = tape.slice_rows(teacher.visual_hidden, b * n, n)?;
        let rs = relation_matrix_tape(tape, ys)?;
        let rt = relation_matrix_tape(tape, yt)?;
        let l = relation_cosine_tape(tape, rs, rt)?;
        total = Some(match total {
            Some(t) => tape.add(t, l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("relation loss of an empty batch".into()))?;
    tape.scale(total, S::one() / S::lit(student.batch() as f64))
}

/// Scalar values of the loss components.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub reg: f64,
    pub res: f64,
    pub vis: f64,
    pub prompt: f64,
    pub rel: f64,
}

impl LossParts {
    pub fn is_finite(&self) -> bool {
        [self.reg, self.res, self.vis, self.prompt, self.rel]
            .iter()
            .all(|x| x.is_finite())
    }

    /// `reg + sum_k c_k part_k`.
    pub fn combine(&self, c: &PartCoefficients) -> f64 {
        self.reg + c.res * self.res + c.prompt * self.prompt + c.vis * self.vis + c.rel * self.rel
    }
}

/// Distilled pre-training objective.
pub fn dpt_loss(parts: &LossParts, config: &DistillConfig) -> f64 {
    parts.combine(&config.dpt.coefficients())
}

/// Distilled fine-tuning objective.
pub fn dft_loss(parts: &LossParts, config: &DistillConfig) -> f64 {
    parts.combine(&config.dft.coefficients())
}

/// A training objective on a tape plus the values of its components.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: Var,
    pub parts: LossParts,
}

/// Builds the objective of one batch. With no `distill` stage (or no
/// teacher) it is the autoregressive loss alone. Components whose
/// coefficient is zero are still measured but never enter `total`, so a
/// zero-weight distillation stage takes exactly the undistilled steps.
pub fn objective<S: Scalar>(
    tape: &mut Tape<S>,
    student: &TapeOutput,
    responses: &[&[TokenId]],
    distill: Option<(DistillStage, &TapeOutput)>,
    config: &DistillConfig,
) -> Result<Objective> {
    let reg = autoregressive_loss_tape(tape, student, responses, config.reduction)?;
    let mut parts = LossParts {
        reg: value(tape, reg),
        ..LossParts::default()
    };
    let mut total = reg;
    let Some((stage, teacher)) = distill else {
        return Ok(Objective { total, parts });
    };
    let mdist = config.mdist(stage);
    let coef = config.weights(stage).coefficients();
    let mut terms: Vec<(Var, f64)> = Vec::new();

    let res = segment_distill_tape(tape, teacher, student, Segment::Response, &mdist)?;
    parts.res = value(tape, res);
    terms.push((res, coef.res));
    if mdist.targets.prompt {
        let v = segment_distill_tape(tape, teacher, student, Segment::Prompt, &mdist)?;
        parts.prompt = value(tape, v);
        terms.push((v, coef.prompt));
    }
    if mdist.targets.visual {
        let v = segment_distill_tape(tape, teacher, student, Segment::Visual, &mdist)?;
        parts.vis = value(tape, v);
        terms.push((v, coef.vis));
    }
    let rel = relation_distill_tape(tape, teacher, student)?;
    parts.rel = value(tape, rel);
    terms.push((rel, coef.rel));

    for (v, c) in terms {
        if c != 0.0 {
            let w = tape.scale(v, S::lit(c))?;
            total = tape.add(total, w)?;
        }
    }
    Ok(Objective { total, parts })
}

fn value<S: Scalar>(tape: &Tape<S>, v: Var) -> f64 {
    tape.item(v).to_f64().unwrap_or(f64::NAN)
}

// ---- single-sequence tensor API ----------------------------------------

fn single<S: Scalar>(
    tape: &mut Tape<S>,
    logits: &Tensor<S>,
    segments: &TokenSegments,
) -> Result<TapeOutput> {
    if logits.shape().len() != 2 || logits.rows() != segments.len() {
        return Err(Error::dim("logits", logits.shape(), &[segments.len()]));
    }
    Ok(TapeOutput {
        logits: tape.constant(logits.clone()),
        visual_hidden: tape.constant(Tensor::zeros(vec![0, 1])),
        segments: vec![segments.clone()],
        seq_len: segments.len(),
        num_visual: segments.visual.len(),
    })
}

/// Response NLL of one sequence. `targets` is indexed by position; only
/// its response positions are read.
pub fn autoregressive_loss(
    logits: &Tensor,
    targets: &[TokenId],
    segments: &TokenSegments,
    reduction: Reduction,
) -> Result<f64> {
    if segments.response.is_empty() {
        return Err(Error::Contract(
            "autoregressive loss needs a response".into(),
        ));
    }
    let response = targets
        .get(segments.response.clone())
        .ok_or_else(|| Error::dim("targets", &[targets.len()], &[segments.len()]))?;
    let mut tape = Tape::no_grad();
    let out = single(&mut tape, logits, segments)?;
    let l = autoregressive_loss_tape(&mut tape, &out, &[response], reduction)?;
    Ok(tape.item(l))
}

/// Divergence between two logit rows.
pub fn token_divergence(
    teacher: &[f64],
    student: &[f64],
    kind: Divergence,
    temperature: f64,
) -> Result<f64> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Numeric(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let mut tape = Tape::no_grad();
    let t = tape.constant(Tensor::new(vec![1, teacher.len()], teacher.to_vec())?);
    let s = tape.constant(Tensor::new(vec![1, student.len()], student.to_vec())?);
    let d = row_divergence(&mut tape, t, s, kind, temperature)?;
    Ok(tape.data(d)[0])
}

fn segment_distill(
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    segments: &TokenSegments,
    segment: Segment,
    config: &MdistConfig,
) -> Result<f64> {
    if teacher.logits.shape() != student.logits.shape() {
        return Err(Error::Contract(format!(
            "teacher logits {:?} and student logits {:?} cover different layouts",
            teacher.logits.shape(),
            student.logits.shape()
        )));
    }
    let mut tape = Tape::no_grad();
    let t = single(&mut tape, &teacher.logits, segments)?;
    let s = single(&mut tape, &student.logits, segments)?;
    let l = segment_distill_tape(&mut tape, &t, &s, segment, config)?;
    Ok(tape.item(l))
}

pub fn response_distill_loss(
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    segments: &TokenSegments,
    config: &MdistConfig,
) -> Result<f64> {
    segment_distill(teacher, student, segments, Segment::Response, config)
}

pub fn visual_distill_loss(
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    segments: &TokenSegments,
    config: &MdistConfig,
) -> Result<f64> {
    segment_distill(teacher, student, segments, Segment::Visual, config)
}

pub fn prompt_distill_loss(
    teacher: &ForwardOutput,
    student: &ForwardOutput,
    segments: &TokenSegments,
    config: &MdistConfig,
) -> Result<f64> {
    segment_distill(teacher, student, segments, Segment::Prompt, config)
}

/// Self-correlation of visual-token representations, `N_p x N_p`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationMatrix {
    pub values: Tensor,
}

pub fn relation_matrix(visual_hidden: &Tensor) -> Result<RelationMatrix> {
    if visual_hidden.shape().len() != 2 || visual_hidden.rows() == 0 {
        return Err(Error::dim(
            "relation_matrix",
            visual_hidden.shape(),
            &[1, 1],
        ));
    }
    let mut tape = Tape::no_grad();
    let y = tape.constant(visual_hidden.clone());
    let r = relation_matrix_tape(&mut tape, y)?;
    Ok(RelationMatrix {
        values: tape.value(r),
    })
}

pub fn relation_loss(student: &RelationMatrix, teacher: &RelationMatrix) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let rs = tape.constant(student.values.clone());
    let rt = tape.constant(teacher.values.clone());
    let l = relation_cosine_tape(&mut tape, rs, rt)?;
    Ok(tape.item(l))
}
