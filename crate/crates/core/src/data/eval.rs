use serde::{Deserialize, Serialize};

use super::{Dataset, Features, Sample, Split, TokenId, EOS};
use crate::error::{Error, Result};
use crate::model::{argmax, MultimodalModel, Segment, SequenceInput};
use crate::tensor::{Scalar, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    /// Fraction of samples whose answer is reproduced exactly.
    pub accuracy: f64,
    /// Response cross-entropy, token mean per sample then sample mean.
    pub ce: f64,
    pub samples: usize,
}

const EVAL_BATCH: usize = 100;

/// The answer words of a response: everything before `<eos>`.
fn answer(response: &[TokenId]) -> &[TokenId] {
    response.strip_suffix(&[EOS]).unwrap_or(response)
}

/// Teacher-forced accuracy and cross-entropy in one batched pass.
///
/// Each answer position is scored by the argmax over palette words only.
/// Causality makes the first answer row identical to the first greedy
/// step, so for single-word answers this accuracy equals
/// [`exact_match_eval`].
pub fn evaluate<S: Scalar>(
    model: &MultimodalModel<S>,
    dataset: &Dataset,
    features: &Features<S>,
    split: Split,
) -> Result<EvalMetrics> {
    let samples = dataset.split(split);
    let feats = features.split(split);
    if samples.is_empty() || feats.len() != samples.len() {
        return Err(Error::Contract(format!(
            "split {split} is empty or lacks features"
        )));
    }
    let palette = dataset.vocab().color_ids();
    let (mut correct, mut ce) = (0usize, 0.0);
    for start in (0..samples.len()).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(samples.len());
        let inputs: Vec<SequenceInput<'_, S>> = (start..end)
            .map(|i| SequenceInput {
                features: &feats[i],
                prompt: &samples[i].prompt,
                response: &samples[i].response,
            })
            .collect();
        let mut tape = Tape::no_grad();
        let out = model.forward_tape(&mut tape, &inputs, 0)?;
        let logits = tape.value(out.logits);
        for (b, s) in samples[start..end].iter().enumerate() {
            let rows = out.prediction_rows(b, Segment::Response);
            let mut nll = 0.0;
            for (row, &target) in rows.clone().zip(&s.response) {
                nll -= log_softmax_at(logits.row(row), target);
            }
            ce += nll / rows.len().max(1) as f64;
            let ans = answer(&s.response);
            if rows
                .zip(ans)
                .all(|(row, &t)| argmax(logits.row(row), Some(&palette)) == t)
            {
                correct += 1;
            }
        }
    }
    let n = samples.len();
    Ok(EvalMetrics {
        accuracy: correct as f64 / n as f64,
        ce: ce / n as f64,
        samples: n,
    })
}

fn log_softmax_at<S: Scalar>(row: &[S], target: TokenId) -> f64 {
    let m = row
        .iter()
        .map(|x| x.to_f64().unwrap_or(f64::NAN))
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row
        .iter()
        .map(|x| (x.to_f64().unwrap_or(f64::NAN) - m).exp())
        .sum();
    row[target].to_f64().unwrap_or(f64::NAN) - m - z.ln()
}

/// Greedy decoding restricted to palette words, one word per reference
/// answer word, scored by exact match.
pub fn exact_match_eval<S: Scalar>(
    model: &MultimodalModel<S>,
    dataset: &Dataset,
    features: &Features<S>,
    split: Split,
) -> Result<f64> {
    let palette = dataset.vocab().color_ids();
    let feats = features.split(split);
    let samples = dataset.split(split);
    if feats.len() != samples.len() {
        return Err(Error::Contract(format!("split {split} lacks features")));
    }
    let mut i = 0;
    exact_match_with(dataset, split, |s| {
        let f = &feats[i];
        i += 1;
        model.decode_features(f, &s.prompt, answer(&s.response).len(), Some(&palette))
    })
}

/// Exact-match accuracy of an arbitrary predictor. The predictor sees
/// samples in split order and returns answer words; a trailing `<eos>` is
/// ignored on both sides.
pub fn exact_match_with(
    dataset: &Dataset,
    split: Split,
    mut predict: impl FnMut(&Sample) -> Result<Vec<TokenId>>,
) -> Result<f64> {
    let samples = dataset.split(split);
    if samples.is_empty() {
        return Err(Error::Contract(format!("split {split} is empty")));
    }
    let mut correct = 0;
    for s in samples {
        if answer(&predict(s)?) == answer(&s.response) {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
