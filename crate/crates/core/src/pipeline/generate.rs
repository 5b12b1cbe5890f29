use serde::{Deserialize, Serialize};

use super::sequence::assemble;
use crate::autodiff::{Tape, Tensor};
use crate::data::{Image, BOS, EOS};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::prompt::Ablation;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Eos,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// `BOS` followed by the generated ids.
    pub ids: Vec<usize>,
    pub text: String,
    /// Chosen logit minus the runner-up, per step.
    pub margins: Vec<f64>,
    pub terminated_by: Termination,
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// The conditioning prefix as plain values, computed once per image.
pub struct PreparedPrefix {
    visual: Tensor,
    prompts: Tensor,
}

pub fn prepare_prefix(model: &Model, image: &Image, ablation: Ablation) -> Result<PreparedPrefix> {
    let mut tape = Tape::inference();
    let prefix = model.prefix(&mut tape, image, ablation)?;
    Ok(PreparedPrefix {
        visual: tape.value(prefix.visual).clone(),
        prompts: tape.value(prefix.prompts).clone(),
    })
}

/// Logits for the token following `ids` given a prefix, recomputing the
/// whole mixed sequence.
pub fn next_logits(model: &Model, prefix: &PreparedPrefix, ids: &[usize]) -> Result<Vec<f64>> {
    let mut tape = Tape::inference();
    let visual = tape.constant(prefix.visual.clone());
    let prompts = tape.constant(prefix.prompts.clone());
    let seq = assemble(&mut tape, model, visual, prompts, ids)?;
    let hidden = model.llm_forward(&mut tape, seq.z)?;
    let last = tape.slice(hidden, 0, seq.layout.len() - 1, 1)?;
    let logits = model.vocab_logits(&mut tape, last)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Greedy decoding of up to `max_len` tokens after BOS. The transform is
/// computed once; every step reruns the backbone over the full sequence.
/// `max_len` is capped by the positions left after the prefix.
pub fn generate(model: &Model, image: &Image, max_len: usize, ablation: Ablation) -> Result<GenerationResult> {
    if max_len == 0 {
        return Err(Error::Contract("max_len must be at least 1".into()));
    }
    let prefix = prepare_prefix(model, image, ablation)?;
    let room = model.config.max_seq_len - prefix.visual.shape()[0] - prefix.prompts.shape()[0];
    let max_len = max_len.min(room);
    let mut ids = vec![BOS];
    let mut margins = Vec::new();
    let mut terminated_by = Termination::MaxLen;
    while ids.len() <= max_len {
        let logits = next_logits(model, &prefix, &ids)?;
        let best = argmax(&logits);
        let runner_up = logits
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != best)
            .map(|(_, v)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        margins.push(logits[best] - runner_up);
        ids.push(best);
        if best == EOS {
            terminated_by = Termination::Eos;
            break;
        }
    }
    Ok(GenerationResult {
        text: model.tokenizer.decode(&ids),
        ids,
        margins,
        terminated_by,
    })
}
