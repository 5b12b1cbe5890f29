use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Visual,
    Prompt,
    Text,
}

/// Segment lengths of a mixed sequence. Segments are contiguous and appear in
/// [`Layout::ORDER`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub visual: usize,
    pub prompts: usize,
    pub text: usize,
}

impl Layout {
    pub const ORDER: [Segment; 3] = [Segment::Visual, Segment::Prompt, Segment::Text];

    pub fn len(&self) -> usize {
        self.visual + self.prompts + self.text
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, segment: Segment) -> std::ops::Range<usize> {
        match segment {
            Segment::Visual => 0..self.visual,
            Segment::Prompt => self.visual..self.visual + self.prompts,
            Segment::Text => self.visual + self.prompts..self.len(),
        }
    }

    pub fn text_start(&self) -> usize {
        self.visual + self.prompts
    }
}

/// `Z = [V; P′; embed(text)]` with its layout.
#[derive(Clone, Copy, Debug)]
pub struct MixedSequence {
    pub z: Var,
    pub layout: Layout,
}

/// Concatenates visual tokens, customized prompts and text embeddings.
/// Positional embeddings are added later, inside the backbone.
pub fn assemble(tape: &mut Tape, model: &Model, visual: Var, prompts: Var, text_ids: &[usize]) -> Result<MixedSequence> {
    if text_ids.first() != Some(&BOS) {
        return Err(Error::Contract("text segment must start with BOS".into()));
    }
    let layout = Layout {
        visual: tape.value(visual).dims2()?.0,
        prompts: tape.value(prompts).dims2()?.0,
        text: text_ids.len(),
    };
    if layout.len() > model.config.max_seq_len {
        return Err(Error::Length {
            len: layout.len(),
            max: model.config.max_seq_len,
        });
    }
    let text = model.backbone.embed(tape, &model.store, text_ids)?;
    let z = tape.concat(&[visual, prompts, text], 0)?;
    Ok(MixedSequence { z, layout })
}

/// Targets and mask over all `K` rows: text row `j` predicts text token
/// `j + 1`, the last text row predicts EOS, and every other row is unsupervised.
pub fn text_targets(layout: &Layout, text_ids: &[usize]) -> (Vec<usize>, Vec<bool>) {
    let k = layout.len();
    let start = layout.text_start();
    let mut targets = vec![PAD; k];
    let mut mask = vec![false; k];
    for j in 0..layout.text {
        targets[start + j] = text_ids.get(j + 1).copied().unwrap_or(EOS);
        mask[start + j] = true;
    }
    (targets, mask)
}

/// Mean cross-entropy over the text rows of `[K×V]` logits.
pub fn masked_loss(tape: &mut Tape, logits: Var, layout: &Layout, text_ids: &[usize]) -> Result<Var> {
    let (targets, mask) = text_targets(layout, text_ids);
    tape.cross_entropy(logits, &targets, &mask)
}
