use serde::{Deserialize, Serialize};

use crate::data::ImageDims;
use crate::error::{Error, Result};
use crate::prompt::CustomizationMode;

/// Architecture hyperparameters. Field names follow the JSON config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Backbone embedding width.
    #[serde(rename = "D")]
    pub d_model: usize,
    /// Number of decoder blocks.
    #[serde(rename = "L")]
    pub layers: usize,
    pub heads: usize,
    /// Vocabulary size.
    #[serde(rename = "V")]
    pub vocab_size: usize,
    #[serde(rename = "K_max")]
    pub max_seq_len: usize,
    /// Number of visual tokens.
    #[serde(rename = "M")]
    pub num_visual: usize,
    /// Visual feature width before projection.
    #[serde(rename = "C_prime")]
    pub visual_channels: usize,
    #[serde(rename = "N", alias = "num_prompts")]
    pub num_prompts: usize,
    pub image: ImageDims,
    pub param_net_depth: usize,
    #[serde(default)]
    pub mode: CustomizationMode,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            layers: 2,
            heads: 4,
            vocab_size,
            max_seq_len: 96,
            num_visual: 16,
            visual_channels: 32,
            num_prompts: 16,
            image: ImageDims::default(),
            param_net_depth: 2,
            mode: CustomizationMode::PromptWise,
        }
    }

    /// The smallest configuration used for gradient verification.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            layers: 1,
            heads: 2,
            vocab_size: 12,
            max_seq_len: 32,
            num_visual: 4,
            visual_channels: 8,
            num_prompts: 4,
            image: ImageDims {
                height: 16,
                width: 16,
                channels: 1,
            },
            param_net_depth: 2,
            mode: CustomizationMode::PromptWise,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Number of stride-2 encoder blocks that reduce the image to `M` positions.
    pub fn encoder_blocks(&self) -> Result<usize> {
        let (mut h, mut w) = (self.image.height, self.image.width);
        for blocks in 1..=16 {
            h = h.div_ceil(2);
            w = w.div_ceil(2);
            if h * w == self.num_visual {
                return Ok(blocks);
            }
            if h * w < self.num_visual {
                break;
            }
        }
        Err(Error::Config(format!(
            "no number of stride-2 blocks maps a {}×{} image to M = {} positions",
            self.image.height, self.image.width, self.num_visual
        )))
    }

    /// Channel widths of the encoder blocks, doubling up to `C′`.
    pub fn encoder_channels(&self) -> Result<Vec<usize>> {
        let blocks = self.encoder_blocks()?;
        Ok((0..blocks)
            .map(|k| (self.visual_channels >> (blocks - 1 - k)).max(1))
            .collect())
    }

    /// Width of the parameter network's output: `2N` per-prompt or 2 for the whole book.
    pub fn param_net_outputs(&self) -> Option<usize> {
        match self.mode {
            CustomizationMode::None => None,
            CustomizationMode::PromptWise => Some(2 * self.num_prompts),
            CustomizationMode::BookWise => Some(2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return fail(format!("D = {} does not split into {} heads", self.d_model, self.heads));
        }
        if self.vocab_size < 5 {
            return fail(format!("vocabulary of {} leaves no room for words", self.vocab_size));
        }
        if self.num_prompts == 0 || self.visual_channels == 0 {
            return fail("N and C_prime must be positive".into());
        }
        if !(1..=3).contains(&self.param_net_depth) {
            return fail(format!("param_net_depth {} not in 1..=3", self.param_net_depth));
        }
        if self.max_seq_len < self.num_visual + self.num_prompts + 2 {
            return fail(format!(
                "K_max = {} cannot hold M + N + 2 = {}",
                self.max_seq_len,
                self.num_visual + self.num_prompts + 2
            ));
        }
        self.encoder_blocks()?;
        Ok(())
    }
}
