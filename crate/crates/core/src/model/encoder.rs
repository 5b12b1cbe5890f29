use super::init::{Init, ParamBuilder};
use super::ModelConfig;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::data::Image;
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;

struct ConvBlock {
    weight: ParamId,
    bias: ParamId,
    norm_gain: ParamId,
    norm_bias: ParamId,
    out_channels: usize,
}

/// Stack of stride-2 3×3 convolutions, each followed by channel layer norm and
/// GELU. Maps an `[H, W, C]` image to `M` row-major positions of `C′` features.
pub struct VisionEncoder {
    blocks: Vec<ConvBlock>,
    config: ModelConfig,
}

impl VisionEncoder {
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        let mut in_ch = config.image.channels;
        let mut blocks = Vec::new();
        for (i, out_ch) in config.encoder_channels()?.into_iter().enumerate() {
            let fan_in = 9 * in_ch;
            blocks.push(ConvBlock {
                weight: b.param(
                    &format!("encoder.{i}.conv.w"),
                    &[fan_in, out_ch],
                    Init::Normal((2.0 / fan_in as f64).sqrt()),
                    true,
                )?,
                // random rather than zero: on flat image regions the conv output
                // is the bias alone, and equal channels put the norm at its
                // zero-variance point where its gain is 1/sqrt(eps)
                bias: b.param(&format!("encoder.{i}.conv.b"), &[out_ch], Init::Normal(0.1), true)?,
                norm_gain: b.param(&format!("encoder.{i}.norm.g"), &[out_ch], Init::Ones, true)?,
                norm_bias: b.param(&format!("encoder.{i}.norm.b"), &[out_ch], Init::Zeros, true)?,
                out_channels: out_ch,
            });
            in_ch = out_ch;
        }
        Ok(Self {
            blocks,
            config: config.clone(),
        })
    }

    pub fn first_layer_weight(&self) -> ParamId {
        self.blocks[0].weight
    }

    /// Visual features `[M×C′]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, image: &Image) -> Result<Var> {
        if image.dims() != self.config.image {
            return Err(Error::Config(format!(
                "image is {:?}, model expects {:?}",
                image.dims(),
                self.config.image
            )));
        }
        let mut x = tape.constant(image.to_tensor());
        for block in &self.blocks {
            let cols = tape.im2col(x, 3, 2, 1)?;
            let (ho, wo) = {
                let s = tape.value(x).shape();
                (s[0].div_ceil(2), s[1].div_ceil(2))
            };
            let w = tape.param(store, block.weight);
            let bias = tape.param(store, block.bias);
            let y = tape.matmul(cols, w)?;
            let y = tape.add(y, bias)?;
            let g = tape.param(store, block.norm_gain);
            let nb = tape.param(store, block.norm_bias);
            let y = tape.layer_norm(y, g, nb, NORM_EPS)?;
            let y = tape.gelu(y);
            x = tape.reshape(y, &[ho, wo, block.out_channels])?;
        }
        let features = tape.reshape(x, &[self.config.num_visual, self.config.visual_channels])?;
        Ok(features)
    }
}

/// Linear map from `C′` visual features to the backbone width `D`.
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            weight: b.param(
                "projection.w",
                &[config.visual_channels, config.d_model],
                Init::Normal(1.0 / (config.visual_channels as f64).sqrt()),
                true,
            )?,
            bias: b.param("projection.b", &[config.d_model], Init::Zeros, true)?,
        })
    }

    /// Visual tokens `[M×D]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, features: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let channels = store.get(self.weight).value.shape()[0];
        let (_, c) = tape.value(features).dims2()?;
        if c != channels {
            return Err(Error::dim("project", tape.value(features).shape(), store.get(self.weight).value.shape()));
        }
        let b = tape.param(store, self.bias);
        let v = tape.matmul(features, w)?;
        tape.add(v, b)
    }
}
