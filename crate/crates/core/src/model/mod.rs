//! Vision encoder, projection, decoder-only backbone and vocabulary head, and
//! the [`Model`] that owns them together with the promptbook and φ.

mod backbone;
mod config;
mod encoder;
pub(crate) mod init;
pub(crate) mod layers;
mod lm;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use backbone::{LlmBackbone, VocabHead};
pub use config::ModelConfig;
pub use encoder::{Projection, VisionEncoder, NORM_EPS};
pub use init::{Init, ParamBuilder};
pub use lm::{pretrain_and_freeze, LanguageModel, PretrainConfig, PretrainReport};

use crate::autodiff::{checkpoint, ParamStore, Tape, Var};
use crate::data::{Image, Tokenizer};
use crate::error::{Error, Result};
use crate::prompt::{ablate, customize, Ablation, AffineParams, CustomizationMode, ParamNet, Promptbook};
use crate::rng;

/// Parameters owned by the frozen language model.
pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.") || name.starts_with("head.")
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub(crate) struct CheckpointMeta {
    pub kind: String,
    pub model: ModelConfig,
    pub tokenizer: Tokenizer,
}

/// Everything a forward pass needs. Parameters live in `store`; the component
/// structs hold ids into it.
pub struct Model {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub encoder: VisionEncoder,
    pub projection: Projection,
    pub backbone: LlmBackbone,
    pub head: VocabHead,
    pub promptbook: Promptbook,
    pub param_net: Option<ParamNet>,
}

/// The conditioning segments computed once per image.
#[derive(Clone, Copy, Debug)]
pub struct Prefix {
    pub visual: Var,
    pub prompts: Var,
    pub affine: Option<AffineParams>,
}

impl Model {
    /// Builds a model. Backbone and head are copied from `lm` (keeping its
    /// trainable flags) or, without one, randomly initialized and trainable.
    /// Every other component is freshly initialized from `seed`.
    pub fn build(config: ModelConfig, tokenizer: Tokenizer, seed: u64, lm: Option<&ParamStore>) -> Result<Self> {
        config.validate()?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries, config says V = {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let (backbone, head) = {
            let mut r = rng::stream(seed, "init.backbone");
            let mut b = ParamBuilder::new(&mut store, &mut r, lm);
            (LlmBackbone::build(&mut b, &config)?, VocabHead::build(&mut b, &config)?)
        };
        let emb_std = std_dev(store.get(backbone.token_embedding).value.data());
        let (encoder, projection) = {
            let mut r = rng::stream(seed, "init.encoder");
            let mut b = ParamBuilder::new(&mut store, &mut r, None);
            (VisionEncoder::build(&mut b, &config)?, Projection::build(&mut b, &config)?)
        };
        let promptbook = {
            let mut r = rng::stream(seed, "init.promptbook");
            Promptbook::build(&mut ParamBuilder::new(&mut store, &mut r, None), &config, emb_std)?
        };
        let param_net = match config.mode {
            CustomizationMode::None => None,
            _ => {
                let mut r = rng::stream(seed, "init.param_net");
                Some(ParamNet::build(&mut ParamBuilder::new(&mut store, &mut r, None), &config)?)
            }
        };
        Ok(Self {
            config,
            tokenizer,
            store,
            encoder,
            projection,
            backbone,
            head,
            promptbook,
            param_net,
        })
    }

    /// Rebuilds a model whose every parameter comes from `source`.
    pub fn from_store(config: ModelConfig, tokenizer: Tokenizer, source: &ParamStore) -> Result<Self> {
        let mut built = Self::build(config, tokenizer, 0, Some(source))?;
        for (_, p) in built.store.iter_mut() {
            let src = source
                .by_name(&p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {:?}", p.name)))?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {:?} has the wrong shape", p.name)));
            }
            p.value = src.value.clone();
            p.trainable = src.trainable;
        }
        if source.len() != built.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} parameters, model has {}",
                source.len(),
                built.store.len()
            )));
        }
        Ok(built)
    }

    pub fn freeze_backbone(&mut self) {
        let ids: Vec<_> = self.backbone.param_ids().into_iter().chain(self.head.param_ids()).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    pub fn mode(&self) -> CustomizationMode {
        self.config.mode
    }

    pub fn backbone_hash(&self) -> String {
        self.store.hash_where(|p| is_backbone_param(&p.name))
    }

    pub fn trainable_hash(&self) -> String {
        self.store.hash_where(|p| !is_backbone_param(&p.name))
    }

    /// Visual features `X` `[M×C′]`.
    pub fn encode_image(&self, tape: &mut Tape, image: &Image) -> Result<Var> {
        self.encoder.forward(tape, &self.store, image)
    }

    /// Visual tokens `[M×D]`.
    pub fn project(&self, tape: &mut Tape, features: Var) -> Result<Var> {
        self.projection.forward(tape, &self.store, features)
    }

    /// The transform `(γ, β) = φ(X)`. Contract error without a parameter network.
    pub fn compute_params(&self, tape: &mut Tape, features: Var) -> Result<AffineParams> {
        let net = self
            .param_net
            .as_ref()
            .ok_or_else(|| Error::Contract("compute_params called with mode none".into()))?;
        net.forward(tape, &self.store, features)
    }

    /// Customized prompts `[N×D]`; the raw promptbook when the mode is `none`.
    pub fn customized_prompts(&self, tape: &mut Tape, features: Var, ablation: Ablation) -> Result<(Var, Option<AffineParams>)> {
        let book = tape.param(&self.store, self.promptbook.book);
        if self.param_net.is_none() {
            return Ok((book, None));
        }
        let params = self.compute_params(tape, features)?;
        let params = ablate(tape, params, ablation);
        Ok((customize(tape, book, params)?, Some(params)))
    }

    /// Visual tokens and customized prompts for one image.
    pub fn prefix(&self, tape: &mut Tape, image: &Image, ablation: Ablation) -> Result<Prefix> {
        let features = self.encode_image(tape, image)?;
        let visual = self.project(tape, features)?;
        let (prompts, affine) = self.customized_prompts(tape, features, ablation)?;
        Ok(Prefix { visual, prompts, affine })
    }

    /// Hidden states `[K×D]` for a mixed sequence.
    pub fn llm_forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        self.backbone.forward(tape, &self.store, z)
    }

    /// Vocabulary logits for each row of `hidden`.
    pub fn vocab_logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.head.forward(tape, &self.store, hidden)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, self.meta("model"))
    }

    pub(crate) fn meta(&self, kind: &str) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta {
            kind: kind.into(),
            model: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
        })
        .expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, self.meta("model"))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = checkpoint::from_bytes(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad model header: {e}")))?;
        if meta.kind != "model" {
            return Err(Error::Checkpoint(format!("expected a model checkpoint, found {:?}", meta.kind)));
        }
        Self::from_store(meta.model, meta.tokenizer, &store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Population standard deviation.
pub(crate) fn std_dev(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Convenience for tests and tools: a random image tensor wrapped as an [`Image`].
pub fn random_image(dims: crate::data::ImageDims, seed: u64) -> Image {
    use rand::Rng as _;
    let mut r = rng::stream(seed, "image");
    let n = dims.height * dims.width * dims.channels;
    Image::new(dims, (0..n).map(|_| r.random::<f64>()).collect()).expect("pixels in [0, 1)")
}
