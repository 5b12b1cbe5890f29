//! Text-only pretraining of the backbone and vocabulary head, after which both
//! are frozen for the rest of their life.

use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{is_backbone_param, CheckpointMeta, LlmBackbone, ModelConfig, ParamBuilder, VocabHead};
use crate::autodiff::{checkpoint, Adam, AdamConfig, ParamStore, Tape, Var};
use crate::data::{Tokenizer, EOS};
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Fraction of training documents that hold a report followed by a
    /// verbatim repeat of it.
    pub repeat_fraction: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 16,
            lr: 3e-3,
            seed: 0,
            repeat_fraction: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Mean token loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// The backbone and head on their own, as produced by pretraining.
pub struct LanguageModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub store: ParamStore,
    pub backbone: LlmBackbone,
    pub head: VocabHead,
}

impl LanguageModel {
    /// Randomly initialized, trainable. Uses the same init stream as
    /// [`Model::build`](super::Model::build) without a pretrained store.
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.len() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries, config says V = {}",
                tokenizer.len(),
                config.vocab_size
            )));
        }
        Self::assemble(config, tokenizer, seed, None)
    }

    fn assemble(config: ModelConfig, tokenizer: Tokenizer, seed: u64, source: Option<&ParamStore>) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, "init.backbone");
        let mut b = ParamBuilder::new(&mut store, &mut r, source);
        let backbone = LlmBackbone::build(&mut b, &config)?;
        let head = VocabHead::build(&mut b, &config)?;
        Ok(Self {
            config,
            tokenizer,
            store,
            backbone,
            head,
        })
    }

    pub fn freeze(&mut self) {
        let ids: Vec<_> = self.store.iter().map(|(id, _)| id).collect();
        for id in ids {
            self.store.set_trainable(id, false);
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|(_, p)| !p.trainable)
    }

    pub fn hash(&self) -> String {
        self.store.hash_where(|p| is_backbone_param(&p.name))
    }

    /// Mean next-token loss of `ids` (starting with BOS) placed at positions
    /// `offset..`. Every position but the last predicts its successor.
    pub fn sequence_loss(&self, tape: &mut Tape, ids: &[usize], offset: usize) -> Result<Var> {
        if ids.len() < 2 {
            return Err(Error::DegenerateBatch);
        }
        let x = self.backbone.embed(tape, &self.store, ids)?;
        let h = self.backbone.forward_at(tape, &self.store, x, offset)?;
        let logits = self.head.forward(tape, &self.store, h)?;
        let mut targets = ids[1..].to_vec();
        targets.push(EOS);
        let mut mask = vec![true; ids.len()];
        mask[ids.len() - 1] = false;
        tape.cross_entropy(logits, &targets, &mask)
    }

    /// Logits for the token after `ids`, with `ids` at positions `0..`.
    pub fn next_logits(&self, ids: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let x = self.backbone.embed(&mut tape, &self.store, ids)?;
        let h = self.backbone.forward(&mut tape, &self.store, x)?;
        let last = tape.slice(h, 0, ids.len() - 1, 1)?;
        let logits = self.head.forward(&mut tape, &self.store, last)?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// `exp` of the mean token loss over `texts`, each encoded BOS…EOS at position 0.
    pub fn perplexity<S: AsRef<str>>(&self, texts: &[S]) -> Result<f64> {
        if texts.is_empty() {
            return Err(Error::Contract("perplexity of an empty corpus".into()));
        }
        let (mut total, mut count) = (0.0, 0usize);
        for text in texts {
            let ids = self.truncated(text.as_ref());
            let mut tape = Tape::inference();
            let loss = self.sequence_loss(&mut tape, &ids, 0)?;
            total += tape.value(loss).item() * (ids.len() - 1) as f64;
            count += ids.len() - 1;
        }
        Ok((total / count as f64).exp())
    }

    fn truncated(&self, text: &str) -> Vec<usize> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.config.max_seq_len);
        ids
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes(&self.store, self.meta())
    }

    fn meta(&self) -> serde_json::Value {
        serde_json::to_value(CheckpointMeta {
            kind: "lm".into(),
            model: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
        })
        .expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, &self.store, self.meta())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (store, meta) = checkpoint::from_bytes(bytes)?;
        let meta: CheckpointMeta =
            serde_json::from_value(meta).map_err(|e| Error::Checkpoint(format!("bad language model header: {e}")))?;
        if meta.kind != "lm" {
            return Err(Error::Checkpoint(format!(
                "expected a language model checkpoint, found {:?}",
                meta.kind
            )));
        }
        let lm = Self::assemble(meta.model, meta.tokenizer, 0, Some(&store))?;
        if lm.store.len() != store.len() {
            return Err(Error::Checkpoint("unexpected parameters in language model checkpoint".into()));
        }
        Ok(lm)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Trains a fresh language model on `corpus` by next-token prediction and
/// freezes every parameter.
///
/// Each sequence is placed at a random offset so that every positional
/// embedding up to `K_max` is trained, including the ones the text segment
/// occupies once visual tokens and prompts precede it.
///
/// Some documents repeat their report (`BOS r r EOS`). In single reports the
/// words after "there is a" never depend on earlier text, so a model trained
/// only on them learns to ignore its context at exactly the positions that
/// carry image content. Repeats give it a reason to read context there, the
/// ability a general-purpose pretrained model brings for free.
pub fn pretrain_and_freeze<S: AsRef<str>>(
    config: &ModelConfig,
    tokenizer: &Tokenizer,
    corpus: &[S],
    pretrain: &PretrainConfig,
) -> Result<(LanguageModel, PretrainReport)> {
    if corpus.is_empty() {
        return Err(Error::Contract("empty pretraining corpus".into()));
    }
    if pretrain.batch_size == 0 || pretrain.epochs == 0 || !(pretrain.lr > 0.0) || !(0.0..=1.0).contains(&pretrain.repeat_fraction) {
        return Err(Error::Config(format!("invalid pretraining config {pretrain:?}")));
    }
    let mut lm = LanguageModel::new(config.clone(), tokenizer.clone(), pretrain.seed)?;
    let mut repeats = rng::stream(pretrain.seed, "pretrain.repeat");
    let sequences: Vec<Vec<usize>> = corpus
        .iter()
        .map(|t| {
            let ids = lm.truncated(t.as_ref());
            let doubled = 2 * ids.len() - 2;
            if repeats.random::<f64>() < pretrain.repeat_fraction && doubled <= config.max_seq_len {
                let words = &ids[1..ids.len() - 1];
                [&ids[..1], words, words, &ids[ids.len() - 1..]].concat()
            } else {
                ids
            }
        })
        .collect();
    let mut adam = Adam::new(
        AdamConfig {
            lr: pretrain.lr,
            ..AdamConfig::default()
        },
        &lm.store,
    );
    let mut shuffle = rng::stream(pretrain.seed, "pretrain.shuffle");
    let mut offsets = rng::stream(pretrain.seed, "pretrain.offset");
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut report = PretrainReport {
        steps: 0,
        epoch_losses: Vec::new(),
    };
    for epoch in 0..pretrain.epochs {
        order.shuffle(&mut shuffle);
        let (mut epoch_loss, mut epoch_tokens) = (0.0, 0usize);
        for batch in order.chunks(pretrain.batch_size) {
            let total: usize = batch.iter().map(|&i| sequences[i].len() - 1).sum();
            lm.store.zero_grad();
            for &i in batch {
                let ids = &sequences[i];
                let offset = offsets.random_range(0..=config.max_seq_len - ids.len());
                let mut tape = Tape::new();
                let loss = lm.sequence_loss(&mut tape, ids, offset)?;
                let tokens = ids.len() - 1;
                epoch_loss += tape.value(loss).item() * tokens as f64;
                epoch_tokens += tokens;
                let weighted = tape.scale(loss, tokens as f64 / total as f64);
                tape.backward(weighted, &mut lm.store)?;
            }
            adam.step(&mut lm.store)?;
            report.steps += 1;
        }
        let mean = epoch_loss / epoch_tokens as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric("pretraining loss"));
        }
        info!("pretrain epoch {}: loss {mean:.4}", epoch + 1);
        report.epoch_losses.push(mean);
    }
    lm.store.zero_grad();
    lm.freeze();
    debug!("language model frozen, hash {}", lm.hash());
    Ok((lm, report))
}
