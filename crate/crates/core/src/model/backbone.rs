use super::init::{Init, ParamBuilder};
use super::layers::{Linear, Norm};
use super::ModelConfig;
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

struct Block {
    ln1: Norm,
    query: Linear,
    key: Linear,
    value: Linear,
    out: Linear,
    ln2: Norm,
    ff_in: Linear,
    ff_out: Linear,
}

/// Decoder-only transformer: learned positions over the whole input, pre-norm
/// blocks of causal multi-head attention and a GELU feed-forward of width 4D,
/// then a final norm. Norms are RMS-style: they do not remove a row's mean,
/// so a constant shift of an input row stays visible downstream.
pub struct LlmBackbone {
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    blocks: Vec<Block>,
    final_norm: Norm,
    heads: usize,
    max_len: usize,
}

impl LlmBackbone {
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        let d = config.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let std = 1.0 / (d as f64).sqrt();
        let residual_std = std / (2.0 * config.layers.max(1) as f64).sqrt();
        let token_embedding = b.param("backbone.tok_emb", &[config.vocab_size, d], Init::Normal(emb_std), true)?;
        let position_embedding = b.param("backbone.pos_emb", &[config.max_seq_len, d], Init::Normal(emb_std), true)?;
        let blocks = (0..config.layers)
            .map(|i| {
                let p = format!("backbone.blocks.{i}");
                Ok(Block {
                    ln1: Norm::build(b, &format!("{p}.ln1"), d)?,
                    query: Linear::build(b, &format!("{p}.attn.q"), d, d, Init::Normal(std))?,
                    key: Linear::build(b, &format!("{p}.attn.k"), d, d, Init::Normal(std))?,
                    value: Linear::build(b, &format!("{p}.attn.v"), d, d, Init::Normal(std))?,
                    out: Linear::build(b, &format!("{p}.attn.o"), d, d, Init::Normal(residual_std))?,
                    ln2: Norm::build(b, &format!("{p}.ln2"), d)?,
                    ff_in: Linear::build(b, &format!("{p}.ff.in"), d, 4 * d, Init::Normal(std))?,
                    ff_out: Linear::build(b, &format!("{p}.ff.out"), 4 * d, d, Init::Normal(residual_std / 2.0))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            token_embedding,
            position_embedding,
            blocks,
            final_norm: Norm::build(b, "backbone.ln_f", d)?,
            heads: config.heads,
            max_len: config.max_seq_len,
        })
    }

    /// Every parameter of the backbone, embeddings included.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.token_embedding, self.position_embedding];
        for blk in &self.blocks {
            ids.extend([blk.ln1.gain, blk.ln1.bias, blk.ln2.gain, blk.ln2.bias]);
            for l in [&blk.query, &blk.key, &blk.value, &blk.out, &blk.ff_in, &blk.ff_out] {
                ids.extend(l.ids());
            }
        }
        ids.extend([self.final_norm.gain, self.final_norm.bias]);
        ids
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Token embeddings `[L×D]` for `ids`.
    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.token_embedding);
        tape.embedding(table, ids)
    }

    /// Hidden states `[K×D]` for a `[K×D]` input occupying positions `0..K`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        self.forward_at(tape, store, z, 0)
    }

    /// As [`forward`](Self::forward), with the input occupying positions
    /// `offset..offset + K`.
    pub fn forward_at(&self, tape: &mut Tape, store: &ParamStore, z: Var, offset: usize) -> Result<Var> {
        let (k, d) = tape.value(z).dims2()?;
        if offset + k > self.max_len {
            return Err(Error::Length {
                len: offset + k,
                max: self.max_len,
            });
        }
        let table = tape.param(store, self.position_embedding);
        let pos = tape.slice(table, 0, offset, k)?;
        let mut x = tape.add(z, pos)?;
        for blk in &self.blocks {
            let h = blk.ln1.forward(tape, store, x)?;
            let q = blk.query.forward(tape, store, h)?;
            let kk = blk.key.forward(tape, store, h)?;
            let v = blk.value.forward(tape, store, h)?;
            let a = tape.causal_attention(q, kk, v, self.heads)?;
            let a = blk.out.forward(tape, store, a)?;
            x = tape.add(x, a)?;
            let h = blk.ln2.forward(tape, store, x)?;
            let f = blk.ff_in.forward(tape, store, h)?;
            let f = tape.gelu(f);
            let f = blk.ff_out.forward(tape, store, f)?;
            x = tape.add(x, f)?;
        }
        let out = self.final_norm.forward(tape, store, x)?;
        debug_assert_eq!(tape.value(out).shape(), &[k, d]);
        Ok(out)
    }
}

/// Affine map from hidden states to vocabulary logits.
pub struct VocabHead {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl VocabHead {
    pub fn build(b: &mut ParamBuilder<'_>, config: &ModelConfig) -> Result<Self> {
        Ok(Self {
            weight: b.param("head.w", &[config.d_model, config.vocab_size], Init::Normal(0.02), true)?,
            bias: b.param("head.b", &[config.vocab_size], Init::Zeros, true)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }

    /// Logits `[K×V]` for hidden states `[K×D]` (a single state is `[1×D]`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, hidden: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(hidden, w)?;
        tape.add(y, b)
    }
}
