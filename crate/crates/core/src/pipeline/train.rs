use log::{info, warn};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::evaluate::evaluate_with;
use super::sequence::{assemble, masked_loss};
use crate::autodiff::{Adam, AdamConfig, ParamStore, Tape, Var};
use crate::data::{DatasetRecord, Image, Tokenizer, BOS};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::prompt::{Ablation, CustomizationMode};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Report words kept per record; longer reports are truncated and counted.
    pub max_report_len: usize,
    pub seed: u64,
    pub mode: CustomizationMode,
    pub param_net_depth: usize,
    pub num_prompts: usize,
    /// Factors held at their identity element throughout training.
    pub train_ablation: Ablation,
    /// Validation BLEU-4 is measured every this many epochs (0 disables it).
    pub eval_every: usize,
    /// Validation records used for checkpoint selection (0 means all).
    pub val_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-3,
            batch_size: 8,
            epochs: 30,
            max_report_len: 36,
            seed: 0,
            mode: CustomizationMode::PromptWise,
            param_net_depth: 2,
            num_prompts: 16,
            train_ablation: Ablation::NONE,
            eval_every: 1,
            val_limit: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || self.batch_size == 0 || self.epochs == 0 || self.max_report_len == 0 {
            return Err(Error::Config(format!(
                "lr, batch_size, epochs and max_report_len must be positive: {self:?}"
            )));
        }
        if self.num_prompts == 0 || !(1..=3).contains(&self.param_net_depth) {
            return Err(Error::Config(format!(
                "num_prompts must be positive and param_net_depth in 1..=3: {self:?}"
            )));
        }
        if self.train_ablation.drop_gamma && self.train_ablation.drop_beta {
            return Err(Error::Config("training cannot drop both gamma and beta".into()));
        }
        Ok(())
    }

    /// `base` with this run's mode, depth and prompt count.
    pub fn model_config(&self, base: &ModelConfig) -> ModelConfig {
        ModelConfig {
            mode: self.mode,
            param_net_depth: self.param_net_depth,
            num_prompts: self.num_prompts,
            ..base.clone()
        }
    }
}

/// Text-segment ids `[BOS, w₁, …]` for a report, truncated to `max_len` words.
/// Returns whether truncation happened.
pub fn prepare_text(tokenizer: &Tokenizer, report: &str, max_len: usize) -> (Vec<usize>, bool) {
    let mut words = tokenizer.encode_words(report);
    let truncated = words.len() > max_len;
    words.truncate(max_len);
    let mut ids = Vec::with_capacity(words.len() + 1);
    ids.push(BOS);
    ids.extend(words);
    (ids, truncated)
}

/// Teacher-forced loss for one record, with the number of supervised tokens.
pub fn record_loss(tape: &mut Tape, model: &Model, image: &Image, text_ids: &[usize], ablation: Ablation) -> Result<(Var, usize)> {
    let prefix = model.prefix(tape, image, ablation)?;
    let seq = assemble(tape, model, prefix.visual, prefix.prompts, text_ids)?;
    let hidden = model.llm_forward(tape, seq.z)?;
    let logits = model.vocab_logits(tape, hidden)?;
    Ok((masked_loss(tape, logits, &seq.layout, text_ids)?, seq.layout.text))
}

/// Token-mean loss over a batch; gradients accumulate into the model's store.
pub fn batch_loss_and_grads(model: &mut Model, batch: &[(&Image, &[usize])], ablation: Ablation) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::DegenerateBatch);
    }
    let total: usize = batch.iter().map(|(_, ids)| ids.len()).sum();
    let mut loss = 0.0;
    for (image, ids) in batch {
        let mut tape = Tape::new();
        let (l, count) = record_loss(&mut tape, model, image, ids, ablation)?;
        let weighted = tape.scale(l, count as f64 / total as f64);
        loss += tape.value(weighted).item();
        tape.backward(weighted, &mut model.store)?;
    }
    Ok(loss)
}

/// One optimizer step on a batch. Returns the loss before the update.
pub fn train_step(model: &mut Model, adam: &mut Adam, batch: &[(&Image, &[usize])], ablation: Ablation) -> Result<f64> {
    model.store.zero_grad();
    let loss = batch_loss_and_grads(model, batch, ablation)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("training loss"));
    }
    adam.step(&mut model.store)?;
    model.store.zero_grad();
    Ok(loss)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub initial_loss: f64,
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// `(epoch, BLEU-4)` on the validation subset.
    pub val_bleu4: Vec<(usize, f64)>,
    /// Epoch whose parameters were kept (1-based).
    pub best_epoch: usize,
    pub truncated_reports: usize,
    pub steps: usize,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(f64::NAN)
    }
}

fn snapshot(store: &ParamStore) -> Vec<crate::autodiff::Tensor> {
    store.iter().map(|(_, p)| p.value.clone()).collect()
}

/// Trains the model's trainable components on `train` and keeps the
/// parameters with the best validation BLEU-4 (the last epoch when
/// validation is disabled).
pub fn fit(model: &mut Model, train: &[DatasetRecord], val: &[DatasetRecord], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty training split".into()));
    }
    let limit = model.config.max_seq_len - model.config.num_visual - model.config.num_prompts - 1;
    if config.max_report_len > limit {
        return Err(Error::Config(format!(
            "max_report_len {} does not fit in K_max = {} after M + N + 1 positions",
            config.max_report_len, model.config.max_seq_len
        )));
    }
    let mut report = TrainReport::default();
    let texts: Vec<Vec<usize>> = train
        .iter()
        .map(|r| {
            let (ids, truncated) = prepare_text(&model.tokenizer, &r.report, config.max_report_len);
            if truncated {
                report.truncated_reports += 1;
            }
            ids
        })
        .collect();
    if report.truncated_reports > 0 {
        warn!(
            "{} training reports exceed {} words and were truncated",
            report.truncated_reports, config.max_report_len
        );
    }
    let val = if config.val_limit > 0 && val.len() > config.val_limit {
        &val[..config.val_limit]
    } else {
        val
    };
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &model.store,
    );
    let mut shuffle = rng::stream(config.seed, "shuffle");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, Vec<crate::autodiff::Tensor>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(&Image, &[usize])> = chunk.iter().map(|&i| (&train[i].image, texts[i].as_slice())).collect();
            let loss = train_step(model, &mut adam, &batch, config.train_ablation)?;
            if report.steps == 0 {
                report.initial_loss = loss;
            }
            report.steps += 1;
            sum += loss;
            batches += 1;
        }
        let mean = sum / batches as f64;
        report.epoch_losses.push(mean);
        let validate = !val.is_empty() && config.eval_every > 0 && (epoch % config.eval_every == 0 || epoch == config.epochs);
        if validate {
            let bleu4 = evaluate_with(model, val, config.train_ablation, config.max_report_len + 1)?.report.bleu4;
            info!("epoch {epoch}: loss {mean:.4}, val BLEU-4 {bleu4:.4}");
            report.val_bleu4.push((epoch, bleu4));
            if best.as_ref().is_none_or(|(b, _)| bleu4 > *b) {
                best = Some((bleu4, snapshot(&model.store)));
                report.best_epoch = epoch;
            }
        } else {
            info!("epoch {epoch}: loss {mean:.4}");
        }
    }
    match best {
        Some((_, values)) => {
            for ((_, p), v) in model.store.iter_mut().zip(values) {
                p.value = v;
            }
        }
        None => report.best_epoch = config.epochs,
    }
    Ok(report)
}
