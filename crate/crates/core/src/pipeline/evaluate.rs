use serde::{Deserialize, Serialize};

use super::generate::{generate, GenerationResult};
use crate::data::{normalize_report, parse_report, DatasetRecord, SceneSpec};
use crate::error::{Error, Result};
use crate::metrics::{score_corpus, MetricReport};
use crate::model::Model;
use crate::prompt::Ablation;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: MetricReport,
    pub generations: Vec<GenerationResult>,
}

/// Scores aligned hypothesis/reference text.
pub fn score<H: AsRef<str>>(hypotheses: &[H], records: &[DatasetRecord]) -> Result<MetricReport> {
    let refs: Vec<String> = records.iter().map(|r| normalize_report(&r.report)).collect();
    score_corpus(hypotheses, &refs)
}

/// Generates a report for every record and scores the corpus.
pub fn evaluate_with(model: &Model, records: &[DatasetRecord], ablation: Ablation, max_len: usize) -> Result<Evaluation> {
    if records.is_empty() {
        return Err(Error::Contract("cannot evaluate an empty split".into()));
    }
    let generations = records
        .iter()
        .map(|r| generate(model, &r.image, max_len, ablation))
        .collect::<Result<Vec<_>>>()?;
    let hyps: Vec<&str> = generations.iter().map(|g| g.text.as_str()).collect();
    Ok(Evaluation {
        report: score(&hyps, records)?,
        generations,
    })
}

/// Corpus metrics of greedy generations on `records`, with no ablation and
/// room for the longest report the model's sequence length allows.
pub fn evaluate(model: &Model, records: &[DatasetRecord]) -> Result<MetricReport> {
    Ok(evaluate_with(model, records, Ablation::NONE, model.config.max_seq_len)?.report)
}

/// Whether `text` parses under the report grammar to exactly the shapes of
/// `scene`. Text outside the grammar never counts.
pub fn reconstructs(text: &str, scene: &SceneSpec) -> bool {
    parse_report(text).is_ok_and(|s| s.same_shapes(scene))
}

/// Fraction of generations whose record scene they reconstruct. Records
/// without a scene are skipped; `None` when no record has one.
pub fn reconstruction_rate(generations: &[GenerationResult], records: &[DatasetRecord]) -> Option<f64> {
    let hits: Vec<bool> = generations
        .iter()
        .zip(records)
        .filter_map(|(g, r)| r.scene.as_ref().map(|s| reconstructs(&g.text, s)))
        .collect();
    if hits.is_empty() {
        return None;
    }
    Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
