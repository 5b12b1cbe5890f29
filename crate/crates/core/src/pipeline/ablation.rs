use std::fmt;
use std::io::Write;
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};

use super::evaluate::evaluate_with;
use super::train::{fit, TrainConfig, TrainReport};
use crate::autodiff::ParamStore;
use crate::data::{DatasetRecord, Tokenizer};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Model, ModelConfig};
use crate::prompt::{Ablation, CustomizationMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Suite {
    /// The three customization modes.
    Table2,
    /// `Table3Train` followed by the inference-time drops.
    Table3,
    Table3Train,
    Table3Inference,
    /// Parameter-network depth 1, 2, 3.
    Table4,
    /// Prompt counts 1, 4, M and 2M.
    Fig4,
}

impl Suite {
    pub const ALL: [Suite; 6] = [
        Suite::Table2,
        Suite::Table3,
        Suite::Table3Train,
        Suite::Table3Inference,
        Suite::Table4,
        Suite::Fig4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Table2 => "table2",
            Suite::Table3 => "table3",
            Suite::Table3Train => "table3-train",
            Suite::Table3Inference => "table3-inference",
            Suite::Table4 => "table4",
            Suite::Fig4 => "fig4",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|x| x.as_str() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|x| x.as_str()).collect();
            Error::Config(format!("unknown suite {s:?}; valid suites: {}", names.join(", ")))
        })
    }
}

/// One trained model and the inference variants evaluated on it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingCell {
    pub id: String,
    pub train: TrainConfig,
    /// `(cell id, inference ablation)`.
    pub evaluations: Vec<(String, Ablation)>,
}

const DROP_GAMMA: Ablation = Ablation {
    drop_gamma: true,
    drop_beta: false,
};
const DROP_BETA: Ablation = Ablation {
    drop_gamma: false,
    drop_beta: true,
};

/// The training runs a suite needs, with `base` as the template.
pub fn plan(suite: Suite, model: &ModelConfig, base: &TrainConfig) -> Vec<TrainingCell> {
    let cell = |id: &str, train: TrainConfig| TrainingCell {
        id: id.to_string(),
        train,
        evaluations: vec![(id.to_string(), Ablation::NONE)],
    };
    let prompt_wise = TrainConfig {
        mode: CustomizationMode::PromptWise,
        ..base.clone()
    };
    let train_drops = || {
        vec![
            cell("full", prompt_wise.clone()),
            cell(
                "train-no-gamma",
                TrainConfig {
                    train_ablation: DROP_GAMMA,
                    ..prompt_wise.clone()
                },
            ),
            cell(
                "train-no-beta",
                TrainConfig {
                    train_ablation: DROP_BETA,
                    ..prompt_wise.clone()
                },
            ),
        ]
    };
    let inference_drops = || {
        vec![
            ("infer-no-gamma".to_string(), DROP_GAMMA),
            ("infer-no-beta".to_string(), DROP_BETA),
        ]
    };
    match suite {
        Suite::Table2 => CustomizationMode::ALL
            .into_iter()
            .map(|mode| cell(mode.as_str(), TrainConfig { mode, ..base.clone() }))
            .collect(),
        Suite::Table3Train => train_drops(),
        Suite::Table3Inference => {
            let mut full = cell("full", prompt_wise.clone());
            full.evaluations.extend(inference_drops());
            vec![full]
        }
        Suite::Table3 => {
            let mut cells = train_drops();
            cells[0].evaluations.extend(inference_drops());
            cells
        }
        Suite::Table4 => (1..=3)
            .map(|depth| {
                cell(
                    &format!("depth-{depth}"),
                    TrainConfig {
                        param_net_depth: depth,
                        ..prompt_wise.clone()
                    },
                )
            })
            .collect(),
        Suite::Fig4 => {
            let m = model.num_visual;
            let mut counts = vec![1, 4, m, 2 * m];
            counts.dedup();
            counts
                .into_iter()
                .map(|n| {
                    cell(
                        &format!("prompts-{n}"),
                        TrainConfig {
                            num_prompts: n,
                            ..prompt_wise.clone()
                        },
                    )
                })
                .collect()
        }
    }
}

/// One CSV row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub suite: String,
    #[serde(rename = "cell-id")]
    pub cell_id: String,
    pub mode: CustomizationMode,
    pub depth: usize,
    pub num_prompts: usize,
    pub drop_gamma: bool,
    pub drop_beta: bool,
    pub seed: u64,
    #[serde(rename = "BL1")]
    pub bl1: f64,
    #[serde(rename = "BL2")]
    pub bl2: f64,
    #[serde(rename = "BL3")]
    pub bl3: f64,
    #[serde(rename = "BL4")]
    pub bl4: f64,
    #[serde(rename = "RGL")]
    pub rgl: f64,
    #[serde(rename = "MTR")]
    pub mtr: f64,
}

pub const CSV_COLUMNS: [&str; 14] = [
    "suite", "cell-id", "mode", "depth", "num_prompts", "drop_gamma", "drop_beta", "seed", "BL1", "BL2", "BL3", "BL4",
    "RGL", "MTR",
];

impl AblationRow {
    pub fn metrics(&self) -> MetricReport {
        MetricReport {
            bleu1: self.bl1,
            bleu2: self.bl2,
            bleu3: self.bl3,
            bleu4: self.bl4,
            rouge_l: self.rgl,
            meteor: self.mtr,
        }
    }
}

/// Inputs shared by every cell of a suite.
pub struct AblationSetup<'a> {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub tokenizer: &'a Tokenizer,
    /// Frozen backbone and head shared by every cell.
    pub lm: &'a ParamStore,
    pub train_records: &'a [DatasetRecord],
    pub val_records: &'a [DatasetRecord],
    pub test_records: &'a [DatasetRecord],
}

/// A model built on the shared backbone and trained with `train`.
pub fn train_model(setup: &AblationSetup<'_>, train: &TrainConfig) -> Result<(Model, TrainReport)> {
    let config = train.model_config(&setup.model);
    let mut model = Model::build(config, setup.tokenizer.clone(), train.seed, Some(setup.lm))?;
    let report = fit(&mut model, setup.train_records, setup.val_records, train)?;
    Ok((model, report))
}

/// Runs every cell of `suite` for each seed and evaluates on the test split.
/// `observe` sees each trained model before its evaluations.
pub fn run_ablation_with(
    suite: Suite,
    setup: &AblationSetup<'_>,
    seeds: &[u64],
    mut observe: impl FnMut(&TrainingCell, u64, &Model, &TrainReport),
) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for &seed in seeds {
        for cell in plan(suite, &setup.model, &setup.train) {
            let train = TrainConfig { seed, ..cell.train.clone() };
            info!("{suite} / {} / seed {seed}: training", cell.id);
            let (model, report) = train_model(setup, &train)?;
            observe(&cell, seed, &model, &report);
            for (id, inference) in &cell.evaluations {
                let m = evaluate_with(&model, setup.test_records, *inference, train.max_report_len + 1)?.report;
                info!("{suite} / {id} / seed {seed}: BL4 {:.4}", m.bleu4);
                rows.push(AblationRow {
                    suite: suite.to_string(),
                    cell_id: id.clone(),
                    mode: train.mode,
                    depth: train.param_net_depth,
                    num_prompts: train.num_prompts,
                    drop_gamma: train.train_ablation.drop_gamma || inference.drop_gamma,
                    drop_beta: train.train_ablation.drop_beta || inference.drop_beta,
                    seed,
                    bl1: m.bleu1,
                    bl2: m.bleu2,
                    bl3: m.bleu3,
                    bl4: m.bleu4,
                    rgl: m.rouge_l,
                    mtr: m.meteor,
                });
            }
        }
    }
    Ok(rows)
}

pub fn run_ablation(suite: Suite, setup: &AblationSetup<'_>, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    run_ablation_with(suite, setup, seeds, |_, _, _, _| {})
}

pub fn write_csv<W: Write>(rows: &[AblationRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let csv_err = |e: csv::Error| Error::Invariant(format!("csv output: {e}"));
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Invariant(format!("csv output: {e}")))?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(input: R) -> Result<Vec<AblationRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<Vec<AblationRow>, _>>()
        .map_err(|e| Error::Invariant(format!("csv input: {e}")))
}
