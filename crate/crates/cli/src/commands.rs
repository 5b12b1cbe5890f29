use std::fs;
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _};
use log::info;
use serde::Serialize;
use serde_json::json;

use promptbook_core::data::{
    filter_split, generate_dataset, load_dataset, normalize_report, resolve_manifest, write_dataset, DatasetRecord,
    Image, ImageDims, Split, Tokenizer,
};
use promptbook_core::metrics::MetricReport;
use promptbook_core::model::{pretrain_and_freeze, LanguageModel, Model};
use promptbook_core::pipeline::{self, evaluate_with, fit, reconstruction_rate, run_ablation, write_csv, AblationSetup};
use promptbook_core::prompt::Ablation;

use crate::config::FileConfig;
use crate::run::{create_run_dir, RunManifest, RUN_MANIFEST};
use crate::{AblateArgs, AblationArgs, EvaluateArgs, GenDataArgs, GenerateArgs, PretrainArgs, TrainArgs, Usage};

impl From<AblationArgs> for Ablation {
    fn from(a: AblationArgs) -> Self {
        Ablation {
            drop_gamma: a.drop_gamma,
            drop_beta: a.drop_beta,
        }
    }
}

/// The manifest behind `--data`, which must exist.
fn data_manifest(path: &Path) -> anyhow::Result<PathBuf> {
    let manifest = resolve_manifest(path);
    if !manifest.is_file() {
        return Err(Usage(format!("dataset manifest {} not found", manifest.display())).into());
    }
    Ok(manifest)
}

/// Seed recorded by `gen-data` next to the manifest, if any.
fn dataset_seed(manifest: &Path) -> Option<u64> {
    let run = manifest.parent()?.join(RUN_MANIFEST);
    let m = RunManifest::read(&run).ok()?;
    (m.command == "gen-data").then_some(m.seed)
}

fn load_split(manifest: &Path, dims: ImageDims, split: Split) -> anyhow::Result<Vec<DatasetRecord>> {
    let records = load_dataset(manifest, dims)?;
    Ok(filter_split(&records, split))
}

fn train_split(manifest: &Path, dims: ImageDims) -> anyhow::Result<(Vec<DatasetRecord>, Vec<DatasetRecord>, Vec<DatasetRecord>)> {
    let records = load_dataset(manifest, dims)?;
    let train = filter_split(&records, Split::Train);
    if train.is_empty() {
        return Err(Usage(format!("{}: empty train split", manifest.display())).into());
    }
    Ok((train, filter_split(&records, Split::Val), filter_split(&records, Split::Test)))
}

fn run_dir(root: &Path, seed: u64) -> anyhow::Result<PathBuf> {
    create_run_dir(root, seed).map_err(|e| Usage(format!("cannot create a run directory under {}: {e}", root.display())).into())
}

pub fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let mut cfg = file.data;
    cfg.n_train = a.n_train.unwrap_or(cfg.n_train);
    cfg.n_val = a.n_val.unwrap_or(cfg.n_val);
    cfg.n_test = a.n_test.unwrap_or(cfg.n_test);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    let mut run = RunManifest::new("gen-data", cfg.seed, json!({ "data": cfg }));
    let records = run.time("generate", || generate_dataset(&cfg))?;
    fs::create_dir_all(&a.out).map_err(|e| Usage(format!("cannot create {}: {e}", a.out.display())))?;
    let manifest = run
        .time("write", || write_dataset(&a.out, &records))
        .map_err(|e| Usage(format!("cannot write the dataset: {e}")))?;
    let count = |s| records.iter().filter(|r| r.split == s).count();
    let (train, val, test) = (count(Split::Train), count(Split::Val), count(Split::Test));
    println!("train {train}, val {val}, test {test}");
    run.dataset_seed = Some(cfg.seed);
    run.outputs.insert("manifest".into(), manifest);
    run.results = json!({ "train": train, "val": val, "test": test });
    run.write(&a.out)?;
    Ok(())
}

pub fn pretrain_lm(a: PretrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let mut pre = file.pretrain.clone();
    pre.seed = a.seed.unwrap_or(pre.seed);
    pre.epochs = a.epochs.unwrap_or(pre.epochs);
    pre.lr = a.lr.unwrap_or(pre.lr);
    let manifest = data_manifest(&a.data.data)?;
    let (train, val, test) = train_split(&manifest, file.data.image)?;
    let corpus: Vec<&str> = train.iter().map(|r| r.report.as_str()).collect();
    let tokenizer = Tokenizer::build(&corpus);
    let model = file.model_config(tokenizer.len(), train[0].image.dims())?;
    let mut run = RunManifest::new("pretrain-lm", pre.seed, json!({ "model": model, "pretrain": pre }));
    run.dataset_seed = dataset_seed(&manifest);
    run.inputs.insert("data".into(), manifest.clone());

    let (lm, report) = run.time("pretrain", || pretrain_and_freeze(&model, &tokenizer, &corpus, &pre))?;
    let held_out: Vec<&str> = if val.is_empty() { &test } else { &val }.iter().map(|r| r.report.as_str()).collect();
    let held_out = if held_out.is_empty() { corpus.clone() } else { held_out };
    let baseline = LanguageModel::new(model.clone(), tokenizer.clone(), pre.seed)?.perplexity(&held_out)?;
    let perplexity = lm.perplexity(&held_out)?;
    println!("held-out perplexity {perplexity:.4} (random init {baseline:.4})");

    let dir = run_dir(&a.out, pre.seed)?;
    let path = dir.join("lm.ckpt");
    lm.save(&path)?;
    run.outputs.insert("checkpoint".into(), path);
    run.results = json!({
        "perplexity": perplexity,
        "random_init_perplexity": baseline,
        "epoch_losses": report.epoch_losses,
        "steps": report.steps,
        "backbone_hash": lm.hash(),
    });
    run.write(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let mut cfg = file.train.clone();
    cfg.mode = a.mode.unwrap_or(cfg.mode);
    cfg.num_prompts = a.num_prompts.unwrap_or(cfg.num_prompts);
    cfg.param_net_depth = a.param_net_depth.unwrap_or(cfg.param_net_depth);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.lr = a.lr.unwrap_or(cfg.lr);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    if a.ablation.drop_gamma || a.ablation.drop_beta {
        cfg.train_ablation = a.ablation.into();
    }
    cfg.validate()?;
    let manifest = data_manifest(&a.data.data)?;
    let lm = LanguageModel::load(&a.lm_checkpoint)?;
    let (train, val, _) = train_split(&manifest, lm.config.image)?;
    let lm_hash = lm.hash();
    let mut model = Model::build(cfg.model_config(&lm.config), lm.tokenizer.clone(), cfg.seed, Some(&lm.store))?;
    let mut run = RunManifest::new("train", cfg.seed, json!({ "model": model.config, "train": cfg }));
    run.dataset_seed = dataset_seed(&manifest);
    run.inputs.insert("data".into(), manifest.clone());
    run.inputs.insert("lm_checkpoint".into(), a.lm_checkpoint.clone());

    let report = run.time("train", || fit(&mut model, &train, &val, &cfg))?;
    if model.backbone_hash() != lm_hash {
        return Err(anyhow!("backbone changed during training"));
    }
    let best = report.val_bleu4.iter().find(|(e, _)| *e == report.best_epoch).map(|(_, b)| *b);
    println!(
        "loss {:.4} -> {:.4}, kept epoch {}{}",
        report.initial_loss,
        report.final_loss(),
        report.best_epoch,
        best.map(|b| format!(" (val BLEU-4 {b:.4})")).unwrap_or_default()
    );

    let dir = run_dir(&a.out, cfg.seed)?;
    let path = dir.join("model.ckpt");
    model.save(&path)?;
    run.outputs.insert("checkpoint".into(), path);
    run.results = json!({
        "report": report,
        "backbone_hash": lm_hash,
        "trainable_hash": model.trainable_hash(),
    });
    run.write(&dir)?;
    println!("{}", dir.display());
    Ok(())
}

pub fn generate(a: GenerateArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let ablation = Ablation::from(a.ablation);
    if let Some(path) = &a.image {
        let image = Image::read(path)?;
        let g = pipeline::generate(&model, &image, a.max_len, ablation)?;
        println!("{}", g.text);
        return Ok(());
    }
    let data = a.data.as_deref().ok_or_else(|| Usage("either --image or --data is required".into()))?;
    let records = load_split(&data_manifest(data)?, model.config.image, a.split.unwrap_or(Split::Test))?;
    let mut out = BufWriter::new(std::io::stdout().lock());
    for r in &records {
        let g = pipeline::generate(&model, &r.image, a.max_len, ablation)?;
        serde_json::to_writer(&mut out, &g)?;
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EvaluationOutput {
    #[serde(flatten)]
    metrics: MetricReport,
    split: Split,
    records: usize,
    /// Fraction of reports that parse to exactly the scene's shapes.
    reconstruction: Option<f64>,
}

pub fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let records = load_split(&data_manifest(&a.data.data)?, model.config.image, a.split)?;
    if records.is_empty() {
        return Err(Usage(format!("the {} split is empty", a.split)).into());
    }
    let eval = evaluate_with(&model, &records, a.ablation.into(), a.max_len)?;
    if let Some(path) = &a.pairs {
        let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
        w.write_record(["index", "hypothesis", "reference"])?;
        for (i, (g, r)) in eval.generations.iter().zip(&records).enumerate() {
            w.write_record([i.to_string(), g.text.clone(), normalize_report(&r.report)])?;
        }
        w.flush()?;
    }
    let output = EvaluationOutput {
        metrics: eval.report,
        split: a.split,
        records: records.len(),
        reconstruction: reconstruction_rate(&eval.generations, &records),
    };
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

pub fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let file = FileConfig::load(a.config.config.as_deref())?;
    let mut base = file.train.clone();
    base.epochs = a.epochs.unwrap_or(base.epochs);
    base.validate()?;
    let manifest = data_manifest(&a.data.data)?;
    let lm = LanguageModel::load(&a.lm_checkpoint)?;
    let (train, val, test) = train_split(&manifest, lm.config.image)?;
    if test.is_empty() {
        return Err(Usage(format!("{}: empty test split", manifest.display())).into());
    }
    let setup = AblationSetup {
        model: lm.config.clone(),
        train: base.clone(),
        tokenizer: &lm.tokenizer,
        lm: &lm.store,
        train_records: &train,
        val_records: &val,
        test_records: &test,
    };
    let seed = a.seeds.first().copied().unwrap_or(0);
    let mut run = RunManifest::new(
        "ablate",
        seed,
        json!({ "suite": a.suite.as_str(), "seeds": a.seeds, "model": lm.config, "train": base }),
    );
    run.dataset_seed = dataset_seed(&manifest);
    run.inputs.insert("data".into(), manifest.clone());
    run.inputs.insert("lm_checkpoint".into(), a.lm_checkpoint.clone());
    let rows = run.time("ablate", || run_ablation(a.suite, &setup, &a.seeds))?;

    let dir = run_dir(&a.out, seed)?;
    let path = dir.join(format!("{}.csv", a.suite));
    let mut bytes = Vec::new();
    write_csv(&rows, &mut bytes)?;
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    std::io::stdout().write_all(&bytes)?;
    info!("wrote {} rows to {}", rows.len(), path.display());
    run.outputs.insert("csv".into(), path);
    run.results = json!({ "rows": rows.len() });
    run.write(&dir)?;
    Ok(())
}
