//! Acceptance run: one PASS/FAIL line per criterion on stdout, progress on
//! stderr. `ACCEPTANCE_ONLY=1,2,8` restricts the run to some criteria.
//! A failing criterion is reported, not fatal: the process exits non-zero
//! only when `ACCEPTANCE_STRICT=1` is set.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;

use promptbook_core::autodiff::{Tape, Tensor};
use promptbook_core::data::{
    filter_split, generate_dataset, generate_record_with, DatasetRecord, Split, SyntheticConfig, Tokenizer, BOS, EOS,
};
use promptbook_core::metrics::{bleu, lcs_len, meteor_pair, rouge_l_pair, score_corpus, ROUGE_BETA};
use promptbook_core::model::{pretrain_and_freeze, LanguageModel, Model, ModelConfig, PretrainConfig};
use promptbook_core::pipeline::{
    argmax, assemble, evaluate_with, generate, plan, reconstruction_rate, record_loss, run_ablation, run_ablation_with,
    AblationRow, AblationSetup, Suite, Termination, TrainConfig,
};
use promptbook_core::prompt::{Ablation, CustomizationMode};
use promptbook_core::rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {n:>2} {name}: {}", o.detail);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

// ---------------------------------------------------------------- tiny config

fn tiny_tokenizer() -> Tokenizer {
    let v = ModelConfig::tiny().vocab_size;
    let words: Vec<String> = (0..v - 4).map(|i| format!("w{i}")).collect();
    Tokenizer::build(&[words.join(" ")])
}

fn tiny_model(mode: CustomizationMode, seed: u64) -> Model {
    let config = ModelConfig {
        mode,
        ..ModelConfig::tiny()
    };
    let mut m = Model::build(config, tiny_tokenizer(), seed, None).unwrap();
    m.freeze_backbone();
    m
}

/// Gradient of the teacher-forced loss against central differences (h = 1e-5)
/// on every trainable coordinate. The zero-initialized head of φ is replaced
/// with small random values so that the trunk receives gradient.
fn criterion_gradients() -> Outcome {
    let start = Instant::now();
    let (mut total, mut within) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    let mut per_group: BTreeMap<&str, usize> = BTreeMap::new();
    for seed in 0..5u64 {
        let mut m = tiny_model(CustomizationMode::PromptWise, seed);
        let mut r = rng::stream(seed, "acceptance.fd");
        for name in ["phi.head.w", "phi.head.b"] {
            let id = m.store.id(name).unwrap();
            let shape = m.store.get(id).value.shape().to_vec();
            m.store.get_mut(id).value = Tensor::from_fn(&shape, |_| r.random_range(-0.3..0.3));
        }
        let image = generate_record_with(seed, m.config.image, 3, Split::Train).unwrap().image;
        let mut ids = vec![BOS];
        ids.extend((0..6).map(|_| r.random_range(4..m.config.vocab_size)));
        let loss = |m: &Model| {
            let mut tape = Tape::inference();
            let (l, _) = record_loss(&mut tape, m, &image, &ids, Ablation::NONE).unwrap();
            tape.value(l).item()
        };
        m.store.zero_grad();
        let mut tape = Tape::new();
        let (l, _) = record_loss(&mut tape, &m, &image, &ids, Ablation::NONE).unwrap();
        tape.backward(l, &mut m.store).unwrap();
        let trainable: Vec<_> = m.store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
        for id in trainable {
            let analytic = m.store.get(id).grad.clone().unwrap();
            let name = m.store.get(id).name.clone();
            let group = ["encoder", "projection", "prompt", "phi"]
                .into_iter()
                .find(|g| name.starts_with(g))
                .unwrap_or("other");
            *per_group.entry(group).or_default() += analytic.numel();
            for i in 0..analytic.numel() {
                let h = 1e-5;
                let orig = m.store.get(id).value.data()[i];
                m.store.get_mut(id).value.data_mut()[i] = orig + h;
                let plus = loss(&m);
                m.store.get_mut(id).value.data_mut()[i] = orig - h;
                let minus = loss(&m);
                m.store.get_mut(id).value.data_mut()[i] = orig;
                let numeric = (plus - minus) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(rel);
                total += 1;
                within += usize::from(rel < 1e-4);
            }
        }
    }
    let frac = within as f64 / total as f64;
    let secs = start.elapsed().as_secs_f64();
    let groups: Vec<String> = per_group.iter().map(|(g, n)| format!("{g} {n}")).collect();
    outcome(
        frac >= 0.99 && secs < 120.0 && !per_group.contains_key("other") && per_group.len() == 4,
        format!(
            "{:.2}% of {total} coordinates within 1e-4 over 5 seeds (worst {worst:.1e}; {}), {secs:.1} s",
            100.0 * frac,
            groups.join(", ")
        ),
    )
}

/// Full forward logits of one image/text pair.
fn logits(m: &Model, image: &promptbook_core::data::Image, ids: &[usize]) -> Vec<f64> {
    let mut tape = Tape::inference();
    let prefix = m.prefix(&mut tape, image, Ablation::NONE).unwrap();
    let seq = assemble(&mut tape, m, prefix.visual, prefix.prompts, ids).unwrap();
    let h = m.llm_forward(&mut tape, seq.z).unwrap();
    let l = m.vocab_logits(&mut tape, h).unwrap();
    tape.value(l).data().to_vec()
}

fn criterion_identity() -> Outcome {
    let mut checked = 0;
    for (config, tokenizer) in [
        (ModelConfig::tiny(), tiny_tokenizer()),
        (ModelConfig::desk(22), {
            let words: Vec<String> = (0..18).map(|i| format!("w{i}")).collect();
            Tokenizer::build(&[words.join(" ")])
        }),
    ] {
        for seed in 0..3 {
            let build = |mode| {
                Model::build(ModelConfig { mode, ..config.clone() }, tokenizer.clone(), seed, None).unwrap()
            };
            let none = build(CustomizationMode::None);
            for mode in [CustomizationMode::PromptWise, CustomizationMode::BookWise] {
                let m = build(mode);
                for s in 0..4 {
                    let image = generate_record_with(seed * 10 + s, config.image, 3, Split::Train).unwrap().image;
                    let ids = [BOS, 4, 5, 6, 7];
                    if logits(&m, &image, &ids) != logits(&none, &image, &ids) {
                        return outcome(false, format!("{mode} differs from none (seed {seed}, image {s})"));
                    }
                    checked += 1;
                }
            }
        }
    }
    outcome(true, format!("{checked} forward passes bit-identical to mode none (tiny and desk configs)"))
}

fn criterion_metrics() -> Outcome {
    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-9 {
            failures.push(format!("{name}: {got} vs {want}"));
        }
    };
    check("BL1 clipping", bleu(&["the the the"], &["the cat"], 1).unwrap()[0], 1.0 / 3.0);
    check("BL1 brevity", bleu(&["a b"], &["a b c d"], 1).unwrap()[0], (-1.0f64).exp());
    let f = (1.0 + ROUGE_BETA * ROUGE_BETA) * 0.75 / (1.0 + ROUGE_BETA * ROUGE_BETA * 0.75);
    check("RGL", rouge_l_pair("a b c d", "a c d", ROUGE_BETA), f);
    check("RGL disjoint", rouge_l_pair("a b", "c d", ROUGE_BETA), 0.0);
    check("MTR identity", meteor_pair("a b c", "a b c"), 1.0 - 0.5 / 27.0);
    check("MTR swap", meteor_pair("b a", "a b"), 0.5);
    check("MTR disjoint", meteor_pair("a b", "c d"), 0.0);

    let corpus: Vec<String> = (0..50)
        .map(|i| generate_record_with(i, Default::default(), 3, Split::Test).unwrap().report)
        .collect();
    let identity = score_corpus(&corpus, &corpus).unwrap();
    let exact = [identity.bleu1, identity.bleu2, identity.bleu3, identity.bleu4, identity.rouge_l];
    if exact.iter().any(|v| *v != 1.0) {
        failures.push(format!("identity corpus {identity:?}"));
    }

    // exhaustive subsequence oracle
    let alphabet = ["a", "b", "c"];
    let mut r = rng::stream(0, "acceptance.lcs");
    let mut pairs = 0;
    for _ in 0..300 {
        let la = r.random_range(0..=8);
        let lb = r.random_range(0..=8);
        let a: Vec<&str> = (0..la).map(|_| alphabet[r.random_range(0..3)]).collect();
        let b: Vec<&str> = (0..lb).map(|_| alphabet[r.random_range(0..3)]).collect();
        let brute = (0u32..1 << la)
            .filter_map(|mask| {
                let sub: Vec<&str> = (0..la).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
                let mut it = b.iter();
                sub.iter().all(|w| it.any(|x| x == w)).then_some(sub.len())
            })
            .max()
            .unwrap_or(0);
        if lcs_len(&a, &b) != brute {
            failures.push(format!("LCS {a:?} {b:?}"));
        }
        pairs += 1;
    }
    let pass = failures.is_empty();
    let detail = if pass {
        format!("7 hand examples within 1e-9, identity corpus exactly 1.0, LCS matches brute force on {pairs} pairs")
    } else {
        failures.join("; ")
    };
    outcome(pass, detail)
}

// ---------------------------------------------------------------- desk scale

struct Desk {
    tokenizer: Tokenizer,
    config: ModelConfig,
    lm: LanguageModel,
    train: Vec<DatasetRecord>,
    val: Vec<DatasetRecord>,
    test: Vec<DatasetRecord>,
}

impl Desk {
    fn new() -> Self {
        let start = Instant::now();
        let records = generate_dataset(&SyntheticConfig::default()).unwrap();
        let (train, val, test) = (
            filter_split(&records, Split::Train),
            filter_split(&records, Split::Val),
            filter_split(&records, Split::Test),
        );
        let corpus: Vec<&str> = train.iter().map(|r| r.report.as_str()).collect();
        let tokenizer = Tokenizer::build(&corpus);
        let config = ModelConfig::desk(tokenizer.len());
        let (lm, _) = pretrain_and_freeze(&config, &tokenizer, &corpus, &PretrainConfig::default()).unwrap();
        eprintln!(
            "desk setup: {}/{}/{} records, V = {}, language model pretrained in {:.0} s",
            train.len(),
            val.len(),
            test.len(),
            tokenizer.len(),
            start.elapsed().as_secs_f64()
        );
        Self {
            tokenizer,
            config,
            lm,
            train,
            val,
            test,
        }
    }

    fn setup(&self, train: TrainConfig) -> AblationSetup<'_> {
        AblationSetup {
            model: self.config.clone(),
            train,
            tokenizer: &self.tokenizer,
            lm: &self.lm.store,
            train_records: &self.train,
            val_records: &self.val,
            test_records: &self.test,
        }
    }
}

/// What the three-seed mode comparison leaves behind for later criteria.
struct Trained {
    rows: Vec<AblationRow>,
    /// The prompt-wise model of seed 0.
    model: Model,
    /// `(cell, seed)` pairs whose backbone hash drifted.
    drifted: Vec<String>,
    cells: usize,
    trainable_before: String,
    trainable_after: String,
    secs: f64,
}

fn train_modes(desk: &Desk, seeds: &[u64]) -> Trained {
    let start = Instant::now();
    let setup = desk.setup(TrainConfig::default());
    let lm_hash = desk.lm.hash();
    let before = Model::build(desk.config.clone(), desk.tokenizer.clone(), 0, Some(&desk.lm.store))
        .unwrap()
        .trainable_hash();
    let mut kept = None;
    let mut drifted = Vec::new();
    let mut cells = 0;
    let rows = run_ablation_with(Suite::Table2, &setup, seeds, |cell, seed, model, report| {
        eprintln!(
            "  {} seed {seed}: loss {:.4} -> {:.4}, kept epoch {} ({:.0} s elapsed)",
            cell.id,
            report.initial_loss,
            report.final_loss(),
            report.best_epoch,
            start.elapsed().as_secs_f64()
        );
        cells += 1;
        if model.backbone_hash() != lm_hash {
            drifted.push(format!("{} seed {seed}", cell.id));
        }
        if cell.id == CustomizationMode::PromptWise.as_str() && seed == seeds[0] {
            kept = Some(model.checkpoint_bytes());
        }
    })
    .unwrap();
    let model = Model::from_bytes(&kept.unwrap()).unwrap();
    Trained {
        rows,
        trainable_after: model.trainable_hash(),
        model,
        drifted,
        cells,
        trainable_before: before,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn criterion_conservation(desk: &Desk, t: &Trained) -> Outcome {
    let pass = t.drifted.is_empty() && t.cells > 0 && t.trainable_before != t.trainable_after;
    outcome(
        pass,
        format!(
            "backbone hash {} unchanged in {}/{} trained models; trainable hash {} -> {}",
            &desk.lm.hash()[..12],
            t.cells - t.drifted.len(),
            t.cells,
            &t.trainable_before[..12],
            &t.trainable_after[..12]
        ),
    )
}

fn criterion_modes(t: &Trained, seeds: &[u64]) -> Outcome {
    let med = |mode: CustomizationMode| median(t.rows.iter().filter(|r| r.mode == mode).map(|r| r.bl4).collect());
    let (pw, bw, none) = (
        med(CustomizationMode::PromptWise),
        med(CustomizationMode::BookWise),
        med(CustomizationMode::None),
    );
    let per_seed: Vec<String> = t
        .rows
        .iter()
        .map(|r| format!("{}/{}={:.4}", r.cell_id, r.seed, r.bl4))
        .collect();
    eprintln!("  table2 BLEU-4: {}", per_seed.join(" "));
    // Largest max-min range across seeds within one mode, for reading a
    // failed ordering against seed noise.
    let spread = [CustomizationMode::PromptWise, CustomizationMode::BookWise, CustomizationMode::None]
        .into_iter()
        .map(|mode| {
            let v: Vec<f64> = t.rows.iter().filter(|r| r.mode == mode).map(|r| r.bl4).collect();
            v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
        })
        .fold(0.0, f64::max);
    outcome(
        pw >= bw && bw >= none && pw - none > 0.0 && t.secs < 45.0 * 60.0,
        format!(
            "median BLEU-4 over {} seeds: prompt_wise {pw:.4} >= book_wise {bw:.4} >= none {none:.4} \
             (seed spread up to {spread:.4}), {:.1} min",
            seeds.len(),
            t.secs / 60.0
        ),
    )
}

fn criterion_inference_drops(desk: &Desk, model: &Model) -> Outcome {
    let cell = plan(Suite::Table3Inference, &desk.config, &TrainConfig::default()).remove(0);
    let max_len = TrainConfig::default().max_report_len + 1;
    let scores: BTreeMap<String, f64> = cell
        .evaluations
        .iter()
        .map(|(id, ablation)| (id.clone(), evaluate_with(model, &desk.test, *ablation, max_len).unwrap().report.bleu1))
        .collect();
    let (full, no_gamma, no_beta) = (scores["full"], scores["infer-no-gamma"], scores["infer-no-beta"]);
    let (dg, db) = (full - no_gamma, full - no_beta);
    outcome(
        dg > db && db > 0.0,
        format!(
            "BLEU-1 full {full:.4}, drop-gamma {no_gamma:.4} (-{:.1}%), drop-beta {no_beta:.4} (-{:.1}%)",
            100.0 * dg / full,
            100.0 * db / full
        ),
    )
}

/// Execution-only sweeps use a short training budget.
fn sweep(desk: &Desk, suite: Suite, epochs: usize) -> (Vec<AblationRow>, f64) {
    let start = Instant::now();
    let setup = desk.setup(TrainConfig {
        epochs,
        ..TrainConfig::default()
    });
    let rows = run_ablation(suite, &setup, &[0]).unwrap();
    (rows, start.elapsed().as_secs_f64())
}

const SWEEP_EPOCHS: usize = 2;

fn criterion_depth(desk: &Desk) -> Outcome {
    let (rows, secs) = sweep(desk, Suite::Table4, SWEEP_EPOCHS);
    let depths: Vec<usize> = rows.iter().map(|r| r.depth).collect();
    let cells: Vec<String> = rows.iter().map(|r| format!("depth {} BLEU-4 {:.4}", r.depth, r.bl4)).collect();
    outcome(
        rows.len() == 3 && depths == [1, 2, 3],
        format!("{} rows ({}), {SWEEP_EPOCHS} epochs each, {secs:.0} s", rows.len(), cells.join(", ")),
    )
}

fn criterion_prompt_count(desk: &Desk) -> Outcome {
    let (rows, secs) = sweep(desk, Suite::Fig4, SWEEP_EPOCHS);
    let m = desk.config.num_visual;
    let counts: Vec<usize> = rows.iter().map(|r| r.num_prompts).collect();
    let cells: Vec<String> = rows.iter().map(|r| format!("N={} BLEU-4 {:.4}", r.num_prompts, r.bl4)).collect();
    outcome(
        counts == [1, 4, m, 2 * m],
        format!("cells {} with M = {m}, {SWEEP_EPOCHS} epochs each, {secs:.0} s", cells.join(", ")),
    )
}

/// Greedy decoding with the transform and backbone recomputed from scratch
/// at every step.
fn reference_decode(m: &Model, image: &promptbook_core::data::Image, max_len: usize) -> Vec<usize> {
    let v = m.config.vocab_size;
    let mut ids = vec![BOS];
    while ids.len() <= max_len {
        let all = logits(m, image, &ids);
        let next = argmax(&all[all.len() - v..]);
        ids.push(next);
        if next == EOS {
            break;
        }
    }
    ids
}

fn criterion_generation(desk: &Desk, model: &Model) -> Outcome {
    let max_len = TrainConfig::default().max_report_len + 1;
    let mut problems = Vec::new();
    let mut eos = 0;
    for (i, r) in desk.test.iter().take(100).enumerate() {
        let a = generate(model, &r.image, max_len, Ablation::NONE).unwrap();
        let b = generate(model, &r.image, max_len, Ablation::NONE).unwrap();
        let eos_count = a.ids.iter().filter(|&&t| t == EOS).count();
        let eos_ok = match a.terminated_by {
            Termination::Eos => eos_count == 1 && a.ids.last() == Some(&EOS),
            Termination::MaxLen => eos_count == 0,
        };
        eos += usize::from(a.terminated_by == Termination::Eos);
        if a != b {
            problems.push(format!("image {i}: nondeterministic"));
        }
        if a.ids.len() > max_len + 1 {
            problems.push(format!("image {i}: {} tokens", a.ids.len() - 1));
        }
        if !eos_ok {
            problems.push(format!("image {i}: bad EOS placement"));
        }
        if a.ids != reference_decode(model, &r.image, max_len) {
            problems.push(format!("image {i}: differs from full recompute"));
        }
    }
    let pass = problems.is_empty();
    let detail = if pass {
        format!("100 test images deterministic, within {max_len} tokens, {eos} ended by a single final EOS, all match the full recompute")
    } else {
        problems.join("; ")
    };
    outcome(pass, detail)
}

fn criterion_reconstruction(desk: &Desk, model: &Model) -> Outcome {
    let max_len = TrainConfig::default().max_report_len + 1;
    let rate = |m: &Model| {
        let e = evaluate_with(m, &desk.test, Ablation::NONE, max_len).unwrap();
        reconstruction_rate(&e.generations, &desk.test).unwrap()
    };
    let untrained = Model::build(desk.config.clone(), desk.tokenizer.clone(), 0, Some(&desk.lm.store)).unwrap();
    let (trained, base) = (rate(model), rate(&untrained));
    outcome(
        trained >= 0.70 && base <= 0.10,
        format!(
            "shape multisets reconstructed on {:.1}% of {} test scenes (untrained {:.1}%)",
            100.0 * trained,
            desk.test.len(),
            100.0 * base
        ),
    )
}

const NAMES: [&str; 10] = [
    "gradient fidelity",
    "identity transform",
    "frozen backbone",
    "customization modes",
    "inference drops",
    "depth sweep",
    "prompt-count sweep",
    "metric oracles",
    "generation contract",
    "conditional generation",
];

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let selected = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));
    let start = Instant::now();
    let mut results: Vec<(usize, Outcome)> = Vec::new();
    let mut run = |n: usize, f: &mut dyn FnMut() -> Outcome| {
        if selected(n) {
            let o = f();
            report(n, NAMES[n - 1], &o);
            results.push((n, o));
        }
    };

    run(1, &mut criterion_gradients);
    run(2, &mut criterion_identity);

    let needs_desk = (3..=7).chain(9..=10).any(selected);
    let desk = needs_desk.then(Desk::new);
    let seeds = [0, 1, 2];
    let trained = desk.as_ref().filter(|_| [3, 4, 5, 9, 10].into_iter().any(selected)).map(|d| {
        let s: &[u64] = if selected(4) { &seeds } else { &seeds[..1] };
        train_modes(d, s)
    });

    if let (Some(d), Some(t)) = (&desk, &trained) {
        run(3, &mut || criterion_conservation(d, t));
        run(4, &mut || criterion_modes(t, &seeds));
        run(5, &mut || criterion_inference_drops(d, &t.model));
    }
    if let Some(d) = &desk {
        run(6, &mut || criterion_depth(d));
        run(7, &mut || criterion_prompt_count(d));
    }
    run(8, &mut criterion_metrics);
    if let (Some(d), Some(t)) = (&desk, &trained) {
        run(9, &mut || criterion_generation(d, &t.model));
        run(10, &mut || criterion_reconstruction(d, &t.model));
    }

    let failed: Vec<usize> = results.iter().filter(|(_, o)| !o.pass).map(|(n, _)| *n).collect();
    println!(
        "{} of {} criteria passed in {:.1} min",
        results.len() - failed.len(),
        results.len(),
        start.elapsed().as_secs_f64() / 60.0
    );
    if !failed.is_empty() && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
