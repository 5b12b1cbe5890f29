use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use promptbook_core::model::{LanguageModel, Model};
use serde_json::Value;

const TINY: &str = r#"{
  "data": {"image": {"H": 16, "W": 16, "C": 1}},
  "model": {"D": 16, "L": 1, "heads": 2, "M": 4, "C_prime": 8, "K_max": 64},
  "train": {"num_prompts": 4, "epochs": 1, "batch_size": 4, "val_limit": 4},
  "pretrain": {"epochs": 1}
}"#;

fn promptbook(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptbook"))
        .args(args)
        .env_remove("PROMPTBOOK_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The run directory printed on the last stdout line.
fn run_dir(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().unwrap())
}

fn run_json(dir: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("run.json")).unwrap()).unwrap()
}

struct Fixture {
    root: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let root = tempfile::tempdir().unwrap();
        std::fs::write(root.path().join("tiny.json"), TINY).unwrap();
        let f = Self { root };
        ok(promptbook(&[
            "gen-data", "--out", s(&f.data()), "--n-train", "16", "--n-val", "4", "--n-test", "5", "--seed", "3",
            "--config", s(&f.config()),
        ]));
        f
    }

    fn path(&self, p: &str) -> PathBuf {
        self.root.path().join(p)
    }

    fn data(&self) -> PathBuf {
        self.path("data")
    }

    fn config(&self) -> PathBuf {
        self.path("tiny.json")
    }

    fn runs(&self) -> PathBuf {
        self.path("runs")
    }

    fn pretrain(&self, seed: &str) -> (PathBuf, String) {
        let out = ok(promptbook(&[
            "pretrain-lm", "--data", s(&self.data()), "--config", s(&self.config()), "--out", s(&self.runs()), "--seed",
            seed,
        ]));
        (run_dir(&out).join("lm.ckpt"), out)
    }

    fn train(&self, lm: &Path, extra: &[&str]) -> PathBuf {
        let (data, config, runs) = (self.data(), self.config(), self.runs());
        let mut args = vec![
            "train", "--data", s(&data), "--config", s(&config), "--out", s(&runs), "--lm-checkpoint", s(lm),
        ];
        args.extend_from_slice(extra);
        run_dir(&ok(promptbook(&args)))
    }
}

#[test]
fn gen_data_writes_the_requested_splits_deterministically() {
    let f = Fixture::new();
    let manifest = std::fs::read_to_string(f.data().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 25);
    let again = f.path("again");
    let out = ok(promptbook(&[
        "gen-data", "--out", s(&again), "--n-train", "16", "--n-val", "4", "--n-test", "5", "--seed", "3", "--config",
        s(&f.config()),
    ]));
    assert_eq!(out.trim(), "train 16, val 4, test 5");
    assert_eq!(std::fs::read(again.join("manifest.jsonl")).unwrap(), manifest.as_bytes());
    for i in [0, 24] {
        let name = format!("images/{i:06}.img");
        assert_eq!(std::fs::read(again.join(&name)).unwrap(), std::fs::read(f.data().join(&name)).unwrap());
    }
    assert_eq!(run_json(&again)["dataset_seed"], 3);
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let empty = promptbook(&["gen-data", "--out", s(&dir.path().join("d")), "--n-train", "0"]);
    assert_eq!(code(&empty), 2);
    assert!(String::from_utf8_lossy(&empty.stderr).contains("empty train split"));

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let unwritable = promptbook(&["gen-data", "--out", s(&blocker.join("d")), "--n-train", "2"]);
    assert_eq!(code(&unwritable), 2);

    let missing = promptbook(&["pretrain-lm", "--data", s(&dir.path().join("nowhere"))]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("not found"));

    let mode = promptbook(&["train", "--data", "x", "--lm-checkpoint", "y", "--mode", "bogus"]);
    assert_eq!(code(&mode), 2);
    let err = String::from_utf8_lossy(&mode.stderr);
    assert!(err.contains("none, prompt_wise, book_wise"), "{err}");

    assert_eq!(code(&promptbook(&["ablate", "--suite", "table9", "--data", "x", "--lm-checkpoint", "y"])), 2);
    assert_eq!(code(&promptbook(&["frobnicate"])), 2);
}

#[test]
fn runtime_errors_exit_with_three() {
    let f = Fixture::new();
    let bad = f.path("bad.ckpt");
    std::fs::write(&bad, "not a checkpoint").unwrap();
    let out = promptbook(&["evaluate", "--checkpoint", s(&bad), "--data", s(&f.data())]);
    assert_eq!(code(&out), 3);
    let out = promptbook(&["generate", "--checkpoint", s(&f.path("absent.ckpt")), "--image", "x"]);
    assert_eq!(code(&out), 3);
}

#[test]
fn pretraining_freezes_reduces_perplexity_and_is_reproducible() {
    let f = Fixture::new();
    let (a, out) = f.pretrain("5");
    let line = out.lines().next().unwrap();
    let nums: Vec<f64> = line
        .split(|c: char| !(c.is_ascii_digit() || c == '.'))
        .filter_map(|t| t.parse().ok())
        .collect();
    assert!(nums[0] < nums[1], "{line}");
    let lm = LanguageModel::load(&a).unwrap();
    assert!(lm.is_frozen());
    let (b, _) = f.pretrain("5");
    assert_ne!(a, b);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(a.parent().unwrap().file_name().unwrap().to_str().unwrap().contains("seed5"));
}

#[test]
fn training_generation_and_evaluation() {
    let f = Fixture::new();
    let (lm_path, _) = f.pretrain("0");
    let lm = LanguageModel::load(&lm_path).unwrap();

    let run = f.train(&lm_path, &["--epochs", "3", "--seed", "1"]);
    let manifest = run_json(&run);
    assert_eq!(manifest["config"]["train"]["epochs"], 3, "flag beats config file");
    assert_eq!(manifest["config"]["train"]["num_prompts"], 4, "config file beats default");
    assert_eq!(manifest["dataset_seed"], 3);
    let report = &manifest["results"]["report"];
    let losses = report["epoch_losses"].as_array().unwrap();
    assert!(losses.last().unwrap().as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());
    let ckpt = run.join("model.ckpt");
    let model = Model::load(&ckpt).unwrap();
    assert_eq!(model.backbone_hash(), lm.hash());
    assert_eq!(manifest["results"]["backbone_hash"], lm.hash());

    let none = Model::load(&f.train(&lm_path, &["--seed", "1", "--mode", "none"]).join("model.ckpt")).unwrap();
    let wise = Model::load(&f.train(&lm_path, &["--seed", "1", "--mode", "prompt_wise"]).join("model.ckpt")).unwrap();
    assert_ne!(none.checkpoint_bytes(), wise.checkpoint_bytes());

    let image = f.data().join("images/000000.img");
    let text = ok(promptbook(&["generate", "--checkpoint", s(&ckpt), "--image", s(&image), "--max-len", "5"]));
    assert_eq!(text.lines().count(), 1);
    assert!(text.split_whitespace().count() <= 5);

    let gen = |split| ok(promptbook(&["generate", "--checkpoint", s(&ckpt), "--data", s(&f.data()), "--split", split]));
    let jsonl = gen("test");
    assert_eq!(jsonl.lines().count(), 5);
    for line in jsonl.lines() {
        let g: Value = serde_json::from_str(line).unwrap();
        assert_eq!(g["ids"][0], 1);
    }
    assert_eq!(jsonl, gen("test"));
    assert_eq!(gen("val").lines().count(), 4);

    let pairs = f.path("pairs.csv");
    let data = f.data();
    let eval = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--checkpoint", s(&ckpt), "--data", s(&data)];
        args.extend_from_slice(extra);
        ok(promptbook(&args))
    };
    let metrics = eval(&["--pairs", s(&pairs)]);
    let v: Value = serde_json::from_str(&metrics).unwrap();
    for key in ["BL1", "BL2", "BL3", "BL4", "RGL", "MTR"] {
        let x = v[key].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x), "{key}");
    }
    assert_eq!(v["records"], 5);
    assert_eq!(metrics, eval(&[]));
    assert_eq!(std::fs::read_to_string(&pairs).unwrap().lines().count(), 6);
}

#[test]
fn ablation_writes_one_csv_row_per_cell() {
    let f = Fixture::new();
    let (lm, _) = f.pretrain("0");
    let out = Command::new(env!("CARGO_BIN_EXE_promptbook"))
        .args(["ablate", "--suite", "table3-inference", "--config", s(&f.config()), "--out", s(&f.runs())])
        .args(["--lm-checkpoint", s(&lm), "--seeds", "0,1"])
        .env("PROMPTBOOK_DATA_DIR", f.data())
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    let csv = ok(out);
    let lines: Vec<_> = csv.lines().collect();
    assert_eq!(lines[0], "suite,cell-id,mode,depth,num_prompts,drop_gamma,drop_beta,seed,BL1,BL2,BL3,BL4,RGL,MTR");
    assert_eq!(lines.len(), 1 + 3 * 2);
    let ids: Vec<_> = lines[1..4].iter().map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(ids, ["full", "infer-no-gamma", "infer-no-beta"]);
    let written: Vec<_> = std::fs::read_dir(f.runs())
        .unwrap()
        .map(|e| e.unwrap().path().join("table3-inference.csv"))
        .filter(|p| p.exists())
        .collect();
    assert_eq!(written.len(), 1);
    assert_eq!(std::fs::read_to_string(&written[0]).unwrap(), csv);
}
