use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::image::{render, Image, ImageDims};
use super::scene::{SceneSpec, MAX_SHAPES};
use super::template::{report_len, templatize};
use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (expected train, val or test)"))),
        }
    }
}

/// One image paired with one report.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub image: Image,
    pub report: String,
    pub scene: Option<SceneSpec>,
    pub split: Split,
}

/// Lowercases and collapses whitespace.
pub fn normalize_report(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// A synthetic record from its seed: scene, then template report and rendered image.
pub fn generate_record(seed: u64) -> DatasetRecord {
    generate_record_with(seed, ImageDims::default(), MAX_SHAPES, Split::Train).expect("default dims are valid")
}

pub fn generate_record_with(seed: u64, dims: ImageDims, max_shapes: usize, split: Split) -> Result<DatasetRecord> {
    if dims.channels != 1 {
        return Err(Error::Config("synthetic images are single-channel".into()));
    }
    let scene = SceneSpec::sample(seed, max_shapes);
    Ok(DatasetRecord {
        image: render(&scene, dims.height, dims.width)?,
        report: templatize(&scene),
        scene: Some(scene),
        split,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    pub image: ImageDims,
    /// Upper bound on report tokens, excluding BOS/EOS.
    pub max_report_len: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            seed: 0,
            image: ImageDims::default(),
            max_report_len: 36,
        }
    }
}

/// Seed of record `index` in a dataset; distinct indices give distinct seeds,
/// so splits never share a generating seed.
pub fn record_seed(dataset_seed: u64, index: usize) -> u64 {
    rng::splitmix(rng::derive_seed(dataset_seed, "data") ^ index as u64)
}

/// Split of record `index`: the first `n_train` are train, then val, then test.
pub fn split_of(config: &SyntheticConfig, index: usize) -> Split {
    if index < config.n_train {
        Split::Train
    } else if index < config.n_train + config.n_val {
        Split::Val
    } else {
        Split::Test
    }
}

pub fn generate_dataset(config: &SyntheticConfig) -> Result<Vec<DatasetRecord>> {
    if config.n_train == 0 {
        return Err(Error::Config("empty train split".into()));
    }
    let max_shapes = (0..=MAX_SHAPES)
        .rev()
        .find(|n| report_len(*n) <= config.max_report_len)
        .filter(|n| *n >= 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "max_report_len {} cannot hold a one-shape report ({} tokens)",
                config.max_report_len,
                report_len(1)
            ))
        })?;
    let total = config.n_train + config.n_val + config.n_test;
    (0..total)
        .map(|i| generate_record_with(record_seed(config.seed, i), config.image, max_shapes, split_of(config, i)))
        .collect()
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ImageRef {
    Path(String),
    Scene(SceneSpec),
}

#[derive(Serialize, Deserialize)]
struct ManifestLine {
    image: ImageRef,
    report: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    scene: Option<SceneSpec>,
}

/// Writes `manifest.jsonl` plus one `images/NNNNNN.img` file per record.
pub fn write_dataset(dir: &Path, records: &[DatasetRecord]) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST_NAME);
    let mut out = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let rel = format!("images/{i:06}.img");
        r.image.write(&dir.join(&rel))?;
        let line = ManifestLine {
            image: ImageRef::Path(rel),
            report: r.report.clone(),
            split: r.split,
            scene: r.scene.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("manifest line serializes");
        out.push(b'\n');
    }
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    f.write_all(&out).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Accepts a manifest file or a directory containing `manifest.jsonl`.
pub fn resolve_manifest(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_NAME)
    } else {
        path.to_path_buf()
    }
}

/// Reads a JSON Lines manifest. Image paths resolve against the manifest's
/// directory; inline scenes render at `inline_dims`. Blank lines are skipped.
pub fn load_dataset(path: &Path, inline_dims: ImageDims) -> Result<Vec<DatasetRecord>> {
    let manifest = resolve_manifest(path);
    let root = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
    let file = fs::File::open(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: manifest.clone(),
            line: n + 1,
            message: e.to_string(),
        })?;
        let report = normalize_report(&parsed.report);
        if report.is_empty() {
            return Err(Error::Parse {
                path: manifest.clone(),
                line: n + 1,
                message: "empty report".into(),
            });
        }
        let (image, scene) = match parsed.image {
            ImageRef::Path(rel) => {
                let p = root.join(&rel);
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, format!("image of record on line {}", n + 1)),
                    ));
                }
                (Image::read(&p)?, parsed.scene)
            }
            ImageRef::Scene(scene) => {
                scene.validate()?;
                (render(&scene, inline_dims.height, inline_dims.width)?, Some(scene))
            }
        };
        records.push(DatasetRecord {
            image,
            report,
            scene,
            split: parsed.split,
        });
    }
    Ok(records)
}

pub fn filter_split(records: &[DatasetRecord], split: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == split).cloned().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::template::parse_report;

    #[test]
    fn same_seed_same_record() {
        let a = generate_record(0);
        let b = generate_record(0);
        assert_eq!(a, b);
        assert!(a.image.pixels().iter().zip(b.image.pixels()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn reports_invert_to_their_scene() {
        for seed in 0..1000 {
            let r = generate_record(seed);
            let scene = r.scene.as_ref().unwrap();
            assert!(parse_report(&r.report).unwrap().same_shapes(scene), "seed {seed}");
        }
    }

    #[test]
    fn neighbouring_seeds_differ() {
        let differing = (0..100u64)
            .filter(|s| {
                let (a, b) = (generate_record(*s), generate_record(s + 1));
                a.report != b.report || a.image != b.image
            })
            .count();
        assert!(differing >= 95, "{differing}");
    }

    #[test]
    fn splits_are_a_function_of_index_and_seed() {
        let cfg = SyntheticConfig {
            n_train: 10,
            n_val: 2,
            n_test: 3,
            ..SyntheticConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        let count = |s| a.iter().filter(|r| r.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (10, 2, 3));
    }

    #[test]
    fn max_report_len_caps_shape_count() {
        let cfg = SyntheticConfig {
            n_train: 200,
            max_report_len: 24,
            ..SyntheticConfig::default()
        };
        for r in generate_dataset(&cfg).unwrap() {
            assert!(r.report.split_whitespace().count() <= 24);
        }
        let too_short = SyntheticConfig {
            max_report_len: 5,
            ..cfg
        };
        assert!(generate_dataset(&too_short).is_err());
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let cfg = SyntheticConfig {
            n_train: 0,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(m)) if m.contains("empty train split")));
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            n_train: 4,
            n_val: 1,
            n_test: 2,
            seed: 5,
            ..SyntheticConfig::default()
        };
        let records = generate_dataset(&cfg).unwrap();
        write_dataset(dir.path(), &records).unwrap();
        let loaded = load_dataset(dir.path(), cfg.image).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn manifest_with_three_splits_and_inline_scene() {
        let dir = tempfile::tempdir().unwrap();
        let img = generate_record(1).image;
        img.write(&dir.path().join("a.img")).unwrap();
        let lines = [
            r#"{"image": "a.img", "report": "There is  a thing", "split": "train"}"#,
            r#"{"image": {"shapes": [{"quadrant": "lower-left", "kind": "circle", "size": "small"}]}, "report": "x", "split": "val"}"#,
            r#"{"image": "a.img", "report": "y", "split": "test"}"#,
        ];
        fs::write(dir.path().join(MANIFEST_NAME), lines.join("\n")).unwrap();
        let records = load_dataset(dir.path(), ImageDims::default()).unwrap();
        assert_eq!(
            records.iter().map(|r| r.split).collect::<Vec<_>>(),
            vec![Split::Train, Split::Val, Split::Test]
        );
        assert_eq!(records[0].report, "there is a thing");
        assert!(records[1].scene.is_some());
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join(MANIFEST_NAME),
            r#"{"image": "nope/missing.img", "report": "a", "split": "train"}"#,
        )
        .unwrap();
        let err = load_dataset(dir.path(), ImageDims::default()).unwrap_err();
        assert!(err.to_string().contains("missing.img"), "{err}");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let good = r#"{"image": {"shapes": []}, "report": "a", "split": "train"}"#;
        fs::write(dir.path().join(MANIFEST_NAME), format!("{good}\n{{not json\n")).unwrap();
        match load_dataset(dir.path(), ImageDims::default()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
