use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub const RUN_MANIFEST: &str = "run.json";

/// What a command did, enough to rerun it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    /// Seed of the synthetic dataset, when the data directory records one.
    pub dataset_seed: Option<u64>,
    /// Fully resolved configuration.
    pub config: Value,
    pub inputs: BTreeMap<String, PathBuf>,
    pub outputs: BTreeMap<String, PathBuf>,
    pub timings_secs: BTreeMap<String, f64>,
    pub results: Value,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            dataset_seed: None,
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            timings_secs: BTreeMap::new(),
            results: Value::Null,
        }
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings_secs.insert(label.to_string(), start.elapsed().as_secs_f64());
        out
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Writes `run.json` into `dir` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> anyhow::Result<PathBuf> {
        let path = dir.join(RUN_MANIFEST);
        let tmp = dir.join(format!(".{RUN_MANIFEST}.tmp"));
        let json = serde_json::to_string_pretty(self).context("serializing run manifest")?;
        std::fs::write(&tmp, json + "\n").with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, &path).with_context(|| format!("renaming to {}", path.display()))?;
        Ok(path)
    }
}

/// Creates `<root>/<unix-seconds>-seed<seed>`, adding a counter if two runs
/// start in the same second.
pub fn create_run_dir(root: &Path, seed: u64) -> std::io::Result<PathBuf> {
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    std::fs::create_dir_all(root)?;
    let base = format!("{stamp}-seed{seed}");
    let mut n = 0;
    loop {
        let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
        let dir = root.join(name);
        match std::fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => n += 1,
            Err(e) => return Err(e),
        }
    }
}
