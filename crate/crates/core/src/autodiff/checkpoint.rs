//! Single-file checkpoints: one line of JSON header, then every parameter's
//! values as little-endian IEEE-754 doubles, in header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    /// Model configuration plus whatever else the writer needs to rebuild the model.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(store: &ParamStore, config: serde_json::Value) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: FORMAT_VERSION,
        config,
        params: store
            .iter()
            .map(|(_, p)| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for (_, p) in store.iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value)> {
    let split = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header terminator".into()))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut body = bytes[split + 1..].chunks_exact(8);
    let mut store = ParamStore::new();
    for entry in header.params {
        let numel: usize = entry.shape.iter().product();
        let data: Vec<f64> = body
            .by_ref()
            .take(numel)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        if data.len() != numel {
            return Err(Error::Checkpoint(format!("truncated data for {:?}", entry.name)));
        }
        store.insert(entry.name, Tensor::new(&entry.shape, data)?, entry.trainable)?;
    }
    if body.next().is_some() || !body.remainder().is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameter data".into()));
    }
    Ok((store, header.config))
}

pub fn save(path: &Path, store: &ParamStore, config: serde_json::Value) -> Result<()> {
    let bytes = to_bytes(store, config);
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            values in proptest::collection::vec(any::<f64>(), 1..40),
            trainable in any::<bool>(),
        ) {
            let mut store = ParamStore::new();
            let n = values.len();
            store.insert("a", Tensor::new(&[n], values.clone()).unwrap(), trainable).unwrap();
            store.insert("b", Tensor::new(&[1, n], values).unwrap(), !trainable).unwrap();
            let cfg = serde_json::json!({"D": 4});
            let bytes = to_bytes(&store, cfg.clone());
            let (back, back_cfg) = from_bytes(&bytes).unwrap();
            prop_assert_eq!(back_cfg, cfg);
            prop_assert_eq!(to_bytes(&back, serde_json::json!({"D": 4})), bytes);
            for ((_, p), (_, q)) in store.iter().zip(back.iter()) {
                prop_assert!(p.value.bit_eq(&q.value));
                prop_assert_eq!(p.trainable, q.trainable);
                prop_assert_eq!(&p.name, &q.name);
            }
        }
    }

    #[test]
    fn truncated_body_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::zeros(&[3]), true).unwrap();
        let mut bytes = to_bytes(&store, serde_json::Value::Null);
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
