//! Named-array checkpoint container: a small JSON header followed by raw
//! little-endian f64 payloads, one per entry.

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{IcmError, Result};
use crate::nn::ParamStore;

const MAGIC: &[u8; 4] = b"ICMC";
const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    entries: Vec<Entry>,
}

/// Save all parameters whose name starts with `prefix` ("" for all).
pub fn save_params(
    path: &Path,
    store: &ParamStore,
    prefix: &str,
    meta: serde_json::Value,
) -> Result<()> {
    save_params_where(path, store, |name, _| name.starts_with(prefix), meta)
}

/// Save the parameters selected by `pred(name, trainable)`.
pub fn save_params_where<F: Fn(&str, bool) -> bool>(
    path: &Path,
    store: &ParamStore,
    pred: F,
    meta: serde_json::Value,
) -> Result<()> {
    let mut entries = Vec::new();
    let mut ids = Vec::new();
    for id in store.ids() {
        let name = store.name(id);
        if pred(name, store.is_trainable(id)) {
            entries.push(Entry {
                name: name.to_string(),
                shape: store.value(id).shape().to_vec(),
                trainable: store.is_trainable(id),
            });
            ids.push(id);
        }
    }
    let header = Header { meta, entries };
    let hjson = serde_json::to_vec(&header)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&[VERSION])?;
    f.write_all(&(hjson.len() as u32).to_le_bytes())?;
    f.write_all(&hjson)?;
    for id in ids {
        for &v in store.value(id).iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub struct LoadedCheckpoint {
    pub meta: serde_json::Value,
    pub arrays: Vec<(String, ArrayD<f64>, bool)>,
}

pub fn load_params(path: &Path) -> Result<LoadedCheckpoint> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(IcmError::CorruptStream("bad checkpoint magic".into()));
    }
    let mut ver = [0u8; 1];
    f.read_exact(&mut ver)?;
    if ver[0] != VERSION {
        return Err(IcmError::IncompatibleModel(format!(
            "checkpoint version {} unsupported",
            ver[0]
        )));
    }
    let mut lenb = [0u8; 4];
    f.read_exact(&mut lenb)?;
    let hlen = u32::from_le_bytes(lenb) as usize;
    let mut hjson = vec![0u8; hlen];
    f.read_exact(&mut hjson)?;
    let header: Header = serde_json::from_slice(&hjson)?;
    let mut arrays = Vec::with_capacity(header.entries.len());
    for e in &header.entries {
        let n: usize = e.shape.iter().product();
        let mut buf = vec![0u8; n * 8];
        f.read_exact(&mut buf)
            .map_err(|_| IcmError::CorruptStream("truncated checkpoint payload".into()))?;
        let vals: Vec<f64> = buf
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((
            e.name.clone(),
            ArrayD::from_shape_vec(IxDyn(&e.shape), vals).unwrap(),
            e.trainable,
        ));
    }
    Ok(LoadedCheckpoint { meta: header.meta, arrays })
}

/// Load values into an already-built store; every loaded name must exist with
/// a matching shape.
pub fn restore_into(store: &mut ParamStore, ckpt: &LoadedCheckpoint) -> Result<()> {
    for (name, arr, _) in &ckpt.arrays {
        let id = store.id(name).ok_or_else(|| {
            IcmError::IncompatibleModel(format!("checkpoint param {name} not in model"))
        })?;
        if store.value(id).shape() != arr.shape() {
            return Err(IcmError::IncompatibleModel(format!(
                "shape mismatch for {name}: {:?} vs {:?}",
                store.value(id).shape(),
                arr.shape()
            )));
        }
        *store.value_mut(id) = arr.clone();
    }
    Ok(())
}

/// SHA-256 over the byte representation of all params matching `prefix`,
/// in name order. Used for freeze checks and model-compatibility hashes.
pub fn param_hash(store: &ParamStore, prefix: &str) -> String {
    let mut named: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .map(|id| (store.name(id).to_string(), id))
        .collect();
    named.sort();
    let mut hasher = Sha256::new();
    for (name, id) in named {
        hasher.update(name.as_bytes());
        for &v in store.value(id).iter() {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

/// First 8 bytes of `param_hash` as a u64 (for compact wire headers).
pub fn param_hash_u64(store: &ParamStore, prefix: &str) -> u64 {
    let h = param_hash(store, prefix);
    u64::from_str_radix(&h[..16], 16).unwrap()
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
