//! Single-file checkpoints.
//!
//! ```text
//! b"HATC"          magic
//! u8               version (1)
//! u64 LE           length of the JSON block
//! JSON             {"config": ModelConfig, "tasks": [..], "names": [..]}
//! snapshot × n     one tensor snapshot per name, in `names` order
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Hat, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{snapshot, Scalar};

const MAGIC: &[u8; 4] = b"HATC";
const VERSION: u8 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    config: ModelConfig,
    tasks: Vec<String>,
    names: Vec<String>,
}

/// Writes the model with its task vocabulary; `tasks[t]` names query `t`.
pub fn save_checkpoint<T: Scalar>(model: &Hat<T>, tasks: &[String], path: &Path) -> Result<()> {
    if tasks.len() != model.config().n_tasks {
        return Err(Error::Argument(format!(
            "{} task names for a {}-task model",
            tasks.len(),
            model.config().n_tasks
        )));
    }
    let store = &model.params;
    let meta = Meta {
        config: model.config().clone(),
        tasks: tasks.to_vec(),
        names: store.ids().map(|id| store.name(id).to_string()).collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for id in store.ids() {
        out.extend(snapshot::encode(store.get(id)));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint, validating every tensor's name and shape against the
/// layout its stored configuration implies.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(Hat<T>, Vec<String>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 13 || &bytes[..4] != MAGIC {
        return Err(Error::format(path, "missing HATC magic"));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", bytes[4]),
        ));
    }
    let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(13..13 + len)
        .ok_or_else(|| Error::format(path, "truncated metadata"))?;
    let meta: Meta = serde_json::from_slice(json)?;
    let origin = path.display().to_string();
    let mut at = 13 + len;
    let mut map = BTreeMap::new();
    for name in &meta.names {
        let (t, used) = snapshot::decode::<T>(&bytes[at..], &origin)?;
        at += used;
        map.insert(name.clone(), t);
    }
    if at != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    let mut model = Hat::new(meta.config)?;
    model.params.load_map(&map)?;
    if meta.tasks.len() != model.config().n_tasks {
        return Err(Error::format(
            path,
            "task vocabulary does not match the model's query count",
        ));
    }
    Ok((model, meta.tasks))
}
