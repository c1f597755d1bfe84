//! Checkpoint files: a [`Container`] whose metadata holds the [`NetConfig`].

use std::path::Path;

use serde_json::json;

use super::{EntryKind, NetConfig, ParamEntry, ParamSet};
use crate::container::Container;
use crate::error::{Error, Result};

const TAG_NORM: &str = "norm";
const TAG_BUFFER: &str = "buffer";

impl ParamSet {
    pub fn to_container(&self, meta: serde_json::Value) -> Container {
        let mut c = Container::new(meta);
        for (name, e) in self.iter() {
            let mut tags = Vec::new();
            if e.is_norm {
                tags.push(TAG_NORM.to_string());
            }
            if e.kind == EntryKind::Buffer {
                tags.push(TAG_BUFFER.to_string());
            }
            c.push(name, tags, e.tensor.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<ParamSet> {
        let mut p = ParamSet::new();
        for (info, t) in &c.arrays {
            let has = |tag: &str| info.tags.iter().any(|x| x == tag);
            p.insert(
                info.name.clone(),
                ParamEntry {
                    tensor: t.clone(),
                    is_norm: has(TAG_NORM),
                    kind: if has(TAG_BUFFER) {
                        EntryKind::Buffer
                    } else {
                        EntryKind::Param
                    },
                },
            )?;
        }
        Ok(p)
    }
}

pub fn save_checkpoint(path: &Path, config: &NetConfig, params: &ParamSet) -> Result<()> {
    let meta = json!({ "format": "mmfl-checkpoint", "version": 1, "net": config });
    params.to_container(meta).write(path)
}

pub fn load_checkpoint(path: &Path) -> Result<(NetConfig, ParamSet)> {
    let c = Container::read(path)?;
    let net = c.meta.get("net").cloned().ok_or_else(|| Error::Format {
        path: path.to_path_buf(),
        detail: "checkpoint header lacks a network config".into(),
    })?;
    let config: NetConfig = serde_json::from_value(net).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: format!("network config: {e}"),
    })?;
    Ok((config, ParamSet::from_container(&c)?))
}
