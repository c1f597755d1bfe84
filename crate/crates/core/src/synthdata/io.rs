//! On-disk layout of generated datasets.
//!
//! ```text
//! <root>/benchmark.toml            seed, registry, client list
//! <root>/<client>/manifest.toml    the client's spec
//! <root>/<client>/train/0000.mmfl  one container per sample
//! <root>/<client>/val/0000.mmfl
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{generate_client, Benchmark, ClientDataset, ClientRole, ClientSpec, Sample};
use crate::container::Container;
use crate::error::{Error, Result};

pub const BENCHMARK_FILE: &str = "benchmark.toml";
pub const CLIENT_FILE: &str = "manifest.toml";
const IMAGE_TAG: &str = "image";
const MASK_TAG: &str = "mask";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub role: ClientRole,
    /// Client directory, relative to the benchmark root.
    pub dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkManifest {
    pub format: String,
    pub seed: u64,
    /// Union modality order of the training clients.
    pub registry: Vec<String>,
    pub clients: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClientManifest {
    format: String,
    spec: ClientSpec,
}

const BENCHMARK_FORMAT: &str = "mmfl-benchmark-v1";
const CLIENT_FORMAT: &str = "mmfl-client-v1";

fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string_pretty(value).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn sample_path(dir: &Path, split: &str, i: usize) -> PathBuf {
    dir.join(split).join(format!("{i:04}.mmfl"))
}

fn write_sample(path: &Path, s: &Sample) -> Result<()> {
    let mut c = Container::new(serde_json::Value::Null);
    for (m, img) in &s.images {
        c.push(m.clone(), vec![IMAGE_TAG.into()], img.clone());
    }
    c.push("mask", vec![MASK_TAG.into()], s.mask.clone());
    c.write(path)
}

fn read_sample(path: &Path, spec: &ClientSpec) -> Result<Sample> {
    let c = Container::read(path)?;
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    let mut images = IndexMap::new();
    let mut mask = None;
    for (info, t) in c.arrays {
        if t.shape() != [spec.image_size, spec.image_size] {
            return Err(bad(format!(
                "array {:?} has shape {:?}",
                info.name,
                t.shape()
            )));
        }
        if info.tags.iter().any(|t| t == MASK_TAG) {
            mask = Some(t);
        } else {
            images.insert(info.name, t);
        }
    }
    let names: Vec<&String> = images.keys().collect();
    if names != spec.modalities.iter().collect::<Vec<_>>() {
        return Err(bad(format!(
            "modalities {names:?} differ from manifest {:?}",
            spec.modalities
        )));
    }
    let mask = mask.ok_or_else(|| bad("no mask array".into()))?;
    Ok(Sample { images, mask })
}

/// Writes one client's manifest and samples into `dir`, which is created.
pub fn save_client(dir: &Path, data: &ClientDataset) -> Result<()> {
    for split in ["train", "val"] {
        let d = dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    write_toml(
        &dir.join(CLIENT_FILE),
        &ClientManifest {
            format: CLIENT_FORMAT.into(),
            spec: data.spec.clone(),
        },
    )?;
    for (i, s) in data.train.iter().enumerate() {
        write_sample(&sample_path(dir, "train", i), s)?;
    }
    for (i, s) in data.val.iter().enumerate() {
        write_sample(&sample_path(dir, "val", i), s)?;
    }
    Ok(())
}

pub fn load_client(dir: &Path) -> Result<ClientDataset> {
    let path = dir.join(CLIENT_FILE);
    let m: ClientManifest = read_toml(&path)?;
    if m.format != CLIENT_FORMAT {
        return Err(Error::Format {
            path,
            detail: format!("unsupported format {:?}", m.format),
        });
    }
    m.spec.validate()?;
    let load = |split: &str, n: usize| {
        (0..n)
            .map(|i| read_sample(&sample_path(dir, split, i), &m.spec))
            .collect::<Result<Vec<_>>>()
    };
    let train = load("train", m.spec.n_train)?;
    let val = load("val", m.spec.n_val)?;
    Ok(ClientDataset {
        spec: m.spec,
        train,
        val,
    })
}

/// Generates every client of `bench` and writes the full dataset tree.
pub fn save_benchmark(root: &Path, bench: &Benchmark) -> Result<BenchmarkManifest> {
    let registry = bench.registry()?;
    let mut entries = Vec::new();
    for (role, spec) in bench.clients() {
        let data = generate_client(spec)?;
        save_client(&root.join(&spec.client_id), &data)?;
        entries.push(ManifestEntry {
            id: spec.client_id.clone(),
            role,
            dir: spec.client_id.clone(),
        });
    }
    let manifest = BenchmarkManifest {
        format: BENCHMARK_FORMAT.into(),
        seed: bench.seed,
        registry: registry.names().to_vec(),
        clients: entries,
    };
    write_toml(&root.join(BENCHMARK_FILE), &manifest)?;
    Ok(manifest)
}

/// Reads a dataset tree written by [`save_benchmark`].
pub fn load_benchmark(
    root: &Path,
) -> Result<(BenchmarkManifest, Vec<(ClientRole, ClientDataset)>)> {
    let path = root.join(BENCHMARK_FILE);
    let manifest: BenchmarkManifest = read_toml(&path)?;
    if manifest.format != BENCHMARK_FORMAT {
        return Err(Error::Format {
            path,
            detail: format!("unsupported format {:?}", manifest.format),
        });
    }
    let clients = manifest
        .clients
        .iter()
        .map(|e| {
            let data = load_client(&root.join(&e.dir))?;
            if data.spec.client_id != e.id {
                return Err(Error::Format {
                    path: root.join(&e.dir).join(CLIENT_FILE),
                    detail: format!(
                        "client id {:?} does not match {:?}",
                        data.spec.client_id, e.id
                    ),
                });
            }
            Ok((e.role, data))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, clients))
}
