//! Layout of run directories and the dataset view shared by the commands.
//!
//! ```text
//! <run>/run.toml          label, config, config hash, dataset reference
//! <run>/global.mmfl       final server model
//! <run>/norms/<id>.mmfl   client normalization entries (client-specific mode)
//! <run>/metrics.csv       one row per round and client
//! <run>/log.json          round logs with audit counts and timing
//! <run>/summary.json      final validation Dice
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmfl_core::federation::{average_norm_params, FederatedConfig, RoundAudit};
use mmfl_core::modality::ModalityRegistry;
use mmfl_core::segnet::{load_checkpoint, NetConfig, ParamSet};
use mmfl_core::synthdata::{load_benchmark, BenchmarkManifest, ClientDataset, ClientRole};
use serde::{Deserialize, Serialize};

use crate::files::{read_json, read_toml, sha256_hex};
use crate::plan::Protocol;

pub const RUN_FILE: &str = "run.toml";
pub const CHECKPOINT_FILE: &str = "global.mmfl";
pub const NORM_DIR: &str = "norms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LOG_FILE: &str = "log.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const EVAL_MISSING_FILE: &str = "eval_missing.json";
pub const EVAL_GENERALIZE_FILE: &str = "eval_generalize.json";

const RUN_FORMAT: &str = "mmfl-run-v1";

/// Everything needed to reproduce a run, written before training starts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunRecord {
    pub format: String,
    pub label: String,
    /// SHA-256 over the config, dataset seed, registry and client selection.
    pub config_hash: String,
    pub data_dir: PathBuf,
    pub dataset_seed: u64,
    pub registry: Vec<String>,
    pub clients: Vec<String>,
    pub modalities: Option<Vec<String>>,
    pub evaluate: Vec<Protocol>,
    pub config: FederatedConfig,
}

#[derive(Serialize)]
struct HashInput<'a> {
    config: &'a FederatedConfig,
    dataset_seed: u64,
    registry: &'a [String],
    clients: &'a [String],
    modalities: &'a Option<Vec<String>>,
}

impl RunRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        label: &str,
        config: &FederatedConfig,
        data_dir: &Path,
        dataset_seed: u64,
        registry: &[String],
        clients: &[String],
        modalities: &Option<Vec<String>>,
        evaluate: &[Protocol],
    ) -> Self {
        let hash = sha256_hex(
            &serde_json::to_vec(&HashInput {
                config,
                dataset_seed,
                registry,
                clients,
                modalities,
            })
            .expect("config serializes"),
        );
        Self {
            format: RUN_FORMAT.into(),
            label: label.into(),
            config_hash: hash,
            data_dir: data_dir.to_path_buf(),
            dataset_seed,
            registry: registry.to_vec(),
            clients: clients.to_vec(),
            modalities: modalities.clone(),
            evaluate: evaluate.to_vec(),
            config: config.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientDice {
    pub client_id: String,
    pub dice: f64,
}

/// Final source validation Dice of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub label: String,
    pub config_hash: String,
    pub rounds: usize,
    pub clients: Vec<ClientDice>,
    /// Mean of `clients[..].dice`.
    pub average_dice: f64,
    pub audit: RoundAudit,
}

/// A dataset tree with its registry.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: BenchmarkManifest,
    pub registry: ModalityRegistry,
    pub clients: Vec<(ClientRole, ClientDataset)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            bail!("dataset directory {} does not exist", root.display());
        }
        let (manifest, clients) =
            load_benchmark(root).with_context(|| format!("loading dataset {}", root.display()))?;
        let registry = ModalityRegistry::new(manifest.registry.clone())?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            registry,
            clients,
        })
    }

    pub fn ids(&self, role: ClientRole) -> Vec<String> {
        self.clients
            .iter()
            .filter(|(r, _)| *r == role)
            .map(|(_, d)| d.spec.client_id.clone())
            .collect()
    }

    pub fn get(&self, id: &str) -> Result<&ClientDataset> {
        self.clients
            .iter()
            .map(|(_, d)| d)
            .find(|d| d.spec.client_id == id)
            .with_context(|| {
                let known: Vec<&str> = self
                    .clients
                    .iter()
                    .map(|(_, d)| d.spec.client_id.as_str())
                    .collect();
                format!(
                    "dataset {} has no client {id:?} (clients: {known:?})",
                    self.root.display()
                )
            })
    }
}

/// A finished run read back from disk.
pub struct LoadedRun {
    pub dir: PathBuf,
    pub record: RunRecord,
    pub net: NetConfig,
    pub global: ParamSet,
    /// Per-client normalization entries; empty unless client-specific.
    pub norms: Vec<(String, ParamSet)>,
    pub summary: RunSummary,
}

impl LoadedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let record_path = dir.join(RUN_FILE);
        if !record_path.exists() {
            bail!("{} is not a run directory (no {RUN_FILE})", dir.display());
        }
        let record: RunRecord = read_toml(&record_path)?;
        if record.format != RUN_FORMAT {
            bail!(
                "{}: unsupported format {:?}",
                record_path.display(),
                record.format
            );
        }
        let ckpt = dir.join(CHECKPOINT_FILE);
        if !ckpt.exists() {
            bail!("run {} has no checkpoint {}", record.label, ckpt.display());
        }
        let (net, global) = load_checkpoint(&ckpt)?;
        let mut norms = Vec::new();
        if record.config.aggregation.keeps_local_norm() {
            for id in &record.clients {
                let p = dir.join(NORM_DIR).join(format!("{id}.mmfl"));
                if !p.exists() {
                    bail!(
                        "run {} has no norm store for client {id:?} ({})",
                        record.label,
                        p.display()
                    );
                }
                norms.push((id.clone(), load_checkpoint(&p)?.1));
            }
        }
        let summary: RunSummary = read_json(&dir.join(SUMMARY_FILE))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            record,
            net,
            global,
            norms,
            summary,
        })
    }

    /// Normalization entries shared by all clients: the server's own in
    /// shared mode, the element-wise client average in client-specific mode.
    pub fn averaged_norm(&self) -> Result<ParamSet> {
        if self.norms.is_empty() {
            Ok(self.global.norm_only())
        } else {
            let stores: Vec<ParamSet> = self.norms.iter().map(|(_, p)| p.clone()).collect();
            Ok(average_norm_params(&stores)?)
        }
    }

    /// Parameters source client `id` uses at inference.
    pub fn client_params(&self, id: &str) -> Result<ParamSet> {
        if self.norms.is_empty() {
            return Ok(self.global.clone());
        }
        let (_, norm) = self
            .norms
            .iter()
            .find(|(c, _)| c == id)
            .with_context(|| format!("run {} has no client {id:?}", self.record.label))?;
        Ok(self.global.overlay(norm)?)
    }

    /// Dataset directory: the explicit one, else the one recorded at training.
    pub fn dataset(&self, data: Option<&Path>) -> Result<Dataset> {
        let root = data.unwrap_or(&self.record.data_dir);
        let ds = Dataset::load(root)?;
        if ds.manifest.registry != self.record.registry {
            bail!(
                "dataset {} has registry {:?}, run {} was trained on {:?}",
                root.display(),
                ds.manifest.registry,
                self.record.label,
                self.record.registry
            );
        }
        Ok(ds)
    }
}
