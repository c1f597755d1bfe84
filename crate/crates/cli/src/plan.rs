//! Experiment plans: a list of labelled federated runs sharing one dataset.
//!
//! ```toml
//! data = "data"          # relative to the plan file
//! out = "runs"
//!
//! [defaults]             # any FederatedConfig field
//! rounds = 40
//!
//! [[run]]
//! label = "fedbn-drop"
//! evaluate = ["missing", "generalize"]
//!
//! [[run]]
//! label = "baseline-t1"
//! clients = ["c3-stroke"]
//! modalities = ["T1"]
//! config = { drop_enabled = false }
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmfl_core::federation::FederatedConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

/// Evaluation run right after training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Random modality exclusion on the source clients.
    Missing,
    /// Held-out clients with automatic BN handling.
    Generalize,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanFile {
    data: Option<PathBuf>,
    out: Option<PathBuf>,
    #[serde(default)]
    defaults: Table,
    #[serde(default, rename = "run")]
    runs: Vec<RunEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunEntry {
    label: String,
    #[serde(default)]
    config: Table,
    clients: Option<Vec<String>>,
    modalities: Option<Vec<String>>,
    #[serde(default)]
    evaluate: Vec<Protocol>,
}

/// Command-line values that override every run of a plan.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub phi: Option<f64>,
    pub norm: Option<String>,
    pub aggregation: Option<String>,
    pub rounds: Option<usize>,
    pub tau: Option<usize>,
    pub batch_size: Option<usize>,
    pub drop_enabled: Option<bool>,
}

impl Overrides {
    fn table(&self) -> Result<Table> {
        let mut t = Table::new();
        let int = |v: u64, name: &str| -> Result<Value> {
            Ok(Value::Integer(
                i64::try_from(v).with_context(|| format!("{name} {v} is too large"))?,
            ))
        };
        if let Some(v) = self.seed {
            t.insert("seed".into(), int(v, "seed")?);
        }
        if let Some(v) = self.phi {
            t.insert("phi".into(), Value::Float(v));
        }
        if let Some(v) = &self.norm {
            t.insert("norm".into(), Value::String(v.clone()));
        }
        if let Some(v) = &self.aggregation {
            t.insert("aggregation".into(), Value::String(v.clone()));
        }
        if let Some(v) = self.rounds {
            t.insert("rounds".into(), int(v as u64, "rounds")?);
        }
        if let Some(v) = self.tau {
            t.insert("tau".into(), int(v as u64, "tau")?);
        }
        if let Some(v) = self.batch_size {
            t.insert("batch_size".into(), int(v as u64, "batch_size")?);
        }
        if let Some(v) = self.drop_enabled {
            t.insert("drop_enabled".into(), Value::Boolean(v));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlannedRun {
    pub label: String,
    pub config: FederatedConfig,
    /// Training clients; all of the dataset's when absent.
    pub clients: Option<Vec<String>>,
    /// Modalities the run may see; the rest are treated as absent.
    pub modalities: Option<Vec<String>>,
    pub evaluate: Vec<Protocol>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub data: PathBuf,
    pub out: PathBuf,
    pub runs: Vec<PlannedRun>,
}

/// Later tables win; nested tables (`adam`) are merged key by key.
fn merge(into: &mut Table, from: &Table) {
    for (k, v) in from {
        match (into.get_mut(k), v) {
            (Some(Value::Table(a)), Value::Table(b)) => merge(a, b),
            _ => {
                into.insert(k.clone(), v.clone());
            }
        }
    }
}

fn check_label(label: &str) -> Result<()> {
    let ok = !label.is_empty()
        && !label.starts_with('.')
        && label
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if !ok {
        bail!(
            "run label {label:?} must be non-empty and use only letters, digits, '-', '_' and '.'"
        );
    }
    Ok(())
}

impl ExperimentPlan {
    /// Reads a plan file. Relative `data`/`out` paths resolve against the
    /// plan's directory; the explicit arguments take precedence.
    pub fn load(
        path: &Path,
        data: Option<&Path>,
        out: Option<&Path>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading plan {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, data, out, overrides)
            .with_context(|| format!("in plan {}", path.display()))
    }

    pub fn parse(
        text: &str,
        base: &Path,
        data: Option<&Path>,
        out: Option<&Path>,
        overrides: &Overrides,
    ) -> Result<Self> {
        let file: PlanFile = toml::from_str(text)?;
        let resolve = |arg: Option<&Path>, field: Option<PathBuf>, name: &str| -> Result<PathBuf> {
            match (arg, field) {
                (Some(p), _) => Ok(p.to_path_buf()),
                (None, Some(p)) => Ok(base.join(p)),
                (None, None) => {
                    bail!("no {name} directory: set `{name}` in the plan or pass --{name}")
                }
            }
        };
        let data = resolve(data, file.data, "data")?;
        let out = resolve(out, file.out, "out")?;
        if file.runs.is_empty() {
            bail!("the plan has no [[run]] entries");
        }
        let cli = overrides.table()?;
        let mut runs: Vec<PlannedRun> = Vec::new();
        for entry in file.runs {
            check_label(&entry.label)?;
            if runs.iter().any(|r| r.label == entry.label) {
                bail!("run label {:?} is used twice", entry.label);
            }
            let mut table = file.defaults.clone();
            merge(&mut table, &entry.config);
            merge(&mut table, &cli);
            let config: FederatedConfig = Value::Table(table)
                .try_into()
                .with_context(|| format!("run {:?}: bad config", entry.label))?;
            config
                .validate()
                .with_context(|| format!("run {:?}", entry.label))?;
            for (name, list) in [
                ("clients", &entry.clients),
                ("modalities", &entry.modalities),
            ] {
                if list.as_ref().is_some_and(|l| l.is_empty()) {
                    bail!("run {:?}: `{name}` is empty", entry.label);
                }
            }
            runs.push(PlannedRun {
                label: entry.label,
                config,
                clients: entry.clients,
                modalities: entry.modalities,
                evaluate: entry.evaluate,
            });
        }
        Ok(Self { data, out, runs })
    }
}
