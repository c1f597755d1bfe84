//! `generate`: writes a synthetic benchmark to disk.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmfl_core::synthdata::{
    benchmark_with_seed, save_benchmark, Benchmark, BenchmarkManifest, ClientRole, ClientSpec,
};
use serde::Deserialize;

use crate::files::{fresh_dir, read_toml};

/// Contents of a generation config file. Every field is optional; an empty
/// file yields the default benchmark with seed 0.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub seed: Option<u64>,
    #[serde(default)]
    pub overrides: SpecOverrides,
    /// Replaces the default client list when non-empty. Custom specs carry
    /// their own sample seeds.
    #[serde(default)]
    pub clients: Vec<CustomClient>,
}

/// Applied to every client spec, default or custom.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecOverrides {
    pub n_train: Option<usize>,
    pub n_val: Option<usize>,
    pub image_size: Option<usize>,
    pub noise_sigma: Option<f64>,
    pub field_amplitude: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomClient {
    pub role: ClientRole,
    pub spec: ClientSpec,
}

impl SpecOverrides {
    fn apply(&self, s: &mut ClientSpec) {
        if let Some(v) = self.n_train {
            s.n_train = v;
        }
        if let Some(v) = self.n_val {
            s.n_val = v;
        }
        if let Some(v) = self.image_size {
            s.image_size = v;
        }
        if let Some(v) = self.noise_sigma {
            s.noise_sigma = v;
        }
        if let Some(v) = self.field_amplitude {
            s.field_amplitude = v;
        }
    }
}

impl GenerateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        read_toml(path)
    }

    /// Resolves the client list and validates every spec.
    pub fn benchmark(&self, seed: Option<u64>) -> Result<Benchmark> {
        let seed = seed.or(self.seed).unwrap_or(0);
        let mut bench = if self.clients.is_empty() {
            benchmark_with_seed(seed)
        } else {
            let pick = |role| {
                self.clients
                    .iter()
                    .filter(|c| c.role == role)
                    .map(|c| c.spec.clone())
                    .collect::<Vec<_>>()
            };
            Benchmark {
                seed,
                train: pick(ClientRole::Train),
                heldout: pick(ClientRole::HeldOut),
            }
        };
        if bench.train.is_empty() {
            bail!("the benchmark needs at least one training client");
        }
        let mut seen = Vec::new();
        for spec in bench.train.iter_mut().chain(bench.heldout.iter_mut()) {
            self.overrides.apply(spec);
            spec.validate()?;
            if seen.contains(&spec.client_id) {
                bail!("client id {:?} is used twice", spec.client_id);
            }
            seen.push(spec.client_id.clone());
        }
        bench.registry()?;
        Ok(bench)
    }
}

#[derive(Clone, Debug)]
pub struct GenerateArgs {
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub force: bool,
}

/// Validates the config, then writes the dataset tree under `args.out`.
pub fn cmd_generate(args: &GenerateArgs) -> Result<BenchmarkManifest> {
    let cfg = match &args.config {
        Some(p) => GenerateConfig::load(p)?,
        None => GenerateConfig::default(),
    };
    let bench = cfg.benchmark(args.seed)?;
    fresh_dir(&args.out, args.force)?;
    save_benchmark(&args.out, &bench)
        .with_context(|| format!("writing dataset to {}", args.out.display()))
}
