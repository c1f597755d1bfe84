//! `eval-missing` and `eval-generalize`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use mmfl_core::federation::{
    adapt_bn_to_target, evaluate, input_batches, mean, Exclusion, PreparedClient, EVAL_BATCH,
};
use mmfl_core::segnet::{NormKind, ParamSet, SegNet};
use mmfl_core::synthdata::ClientRole;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::files::{check_file_free, write_json};
use crate::rundir::{Dataset, LoadedRun, EVAL_GENERALIZE_FILE, EVAL_MISSING_FILE};

const REPORT_FORMAT: &str = "mmfl-eval-v1";
/// Averages must be reproducible from the rows to this tolerance.
pub const AVERAGE_TOLERANCE: f64 = 1e-12;

/// Which modalities are hidden at test time in `eval-missing`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExclusionPolicy {
    None,
    /// Each present modality hidden with probability `phi`, at least one kept.
    Random {
        phi: f64,
    },
    /// Only these modalities are kept.
    Keep {
        modalities: Vec<String>,
    },
}

impl FromStr for ExclusionPolicy {
    type Err = anyhow::Error;

    /// `none`, `random`, `random:0.5` or `keep:T1,FLAIR`. Plain `random`
    /// uses phi 0.5.
    fn from_str(s: &str) -> Result<Self> {
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        match (head, arg) {
            ("none", None) => Ok(Self::None),
            ("random", None) => Ok(Self::Random { phi: 0.5 }),
            ("random", Some(p)) => {
                let phi: f64 = p.parse().with_context(|| format!("bad phi in {s:?}"))?;
                if !(0.0..=1.0).contains(&phi) {
                    bail!("phi must lie in [0, 1], got {phi}");
                }
                Ok(Self::Random { phi })
            }
            ("keep", Some(list)) if !list.is_empty() => Ok(Self::Keep {
                modalities: list.split(',').map(|m| m.trim().to_string()).collect(),
            }),
            _ => {
                bail!("unknown exclusion policy {s:?} (expected none, random[:PHI] or keep:M1,M2)")
            }
        }
    }
}

impl fmt::Display for ExclusionPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => f.write_str("none"),
            Self::Random { phi } => write!(f, "random:{phi}"),
            Self::Keep { modalities } => write!(f, "keep:{}", modalities.join(",")),
        }
    }
}

/// Requested normalization handling for unseen clients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnHandling {
    /// Adapt for client-specific BN, averaged entries otherwise.
    #[default]
    Auto,
    /// Averaged BN entries, statistics re-estimated on unlabeled target data.
    Adapt,
    /// Averaged normalization entries only.
    Avg,
}

impl FromStr for BnHandling {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "adapt" => Ok(Self::Adapt),
            "avg" | "average" => Ok(Self::Avg),
            _ => bail!("unknown BN handling {s:?} (expected auto, adapt or avg)"),
        }
    }
}

/// Handling actually applied, recorded in the report.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedNorm {
    Adapted,
    Averaged,
    /// The model has no normalization entries.
    NotApplicable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Missing,
    Generalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalRow {
    pub client_id: String,
    pub samples: usize,
    /// Mean per-sample Dice with every available modality.
    pub dice: f64,
    /// Mean per-sample Dice under the exclusion policy.
    pub dice_excluded: Option<f64>,
    /// `dice - dice_excluded`.
    pub delta: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub format: String,
    pub kind: EvalKind,
    pub run_label: String,
    pub config_hash: String,
    pub policy: Option<ExclusionPolicy>,
    pub exclusion_seed: Option<u64>,
    pub norm_handling: Option<AppliedNorm>,
    pub modalities: Option<Vec<String>>,
    pub needs_target_data: bool,
    pub rows: Vec<EvalRow>,
    pub average_dice: f64,
    pub average_dice_excluded: Option<f64>,
    pub average_delta: Option<f64>,
}

fn opt_mean(rows: &[EvalRow], f: impl Fn(&EvalRow) -> Option<f64>) -> Option<f64> {
    let v: Option<Vec<f64>> = rows.iter().map(f).collect();
    v.map(|v| mean(&v))
}

impl EvalReport {
    fn averages(rows: &[EvalRow]) -> (f64, Option<f64>, Option<f64>) {
        let d: Vec<f64> = rows.iter().map(|r| r.dice).collect();
        (
            mean(&d),
            opt_mean(rows, |r| r.dice_excluded),
            opt_mean(rows, |r| r.delta),
        )
    }

    /// Checks the stored averages against the rows.
    pub fn check_averages(&self) -> Result<()> {
        let (d, e, delta) = Self::averages(&self.rows);
        let close = |a: f64, b: f64| (a - b).abs() <= AVERAGE_TOLERANCE;
        let close_opt = |a: Option<f64>, b: Option<f64>| match (a, b) {
            (Some(a), Some(b)) => close(a, b),
            (None, None) => true,
            _ => false,
        };
        if !(close(d, self.average_dice)
            && close_opt(e, self.average_dice_excluded)
            && close_opt(delta, self.average_delta))
        {
            bail!("report averages do not match its rows");
        }
        Ok(())
    }
}

fn build_net(run: &LoadedRun, params: &ParamSet) -> Result<SegNet> {
    let mut net = SegNet::build(run.net.clone())?;
    net.set_params(params)?;
    Ok(net)
}

fn exclusion_for(
    policy: &ExclusionPolicy,
    client: &PreparedClient,
    ds: &Dataset,
) -> Result<Exclusion> {
    Ok(match policy {
        ExclusionPolicy::None => Exclusion::None,
        ExclusionPolicy::Random { phi } => Exclusion::Random { phi: *phi },
        ExclusionPolicy::Keep { modalities } => {
            let keep = ds.registry.mask_of(modalities)?;
            if !keep.iter().zip(&client.present).any(|(k, p)| *k && *p) {
                bail!(
                    "policy {policy} leaves client {:?} with no modality",
                    client.client_id
                );
            }
            Exclusion::Keep { channels: keep }
        }
    })
}

/// Random stream for client `i`'s exclusion draws.
fn exclusion_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + i as u64);
    rng
}

#[derive(Clone, Debug)]
pub struct EvalMissingArgs {
    pub run: PathBuf,
    pub data: Option<PathBuf>,
    pub policy: ExclusionPolicy,
    /// Defaults to the run's seed.
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

/// Source-client Dice with all modalities and under `policy`, and the
/// difference.
pub fn eval_missing(
    run: &LoadedRun,
    ds: &Dataset,
    policy: &ExclusionPolicy,
    seed: u64,
) -> Result<EvalReport> {
    if let ExclusionPolicy::Random { phi } = policy {
        if !(0.0..=1.0).contains(phi) {
            bail!("phi must lie in [0, 1], got {phi}");
        }
    }
    let only = run.record.modalities.as_deref();
    let mut rows = Vec::new();
    for (i, id) in run.record.clients.iter().enumerate() {
        let client = PreparedClient::new(ds.get(id)?, &ds.registry, only)?;
        let mut net = build_net(run, &run.client_params(id)?)?;
        let exclusion = exclusion_for(policy, &client, ds)?;
        let mut rng = exclusion_rng(seed, i);
        let full = mean(&evaluate(
            &mut net,
            &client,
            &client.val,
            &Exclusion::None,
            &mut rng,
        )?);
        let excluded = mean(&evaluate(
            &mut net,
            &client,
            &client.val,
            &exclusion,
            &mut rng,
        )?);
        rows.push(EvalRow {
            client_id: id.clone(),
            samples: client.val.len,
            dice: full,
            dice_excluded: Some(excluded),
            delta: Some(full - excluded),
        });
    }
    let (average_dice, average_dice_excluded, average_delta) = EvalReport::averages(&rows);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        kind: EvalKind::Missing,
        run_label: run.record.label.clone(),
        config_hash: run.record.config_hash.clone(),
        policy: Some(policy.clone()),
        exclusion_seed: Some(seed),
        norm_handling: None,
        modalities: run.record.modalities.clone(),
        needs_target_data: false,
        rows,
        average_dice,
        average_dice_excluded,
        average_delta,
    })
}

pub fn cmd_eval_missing(args: &EvalMissingArgs) -> Result<EvalReport> {
    let run = LoadedRun::load(&args.run)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join(EVAL_MISSING_FILE));
    check_file_free(&out, args.force)?;
    let ds = run.dataset(args.data.as_deref())?;
    let seed = args.seed.unwrap_or(run.record.config.seed);
    let report = eval_missing(&run, &ds, &args.policy, seed)?;
    write_json(&out, &report)?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub struct EvalGeneralizeArgs {
    pub run: PathBuf,
    pub data: Option<PathBuf>,
    pub bn: BnHandling,
    /// Defaults to the dataset's held-out clients.
    pub clients: Option<Vec<String>>,
    /// Defaults to the modality restriction the run was trained with.
    pub modalities: Option<Vec<String>>,
    pub out: Option<PathBuf>,
    pub force: bool,
}

fn resolve_norm(run: &LoadedRun, bn: BnHandling) -> Result<AppliedNorm> {
    let norm = run.net.norm;
    Ok(match (norm, bn) {
        (NormKind::BatchNorm, BnHandling::Adapt) => AppliedNorm::Adapted,
        (NormKind::BatchNorm, BnHandling::Auto) if !run.norms.is_empty() => AppliedNorm::Adapted,
        (_, BnHandling::Adapt) => bail!(
            "--bn adapt needs a batch-norm model, run {} uses {norm}",
            run.record.label
        ),
        (NormKind::NormFree, _) => AppliedNorm::NotApplicable,
        _ => AppliedNorm::Averaged,
    })
}

/// Dice on unseen clients, zero-filled into the run's channel space.
pub fn eval_generalize(
    run: &LoadedRun,
    ds: &Dataset,
    clients: &[String],
    modalities: Option<&[String]>,
    bn: BnHandling,
) -> Result<EvalReport> {
    if clients.is_empty() {
        bail!("no clients to evaluate");
    }
    let applied = resolve_norm(run, bn)?;
    let shared = run.global.overlay(&run.averaged_norm()?)?;
    let mut rows = Vec::new();
    for id in clients {
        let client = PreparedClient::new(ds.get(id)?, &ds.registry, modalities)
            .with_context(|| format!("preparing held-out client {id:?}"))?;
        let params = match applied {
            AppliedNorm::Adapted => {
                let batches = input_batches(&client, &client.train, EVAL_BATCH)?;
                adapt_bn_to_target(&run.global, &run.averaged_norm()?, &run.net, &batches)?
            }
            _ => shared.clone(),
        };
        let mut net = build_net(run, &params)?;
        let mut rng = exclusion_rng(0, 0);
        let dice = mean(&evaluate(
            &mut net,
            &client,
            &client.val,
            &Exclusion::None,
            &mut rng,
        )?);
        rows.push(EvalRow {
            client_id: id.clone(),
            samples: client.val.len,
            dice,
            dice_excluded: None,
            delta: None,
        });
    }
    let (average_dice, _, _) = EvalReport::averages(&rows);
    Ok(EvalReport {
        format: REPORT_FORMAT.into(),
        kind: EvalKind::Generalize,
        run_label: run.record.label.clone(),
        config_hash: run.record.config_hash.clone(),
        policy: None,
        exclusion_seed: None,
        norm_handling: Some(applied),
        modalities: modalities.map(<[String]>::to_vec),
        needs_target_data: applied == AppliedNorm::Adapted,
        rows,
        average_dice,
        average_dice_excluded: None,
        average_delta: None,
    })
}

pub fn cmd_eval_generalize(args: &EvalGeneralizeArgs) -> Result<EvalReport> {
    let run = LoadedRun::load(&args.run)?;
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.run.join(EVAL_GENERALIZE_FILE));
    check_file_free(&out, args.force)?;
    let ds = run.dataset(args.data.as_deref())?;
    let clients = args
        .clients
        .clone()
        .unwrap_or_else(|| ds.ids(ClientRole::HeldOut));
    let modalities = args.modalities.as_ref().or(run.record.modalities.as_ref());
    let report = eval_generalize(&run, &ds, &clients, modalities.map(Vec::as_slice), args.bn)?;
    write_json(&out, &report)?;
    Ok(report)
}

/// Reads a report and checks its averages.
pub fn read_report(path: &Path) -> Result<EvalReport> {
    let r: EvalReport = crate::files::read_json(path)?;
    r.check_averages()
        .with_context(|| format!("in {}", path.display()))?;
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn policy_strings_round_trip() {
        for s in ["none", "random:0.25", "keep:T1,FLAIR"] {
            let p: ExclusionPolicy = s.parse().unwrap();
            assert_eq!(p.to_string(), s);
        }
        assert_eq!(
            "random".parse::<ExclusionPolicy>().unwrap(),
            ExclusionPolicy::Random { phi: 0.5 }
        );
        for bad in ["random:2", "keep:", "drop", "none:1"] {
            assert!(bad.parse::<ExclusionPolicy>().is_err(), "{bad}");
        }
    }

    #[test]
    fn averages_are_checked() {
        let row = |d: f64, e: f64| EvalRow {
            client_id: "c".into(),
            samples: 1,
            dice: d,
            dice_excluded: Some(e),
            delta: Some(d - e),
        };
        let rows = vec![row(0.9, 0.5), row(0.3, 0.1), row(0.7, 0.7)];
        let (a, e, d) = EvalReport::averages(&rows);
        let mut r = EvalReport {
            format: REPORT_FORMAT.into(),
            kind: EvalKind::Missing,
            run_label: "x".into(),
            config_hash: String::new(),
            policy: None,
            exclusion_seed: None,
            norm_handling: None,
            modalities: None,
            needs_target_data: false,
            rows,
            average_dice: a,
            average_dice_excluded: e,
            average_delta: d,
        };
        r.check_averages().unwrap();
        assert!((a - 19.0 / 30.0).abs() < 1e-15);
        r.average_delta = Some(d.unwrap() + 1e-9);
        assert!(r.check_averages().is_err());
        r.average_delta = None;
        assert!(r.check_averages().is_err());
    }
}
