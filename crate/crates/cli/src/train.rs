//! `train`: runs every entry of an experiment plan.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use mmfl_core::federation::{
    run_federation, write_metrics_csv, write_round_log, FederationOutcome, PreparedClient, RoundLog,
};
use mmfl_core::segnet::{save_checkpoint, SegNet};
use mmfl_core::synthdata::ClientRole;

use crate::evaluate::{eval_generalize, eval_missing, BnHandling, EvalReport, ExclusionPolicy};
use crate::files::{check_dir_free, fresh_dir, write_json, write_toml};
use crate::plan::{ExperimentPlan, Overrides, PlannedRun, Protocol};
use crate::rundir::{
    ClientDice, Dataset, LoadedRun, RunRecord, RunSummary, CHECKPOINT_FILE, EVAL_GENERALIZE_FILE,
    EVAL_MISSING_FILE, LOG_FILE, METRICS_FILE, NORM_DIR, RUN_FILE, SUMMARY_FILE,
};

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub plan: PathBuf,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub overrides: Overrides,
    pub force: bool,
    /// Suppress per-round progress on stderr.
    pub quiet: bool,
}

/// A run whose inputs are loaded and checked.
struct Prepared<'a> {
    run: &'a PlannedRun,
    clients: Vec<Arc<PreparedClient>>,
    record: RunRecord,
    dir: PathBuf,
}

fn prepare<'a>(run: &'a PlannedRun, ds: &Dataset, out: &Path) -> Result<Prepared<'a>> {
    let ids = run
        .clients
        .clone()
        .unwrap_or_else(|| ds.ids(ClientRole::Train));
    if ids.is_empty() {
        bail!("dataset {} has no training clients", ds.root.display());
    }
    let clients = ids
        .iter()
        .map(|id| {
            Ok(Arc::new(PreparedClient::new(
                ds.get(id)?,
                &ds.registry,
                run.modalities.as_deref(),
            )?))
        })
        .collect::<Result<Vec<_>>>()?;
    let first = &clients[0];
    if let Some(c) = clients.iter().find(|c| c.size != first.size) {
        bail!(
            "client {:?} is {}px, {:?} is {}px",
            c.client_id,
            c.size,
            first.client_id,
            first.size
        );
    }
    if let Some(c) = clients.iter().find(|c| c.val.len == 0) {
        bail!("client {:?} has no validation samples", c.client_id);
    }
    let net = SegNet::build(run.config.net(ds.registry.len()))?;
    net.check_input(&[1, first.channels, first.size, first.size])
        .with_context(|| {
            format!(
                "{}px images do not suit a depth-{} network",
                first.size, run.config.depth
            )
        })?;
    let data_dir = fs::canonicalize(&ds.root).unwrap_or_else(|_| ds.root.clone());
    let record = RunRecord::new(
        &run.label,
        &run.config,
        &data_dir,
        ds.manifest.seed,
        ds.registry.names(),
        &ids,
        &run.modalities,
        &run.evaluate,
    );
    Ok(Prepared {
        run,
        clients,
        record,
        dir: out.join(&run.label),
    })
}

fn write_outputs(p: &Prepared, outcome: &FederationOutcome) -> Result<()> {
    let net = outcome.config.net(outcome.in_channels);
    save_checkpoint(&p.dir.join(CHECKPOINT_FILE), &net, &outcome.global)?;
    if outcome.config.aggregation.keeps_local_norm() {
        let dir = p.dir.join(NORM_DIR);
        fs::create_dir_all(&dir)?;
        for (id, store) in &outcome.client_norms {
            save_checkpoint(&dir.join(format!("{id}.mmfl")), &net, store)?;
        }
    }
    write_metrics_csv(&p.dir.join(METRICS_FILE), &outcome.metrics())?;
    write_round_log(&p.dir.join(LOG_FILE), &outcome.log)?;
    let clients: Vec<ClientDice> = outcome
        .final_val_dice()
        .into_iter()
        .map(|(client_id, dice)| ClientDice { client_id, dice })
        .collect();
    let dice: Vec<f64> = clients.iter().map(|c| c.dice).collect();
    let summary = RunSummary {
        label: p.record.label.clone(),
        config_hash: p.record.config_hash.clone(),
        rounds: outcome.config.rounds,
        average_dice: mmfl_core::federation::mean(&dice),
        clients,
        audit: outcome.audit_total(),
    };
    write_json(&p.dir.join(SUMMARY_FILE), &summary)
}

/// Evaluations listed in the plan, with default settings.
fn run_protocols(dir: &Path, protocols: &[Protocol]) -> Result<Vec<EvalReport>> {
    if protocols.is_empty() {
        return Ok(Vec::new());
    }
    let run = LoadedRun::load(dir)?;
    let ds = run.dataset(None)?;
    let mut out = Vec::new();
    for p in protocols {
        let (report, file) = match p {
            Protocol::Missing => {
                let policy = ExclusionPolicy::Random {
                    phi: run.record.config.phi,
                };
                (
                    eval_missing(&run, &ds, &policy, run.record.config.seed)?,
                    EVAL_MISSING_FILE,
                )
            }
            Protocol::Generalize => {
                let held = ds.ids(ClientRole::HeldOut);
                let r = eval_generalize(
                    &run,
                    &ds,
                    &held,
                    run.record.modalities.as_deref(),
                    BnHandling::Auto,
                )?;
                (r, EVAL_GENERALIZE_FILE)
            }
        };
        write_json(&dir.join(file), &report)?;
        out.push(report);
    }
    Ok(out)
}

fn progress(label: &str) -> impl FnMut(&RoundLog) + '_ {
    move |r: &RoundLog| {
        let loss = r.clients.iter().map(|c| c.train_loss).sum::<f64>() / r.clients.len() as f64;
        let dice: Vec<f64> = r.clients.iter().filter_map(|c| c.val_dice).collect();
        let dice = if dice.is_empty() {
            String::new()
        } else {
            format!(
                " val_dice {:.4}",
                dice.iter().sum::<f64>() / dice.len() as f64
            )
        };
        eprintln!(
            "[{label}] round {} lr {:.2e} loss {loss:.4}{dice} ({:.0} ms)",
            r.round, r.lr, r.wall_ms
        );
    }
}

/// Loads the plan and dataset, checks every run, then trains them in order.
/// Returns the run directories.
pub fn cmd_train(args: &TrainArgs) -> Result<Vec<PathBuf>> {
    let plan = ExperimentPlan::load(
        &args.plan,
        args.data.as_deref(),
        args.out.as_deref(),
        &args.overrides,
    )?;
    let ds = Dataset::load(&plan.data)?;
    let prepared = plan
        .runs
        .iter()
        .map(|r| prepare(r, &ds, &plan.out).with_context(|| format!("run {:?}", r.label)))
        .collect::<Result<Vec<_>>>()?;
    for p in &prepared {
        check_dir_free(&p.dir, args.force)?;
    }
    let mut dirs = Vec::new();
    for p in &prepared {
        fresh_dir(&p.dir, args.force)?;
        write_toml(&p.dir.join(RUN_FILE), &p.record)?;
        let start = Instant::now();
        let mut observer = progress(&p.run.label);
        let observer: Option<&mut dyn FnMut(&RoundLog)> = if args.quiet {
            None
        } else {
            Some(&mut observer)
        };
        let outcome = run_federation(&p.clients, &p.run.config, observer)
            .with_context(|| format!("training run {:?}", p.run.label))?;
        write_outputs(p, &outcome)?;
        run_protocols(&p.dir, &p.run.evaluate)?;
        if !args.quiet {
            eprintln!(
                "[{}] done in {:.1} s",
                p.run.label,
                start.elapsed().as_secs_f64()
            );
        }
        dirs.push(p.dir.clone());
    }
    Ok(dirs)
}
