//! `report`: consolidates finished runs into comparison tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mmfl_core::federation::{mean, read_metrics_csv, FederatedConfig};
use mmfl_core::segnet::NormKind;
use serde::Serialize;

use crate::evaluate::{read_report, AVERAGE_TOLERANCE};
use crate::files::{check_file_free, fresh_dir};
use crate::rundir::{
    LoadedRun, RunRecord, RunSummary, EVAL_GENERALIZE_FILE, EVAL_MISSING_FILE, METRICS_FILE,
    RUN_FILE, SUMMARY_FILE,
};

pub const CSV_FILE: &str = "report.csv";
pub const MARKDOWN_FILE: &str = "report.md";
pub const PLOT_FILE: &str = "dice_vs_round.svg";

/// Normalization setting of a row, in table order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum Setting {
    BnAvg,
    BnClientSpecific,
    Instance,
    Group,
    NormFree,
}

impl Setting {
    pub fn of(cfg: &FederatedConfig) -> Self {
        match cfg.norm {
            NormKind::BatchNorm if cfg.aggregation.keeps_local_norm() => Self::BnClientSpecific,
            NormKind::BatchNorm => Self::BnAvg,
            NormKind::InstanceNorm => Self::Instance,
            NormKind::GroupNorm(_) => Self::Group,
            NormKind::NormFree => Self::NormFree,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::BnAvg => "BN avg",
            Self::BnClientSpecific => "BN client-spec",
            Self::Instance => "IN",
            Self::Group => "GN",
            Self::NormFree => "NF",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub label: String,
    pub setting: Setting,
    pub drop: bool,
    pub config_hash: String,
    /// Source validation Dice per client column; `None` if the run did not
    /// train on that client.
    pub source: Vec<Option<f64>>,
    pub average: f64,
    pub dice_full: Option<f64>,
    pub dice_excluded: Option<f64>,
    pub delta: Option<f64>,
    /// Dice per held-out column.
    pub heldout: Vec<Option<f64>>,
    pub needs_target_data: Option<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub registry: Vec<String>,
    pub source_clients: Vec<String>,
    pub heldout_clients: Vec<String>,
    pub rows: Vec<ReportRow>,
}

struct RunFiles {
    record: RunRecord,
    summary: RunSummary,
    dir: PathBuf,
}

fn load(dir: &Path) -> Result<RunFiles> {
    if !dir.join(RUN_FILE).exists() {
        bail!("{} is not a run directory", dir.display());
    }
    // Full load also checks that the checkpoint is readable.
    let run = LoadedRun::load(dir)?;
    Ok(RunFiles {
        record: run.record,
        summary: run.summary,
        dir: dir.to_path_buf(),
    })
}

fn push_unique(v: &mut Vec<String>, s: &str) {
    if !v.iter().any(|x| x == s) {
        v.push(s.to_string());
    }
}

fn build(runs: &[RunFiles]) -> Result<Report> {
    let registry = runs[0].record.registry.clone();
    for r in runs {
        if r.record.registry != registry {
            bail!(
                "run {} uses registry {:?}, run {} uses {:?}",
                r.record.label,
                r.record.registry,
                runs[0].record.label,
                registry
            );
        }
    }
    let mut labels: Vec<&str> = Vec::new();
    for r in runs {
        if labels.contains(&r.record.label.as_str()) {
            bail!("run label {:?} appears twice", r.record.label);
        }
        labels.push(&r.record.label);
    }
    let mut source_clients = Vec::new();
    let mut heldout_clients = Vec::new();
    let mut rows = Vec::new();
    let mut pending = Vec::new();
    for r in runs {
        for c in &r.summary.clients {
            push_unique(&mut source_clients, &c.client_id);
        }
        let dice: Vec<f64> = r.summary.clients.iter().map(|c| c.dice).collect();
        let average = mean(&dice);
        if (average - r.summary.average_dice).abs() > AVERAGE_TOLERANCE {
            bail!(
                "{}: stored average does not match its clients",
                r.dir.join(SUMMARY_FILE).display()
            );
        }
        let missing = r.dir.join(EVAL_MISSING_FILE);
        let missing = if missing.exists() {
            Some(read_report(&missing)?)
        } else {
            None
        };
        let general = r.dir.join(EVAL_GENERALIZE_FILE);
        let general = if general.exists() {
            Some(read_report(&general)?)
        } else {
            None
        };
        if let Some(g) = &general {
            for row in &g.rows {
                push_unique(&mut heldout_clients, &row.client_id);
            }
        }
        let cfg = &r.record.config;
        pending.push((r, general));
        rows.push(ReportRow {
            label: r.record.label.clone(),
            setting: Setting::of(cfg),
            drop: cfg.drop_enabled && cfg.phi > 0.0,
            config_hash: r.record.config_hash.clone(),
            source: Vec::new(),
            average,
            dice_full: missing.as_ref().map(|m| m.average_dice),
            dice_excluded: missing.as_ref().and_then(|m| m.average_dice_excluded),
            delta: missing.as_ref().and_then(|m| m.average_delta),
            heldout: Vec::new(),
            needs_target_data: None,
        });
    }
    for (row, (r, general)) in rows.iter_mut().zip(&pending) {
        row.source = source_clients
            .iter()
            .map(|id| {
                r.summary
                    .clients
                    .iter()
                    .find(|c| &c.client_id == id)
                    .map(|c| c.dice)
            })
            .collect();
        row.heldout = heldout_clients
            .iter()
            .map(|id| {
                general
                    .as_ref()
                    .and_then(|g| g.rows.iter().find(|x| &x.client_id == id).map(|x| x.dice))
            })
            .collect();
        row.needs_target_data = general.as_ref().map(|g| g.needs_target_data);
    }
    rows.sort_by_key(|r| (r.setting, !r.drop));
    Ok(Report {
        registry,
        source_clients,
        heldout_clients,
        rows,
    })
}

fn num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.1}", 100.0 * x))
        .unwrap_or_else(|| "-".into())
}

fn drop_name(drop: bool) -> &'static str {
    if drop {
        "drop"
    } else {
        "no-drop"
    }
}

impl Report {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["label".to_string(), "setting".into(), "drop".into()];
        header.extend(self.source_clients.iter().map(|c| format!("dice:{c}")));
        header.extend(["average", "dice_full", "dice_excluded", "delta"].map(String::from));
        header.extend(self.heldout_clients.iter().map(|c| format!("heldout:{c}")));
        header.extend(["needs_target_data", "config_hash"].map(String::from));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.label.clone(),
                r.setting.name().into(),
                drop_name(r.drop).into(),
            ];
            rec.extend(r.source.iter().map(|v| num(*v)));
            rec.extend([
                num(Some(r.average)),
                num(r.dice_full),
                num(r.dice_excluded),
                num(r.delta),
            ]);
            rec.extend(r.heldout.iter().map(|v| num(*v)));
            rec.push(
                r.needs_target_data
                    .map(|b| b.to_string())
                    .unwrap_or_default(),
            );
            rec.push(r.config_hash.clone());
            w.write_record(&rec)?;
        }
        Ok(w.into_inner()?)
    }

    /// Three tables: source validation, missing modalities, unseen clients.
    /// Dice in percentage points.
    pub fn to_markdown(&self) -> String {
        let mut s = String::new();
        let row_head = |r: &ReportRow| {
            format!(
                "| {} | {} | {} |",
                r.label,
                r.setting.name(),
                drop_name(r.drop)
            )
        };
        let _ = writeln!(s, "# Results\n\nModalities: {}\n", self.registry.join(", "));

        let _ = writeln!(s, "## Source validation Dice\n");
        let _ = writeln!(
            s,
            "| Run | Norm | Drop | {} | Average |",
            self.source_clients.join(" | ")
        );
        let _ = writeln!(
            s,
            "|---|---|---|{}---|",
            "---|".repeat(self.source_clients.len())
        );
        for r in &self.rows {
            let cells: Vec<String> = r.source.iter().map(|v| pct(*v)).collect();
            let _ = writeln!(
                s,
                "{} {} | {} |",
                row_head(r),
                cells.join(" | "),
                pct(Some(r.average))
            );
        }

        if self.rows.iter().any(|r| r.delta.is_some()) {
            let _ = writeln!(s, "\n## Random modality exclusion\n");
            let _ = writeln!(
                s,
                "| Run | Norm | Drop | All modalities | Excluded | Δ Dice |"
            );
            let _ = writeln!(s, "|---|---|---|---|---|---|");
            for r in &self.rows {
                let _ = writeln!(
                    s,
                    "{} {} | {} | {} |",
                    row_head(r),
                    pct(r.dice_full),
                    pct(r.dice_excluded),
                    pct(r.delta)
                );
            }
        }

        if !self.heldout_clients.is_empty() {
            let _ = writeln!(s, "\n## Unseen clients\n");
            let _ = writeln!(
                s,
                "| Run | Norm | Drop | {} | Needs target data |",
                self.heldout_clients.join(" | ")
            );
            let _ = writeln!(
                s,
                "|---|---|---|{}---|",
                "---|".repeat(self.heldout_clients.len())
            );
            for r in &self.rows {
                let cells: Vec<String> = r.heldout.iter().map(|v| pct(*v)).collect();
                let needs = match r.needs_target_data {
                    Some(true) => "Yes",
                    Some(false) => "No",
                    None => "-",
                };
                let _ = writeln!(s, "{} {} | {needs} |", row_head(r), cells.join(" | "));
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct ReportArgs {
    pub runs: Vec<PathBuf>,
    pub out: PathBuf,
    pub plots: bool,
    pub force: bool,
}

pub fn cmd_report(args: &ReportArgs) -> Result<Report> {
    if args.runs.is_empty() {
        bail!("report needs at least one run directory");
    }
    let runs = args
        .runs
        .iter()
        .map(|d| load(d))
        .collect::<Result<Vec<_>>>()?;
    let report = build(&runs)?;
    let outputs = [CSV_FILE, MARKDOWN_FILE, PLOT_FILE];
    if args.out.exists() {
        for f in outputs {
            check_file_free(&args.out.join(f), args.force)?;
        }
    } else {
        fresh_dir(&args.out, false)?;
    }
    fs::write(args.out.join(CSV_FILE), report.to_csv()?)?;
    fs::write(args.out.join(MARKDOWN_FILE), report.to_markdown())?;
    if args.plots {
        let mut series = Vec::new();
        for r in &runs {
            let rows = read_metrics_csv(&r.dir.join(METRICS_FILE))
                .with_context(|| format!("reading metrics of run {}", r.record.label))?;
            series.push((
                r.record.label.clone(),
                crate::plot::mean_dice_by_round(&rows),
            ));
        }
        crate::plot::dice_vs_round(&args.out.join(PLOT_FILE), &series)?;
    }
    Ok(report)
}
