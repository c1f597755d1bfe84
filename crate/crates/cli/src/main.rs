use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use mmfl_cli::*;

#[derive(Parser)]
#[command(
    name = "mmfl",
    version,
    about = "Federated multi-modal segmentation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// TOML file with seed, spec overrides or custom clients.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        force: bool,
    },
    /// Train every run of an experiment plan.
    Train(TrainCli),
    /// Source-client Dice with all modalities vs. with modalities excluded.
    EvalMissing {
        #[arg(long)]
        run: PathBuf,
        /// Dataset directory; defaults to the one the run was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// none, random[:PHI] or keep:M1,M2
        #[arg(long, default_value = "random")]
        policy: String,
        /// Overrides the phi of a random policy.
        #[arg(long)]
        phi: Option<f64>,
        /// Exclusion seed; defaults to the run's seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Dice on held-out clients.
    EvalGeneralize {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// auto, adapt or avg
        #[arg(long, default_value = "auto")]
        bn: BnHandling,
        /// Comma-separated client ids; defaults to the held-out clients.
        #[arg(long, value_delimiter = ',')]
        clients: Option<Vec<String>>,
        /// Comma-separated modalities to keep on the evaluated clients.
        #[arg(long, value_delimiter = ',')]
        modalities: Option<Vec<String>>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Tables over finished runs.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also draw validation Dice against round.
        #[arg(long)]
        plots: bool,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Args)]
struct TrainCli {
    #[arg(long)]
    plan: PathBuf,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    phi: Option<f64>,
    /// batch, instance, group[:G] or nf
    #[arg(long)]
    norm: Option<String>,
    /// fedavg_all, fedavg_avgbn or fedbn
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, conflicts_with = "no_drop")]
    drop: bool,
    #[arg(long)]
    no_drop: bool,
    #[arg(long)]
    force: bool,
    #[arg(long, short)]
    quiet: bool,
}

fn print_report(r: &EvalReport) {
    for row in &r.rows {
        match (row.dice_excluded, row.delta) {
            (Some(e), Some(d)) => println!("{}\t{:.4}\t{e:.4}\t{d:.4}", row.client_id, row.dice),
            _ => println!("{}\t{:.4}", row.client_id, row.dice),
        }
    }
    match (r.average_dice_excluded, r.average_delta) {
        (Some(e), Some(d)) => println!("average\t{:.4}\t{e:.4}\t{d:.4}", r.average_dice),
        _ => println!("average\t{:.4}", r.average_dice),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            out,
            config,
            seed,
            force,
        } => {
            let m = cmd_generate(&GenerateArgs {
                out: out.clone(),
                config,
                seed,
                force,
            })?;
            println!(
                "wrote {} clients to {} (modalities: {})",
                m.clients.len(),
                out.display(),
                m.registry.join(", ")
            );
        }
        Command::Train(t) => {
            let drop_enabled = match (t.drop, t.no_drop) {
                (true, _) => Some(true),
                (_, true) => Some(false),
                _ => None,
            };
            let args = TrainArgs {
                plan: t.plan,
                data: t.data,
                out: t.out,
                overrides: Overrides {
                    seed: t.seed,
                    phi: t.phi,
                    norm: t.norm,
                    aggregation: t.aggregation,
                    rounds: t.rounds,
                    tau: t.tau,
                    batch_size: t.batch_size,
                    drop_enabled,
                },
                force: t.force,
                quiet: t.quiet,
            };
            for dir in cmd_train(&args)? {
                println!("{}", dir.display());
            }
        }
        Command::EvalMissing {
            run,
            data,
            policy,
            phi,
            seed,
            out,
            force,
        } => {
            let mut policy: ExclusionPolicy = policy.parse()?;
            if let (Some(p), ExclusionPolicy::Random { phi }) = (phi, &mut policy) {
                *phi = p;
            }
            let r = cmd_eval_missing(&EvalMissingArgs {
                run,
                data,
                policy,
                seed,
                out,
                force,
            })?;
            print_report(&r);
        }
        Command::EvalGeneralize {
            run,
            data,
            bn,
            clients,
            modalities,
            out,
            force,
        } => {
            let r = cmd_eval_generalize(&EvalGeneralizeArgs {
                run,
                data,
                bn,
                clients,
                modalities,
                out,
                force,
            })?;
            print_report(&r);
            println!(
                "needs target data: {}",
                if r.needs_target_data { "yes" } else { "no" }
            );
        }
        Command::Report {
            runs,
            out,
            plots,
            force,
        } => {
            let r = cmd_report(&ReportArgs {
                runs,
                out: out.clone(),
                plots,
                force,
            })?;
            println!("{} rows written to {}", r.rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
