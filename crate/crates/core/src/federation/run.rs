use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::aggregate::{aggregate, client_weights};
use super::client::{local_train, ClientState};
use super::config::{round_lr, FederatedConfig};
use super::data::PreparedClient;
use super::eval::{evaluate, mean, Exclusion};
use crate::error::{Error, Result};
use crate::segnet::{NormKind, ParamSet, SegNet};

/// One row of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    /// 1-based round number.
    pub round: usize,
    pub client_id: String,
    /// Mean training loss over the round's local steps.
    pub train_loss: f64,
    /// Mean per-sample validation Dice; present on validation rounds.
    pub val_dice: Option<f64>,
    pub lr: f64,
}

/// Count of normalization entries that crossed the network or entered the
/// server average in one round.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundAudit {
    pub entries_broadcast: usize,
    pub norm_entries_broadcast: usize,
    pub entries_uploaded: usize,
    pub norm_entries_uploaded: usize,
    pub norm_entries_averaged: usize,
}

/// Worst deviation of standardized kernels from zero mean / unit variance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KernelStats {
    pub max_abs_mean: f64,
    pub max_abs_var_dev: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundLog {
    pub round: usize,
    pub lr: f64,
    pub wall_ms: f64,
    pub clients: Vec<RoundMetrics>,
    pub audit: RoundAudit,
    /// Only for normalization-free models.
    pub kernels: Option<KernelStats>,
}

/// Final state of a federated (or centralized) run.
#[derive(Clone, Debug)]
pub struct FederationOutcome {
    pub config: FederatedConfig,
    pub in_channels: usize,
    /// Server model. In client-specific mode its normalization entries are
    /// the untouched initial values.
    pub global: ParamSet,
    /// Normalization entries of every client's local model, in client order.
    pub client_norms: Vec<(String, ParamSet)>,
    pub log: Vec<RoundLog>,
}

impl FederationOutcome {
    pub fn metrics(&self) -> Vec<RoundMetrics> {
        self.log
            .iter()
            .flat_map(|r| r.clients.iter().cloned())
            .collect()
    }

    /// Parameters client `i` uses at inference.
    pub fn inference_params(&self, i: usize) -> Result<ParamSet> {
        if self.config.aggregation.keeps_local_norm() {
            self.global.overlay(&self.client_norms[i].1)
        } else {
            Ok(self.global.clone())
        }
    }

    /// Last validation Dice of every client.
    pub fn final_val_dice(&self) -> Vec<(String, f64)> {
        let last = self.log.last().expect("at least one round");
        last.clients
            .iter()
            .map(|m| {
                (
                    m.client_id.clone(),
                    m.val_dice.expect("last round is validated"),
                )
            })
            .collect()
    }

    pub fn audit_total(&self) -> RoundAudit {
        self.log
            .iter()
            .fold(RoundAudit::default(), |a, r| RoundAudit {
                entries_broadcast: a.entries_broadcast + r.audit.entries_broadcast,
                norm_entries_broadcast: a.norm_entries_broadcast + r.audit.norm_entries_broadcast,
                entries_uploaded: a.entries_uploaded + r.audit.entries_uploaded,
                norm_entries_uploaded: a.norm_entries_uploaded + r.audit.norm_entries_uploaded,
                norm_entries_averaged: a.norm_entries_averaged + r.audit.norm_entries_averaged,
            })
    }
}

fn count_norm(p: &ParamSet) -> usize {
    p.iter().filter(|(_, e)| e.is_norm).count()
}

pub(crate) fn is_eval_round(round: usize, cfg: &FederatedConfig) -> bool {
    round.is_multiple_of(cfg.eval_every) || round == cfg.rounds
}

/// Random stream for validation-time randomness (unused with no exclusion).
pub(crate) fn eval_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub(crate) fn kernel_stats(nets: &[&SegNet]) -> Result<KernelStats> {
    let mut s = KernelStats::default();
    for net in nets {
        for (_, k) in net.standardized_kernels()? {
            let cols = k.len() / k.shape()[0];
            for row in k.data().chunks(cols) {
                let m = row.iter().sum::<f64>() / cols as f64;
                let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / cols as f64;
                s.max_abs_mean = s.max_abs_mean.max(m.abs());
                s.max_abs_var_dev = s.max_abs_var_dev.max((v - 1.0).abs());
            }
        }
    }
    Ok(s)
}

pub(crate) fn validate_inputs(
    clients: &[Arc<PreparedClient>],
    cfg: &FederatedConfig,
) -> Result<usize> {
    cfg.validate()?;
    let first = clients
        .first()
        .ok_or_else(|| Error::InvalidArgument("federation needs at least one client".into()))?;
    for c in clients {
        if c.channels != first.channels || c.size != first.size {
            return Err(Error::InvalidArgument(format!(
                "client {:?} has {} channels at {}px, expected {} at {}px",
                c.client_id, c.channels, c.size, first.channels, first.size
            )));
        }
        if c.val.len == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {:?} has no validation data",
                c.client_id
            )));
        }
    }
    let net = SegNet::build(cfg.net(first.channels))?;
    net.check_input(&[1, first.channels, first.size, first.size])?;
    Ok(first.channels)
}

/// Synchronous federated training: broadcast, `tau` local steps per client,
/// aggregate, for `cfg.rounds` rounds.
///
/// Clients train in parallel; results are gathered in client order, so the
/// outcome does not depend on scheduling. `observer` sees every round log.
pub fn run_federation(
    clients: &[Arc<PreparedClient>],
    cfg: &FederatedConfig,
    mut observer: Option<&mut dyn FnMut(&RoundLog)>,
) -> Result<FederationOutcome> {
    let p = validate_inputs(clients, cfg)?;
    let template = SegNet::build(cfg.net(p))?;
    let mut global = template.get_params();
    let mut states = clients
        .iter()
        .enumerate()
        .map(|(i, c)| ClientState::new(i, c.clone(), template.clone(), cfg))
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = clients.iter().map(|c| c.train.len).collect();
    let weights = client_weights(cfg.weighting, &sizes);
    let mut log = Vec::with_capacity(cfg.rounds);

    for r in 0..cfg.rounds {
        let started = Instant::now();
        let lr = round_lr(r, cfg)?;
        let broadcast = if cfg.aggregation.keeps_local_norm() {
            global.without_norm()
        } else {
            global.clone()
        };
        let mut audit = RoundAudit {
            entries_broadcast: broadcast.len() * states.len(),
            norm_entries_broadcast: count_norm(&broadcast) * states.len(),
            ..RoundAudit::default()
        };
        let updates = states
            .par_iter_mut()
            .map(|s| local_train(s, &broadcast, lr, cfg.tau, cfg))
            .collect::<Vec<_>>()
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let uploads: Vec<ParamSet> = updates.iter().map(|u| u.params.clone()).collect();
        audit.entries_uploaded = uploads.iter().map(ParamSet::len).sum();
        audit.norm_entries_uploaded = uploads.iter().map(count_norm).sum();
        let averaged = aggregate(&uploads, cfg.aggregation, &weights)?;
        audit.norm_entries_averaged = count_norm(&averaged);
        global = global.overlay(&averaged)?;

        let round = r + 1;
        let validate = is_eval_round(round, cfg);
        let mut rows = Vec::with_capacity(states.len());
        for (s, u) in states.iter().zip(&updates) {
            let val_dice = if validate {
                let params = if cfg.aggregation.keeps_local_norm() {
                    global.overlay(&s.norm_store())?
                } else {
                    global.clone()
                };
                let mut net = template.clone();
                net.set_params(&params)?;
                let scores = evaluate(
                    &mut net,
                    &s.data,
                    &s.data.val,
                    &Exclusion::None,
                    &mut eval_rng(cfg.seed),
                )?;
                Some(mean(&scores))
            } else {
                None
            };
            rows.push(RoundMetrics {
                round,
                client_id: s.client_id.clone(),
                train_loss: mean(&u.losses),
                val_dice,
                lr,
            });
        }
        let kernels = if cfg.norm == NormKind::NormFree {
            let mut g = template.clone();
            g.set_params(&global)?;
            let mut nets: Vec<&SegNet> = states.iter().map(|s| &s.net).collect();
            nets.push(&g);
            Some(kernel_stats(&nets)?)
        } else {
            None
        };
        let entry = RoundLog {
            round,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            clients: rows,
            audit,
            kernels,
        };
        if let Some(obs) = observer.as_mut() {
            obs(&entry);
        }
        log.push(entry);
    }

    Ok(FederationOutcome {
        config: cfg.clone(),
        in_channels: p,
        global,
        client_norms: states
            .iter()
            .map(|s| (s.client_id.clone(), s.norm_store()))
            .collect(),
        log,
    })
}

/// Plain single-model training on one client's data with the same schedule,
/// batching and seeds as a one-client federation, without any server logic.
pub fn train_centralized(
    client: Arc<PreparedClient>,
    cfg: &FederatedConfig,
) -> Result<FederationOutcome> {
    let clients = [client];
    let p = validate_inputs(&clients, cfg)?;
    let net = SegNet::build(cfg.net(p))?;
    let [client] = clients;
    let mut state = ClientState::new(0, client, net, cfg)?;
    let mut log = Vec::with_capacity(cfg.rounds);
    for r in 0..cfg.rounds {
        let started = Instant::now();
        let lr = round_lr(r, cfg)?;
        if cfg.adam.reset_each_round {
            state.adam.reset();
        }
        let mut losses = Vec::with_capacity(cfg.tau);
        for _ in 0..cfg.tau {
            losses.push(state.train_step(lr, cfg)?);
        }
        let round = r + 1;
        let val_dice = if is_eval_round(round, cfg) {
            let mut net = state.net.clone();
            let scores = evaluate(
                &mut net,
                &state.data,
                &state.data.val,
                &Exclusion::None,
                &mut eval_rng(cfg.seed),
            )?;
            Some(mean(&scores))
        } else {
            None
        };
        let kernels = if cfg.norm == NormKind::NormFree {
            Some(kernel_stats(&[&state.net])?)
        } else {
            None
        };
        log.push(RoundLog {
            round,
            lr,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            clients: vec![RoundMetrics {
                round,
                client_id: state.client_id.clone(),
                train_loss: mean(&losses),
                val_dice,
                lr,
            }],
            audit: RoundAudit::default(),
            kernels,
        });
    }
    Ok(FederationOutcome {
        config: cfg.clone(),
        in_channels: p,
        global: state.net.get_params(),
        client_norms: vec![(state.client_id.clone(), state.norm_store())],
        log,
    })
}
