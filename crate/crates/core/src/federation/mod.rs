//! Synchronous federated training: local Adam steps on each client, server
//! averaging with either shared or client-specific normalization, and the
//! evaluation helpers built on top.

mod aggregate;
mod client;
mod config;
mod data;
mod eval;
mod metrics;
mod optim;
mod run;

pub use aggregate::{aggregate, average_norm_params, client_weights};
pub use client::{client_rng, local_train, ClientState, LocalUpdate};
pub use config::{lr_at, round_lr, AdamConfig, Aggregation, FederatedConfig, Weighting};
pub use data::{Cycler, PreparedClient, Split};
pub use eval::{adapt_bn_to_target, evaluate, input_batches, mean, Exclusion, EVAL_BATCH};
pub use metrics::{
    metrics_csv, read_metrics_csv, read_round_log, write_metrics_csv, write_round_log,
};
pub use optim::Adam;
pub use run::{
    run_federation, train_centralized, FederationOutcome, KernelStats, RoundAudit, RoundLog,
    RoundMetrics,
};
