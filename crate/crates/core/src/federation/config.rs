use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::LossConfig;
use crate::segnet::{NetConfig, NormKind};

/// How client updates are combined on the server.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aggregation {
    /// Average every entry, normalization entries included.
    FedAvgAll,
    /// Same averaging as [`Aggregation::FedAvgAll`]; the averaged
    /// normalization entries are what every client uses at inference.
    FedAvgAvgBn,
    /// Average only non-normalization entries; each client keeps its own
    /// normalization parameters and statistics, which are never sent.
    FedBnClientSpecific,
}

impl Aggregation {
    pub fn keeps_local_norm(self) -> bool {
        self == Aggregation::FedBnClientSpecific
    }
}

impl fmt::Display for Aggregation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Aggregation::FedAvgAll => "fedavg_all",
            Aggregation::FedAvgAvgBn => "fedavg_avgbn",
            Aggregation::FedBnClientSpecific => "fedbn",
        })
    }
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "fedavg_all" | "fedavg" => Ok(Aggregation::FedAvgAll),
            "fedavg_avgbn" => Ok(Aggregation::FedAvgAvgBn),
            "fedbn" | "fedbn_clientspecific" | "fedbn_client_specific" => {
                Ok(Aggregation::FedBnClientSpecific)
            }
            _ => Err(Error::Config(format!(
                "unknown aggregation {s:?} (expected fedavg_all, fedavg_avgbn or fedbn)"
            ))),
        }
    }
}

impl TryFrom<String> for Aggregation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Aggregation> for String {
    fn from(a: Aggregation) -> Self {
        a.to_string()
    }
}

/// Client weights in the server average.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1/C` per client.
    Uniform,
    /// Proportional to the number of training samples.
    DatasetSize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Clear moment estimates at the start of every round.
    pub reset_each_round: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            reset_each_round: false,
        }
    }
}

/// Full description of one federated experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederatedConfig {
    /// Communication rounds, `E`.
    pub rounds: usize,
    /// Local optimizer steps per round.
    pub tau: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_rounds: usize,
    pub decay_start_round: usize,
    /// Dice weight of the training loss.
    pub alpha: f64,
    pub smooth: f64,
    /// Per-channel drop probability.
    pub phi: f64,
    pub drop_enabled: bool,
    pub aggregation: Aggregation,
    pub weighting: Weighting,
    pub norm: NormKind,
    pub base_width: usize,
    pub depth: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Validate every this many rounds; the last round is always validated.
    pub eval_every: usize,
}

impl Default for FederatedConfig {
    fn default() -> Self {
        Self {
            rounds: 40,
            tau: 10,
            batch_size: 4,
            lr_peak: 3e-3,
            warmup_rounds: 4,
            decay_start_round: 20,
            alpha: 0.8,
            smooth: 1.0,
            phi: 0.5,
            drop_enabled: true,
            aggregation: Aggregation::FedBnClientSpecific,
            weighting: Weighting::Uniform,
            norm: NormKind::BatchNorm,
            base_width: 8,
            depth: 2,
            seed: 0,
            adam: AdamConfig::default(),
            eval_every: 1,
        }
    }
}

impl FederatedConfig {
    /// Schedule and local-training sizes of the full-scale 3D setting.
    pub fn full_scale() -> Self {
        Self {
            rounds: 300,
            tau: 58,
            batch_size: 8,
            lr_peak: 1e-3,
            warmup_rounds: 50,
            decay_start_round: 150,
            ..Self::default()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            alpha: self.alpha,
            smooth: self.smooth,
        }
    }

    pub fn net(&self, in_channels: usize) -> NetConfig {
        NetConfig {
            in_channels,
            base_width: self.base_width,
            depth: self.depth,
            norm: self.norm,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be at least 1".into());
        }
        if self.tau == 0 {
            return bad("tau must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.warmup_rounds <= self.decay_start_round && self.decay_start_round <= self.rounds)
        {
            return bad(format!(
                "schedule needs warmup_rounds <= decay_start_round <= rounds, got {} / {} / {}",
                self.warmup_rounds, self.decay_start_round, self.rounds
            ));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad(format!(
                "lr_peak must be a non-negative number, got {}",
                self.lr_peak
            ));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return bad(format!("phi must lie in [0, 1], got {}", self.phi));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be at least 1".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        self.loss().validate()?;
        self.net(1).validate()
    }
}

/// Learning rate at (possibly fractional) round `t`: linear warm-up from 0 to
/// `lr_peak` over `[0, warmup]`, constant until `decay_start`, then linear
/// decay to 0 at `rounds`.
pub fn lr_at(t: f64, cfg: &FederatedConfig) -> Result<f64> {
    let e = cfg.rounds as f64;
    if !(0.0..=e).contains(&t) {
        return Err(Error::InvalidArgument(format!(
            "round {t} outside [0, {e}]"
        )));
    }
    let (w, d) = (cfg.warmup_rounds as f64, cfg.decay_start_round as f64);
    let lr = if t < w {
        cfg.lr_peak * t / w
    } else if t <= d || d == e {
        cfg.lr_peak
    } else {
        cfg.lr_peak * (e - t) / (e - d)
    };
    Ok(lr)
}

/// Learning rate used during 0-based round `r`: the schedule at the round's
/// midpoint, so the first round does not train at exactly zero.
pub fn round_lr(r: usize, cfg: &FederatedConfig) -> Result<f64> {
    lr_at(r as f64 + 0.5, cfg)
}
