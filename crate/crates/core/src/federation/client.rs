use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::FederatedConfig;
use super::data::{Cycler, PreparedClient};
use super::optim::Adam;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::objectives::combined_loss;
use crate::segnet::{Mode, ParamSet, SegNet};

/// Random stream of client `index`; stream 0 is reserved.
pub fn client_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Everything a client keeps between rounds.
#[derive(Clone)]
pub struct ClientState {
    pub client_id: String,
    pub data: Arc<PreparedClient>,
    /// Local model; in FedBN mode its normalization entries are the
    /// client-specific store and never leave the client.
    pub net: SegNet,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub cycler: Cycler,
}

/// Result of one round of local training.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    /// What the client sends back: every entry, or only non-normalization
    /// entries when normalization is client-specific.
    pub params: ParamSet,
    /// Training loss of each local step.
    pub losses: Vec<f64>,
}

impl ClientState {
    pub fn new(
        index: usize,
        data: Arc<PreparedClient>,
        net: SegNet,
        cfg: &FederatedConfig,
    ) -> Result<Self> {
        if data.train.len == 0 {
            return Err(Error::InvalidArgument(format!(
                "client {:?} has no training data",
                data.client_id
            )));
        }
        let mut rng = client_rng(cfg.seed, index);
        let cycler = Cycler::new(data.train.len, &mut rng);
        Ok(Self {
            client_id: data.client_id.clone(),
            data,
            net,
            adam: Adam::new(cfg.adam),
            rng,
            cycler,
        })
    }

    /// Normalization entries of the local model.
    pub fn norm_store(&self) -> ParamSet {
        self.net.params().norm_only()
    }

    /// One optimizer step on the next batch; returns the batch loss.
    pub fn train_step(&mut self, lr: f64, cfg: &FederatedConfig) -> Result<f64> {
        let idx = self.cycler.next_batch(cfg.batch_size, &mut self.rng);
        let drop = cfg.drop_enabled.then_some((cfg.phi, &mut self.rng));
        let (x, y) = self.data.train.batch(&self.data, &idx, drop)?;
        let mut tape = Tape::new();
        let fwd = self.net.forward(&mut tape, &x, Mode::Train)?;
        let loss = combined_loss(&mut tape, fwd.output, &y, &cfg.loss())?;
        let value = tape.value(loss).item();
        tape.backward(loss)?;
        let grads = self.net.gradients(&tape, &fwd);
        self.adam.update(self.net.params_mut(), &grads, lr);
        Ok(value)
    }
}

/// Loads the broadcast model, runs `tau` local steps at `lr` and returns the
/// update to transmit.
///
/// `received` may lack normalization entries (client-specific mode); the
/// local values of any missing entry are kept.
pub fn local_train(
    state: &mut ClientState,
    received: &ParamSet,
    lr: f64,
    tau: usize,
    cfg: &FederatedConfig,
) -> Result<LocalUpdate> {
    let loaded = state.net.params().overlay(received)?;
    state.net.set_params(&loaded)?;
    if cfg.adam.reset_each_round {
        state.adam.reset();
    }
    let losses = (0..tau)
        .map(|_| state.train_step(lr, cfg))
        .collect::<Result<Vec<_>>>()?;
    let params = if cfg.aggregation.keeps_local_norm() {
        state.net.params().without_norm()
    } else {
        state.net.get_params()
    };
    Ok(LocalUpdate { params, losses })
}
