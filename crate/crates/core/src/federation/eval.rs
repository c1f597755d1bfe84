use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{PreparedClient, Split};
use crate::error::{Error, Result};
use crate::modality::drop_mask;
use crate::objectives::dice_per_sample;
use crate::segnet::{Mode, NetConfig, NormKind, ParamSet, SegNet};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation.
pub const EVAL_BATCH: usize = 8;

/// Which present modalities are hidden from the model at test time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Exclusion {
    /// Every present modality is used.
    None,
    /// Each present modality is hidden independently with probability
    /// `phi`, per sample, keeping at least one.
    Random { phi: f64 },
    /// Only the given registry channels are kept (intersected with what the
    /// client has).
    Keep { channels: Vec<bool> },
}

/// Per-sample Dice of `net` (in eval mode) on a split.
pub fn evaluate<R: Rng + ?Sized>(
    net: &mut SegNet,
    client: &PreparedClient,
    split: &Split,
    exclusion: &Exclusion,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let (n, plane) = (client.sample_len(), client.plane());
    let fixed = match exclusion {
        Exclusion::Keep { channels } => {
            if channels.len() != client.channels {
                return Err(Error::shape(
                    "evaluate",
                    format!(
                        "{} keep flags for {} channels",
                        channels.len(),
                        client.channels
                    ),
                ));
            }
            let keep: Vec<bool> = channels
                .iter()
                .zip(&client.present)
                .map(|(&k, &p)| k && p)
                .collect();
            if !keep.iter().any(|&k| k) {
                return Err(Error::InvalidArgument(format!(
                    "exclusion leaves client {:?} with no modality",
                    client.client_id
                )));
            }
            Some(keep)
        }
        _ => None,
    };
    let mut scores = Vec::with_capacity(split.len);
    for start in (0..split.len).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(split.len)).collect();
        let mut x = Vec::with_capacity(idx.len() * n);
        for &i in &idx {
            let at = x.len();
            x.extend_from_slice(&split.inputs[i * n..(i + 1) * n]);
            let keep = match (exclusion, &fixed) {
                (Exclusion::Random { phi }, _) => Some(drop_mask(*phi, &client.present, rng)?),
                (_, Some(k)) => Some(k.clone()),
                _ => None,
            };
            if let Some(keep) = keep {
                for (c, k) in keep.iter().enumerate() {
                    if !k {
                        x[at + c * plane..at + (c + 1) * plane].fill(0.0);
                    }
                }
            }
        }
        let b = idx.len();
        let x = Tensor::new(vec![b, client.channels, client.size, client.size], x)?;
        let y = Tensor::new(
            vec![b, 1, client.size, client.size],
            split.masks[start * plane..(start + b) * plane].to_vec(),
        )?;
        let pred = net.predict(&x, Mode::Eval)?;
        scores.extend(dice_per_sample(&pred, &y)?);
    }
    Ok(scores)
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Replaces the normalization entries of `global` with `averaged_norm` and
/// re-estimates BN running statistics on unlabeled target batches.
///
/// Batch `k` (1-based) is blended in with momentum `1/k`, so the result is
/// the plain average of the per-batch statistics.
pub fn adapt_bn_to_target(
    global: &ParamSet,
    averaged_norm: &ParamSet,
    net_config: &NetConfig,
    target_batches: &[Tensor],
) -> Result<ParamSet> {
    if net_config.norm != NormKind::BatchNorm {
        return Err(Error::InvalidArgument(format!(
            "target adaptation needs batch norm, model uses {}",
            net_config.norm
        )));
    }
    if target_batches.is_empty() {
        return Err(Error::InvalidArgument(
            "target adaptation needs at least one target batch".into(),
        ));
    }
    let mut net = SegNet::build(net_config.clone())?;
    net.set_params(&global.overlay(averaged_norm)?)?;
    for (k, batch) in target_batches.iter().enumerate() {
        let momentum = 1.0 / (k + 1) as f64;
        net.predict(batch, Mode::Calibrate { momentum })?;
    }
    Ok(net.get_params())
}

/// Unlabeled `[B, p, H, W]` batches covering a split, for target adaptation.
pub fn input_batches(client: &PreparedClient, split: &Split, batch: usize) -> Result<Vec<Tensor>> {
    let n = client.sample_len();
    (0..split.len)
        .step_by(batch.max(1))
        .map(|start| {
            let end = (start + batch).min(split.len);
            Tensor::new(
                vec![end - start, client.channels, client.size, client.size],
                split.inputs[start * n..end * n].to_vec(),
            )
        })
        .collect()
}
