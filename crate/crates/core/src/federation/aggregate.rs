use super::config::{Aggregation, Weighting};
use crate::error::{Error, Result};
use crate::segnet::{ParamEntry, ParamSet};
use crate::tensor::Tensor;

/// Weights of each client in the server average, summing to 1 when uniform.
pub fn client_weights(weighting: Weighting, sizes: &[usize]) -> Vec<f64> {
    match weighting {
        Weighting::Uniform => vec![1.0; sizes.len()],
        Weighting::DatasetSize => sizes.iter().map(|&n| n as f64).collect(),
    }
}

/// Weighted mean of one coordinate across clients. Values are visited in
/// sorted order and accumulated as offsets from the smallest, which makes the
/// result independent of client order and exact when all values agree.
fn mean_of(vals: &mut [(f64, f64)], total_weight: f64) -> f64 {
    vals.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let base = vals[0].0;
    let offset: f64 = vals.iter().map(|&(v, w)| w * (v - base)).sum();
    if offset == 0.0 {
        // keeps the sign of zero
        return base;
    }
    base + offset / total_weight
}

/// Combines client parameter sets on the server.
///
/// `FedAvgAll` and `FedAvgAvgBn` average every entry. `FedBnClientSpecific`
/// averages only entries with `is_norm == false`, and the returned set
/// contains only those; normalization entries stay with the clients.
pub fn aggregate(updates: &[ParamSet], mode: Aggregation, weights: &[f64]) -> Result<ParamSet> {
    let first = updates
        .first()
        .ok_or_else(|| Error::InvalidArgument("aggregate needs at least one update".into()))?;
    if weights.len() != updates.len() {
        return Err(Error::InvalidArgument(format!(
            "{} weights for {} updates",
            weights.len(),
            updates.len()
        )));
    }
    if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
        return Err(Error::InvalidArgument(
            "aggregation weights must be positive".into(),
        ));
    }
    for u in &updates[1..] {
        first.check_same_layout(u)?;
    }
    let total: f64 = weights.iter().sum();
    let mut out = ParamSet::new();
    let mut vals = vec![(0.0, 0.0); updates.len()];
    for (idx, (name, entry)) in first.iter().enumerate() {
        if mode.keeps_local_norm() && entry.is_norm {
            continue;
        }
        let columns: Vec<&[f64]> = updates
            .iter()
            .map(|u| u.get_index(idx).expect("same layout").1.tensor.data())
            .collect();
        let data: Vec<f64> = (0..entry.tensor.len())
            .map(|j| {
                for ((slot, col), &w) in vals.iter_mut().zip(&columns).zip(weights) {
                    *slot = (col[j], w);
                }
                mean_of(&mut vals, total)
            })
            .collect();
        out.insert(
            name,
            ParamEntry {
                tensor: Tensor::new(entry.tensor.shape().to_vec(), data)?,
                ..entry.clone()
            },
        )?;
    }
    Ok(out)
}

/// Entrywise mean of the normalization entries of several clients.
pub fn average_norm_params(stores: &[ParamSet]) -> Result<ParamSet> {
    let norms: Vec<ParamSet> = stores.iter().map(ParamSet::norm_only).collect();
    aggregate(&norms, Aggregation::FedAvgAll, &vec![1.0; norms.len()])
}
