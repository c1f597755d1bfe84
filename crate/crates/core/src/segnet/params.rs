//! Named model parameters: the unit exchanged between clients and server.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Trainable parameter or running-statistics buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Normalization scale/shift or BN running statistic.
    pub is_norm: bool,
    pub kind: EntryKind,
}

/// Ordered map from parameter path (e.g. `enc0.conv1.weight`) to values.
///
/// Insertion order is the canonical flat order used for checkpoints and
/// gradient vectors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: ParamEntry) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::ParamMismatch(format!("duplicate entry {name:?}")));
        }
        self.entries.insert(name, entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamEntry> {
        self.entries.get_mut(name)
    }

    pub fn get_index(&self, i: usize) -> Option<(&str, &ParamEntry)> {
        self.entries.get_index(i).map(|(k, v)| (k.as_str(), v))
    }

    pub fn get_index_mut(&mut self, i: usize) -> Option<&mut ParamEntry> {
        self.entries.get_index_mut(i).map(|(_, v)| v)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.get_index_of(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    /// Entries for which `keep` returns true, in the original order.
    pub fn filter(&self, mut keep: impl FnMut(&str, &ParamEntry) -> bool) -> ParamSet {
        ParamSet {
            entries: self
                .entries
                .iter()
                .filter(|(k, v)| keep(k, v))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn norm_only(&self) -> ParamSet {
        self.filter(|_, e| e.is_norm)
    }

    pub fn without_norm(&self) -> ParamSet {
        self.filter(|_, e| !e.is_norm)
    }

    /// Errors unless `other` has exactly the same names, order, shapes and flags.
    pub fn check_same_layout(&self, other: &ParamSet) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParamMismatch(format!(
                "{} entries vs {}",
                self.len(),
                other.len()
            )));
        }
        for ((na, a), (nb, b)) in self.iter().zip(other.iter()) {
            if na != nb {
                return Err(Error::ParamMismatch(format!("entry {na:?} vs {nb:?}")));
            }
            if a.tensor.shape() != b.tensor.shape() || a.is_norm != b.is_norm || a.kind != b.kind {
                return Err(Error::ParamMismatch(format!(
                    "{na:?}: {:?} vs {:?}",
                    a.tensor.shape(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Copy of `self` with every entry of `patch` substituted in place.
    /// Every patched name must exist with the same shape.
    pub fn overlay(&self, patch: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (name, e) in patch.iter() {
            let slot = out
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::ParamMismatch(format!("unknown entry {name:?}")))?;
            if slot.tensor.shape() != e.tensor.shape() {
                return Err(Error::ParamMismatch(format!(
                    "{name:?}: {:?} vs {:?}",
                    slot.tensor.shape(),
                    e.tensor.shape()
                )));
            }
            *slot = e.clone();
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &ParamSet) -> f64 {
        self.iter()
            .zip(other.iter())
            .map(|((_, a), (_, b))| a.tensor.max_abs_diff(&b.tensor))
            .fold(0.0, f64::max)
    }

    /// Bitwise equality of names, flags and values.
    pub fn bit_eq(&self, other: &ParamSet) -> bool {
        self.len() == other.len()
            && self.iter().zip(other.iter()).all(|((na, a), (nb, b))| {
                na == nb
                    && a.is_norm == b.is_norm
                    && a.kind == b.kind
                    && a.tensor.shape() == b.tensor.shape()
                    && a.tensor
                        .data()
                        .iter()
                        .zip(b.tensor.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(v: f64, is_norm: bool) -> ParamEntry {
        ParamEntry {
            tensor: Tensor::full(&[2], v),
            is_norm,
            kind: EntryKind::Param,
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("a", entry(1.0, false)).unwrap();
        assert!(p.insert("a", entry(2.0, false)).is_err());
    }

    #[test]
    fn overlay_replaces_only_patched_entries() {
        let mut p = ParamSet::new();
        p.insert("w", entry(1.0, false)).unwrap();
        p.insert("g", entry(1.0, true)).unwrap();
        let patch = p.norm_only().filter(|_, _| true);
        let mut patch2 = patch.clone();
        patch2.get_mut("g").unwrap().tensor = Tensor::full(&[2], 5.0);
        let out = p.overlay(&patch2).unwrap();
        assert_eq!(out.get("g").unwrap().tensor.data(), &[5.0, 5.0]);
        assert_eq!(out.get("w").unwrap().tensor.data(), &[1.0, 1.0]);

        let mut bad = ParamSet::new();
        bad.insert("zzz", entry(0.0, true)).unwrap();
        assert!(p.overlay(&bad).is_err());
    }

    #[test]
    fn partition_helpers() {
        let mut p = ParamSet::new();
        p.insert("w", entry(1.0, false)).unwrap();
        p.insert("g", entry(1.0, true)).unwrap();
        assert_eq!(p.norm_only().names().collect::<Vec<_>>(), ["g"]);
        assert_eq!(p.without_norm().names().collect::<Vec<_>>(), ["w"]);
        assert!(p.check_same_layout(&p.clone()).is_ok());
        assert!(p.check_same_layout(&p.without_norm()).is_err());
    }
}
