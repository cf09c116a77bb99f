//! Named parameter storage shared by every trainable sub-model.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: String,
    pub value: Matrix,
}

/// Ordered collection of parameter matrices, each tagged with a group name
/// (`image_encoder`, `fusion`, ...). Order is insertion order and is part of
/// the checkpoint format.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    by_name: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, group: &str, name: &str, value: Matrix) -> Result<ParamId> {
        let full = format!("{group}.{name}");
        if self.by_name.contains_key(&full) {
            return Err(Error::Config(format!("duplicate parameter {full}")));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: full.clone(), group: group.to_string(), value });
        self.by_name.insert(full, id);
        Ok(ParamId(id))
    }

    pub fn id(&self, full_name: &str) -> Option<ParamId> {
        self.by_name.get(full_name).copied().map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn ids_in_groups<'a>(&'a self, groups: &'a [&str]) -> impl Iterator<Item = ParamId> + 'a {
        self.entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| groups.contains(&e.group.as_str()))
            .map(|(i, _)| ParamId(i))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.data().len()).sum()
    }

    /// SHA-256 over names, shapes and raw bits of every parameter in `groups`
    /// (all groups when `None`).
    pub fn checksum(&self, groups: Option<&[&str]>) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            if let Some(gs) = groups {
                if !gs.contains(&e.group.as_str()) {
                    continue;
                }
            }
            h.update(e.name.as_bytes());
            h.update((e.value.rows() as u64).to_le_bytes());
            h.update((e.value.cols() as u64).to_le_bytes());
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Copies every entry of `other` whose group is in `groups` into this store.
    pub fn extend_from(&mut self, other: &ParamStore, groups: &[&str]) -> Result<()> {
        for e in other.entries.iter().filter(|e| groups.contains(&e.group.as_str())) {
            let name = e.name.strip_prefix(&format!("{}.", e.group)).unwrap_or(&e.name);
            self.insert(&e.group, name, e.value.clone())?;
        }
        Ok(())
    }

    /// Overwrites the values of every parameter in `groups` with the
    /// same-named entry of `other`. Names and shapes must agree exactly.
    pub fn assign_from(&mut self, other: &ParamStore, groups: &[&str]) -> Result<()> {
        for e in self.entries.iter_mut().filter(|e| groups.contains(&e.group.as_str())) {
            let src = other
                .by_name
                .get(&e.name)
                .map(|&i| &other.entries[i].value)
                .ok_or_else(|| Error::Config(format!("parameter {} missing from source", e.name)))?;
            if src.shape() != e.value.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {:?}, source has {:?}",
                    e.name,
                    e.value.shape(),
                    src.shape()
                )));
            }
            e.value = src.clone();
        }
        let own = self.entries.iter().filter(|e| groups.contains(&e.group.as_str())).count();
        let theirs = other.entries.iter().filter(|e| groups.contains(&e.group.as_str())).count();
        if own != theirs {
            return Err(Error::Config(format!("source holds {theirs} parameters in {groups:?}, expected {own}")));
        }
        Ok(())
    }

    pub fn groups(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for e in &self.entries {
            if !out.contains(&e.group) {
                out.push(e.group.clone());
            }
        }
        out
    }
}

/// Deterministic initializers over a caller-owned ChaCha stream.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                z * std
            })
            .collect();
        Matrix::from_vec(rows, cols, data).expect("sized above")
    }

    /// Glorot-style scale for a `fan_in × fan_out` weight.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Matrix {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(fan_in, fan_out, std)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, bound: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.rng.random_range(-bound..bound)).collect();
        Matrix::from_vec(rows, cols, data).expect("sized above")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checksum_tracks_group_contents() {
        let mut s = ParamStore::new();
        s.insert("a", "w", Matrix::zeros(2, 2)).unwrap();
        let b = s.insert("b", "w", Matrix::zeros(1, 3)).unwrap();
        let before = s.checksum(Some(&["a"]));
        s.get_mut(b).data_mut()[0] = 1.0;
        assert_eq!(before, s.checksum(Some(&["a"])));
        assert_ne!(s.checksum(None), ParamStore::new().checksum(None));
        assert!(s.insert("a", "w", Matrix::zeros(1, 1)).is_err());
    }
}
