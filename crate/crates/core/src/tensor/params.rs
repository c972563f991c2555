//! Ordered, named parameter storage shared by the MAE model and the probes.
//!
//! Order is fixed at construction and never depends on hash iteration, so
//! optimizer state, checkpoints, and gradient vectors all align by index.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    /// Appends a parameter; names must be unique.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::InvalidParameter(format!(
                "parameter '{name}' registered twice"
            )));
        }
        self.entries.push((name, tensor.with_requires_grad(true)));
        Ok(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.entries[idx].0
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers every parameter on a tape, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf_tensor(t)).collect()
    }

    /// Copies all parameters into one flat vector, in store order.
    pub fn flatten(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites all parameters from a flat vector laid out in store order.
    pub fn unflatten(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(Error::InvalidParameter(format!(
                "flat parameter vector has {} elements, store holds {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut off = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// FNV-1a over the exact parameter bytes; detects any mutation.
    pub fn checksum(&self) -> u64 {
        let mut hash: u64 = 0xcbf29ce484222325;
        for (name, t) in &self.entries {
            for b in name.as_bytes() {
                hash = (hash ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in t.data() {
                for b in v.to_le_bytes() {
                    hash = (hash ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        hash
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::new();
        store.push("w", Tensor::zeros(vec![2]).unwrap()).unwrap();
        assert!(store.push("w", Tensor::zeros(vec![2]).unwrap()).is_err());
    }

    #[test]
    fn flatten_unflatten_roundtrip() {
        let mut store = ParamStore::new();
        store
            .push("a", Tensor::new(vec![1.0, 2.0], vec![2]).unwrap())
            .unwrap();
        store
            .push("b", Tensor::new(vec![3.0, 4.0, 5.0], vec![3]).unwrap())
            .unwrap();
        let flat = store.flatten();
        assert_eq!(flat, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        store.unflatten(&[5.0, 4.0, 3.0, 2.0, 1.0]).unwrap();
        assert_eq!(store.get("a").unwrap().data(), &[5.0, 4.0]);
        assert_eq!(store.get("b").unwrap().data(), &[3.0, 2.0, 1.0]);
        assert!(store.unflatten(&[0.0; 4]).is_err());
    }

    #[test]
    fn checksum_changes_with_any_bit() {
        let mut store = ParamStore::new();
        store
            .push("w", Tensor::new(vec![1.0, 2.0, 3.0], vec![3]).unwrap())
            .unwrap();
        let before = store.checksum();
        store.tensor_mut(0).data_mut()[1] = 2.0000002;
        assert_ne!(before, store.checksum());
    }
}
