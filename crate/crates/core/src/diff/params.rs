//! Named parameter collections and the SGD update rule.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Real;

use super::tensor::Tensor;

/// Ordered mapping from hierarchical name to parameter tensor. Iteration
/// order is the insertion order, which keeps updates and checksums
/// deterministic.
pub struct ParameterSet<F: Real> {
    entries: Vec<(String, Tensor<F>)>,
    index: HashMap<String, usize>,
}

impl<F: Real> Default for ParameterSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> ParameterSet<F> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::State(format!("parameter '{name}' already registered")));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<F>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Share all entries of `other` into this set (handles, not copies).
    pub fn extend_from(&mut self, other: &ParameterSet<F>) -> Result<()> {
        for (name, t) in other.iter() {
            self.insert(name.to_string(), t.clone())?;
        }
        Ok(())
    }

    /// Freeze or unfreeze every tensor in the set.
    pub fn set_trainable(&self, on: bool) {
        for (_, t) in self.iter() {
            t.set_trainable(on);
        }
    }

    pub fn zero_grads(&self) {
        for (_, t) in self.iter() {
            t.clear_grad();
        }
    }

    /// Vanilla SGD: `w -= lr * grad` on every trainable entry, then clear
    /// gradients. A trainable entry without a gradient is a caller bug.
    pub fn sgd_step(&self, lr: F) -> Result<()> {
        for (name, t) in self.iter() {
            if !t.trainable() {
                continue;
            }
            let grad = t.grad().ok_or_else(|| {
                Error::State(format!("sgd_step: no gradient on trainable parameter '{name}'"))
            })?;
            t.update_values(|v| {
                for (w, g) in v.iter_mut().zip(&grad) {
                    *w = *w - lr * *g;
                }
            });
            t.clear_grad();
        }
        Ok(())
    }

    /// Order-sensitive digest over names, shapes and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.iter() {
            h.write(name.as_bytes());
            for &e in t.shape() {
                h.write(&(e as u64).to_le_bytes());
            }
            h.write_values(&t.values());
        }
        h.finish()
    }
}

/// Digest of a single tensor's values.
pub fn tensor_checksum<F: Real>(t: &Tensor<F>) -> u64 {
    let mut h = Fnv::new();
    for &e in t.shape() {
        h.write(&(e as u64).to_le_bytes());
    }
    h.write_values(&t.values());
    h.finish()
}

/// FNV-1a, enough for change detection in tests and telemetry.
struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf29ce484222325)
    }
    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x100000001b3);
        }
    }
    fn write_values<F: Real>(&mut self, values: &[F]) {
        for &v in values {
            self.write(&v.to_f64().to_bits().to_le_bytes());
        }
    }
    fn finish(&self) -> u64 {
        self.0
    }
}
