//! Named parameter arrays, their gradients, and the binary checkpoint format.
//!
//! A checkpoint is a JSON manifest listing `(name, shape, offset)` for every
//! entry plus a flat payload of little-endian `f64` values. Offsets count
//! values, not bytes.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::Tensor;
use crate::error::{invalid, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamEntry {
    /// Matrix view: 1-D entries become a single row.
    pub fn tensor_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => (1, self.data.len()),
        }
    }
}

/// Flat store of named trainable arrays. Names are unique and shapes are
/// fixed once inserted.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() || shape.is_empty() || shape.len() > 2 {
            return Err(Error::Shape(format!(
                "parameter `{name}` shape {shape:?} does not match {} values",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid(format!("parameter `{name}` has non-finite entries")));
        }
        let id = self.entries.len();
        self.entries.push(ParamEntry { name: name.to_string(), shape, data });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn get(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.entries[self.id(name)?].data)
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Vec<f64>> {
        let id = self.id(name)?;
        Ok(&mut self.entries[id].data)
    }

    pub fn tensor(&self, id: usize) -> Tensor {
        let e = &self.entries[id];
        let (r, c) = e.tensor_shape();
        Tensor::new(r, c, e.data.clone()).expect("entry shape validated on insert")
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.data.iter().all(|x| x.is_finite()))
    }

    /// Flattened values in insertion order.
    pub fn flat(&self) -> Vec<f64> {
        self.entries.iter().flat_map(|e| e.data.iter().copied()).collect()
    }

    /// Overwrites a single scalar addressed by flat index (insertion order).
    pub fn set_flat(&mut self, mut idx: usize, value: f64) {
        for e in &mut self.entries {
            if idx < e.data.len() {
                e.data[idx] = value;
                return;
            }
            idx -= e.data.len();
        }
        panic!("flat parameter index out of range");
    }

    /// SHA-256 of names, shapes and value bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            for s in &e.shape {
                h.update((*s as u64).to_le_bytes());
            }
            for v in &e.data {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients { grads: self.entries.iter().map(|e| vec![0.0; e.data.len()]).collect() }
    }

    /// Copies every entry from `other` whose name also exists here.
    pub fn copy_matching(&mut self, other: &ParamStore) -> Result<()> {
        for e in &other.entries {
            if let Some(&id) = self.index.get(&e.name) {
                if self.entries[id].shape != e.shape {
                    return Err(Error::Shape(format!("parameter `{}` shape mismatch", e.name)));
                }
                self.entries[id].data.clone_from(&e.data);
            }
        }
        Ok(())
    }

    /// Writes `<stem>.manifest.json` and `<stem>.bin` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut payload = Vec::with_capacity(self.total_count() * 8);
        let mut offset = 0;
        for e in &self.entries {
            manifest.push(ManifestEntry { name: e.name.clone(), shape: e.shape.clone(), offset });
            offset += e.data.len();
            for v in &e.data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest { total_count: offset, entries: manifest };
        fs::write(dir.join(format!("{stem}.manifest.json")), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join(format!("{stem}.bin")), payload)?;
        Ok(())
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self> {
        let manifest: Manifest =
            serde_json::from_slice(&fs::read(dir.join(format!("{stem}.manifest.json")))?)?;
        let payload = fs::read(dir.join(format!("{stem}.bin")))?;
        if payload.len() != manifest.total_count * 8 {
            return Err(invalid(format!(
                "checkpoint payload has {} bytes, manifest expects {}",
                payload.len(),
                manifest.total_count * 8
            )));
        }
        let mut store = ParamStore::new();
        for m in manifest.entries {
            let n: usize = m.shape.iter().product();
            let bytes = payload
                .get(m.offset * 8..(m.offset + n) * 8)
                .ok_or_else(|| invalid(format!("entry `{}` runs past the payload", m.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            store.insert(&m.name, m.shape, data)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    total_count: usize,
    entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Gradient arrays aligned with the entries of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> &[f64] {
        &self.grads[id]
    }

    pub fn by_name<'a>(&'a self, store: &ParamStore, name: &str) -> Result<&'a [f64]> {
        Ok(&self.grads[store.id(name)?])
    }

    pub(crate) fn accumulate(&mut self, id: usize, g: &[f64]) {
        for (a, b) in self.grads[id].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().flatten().for_each(|g| *g *= factor);
    }

    pub fn zero(&mut self, id: usize) {
        self.grads[id].iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`.
    /// Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn flat(&self) -> Vec<f64> {
        self.grads.iter().flatten().copied().collect()
    }

    pub fn arrays(&self) -> &[Vec<f64>] {
        &self.grads
    }
}
