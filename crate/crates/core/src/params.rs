//! Named parameter tensors with stable ordering and content hashing.

use indexmap::IndexMap;
use ndarray::ArrayD;
use sha2::{Digest, Sha256};

/// Ordered map of parameter name to tensor. Insertion order is preserved and
/// is part of the checkpoint format.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    map: IndexMap<String, ArrayD<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<f64>) {
        let name = name.into();
        let prev = self.map.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &ArrayD<f64> {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<f64> {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<f64>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.map.values().map(|v| v.len()).sum()
    }

    /// Scalar count restricted to names accepted by the filter.
    pub fn scalar_count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.map.iter().filter(|(k, _)| pred(k)).map(|(_, v)| v.len()).sum()
    }

    /// SHA-256 over names, shapes, and raw little-endian values, restricted to
    /// names accepted by the filter. Stable iff the selected tensors are
    /// unchanged.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for (name, value) in &self.map {
            if !pred(name) {
                continue;
            }
            hasher.update(name.as_bytes());
            hasher.update([0u8]);
            for d in value.shape() {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in value.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        let digest = hasher.finalize();
        let mut out = String::with_capacity(64);
        for byte in digest {
            out.push_str(&format!("{byte:02x}"));
        }
        out
    }

    /// SHA-256 over every tensor in the store.
    pub fn hash(&self) -> String {
        self.hash_where(|_| true)
    }
}
