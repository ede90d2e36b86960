//! Named parameter storage with a frozen set, plus checkpoint directories
//! (one tensor file per parameter and a JSON manifest).

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{io as tio, Fnv, Real, Tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Default)]
pub struct ParameterStore<T: Real = f32> {
    params: BTreeMap<String, Tensor<T>>,
    frozen: BTreeSet<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub params: Vec<ManifestEntry>,
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
            frozen: BTreeSet::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        frozen: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter `{name}`")));
        }
        if frozen {
            self.frozen.insert(name.clone());
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    /// Mutable access, refused for frozen parameters.
    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        if self.frozen.contains(name) {
            return Err(Error::Contract(format!("parameter `{name}` is frozen")));
        }
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    /// Replaces a trainable parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(Error::shapes("set_param", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> impl Iterator<Item = &str> {
        self.names().filter(|n| !self.frozen.contains(*n))
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Total element count of parameters selected by `filter`.
    pub fn count(&self, filter: impl Fn(&str, bool) -> bool) -> usize {
        self.iter()
            .filter(|(n, _)| filter(n, self.is_frozen(n)))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Digest over names and values of the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&str, bool) -> bool) -> u64 {
        let mut h = Fnv::new();
        for (name, t) in self.iter().filter(|(n, _)| filter(n, self.is_frozen(n))) {
            h.write(name.as_bytes());
            h.write(&t.checksum().to_le_bytes());
        }
        h.finish()
    }

    pub fn frozen_checksum(&self) -> u64 {
        self.checksum(|_, frozen| frozen)
    }

    pub fn cast<U: Real>(&self) -> ParameterStore<U> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Writes every parameter as a tensor file plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.params.len());
        for (i, (name, t)) in self.params.iter().enumerate() {
            let file = format!("{i:04}_{}.tensor", file_stem(name));
            tio::write(&dir.join(&file), t)?;
            entries.push(ManifestEntry {
                name: name.clone(),
                file,
                shape: t.shape().to_vec(),
                frozen: self.is_frozen(name),
            });
        }
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&Manifest { params: entries })?;
        fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let mut store = Self::new();
        for e in manifest.params {
            let t: Tensor<T> = tio::read(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, manifest says {:?}",
                    e.name,
                    t.shape(),
                    e.shape
                )));
            }
            store
                .insert(e.name, t, e.frozen)
                .map_err(|err| Error::Format(err.to_string()))?;
        }
        Ok(store)
    }

    /// Copies values for every name present in both stores with equal shapes;
    /// returns the names that were not found or did not fit.
    pub fn load_matching(&mut self, other: &ParameterStore<T>) -> Vec<String> {
        let mut missing = Vec::new();
        for (name, slot) in self.params.iter_mut() {
            match other.get(name) {
                Some(t) if t.shape() == slot.shape() => *slot = t.clone(),
                _ => missing.push(name.clone()),
            }
        }
        missing
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}
