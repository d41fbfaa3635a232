//! Flat parameter store: every trainable scalar in the model lives here under
//! a stable (name, offset) -> global index mapping.
//!
//! The penalizable set S marks backbone entries (encoder weights including
//! patch/token/positional embeddings). Prompts, aggregation logits, the
//! temperature, and class embeddings stay outside S.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::checkpoint::{self, CkptEntry, TensorData};
use crate::numcore::tensor::{Real, Tensor};

/// Reserved checkpoint entry holding the per-entry penalizable mask.
pub const PENALIZABLE_MASK_ENTRY: &str = "meta.store.penalizable";

#[derive(Debug, Clone)]
struct Entry<T: Real> {
    name: String,
    tensor: Tensor<T>,
    offset: usize,
    penalizable: bool,
}

/// Ordered map name -> tensor with a stable flat index over all scalars.
#[derive(Debug, Clone)]
pub struct ParameterStore<T: Real> {
    entries: Vec<Entry<T>>,
    by_name: BTreeMap<String, usize>,
    total: usize,
}

impl<T: Real> Default for ParameterStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParameterStore<T> {
    pub fn new() -> Self {
        ParameterStore {
            entries: Vec::new(),
            by_name: BTreeMap::new(),
            total: 0,
        }
    }

    /// Register a named tensor. Registration order fixes the flat index:
    /// entry k starts at the running total of all earlier entries.
    pub fn register(&mut self, name: &str, tensor: Tensor<T>, penalizable: bool) -> Result<()> {
        if self.by_name.contains_key(name) {
            return Err(Error::DuplicateEntry(name.to_string()));
        }
        let offset = self.total;
        self.total += tensor.numel();
        self.by_name.insert(name.to_string(), self.entries.len());
        self.entries.push(Entry {
            name: name.to_string(),
            tensor,
            offset,
            penalizable,
        });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.by_name.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownEntry(name.to_string()))?;
        Ok(&self.entries[*idx].tensor)
    }

    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let idx = *self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownEntry(name.to_string()))?;
        let entry = &mut self.entries[idx];
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::Shape {
                op: "store.set",
                detail: format!(
                    "entry `{name}` has shape {:?}, got {:?}",
                    entry.tensor.shape(),
                    tensor.shape()
                ),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    /// Global index of the first scalar of `name`.
    pub fn offset_of(&self, name: &str) -> Result<usize> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownEntry(name.to_string()))?;
        Ok(self.entries[*idx].offset)
    }

    pub fn is_penalizable_entry(&self, name: &str) -> Result<bool> {
        let idx = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::UnknownEntry(name.to_string()))?;
        Ok(self.entries[*idx].penalizable)
    }

    /// Total scalar count across all entries.
    pub fn total_len(&self) -> usize {
        self.total
    }

    pub fn entry_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    /// (name, offset, numel, penalizable) in registration order.
    pub fn entry_layout(&self) -> impl Iterator<Item = (&str, usize, usize, bool)> {
        self.entries
            .iter()
            .map(|e| (e.name.as_str(), e.offset, e.tensor.numel(), e.penalizable))
    }

    /// Sorted global indices of the penalizable set S.
    pub fn penalizable_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for e in &self.entries {
            if e.penalizable {
                out.extend(e.offset..e.offset + e.tensor.numel());
            }
        }
        out
    }

    pub fn get_flat(&self, index: usize) -> Result<T> {
        let (entry, inner) = self.locate(index)?;
        Ok(self.entries[entry].tensor.data()[inner])
    }

    pub fn set_flat(&mut self, index: usize, value: T) -> Result<()> {
        let (entry, inner) = self.locate(index)?;
        self.entries[entry].tensor.data_mut()[inner] = value;
        Ok(())
    }

    /// Add `delta[i]` to scalar `i` for every trainable index, used by the
    /// optimizer. Indices outside any entry are an error.
    pub fn locate(&self, index: usize) -> Result<(usize, usize)> {
        if index >= self.total {
            return Err(Error::UnknownEntry(format!("flat index {index}")));
        }
        // Entries are offset-sorted by construction.
        let pos = self
            .entries
            .partition_point(|e| e.offset <= index)
            .saturating_sub(1);
        Ok((pos, index - self.entries[pos].offset))
    }

    /// Copy all scalars out in flat-index order.
    pub fn snapshot_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.total);
        for e in &self.entries {
            out.extend_from_slice(e.tensor.data());
        }
        out
    }

    /// Checkpoint entries for every parameter, in registration order, plus the
    /// penalizable mask entry.
    pub fn to_ckpt_entries(&self) -> Vec<CkptEntry> {
        let mut out: Vec<CkptEntry> = self
            .entries
            .iter()
            .map(|e| CkptEntry {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                data: TensorData::from_real(e.tensor.data()),
            })
            .collect();
        let mask: Vec<u8> = self.entries.iter().map(|e| e.penalizable as u8).collect();
        out.push(CkptEntry {
            name: PENALIZABLE_MASK_ENTRY.to_string(),
            shape: vec![mask.len()],
            data: TensorData::U8(mask),
        });
        out
    }

    /// Rebuild a store from checkpoint entries. Entries whose names are not
    /// parameters (anything outside the mask) must be filtered by the caller.
    pub fn from_ckpt_entries(entries: &[CkptEntry]) -> Result<Self> {
        let mask_entry = entries
            .iter()
            .find(|e| e.name == PENALIZABLE_MASK_ENTRY)
            .ok_or_else(|| {
                Error::Checkpoint(format!("missing `{PENALIZABLE_MASK_ENTRY}` entry"))
            })?;
        let mask = match &mask_entry.data {
            TensorData::U8(m) => m.clone(),
            _ => {
                return Err(Error::Checkpoint(format!(
                    "`{PENALIZABLE_MASK_ENTRY}` must be a u8 mask"
                )))
            }
        };
        let params: Vec<&CkptEntry> = entries
            .iter()
            .filter(|e| e.name != PENALIZABLE_MASK_ENTRY)
            .collect();
        if params.len() != mask.len() {
            return Err(Error::Checkpoint(format!(
                "penalizable mask covers {} entries, checkpoint has {}",
                mask.len(),
                params.len()
            )));
        }
        let mut store = ParameterStore::new();
        for (entry, flag) in params.iter().zip(mask.iter()) {
            let tensor = entry.to_tensor::<T>()?;
            store.register(&entry.name, tensor, *flag == 1)?;
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write_checkpoint(path, &self.to_ckpt_entries())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let entries = checkpoint::read_checkpoint(path)?;
        Self::from_ckpt_entries(&entries)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.register("enc.w", Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap(), true)
            .unwrap();
        s.register("prompt.p", Tensor::new(vec![2], vec![7., 8.]).unwrap(), false)
            .unwrap();
        s.register("enc.b", Tensor::new(vec![2], vec![9., 10.]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn flat_index_is_registration_order() {
        let s = sample_store();
        assert_eq!(s.offset_of("enc.w").unwrap(), 0);
        assert_eq!(s.offset_of("prompt.p").unwrap(), 6);
        assert_eq!(s.offset_of("enc.b").unwrap(), 8);
        assert_eq!(s.total_len(), 10);
        assert_eq!(s.get_flat(7).unwrap(), 8.0);
    }

    #[test]
    fn penalizable_set_excludes_prompts() {
        let s = sample_store();
        let p = s.penalizable_indices();
        assert_eq!(p, vec![0, 1, 2, 3, 4, 5, 8, 9]);
    }

    #[test]
    fn duplicate_registration_is_an_error() {
        let mut s = sample_store();
        let t = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert!(matches!(s.register("enc.w", t, true), Err(Error::DuplicateEntry(_))));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let s = sample_store();
        s.save(&a).unwrap();
        let loaded = ParameterStore::<f64>::load(&a).unwrap();
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert_eq!(loaded.offset_of("enc.b").unwrap(), 8);
        assert!(loaded.is_penalizable_entry("enc.b").unwrap());
        assert!(!loaded.is_penalizable_entry("prompt.p").unwrap());
    }
}
