use std::fs;
use std::path::{Path, PathBuf};

use mergeforge_core::hierarchy::ModelStore;
use mergeforge_core::{Error as CoreError, ModelSpec, ParameterSet, Result as CoreResult};

use crate::checkpoint;
use crate::error::{Error, Result};

/// A [`ModelStore`] backed by one checkpoint file per slot, so only the
/// models currently checked out live in memory.
pub struct DirectoryStore {
    dir: PathBuf,
    spec: ModelSpec,
}

impl DirectoryStore {
    pub fn create(dir: impl Into<PathBuf>, spec: &ModelSpec) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(DirectoryStore {
            dir,
            spec: spec.clone(),
        })
    }

    /// Creates the store and writes `models` into slots `0..`.
    pub fn with_models(dir: impl Into<PathBuf>, spec: &ModelSpec, models: &[&ParameterSet]) -> Result<Self> {
        let store = Self::create(dir, spec)?;
        for (slot, params) in models.iter().enumerate() {
            checkpoint::save_params(params, &store.slot_path(slot))?;
        }
        Ok(store)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn slot_path(&self, slot: usize) -> PathBuf {
        self.dir.join(format!("slot{slot:04}.ckpt"))
    }

    /// Deletes the directory and everything in it.
    pub fn remove(self) -> Result<()> {
        fs::remove_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))
    }
}

impl ModelStore for DirectoryStore {
    fn load(&mut self, slot: usize) -> CoreResult<ParameterSet> {
        let path = self.slot_path(slot);
        let params = checkpoint::load_params(&path, &self.spec).map_err(|e| CoreError::Store(e.to_string()))?;
        fs::remove_file(&path).map_err(|e| CoreError::Store(format!("{}: {e}", path.display())))?;
        Ok(params)
    }

    fn store(&mut self, slot: usize, params: ParameterSet) -> CoreResult<()> {
        checkpoint::save_params(&params, &self.slot_path(slot)).map_err(|e| CoreError::Store(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use mergeforge_core::Activation;

    #[test]
    fn slots_are_checked_out_once() {
        let spec = ModelSpec::mlp(2, &[3], 2, Activation::Tanh).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let a = ParameterSet::init(&spec, 1);
        let mut store = DirectoryStore::with_models(dir.path().join("s"), &spec, &[&a]).unwrap();
        assert!(store.load(0).unwrap().bit_eq(&a));
        assert!(matches!(store.load(0), Err(CoreError::Store(_))));
        store.store(3, a.clone()).unwrap();
        assert!(store.load(3).unwrap().bit_eq(&a));
        store.remove().unwrap();
        assert!(!dir.path().join("s").exists());
    }
}
