//! Directory bundles of named SGT1 tensors.
//!
//! A bundle is a directory holding `manifest.json` and one `.sgt` file per
//! tensor. The manifest lists `name`, `dims`, `file` and `trainable` for
//! every entry, plus an optional model configuration.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::sgt;
use crate::tensor::Float;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub file: String,
    #[serde(default = "yes")]
    pub trainable: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<ModelConfig>,
    pub tensors: Vec<ManifestEntry>,
}

pub fn save_bundle<T: Float>(store: &ParameterStore<T>, dir: impl AsRef<Path>, config: Option<&ModelConfig>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tensors = Vec::with_capacity(store.len());
    for (name, p) in store.iter() {
        let file = format!("{name}.sgt");
        sgt::write(&p.value, dir.join(&file))?;
        tensors.push(ManifestEntry {
            name: name.to_string(),
            dims: p.value.dims().to_vec(),
            file,
            trainable: p.trainable,
        });
    }
    let manifest = Manifest {
        config: config.cloned(),
        tensors,
    };
    let path = dir.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_bundle<T: Float>(dir: impl AsRef<Path>) -> Result<(ParameterStore<T>, Option<ModelConfig>)> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut store = ParameterStore::new();
    for e in &manifest.tensors {
        if e.file.contains('/') || e.file.contains('\\') || e.file.contains("..") {
            return Err(Error::Format(format!("manifest file name {:?} escapes the bundle", e.file)));
        }
        let path = dir.join(&e.file);
        if !path.exists() {
            return Err(Error::MissingTensor(e.name.clone()));
        }
        let t = sgt::read::<T>(&path)?;
        let mut want = [1usize; 4];
        if e.dims.len() > 4 {
            return Err(Error::Format(format!("{}: rank {} above 4", e.name, e.dims.len())));
        }
        want[4 - e.dims.len()..].copy_from_slice(&e.dims);
        if t.dims() != want {
            return Err(Error::DimMismatch {
                name: e.name.clone(),
                expected: want,
                found: t.dims(),
            });
        }
        store.insert(e.name.clone(), t, e.trainable)?;
    }
    Ok((store, manifest.config))
}
