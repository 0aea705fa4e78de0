//! Model checkpoints: one `.ten` file per parameter plus `manifest.json`
//! holding the model kind, its configuration and every parameter's shape.

use std::fs;
use std::path::Path;

use mvm_nn::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{MvmError, Result};
use crate::tensor_file::{TensorData, TensorFile};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
}

fn file_name(name: &str) -> String {
    format!("{}.ten", name.replace(['/', '\\'], "_"))
}

pub fn save(dir: &Path, kind: &str, config: &impl Serialize, store: &ParamStore) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut params = Vec::with_capacity(store.len());
    for id in store.ids() {
        let name = store.name(id).to_string();
        let value = store.value(id);
        let file = file_name(&name);
        TensorFile::f32(value.shape().to_vec(), value.data().to_vec()).write(&dir.join(&file))?;
        params.push(ParamEntry {
            name,
            shape: value.shape().to_vec(),
            file,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        config: serde_json::to_value(config)?,
        params,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(dir: &Path, kind: &str) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))
        .map_err(|e| MvmError::Checkpoint(format!("{}: {e}", dir.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.kind != kind {
        return Err(MvmError::Checkpoint(format!(
            "{} holds a {} model, expected {kind}",
            dir.display(),
            m.kind
        )));
    }
    Ok(m)
}

/// Fills `store` from the checkpoint; names and shapes must match exactly.
pub fn load_into(dir: &Path, manifest: &Manifest, store: &mut ParamStore) -> Result<()> {
    if manifest.params.len() != store.len() {
        return Err(MvmError::Checkpoint(format!(
            "checkpoint has {} tensors, model has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    for entry in &manifest.params {
        let tf = TensorFile::read(&dir.join(&entry.file))?;
        let TensorData::F32(data) = tf.data else {
            return Err(MvmError::Checkpoint(format!("{} is not float32", entry.file)));
        };
        if tf.dims != entry.shape {
            return Err(MvmError::Checkpoint(format!("{} shape disagrees with manifest", entry.file)));
        }
        let t = Tensor::new(&entry.shape, data)?;
        store
            .set(&entry.name, t)
            .map_err(|e| MvmError::Checkpoint(e.to_string()))?;
    }
    Ok(())
}

/// True when two stores hold bitwise-identical parameters in the same order.
pub fn stores_equal(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.ids().zip(b.ids()).all(|(x, y)| {
            a.name(x) == b.name(y)
                && a.value(x).shape() == b.value(y).shape()
                && a.value(x)
                    .data()
                    .iter()
                    .zip(b.value(y).data())
                    .all(|(p, q)| p.to_bits() == q.to_bits())
        })
}
