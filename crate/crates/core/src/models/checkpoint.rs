//! Two-part checkpoint container: `manifest.json` names every tensor with
//! its shape and byte offset, and `tensors.bin` holds the raw data as
//! little-endian `f64` in row-major order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{BackpackModel, HostTransformerLM, ModelConfig, TrainableLm};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: &str = "CANON1";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub kind: String,
    #[serde(default)]
    pub meta: serde_json::Value,
    pub tensor_count: usize,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Contents of a container once read back.
#[derive(Clone, Debug)]
pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: IndexMap<String, Tensor>,
}

pub fn write_container<'a>(
    dir: &Path,
    kind: &str,
    meta: serde_json::Value,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        version: FORMAT_VERSION.to_string(),
        kind: kind.to_string(),
        meta,
        tensor_count: entries.len(),
        blob_bytes: blob.len() as u64,
        tensors: entries,
    };
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&mpath, json + "\n").map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(BLOB_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", mpath.display())))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::Format(format!(
            "version tag {:?}, expected {FORMAT_VERSION:?}",
            manifest.version
        )));
    }
    if manifest.tensor_count != manifest.tensors.len() {
        return Err(Error::Format(format!(
            "manifest declares {} tensors but lists {}",
            manifest.tensor_count,
            manifest.tensors.len()
        )));
    }
    Ok(manifest)
}

pub fn read_container(dir: &Path) -> Result<Container> {
    let manifest = read_manifest(dir)?;
    let bpath = dir.join(BLOB_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if (blob.len() as u64) != manifest.blob_bytes {
        return Err(Error::Corruption(format!(
            "{} has {} bytes, manifest expects {}",
            bpath.display(),
            blob.len(),
            manifest.blob_bytes
        )));
    }
    let mut tensors = IndexMap::new();
    for entry in &manifest.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > blob.len() {
            return Err(Error::Corruption(format!(
                "tensor {:?} runs past the end of the blob",
                entry.name
            )));
        }
        let data: Vec<f64> = blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(entry.shape.clone(), data)
            .map_err(|e| Error::Format(format!("tensor {:?}: {e}", entry.name)))?;
        if tensors.insert(entry.name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {:?}", entry.name)));
        }
    }
    Ok(Container {
        kind: manifest.kind,
        meta: manifest.meta,
        tensors,
    })
}

pub(crate) fn expect_same_layout(reference: &ParamSet, loaded: &ParamSet) -> Result<()> {
    if reference.len() != loaded.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            reference.len(),
            loaded.len()
        )));
    }
    for ((rn, rt), (ln, lt)) in reference.iter().zip(loaded.iter()) {
        if rn != ln || rt.shape() != lt.shape() {
            return Err(Error::Format(format!(
                "expected tensor {rn:?} {:?}, found {ln:?} {:?}",
                rt.shape(),
                lt.shape()
            )));
        }
    }
    Ok(())
}

/// A loaded model of either kind.
#[derive(Clone, Debug)]
pub enum Checkpoint {
    Backpack(BackpackModel),
    Host(HostTransformerLM),
}

impl Checkpoint {
    pub fn into_backpack(self) -> Result<BackpackModel> {
        match self {
            Checkpoint::Backpack(m) => Ok(m),
            Checkpoint::Host(_) => Err(Error::Format("expected a backpack checkpoint".into())),
        }
    }

    pub fn into_host(self) -> Result<HostTransformerLM> {
        match self {
            Checkpoint::Host(m) => Ok(m),
            Checkpoint::Backpack(_) => Err(Error::Format("expected a host checkpoint".into())),
        }
    }
}

/// Models that can be written to a checkpoint container.
pub trait Checkpointable: TrainableLm {
    const KIND: &'static str;
    fn model_config(&self) -> &ModelConfig;
}

impl Checkpointable for BackpackModel {
    const KIND: &'static str = "backpack";
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }
}

impl Checkpointable for HostTransformerLM {
    const KIND: &'static str = "host";
    fn model_config(&self) -> &ModelConfig {
        self.config()
    }
}

pub fn save_checkpoint<M: Checkpointable>(model: &M, dir: &Path) -> Result<()> {
    let meta = serde_json::json!({ "config": model.model_config() });
    write_container(dir, M::KIND, meta, model.params().iter())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let c = read_container(dir)?;
    let config: ModelConfig = serde_json::from_value(
        c.meta
            .get("config")
            .cloned()
            .ok_or_else(|| Error::Format("manifest has no model config".into()))?,
    )
    .map_err(|e| Error::Format(format!("model config: {e}")))?;
    config.validate()?;
    let mut params = ParamSet::new();
    for (name, t) in c.tensors {
        params.insert(name, t);
    }
    match c.kind.as_str() {
        "backpack" => Ok(Checkpoint::Backpack(BackpackModel::from_params(config, params)?)),
        "host" => Ok(Checkpoint::Host(HostTransformerLM::from_params(config, params)?)),
        other => Err(Error::Format(format!("unknown model kind {other:?}"))),
    }
}

pub fn load_backpack(dir: &Path) -> Result<BackpackModel> {
    load_checkpoint(dir)?.into_backpack()
}

pub fn load_host(dir: &Path) -> Result<HostTransformerLM> {
    load_checkpoint(dir)?.into_host()
}
