//! Checkpoint directory: `manifest.json` plus one HTSR file per parameter and buffer.

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ParamStore};
use crate::numerics::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: TrainConfig,
    pub params: Vec<String>,
    pub buffers: Vec<String>,
    pub step: u64,
    pub epoch: usize,
    pub seed: u64,
}

fn blob_name(name: &str) -> String {
    format!("{name}.htsr")
}

fn write_store(dir: &Path, store: &ParamStore) -> Result<Vec<String>> {
    let mut names = Vec::with_capacity(store.len());
    for (name, t) in store.iter() {
        t.write_htsr(BufWriter::new(fs::File::create(dir.join(blob_name(name)))?))?;
        names.push(name.to_string());
    }
    Ok(names)
}

fn read_store(dir: &Path, names: &[String]) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for name in names {
        let bytes = fs::read(dir.join(blob_name(name)))?;
        store.insert(name.clone(), Tensor::read_htsr(&bytes[..])?);
    }
    Ok(store)
}

pub fn save_checkpoint(dir: &Path, model: &Model, config: &TrainConfig, step: u64, epoch: usize) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        config: config.clone(),
        params: write_store(dir, &model.params)?,
        buffers: write_store(dir, &model.buffers)?,
        step,
        epoch,
        seed: config.seed,
    };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Loads a checkpoint and checks every tensor against a freshly built model's shapes.
pub fn load_checkpoint(dir: &Path) -> Result<(Model, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)?;
    let mut model = Model::new(manifest.config.model.clone(), manifest.seed)?;
    let params = read_store(dir, &manifest.params)?;
    let buffers = read_store(dir, &manifest.buffers)?;
    for (loaded, fresh, what) in [(&params, &model.params, "parameter"), (&buffers, &model.buffers, "buffer")] {
        if loaded.len() != fresh.len() {
            return Err(Error::Format(format!("checkpoint {what} count {} != {}", loaded.len(), fresh.len())));
        }
        for (name, t) in fresh.iter() {
            let got = loaded
                .get(name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {what} {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::Format(format!("{what} {name}: shape {:?} != {:?}", got.shape(), t.shape())));
            }
        }
    }
    model.params = params;
    model.buffers = buffers;
    Ok((model, manifest))
}
