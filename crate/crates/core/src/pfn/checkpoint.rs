use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PfnConfig, PfnModel};
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const BLOBS: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: PfnConfig,
    seed: u64,
    params: Vec<ParamEntry>,
}

/// Writes `manifest.json` and `params.bin` (tensor blobs in manifest order)
/// into `dir`, creating it if needed.
pub fn save_checkpoint(model: &PfnModel, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        config: *model.config(),
        seed: model.seed(),
        params: model
            .params()
            .iter()
            .map(|(name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(BLOBS))?);
    for (_, t) in model.params().iter() {
        t.write_to(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<PfnModel> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST))?)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    let mut r = BufReader::new(fs::File::open(dir.join(BLOBS))?);
    let mut store = ParamStore::new();
    for entry in &manifest.params {
        let t = Tensor::read_from(&mut r)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(Error::Format(format!(
                "blob for {} has shape {:?}, manifest says {:?}",
                entry.name,
                t.shape(),
                entry.shape
            )));
        }
        store.push(entry.name.clone(), t);
    }
    PfnModel::from_params(manifest.config, manifest.seed, store)
}
