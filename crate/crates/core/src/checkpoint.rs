//! Checkpoints: `manifest.json` describing every parameter plus
//! `params.bin`, a flat little-endian `f32` blob. A training checkpoint adds
//! the optimizer moments in `optim.bin` and the epoch history.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{RalConfig, RalModel};
use crate::params::ParamKind;
use crate::train::{EpochStats, TrainConfig, Trainer};

pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const OPTIM: &str = "optim.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `params.bin`.
    pub offset: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingState {
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub step: u64,
    pub history: Vec<EpochStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: RalConfig,
    pub dtype: String,
    pub entries: Vec<Entry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<TrainingState>,
}

fn put(buf: &mut Vec<u8>, xs: &[f32]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn take(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect()
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn manifest_for(model: &RalModel<f32>) -> (Manifest, Vec<u8>) {
    let mut blob = Vec::new();
    let entries = model
        .store
        .iter()
        .map(|p| {
            let e = Entry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                dtype: "f32".into(),
                offset: blob.len(),
                kind: p.kind,
            };
            put(&mut blob, p.tensor.data());
            e
        })
        .collect();
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        config: model.config().clone(),
        dtype: "f32".into(),
        entries,
        training: None,
    };
    (manifest, blob)
}

fn write_manifest(dir: &Path, m: &Manifest, blob: &[u8]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join(PARAMS), blob)?;
    write(&dir.join(MANIFEST), &serde_json::to_vec_pretty(m)?)
}

pub fn save_model(dir: &Path, model: &RalModel<f32>) -> Result<()> {
    let (m, blob) = manifest_for(model);
    write_manifest(dir, &m, &blob)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    if m.schema_version != SCHEMA_VERSION || m.dtype != "f32" {
        return Err(Error::Format {
            path,
            detail: format!("schema {} dtype {} not supported", m.schema_version, m.dtype),
        });
    }
    Ok(m)
}

/// Rebuilds the network from the manifest's config and fills in every
/// parameter by name.
pub fn load_model(dir: &Path) -> Result<RalModel<f32>> {
    Ok(load_with_manifest(dir)?.0)
}

fn load_with_manifest(dir: &Path) -> Result<(RalModel<f32>, Manifest)> {
    let m = read_manifest(dir)?;
    let path = dir.join(PARAMS);
    let blob = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let bad = |detail: String| Error::Format {
        path: path.clone(),
        detail,
    };
    let mut model = RalModel::<f32>::new(&m.config, 0)?;
    if m.entries.len() != model.store.len() {
        return Err(bad(format!(
            "{} entries for a network with {} parameters",
            m.entries.len(),
            model.store.len()
        )));
    }
    let mut end = 0;
    for e in &m.entries {
        let p = model
            .store
            .by_name_mut(&e.name)
            .ok_or_else(|| bad(format!("unknown parameter {}", e.name)))?;
        if p.tensor.shape() != e.shape.as_slice() || p.kind != e.kind {
            return Err(bad(format!(
                "{}: stored {:?} {:?}, network expects {:?} {:?}",
                e.name,
                e.shape,
                e.kind,
                p.tensor.shape(),
                p.kind
            )));
        }
        let n = 4 * p.tensor.len();
        let bytes = blob
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("{} runs past the end of the blob", e.name)))?;
        p.tensor.data_mut().copy_from_slice(&take(bytes));
        end = end.max(e.offset + n);
    }
    if end != blob.len() {
        return Err(bad(format!("{} trailing bytes", blob.len() - end)));
    }
    Ok((model, m))
}

/// Saves parameters, optimizer moments and progress so training can resume
/// exactly where it stopped.
pub fn save_trainer(dir: &Path, t: &Trainer) -> Result<()> {
    let (mut m, blob) = manifest_for(&t.model);
    m.training = Some(TrainingState {
        train_config: t.config.clone(),
        epoch: t.epoch,
        step: t.opt.step,
        history: t.history.clone(),
    });
    let mut optim = Vec::new();
    for moments in [&t.opt.m, &t.opt.v] {
        for xs in moments {
            put(&mut optim, xs);
        }
    }
    write_manifest(dir, &m, &blob)?;
    write(&dir.join(OPTIM), &optim)
}

pub fn load_trainer(dir: &Path) -> Result<Trainer> {
    let (model, m) = load_with_manifest(dir)?;
    let path = dir.join(OPTIM);
    let state = m.training.ok_or_else(|| Error::Format {
        path: dir.join(MANIFEST),
        detail: "no training state".into(),
    })?;
    let mut t = Trainer::new(model, state.train_config)?;
    let all = take(&fs::read(&path).map_err(|e| Error::io(&path, e))?);
    let need: usize = t.opt.m.iter().map(Vec::len).sum();
    if all.len() != 2 * need {
        return Err(Error::Format {
            path,
            detail: format!("{} moments, expected {}", all.len(), 2 * need),
        });
    }
    let mut rest = all.as_slice();
    for xs in t.opt.m.iter_mut().chain(t.opt.v.iter_mut()) {
        let (head, tail) = rest.split_at(xs.len());
        xs.copy_from_slice(head);
        rest = tail;
    }
    t.opt.step = state.step;
    t.epoch = state.epoch;
    t.history = state.history;
    Ok(t)
}
