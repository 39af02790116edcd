//! Raw clip files and the JSONL manifest that indexes them.
//!
//! A clip file is `"RALT"`, then little-endian `u32` version, `T`, `H`, `W`,
//! then `T·H·W` little-endian `f32` values. Each manifest line is
//! `{"file": ..., "label": ..., "split": ...}` with `file` relative to the
//! dataset root.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, SequenceSample, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"RALT";
pub const VERSION: u32 = 1;
const HEADER: usize = 20;

pub fn encode_ralt(frames: &Tensor<f32>) -> Result<Vec<u8>> {
    let s = frames.shape();
    if s.len() != 3 {
        return Err(Error::dim("write_ralt", format!("need [T, H, W], got {s:?}")));
    }
    let mut buf = Vec::with_capacity(HEADER + 4 * frames.len());
    buf.extend_from_slice(MAGIC);
    for v in [VERSION, s[0] as u32, s[1] as u32, s[2] as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in frames.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode_ralt(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |detail: String| Error::Format {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < HEADER {
        return Err(bad(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad(format!("bad magic {:?}", &bytes[..4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize;
    let version = word(0) as u32;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let (t, h, w) = (word(1), word(2), word(3));
    if t == 0 || h == 0 || w == 0 {
        return Err(bad(format!("empty extent {t}x{h}x{w}")));
    }
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| bad("extent overflow".into()))?;
    let payload = &bytes[HEADER..];
    if payload.len() != 4 * n {
        return Err(bad(format!("payload has {} bytes, header implies {}", payload.len(), 4 * n)));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Tensor::new(vec![t, h, w], data)
}

pub fn write_ralt(path: &Path, frames: &Tensor<f32>) -> Result<()> {
    let bytes = encode_ralt(frames)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ralt(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_ralt(&bytes, path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub file: String,
    pub label: usize,
    pub split: Split,
}

/// Every clip listed in a manifest, in manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct IngestedDataset {
    pub root: PathBuf,
    pub entries: Vec<(ManifestEntry, SequenceSample)>,
}

impl IngestedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn split(&self, split: Split, num_classes: usize) -> Result<Dataset> {
        let samples = self
            .entries
            .iter()
            .filter(|(e, _)| e.split == split)
            .map(|(_, s)| s.clone())
            .collect();
        Dataset::new(samples, num_classes)
    }

    /// One more than the largest label seen.
    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|(e, _)| e.label + 1).max().unwrap_or(0)
    }
}

/// Reads a manifest and every clip it references.
pub fn ingest_lrw_layout(root: &Path, manifest: &Path) -> Result<IngestedDataset> {
    let file = fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut entries = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::Manifest {
            path: manifest.to_path_buf(),
            line: line_no,
            detail,
        };
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let path = root.join(&entry.file);
        if !path.is_file() {
            return Err(bad(format!("missing file {}", path.display())));
        }
        let frames = read_ralt(&path)?;
        let sample = SequenceSample::new(frames, entry.label)?;
        entries.push((entry, sample));
    }
    Ok(IngestedDataset {
        root: root.to_path_buf(),
        entries,
    })
}

/// Writes clips as `<split>/<index>.ralt` under `root` plus `manifest.jsonl`,
/// and returns the manifest path.
pub fn write_layout(root: &Path, clips: &[(Split, &SequenceSample)]) -> Result<PathBuf> {
    let mut lines = Vec::with_capacity(clips.len());
    for (i, (split, s)) in clips.iter().enumerate() {
        let dir = root.join(split.as_str());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let file = format!("{}/{i:06}.ralt", split.as_str());
        write_ralt(&root.join(&file), &s.frames)?;
        lines.push(serde_json::to_string(&ManifestEntry {
            file,
            label: s.label,
            split: *split,
        })?);
    }
    let manifest = root.join("manifest.jsonl");
    let mut f = fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    for l in lines {
        writeln!(f, "{l}").map_err(|e| Error::io(&manifest, e))?;
    }
    Ok(manifest)
}
