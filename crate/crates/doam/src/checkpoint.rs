//! Deterministic binary parameter archive.
//!
//! A checkpoint is a single file mapping dotted parameter names
//! (`eg.block0.weight`, `ma.gate.weight`, `ag.fuse.weight`,
//! `backbone.block0.weight`, ...) to f64 arrays. Running normalization
//! statistics are stored alongside the parameters under their buffer names
//! (`*.running_mean`, `*.running_var`).
//!
//! ## Format
//!
//! All integers little-endian. Entries are sorted by name, so identical
//! state always serializes to identical bytes.
//!
//! ```text
//! magic      8 bytes   "DOAMCKPT"
//! version    u32       1
//! count      u64       number of entries
//! entry*     count times, sorted by name:
//!   name_len u32
//!   name     UTF-8 bytes
//!   ndim     u32
//!   dims     u64 × ndim
//!   values   f64 (IEEE-754 LE) × prod(dims)
//! checksum   u64       FNV-1a over all preceding bytes
//! ```

use crate::error::{Error, Result};
use crate::pipeline::DetectionModel;
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"DOAMCKPT";
const VERSION: u32 = 1;

/// One named array.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchiveEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// An in-memory checkpoint: dotted names to arrays, sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    entries: BTreeMap<String, ArchiveEntry>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

impl Archive {
    pub fn new() -> Self {
        Archive::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
    ) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Checkpoint(format!(
                "entry {name:?}: shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Checkpoint(format!("duplicate entry {name:?}")));
        }
        self.entries.insert(name, ArchiveEntry { shape, data });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ArchiveEntry> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes to the documented byte format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(entry.shape.len() as u32).to_le_bytes());
            for &d in &entry.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &entry.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let checksum = fnv1a(&out);
        out.extend_from_slice(&checksum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < MAGIC.len() + 4 + 8 + 8 {
            return Err(err("truncated archive"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
        if fnv1a(body) != stored {
            return Err(err("checksum mismatch"));
        }
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let slice = body
                .get(pos..pos + n)
                .ok_or_else(|| Error::Checkpoint("truncated archive".into()))?;
            pos += n;
            Ok(slice)
        };
        if take(8)? != MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {version} (expected {VERSION})"
            )));
        }
        let count = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        let mut archive = Archive::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let name = std::str::from_utf8(take(name_len)?)
                .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?
                .to_string();
            let ndim = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize);
            }
            let n_values: usize = shape.iter().product();
            let raw = take(n_values * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            archive.insert(name, shape, data)?;
        }
        if pos != body.len() {
            return Err(err("trailing bytes after the last entry"));
        }
        Ok(archive)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

/// Snapshots a model's parameters and running buffers into an archive.
pub fn model_to_archive(model: &DetectionModel) -> Archive {
    let mut archive = Archive::new();
    for (name, view) in model.named_params().into_iter().chain(model.named_buffers()) {
        archive
            .insert(name, view.shape().to_vec(), view.iter().copied().collect())
            .expect("model names are unique");
    }
    archive
}

/// Restores parameters and buffers from an archive. Every model tensor must
/// be present with a matching shape, and the archive must not carry
/// anything the model does not have.
pub fn load_model_state(model: &mut DetectionModel, archive: &Archive) -> Result<()> {
    fn restore(views: crate::nn::NamedViewsMut<'_>, archive: &Archive) -> Result<usize> {
        let mut seen = 0usize;
        for (name, mut view) in views {
            let entry = archive.get(&name).ok_or_else(|| {
                Error::Checkpoint(format!("archive is missing tensor {name:?}"))
            })?;
            if entry.shape != view.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name:?}: archive shape {:?} vs model shape {:?}",
                    entry.shape,
                    view.shape()
                )));
            }
            for (dst, &src) in view.iter_mut().zip(&entry.data) {
                *dst = src;
            }
            seen += 1;
        }
        Ok(seen)
    }
    let mut seen = restore(model.named_params_mut(), archive)?;
    seen += restore(model.named_buffers_mut(), archive)?;
    if seen != archive.len() {
        let model_names: std::collections::BTreeSet<String> = model
            .named_params()
            .into_iter()
            .chain(model.named_buffers())
            .map(|(n, _)| n)
            .collect();
        let extra: Vec<&str> = archive
            .names()
            .filter(|n| !model_names.contains(*n))
            .collect();
        return Err(Error::Checkpoint(format!(
            "archive carries tensors the model does not have: {extra:?}"
        )));
    }
    Ok(())
}
