//! Named flat parameter arrays and the checkpoint file format.
//!
//! Checkpoint layout: the magic bytes `UPRL1`, a little-endian u32 byte
//! length, a UTF-8 JSON manifest (architecture config, parameter
//! names/shapes in order, training step, seed), then the parameter arrays
//! concatenated as little-endian f32 in manifest order. Parameters live in
//! f64 in memory; f32 is used only for storage.

use super::{GradError, Gradients, Shape};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

const MAGIC: &[u8; 5] = b"UPRL1";

#[derive(Debug, Clone)]
struct Entry {
    shape: Shape,
    data: Arc<Vec<f64>>,
}

/// Map from parameter name to a shaped flat array. Immutable while rollouts
/// read it; the optimizer is the single writer between rollout phases.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Shape, data: Vec<f64>) -> Result<(), GradError> {
        assert_eq!(shape.len(), data.len(), "shape/data length mismatch for {name}");
        if self.entries.contains_key(name) {
            return Err(GradError::DuplicateParam(name.to_string()));
        }
        self.entries.insert(
            name.to_string(),
            Entry {
                shape,
                data: Arc::new(data),
            },
        );
        Ok(())
    }

    pub fn entry(&self, name: &str) -> Option<(Shape, Arc<Vec<f64>>)> {
        self.entries.get(name).map(|e| (e.shape, e.data.clone()))
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(|e| e.data.as_slice())
    }

    pub fn shape(&self, name: &str) -> Option<Shape> {
        self.entries.get(name).map(|e| e.shape)
    }

    /// Mutable view of one parameter; copy-on-write when tapes still alias it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.entries.get_mut(name).map(|e| Arc::make_mut(&mut e.data))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|k| k.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Shape, &[f64])> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), e.shape, e.data.as_slice()))
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.shape.len()).sum()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Copy of the store with one component of one parameter shifted by
    /// `delta`; other parameters share storage. Used by gradient checks.
    pub fn with_perturbed(&self, name: &str, idx: usize, delta: f64) -> Result<Self, GradError> {
        let mut out = self.clone();
        let entry = out
            .entries
            .get_mut(name)
            .ok_or_else(|| GradError::UnknownParam(name.to_string()))?;
        let data = Arc::make_mut(&mut entry.data);
        data[idx] += delta;
        Ok(out)
    }

    /// In-place update used by the optimizer: `p[i] += f(p[i], g[i])`.
    pub fn apply<F>(&mut self, grads: &Gradients, mut f: F)
    where
        F: FnMut(&str, usize, f64, f64) -> f64,
    {
        for (name, entry) in self.entries.iter_mut() {
            if let Some(g) = grads.get(name) {
                let data = Arc::make_mut(&mut entry.data);
                for (i, (p, gi)) in data.iter_mut().zip(g.iter()).enumerate() {
                    *p = f(name, i, *p, *gi);
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// Manifest stored inside a checkpoint. `arch` is the JSON form of the
/// network configuration so evaluation can rebuild the model without the
/// original run config.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub kind: String,
    pub arch: serde_json::Value,
    pub step: u64,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub params: Vec<ParamMeta>,
}

pub fn save_checkpoint(
    path: &Path,
    store: &ParamStore,
    kind: &str,
    arch: serde_json::Value,
    step: u64,
    seed: u64,
    alpha: Option<f64>,
) -> Result<(), GradError> {
    let params: Vec<ParamMeta> = store
        .iter()
        .map(|(name, shape, _)| ParamMeta {
            name: name.to_string(),
            rows: shape.rows,
            cols: shape.cols,
        })
        .collect();
    let manifest = CheckpointManifest {
        kind: kind.to_string(),
        arch,
        step,
        seed,
        alpha,
        params,
    };
    let manifest_bytes = serde_json::to_vec(&manifest).map_err(|e| GradError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(manifest_bytes.len() + store.total_count() * 4 + 16);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&manifest_bytes);
    for meta in &manifest.params {
        let data = store.get(&meta.name).expect("manifest built from store");
        for &v in data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointManifest), GradError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        return Err(GradError::Format(format!(
            "{}: missing UPRL1 magic",
            path.display()
        )));
    }
    let mlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let body = 9 + mlen;
    if bytes.len() < body {
        return Err(GradError::Format("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[9..body])
        .map_err(|e| GradError::Format(format!("manifest: {e}")))?;
    let mut store = ParamStore::new();
    let mut off = body;
    for meta in &manifest.params {
        let n = meta.rows * meta.cols;
        let end = off + 4 * n;
        if bytes.len() < end {
            return Err(GradError::Format(format!(
                "truncated data for parameter '{}'",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes[off..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        store.insert(&meta.name, Shape::new(meta.rows, meta.cols), data)?;
        off = end;
    }
    if off != bytes.len() {
        return Err(GradError::Format("trailing bytes after parameters".into()));
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn total_count_sums_entry_sizes() {
        let mut s = ParamStore::new();
        s.insert("a", Shape::new(2, 3), vec![0.0; 6]).unwrap();
        s.insert("b", Shape::new(1, 4), vec![0.0; 4]).unwrap();
        assert_eq!(s.total_count(), 10);
        assert!(s.insert("a", Shape::new(1, 1), vec![0.0]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("w", Shape::new(2, 2), vec![0.125, -3.5, 0.0009765625, 7.25])
            .unwrap();
        s.insert("b", Shape::new(1, 2), vec![0.5, -0.5]).unwrap();
        let p1 = dir.path().join("a.uprl");
        let p2 = dir.path().join("b.uprl");
        save_checkpoint(&p1, &s, "test", serde_json::json!({"h": 2}), 3, 9, Some(1.0)).unwrap();
        let (loaded, manifest) = load_checkpoint(&p1).unwrap();
        assert_eq!(manifest.step, 3);
        assert_eq!(manifest.seed, 9);
        save_checkpoint(&p2, &loaded, "test", serde_json::json!({"h": 2}), 3, 9, Some(1.0)).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert_eq!(b1, b2);
        // Values chosen exactly representable in f32, so they survive.
        assert_eq!(loaded.get("w").unwrap(), s.get("w").unwrap());
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.uprl");
        std::fs::write(&p, b"NOPE!xxxx").unwrap();
        assert!(load_checkpoint(&p).is_err());
    }
}
