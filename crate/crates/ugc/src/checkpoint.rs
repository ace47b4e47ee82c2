//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u32` format version, little-endian
//! `u64` header length, a JSON header, then every tensor's `f32` values in
//! little-endian order, in header order.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use ugc_core::{ArchCode, SearchSpaceSpec};

use crate::error::{Result, UgcError};
use crate::params::{Adam, AdamConfig, TensorMap};
use crate::tensor::Tensor;

/// File magic.
pub const MAGIC: &[u8; 8] = b"UGCCKPT\0";
/// Current format version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

/// Named groups of tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Metadata (configuration, counters, trackers).
    pub meta: serde_json::Value,
    /// Tensor groups, e.g. `generator`, `discriminator`.
    pub groups: BTreeMap<String, TensorMap<f32>>,
}

impl Checkpoint {
    /// Empty checkpoint carrying `meta`.
    pub fn new(meta: serde_json::Value) -> Self {
        Self { meta, groups: BTreeMap::new() }
    }

    /// Serializes to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self
            .groups
            .iter()
            .flat_map(|(g, m)| {
                m.iter().map(move |(n, t)| Entry { group: g.clone(), name: n.clone(), shape: t.shape().to_vec() })
            })
            .collect();
        let header = serde_json::to_vec(&Header { meta: self.meta.clone(), tensors }).expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for m in self.groups.values() {
            for t in m.values() {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses bytes produced by [`Checkpoint::to_bytes`]; `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |r: &str| UgcError::format(origin, r.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(bad(&format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
        let mut pos = 20 + hlen;
        let mut groups: BTreeMap<String, TensorMap<f32>> = BTreeMap::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
            pos += 4 * n;
            groups.entry(e.group).or_default().insert(e.name, Tensor::from_vec(&e.shape, data));
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { meta: header.meta, groups })
    }

    /// Writes atomically (temporary file, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| UgcError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| UgcError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| UgcError::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| UgcError::io(path, e))
    }

    /// Reads a checkpoint, refusing other format versions.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(UgcError::Missing(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| UgcError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Takes group `name`, failing if absent.
    pub fn take_group(&mut self, name: &str, origin: &Path) -> Result<TensorMap<f32>> {
        self.groups.remove(name).ok_or_else(|| UgcError::format(origin, format!("missing tensor group {name}")))
    }

    /// Stores an optimizer under `prefix`.
    pub fn put_adam(&mut self, prefix: &str, opt: &Adam<f32>) {
        self.groups.insert(format!("{prefix}.m"), opt.m.clone());
        self.groups.insert(format!("{prefix}.v"), opt.v.clone());
        if let serde_json::Value::Object(map) = &mut self.meta {
            map.insert(
                format!("{prefix}.state"),
                serde_json::json!({ "t": opt.t, "config": opt.config }),
            );
        }
    }

    /// Restores an optimizer stored with [`Checkpoint::put_adam`].
    pub fn take_adam(&mut self, prefix: &str, origin: &Path) -> Result<Adam<f32>> {
        let m = self.groups.remove(&format!("{prefix}.m")).unwrap_or_default();
        let v = self.groups.remove(&format!("{prefix}.v")).unwrap_or_default();
        let state = self
            .meta
            .get(format!("{prefix}.state"))
            .ok_or_else(|| UgcError::format(origin, format!("missing optimizer {prefix}")))?;
        let t = state.get("t").and_then(|v| v.as_u64()).unwrap_or(0);
        let config: AdamConfig = serde_json::from_value(state["config"].clone())
            .map_err(|e| UgcError::format(origin, e.to_string()))?;
        Ok(Adam { config, t, m, v })
    }
}

/// A standalone generator: its space, code and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorFile {
    /// Search space the code belongs to.
    pub spec: SearchSpaceSpec,
    /// Architecture.
    pub code: ArchCode,
    /// What produced it (e.g. `student`, `baseline`).
    pub label: String,
    /// Weights shaped for `code`.
    pub weights: TensorMap<f32>,
}

impl GeneratorFile {
    /// Writes the generator as a checkpoint of kind `generator`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": "generator",
            "spec": self.spec,
            "code": self.code,
            "label": self.label,
        }));
        c.groups.insert("generator".into(), self.weights.clone());
        c.save(path)
    }

    /// Reads a generator written by [`GeneratorFile::save`].
    pub fn load(path: &Path) -> Result<Self> {
        let mut c = Checkpoint::load(path)?;
        if c.meta.get("kind").and_then(|v| v.as_str()) != Some("generator") {
            return Err(UgcError::format(path, "not a generator checkpoint"));
        }
        let field = |k: &str| c.meta.get(k).cloned().ok_or_else(|| UgcError::format(path, format!("missing {k}")));
        let spec = serde_json::from_value(field("spec")?).map_err(|e| UgcError::format(path, e.to_string()))?;
        let code = serde_json::from_value(field("code")?).map_err(|e| UgcError::format(path, e.to_string()))?;
        let label = field("label")?.as_str().unwrap_or_default().to_string();
        let weights = c.take_group("generator", path)?;
        Ok(Self { spec, code, label, weights })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({ "step": 3 }));
        let mut g = TensorMap::new();
        g.insert("a.weight".into(), Tensor::from_vec(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 7.25e-9]));
        g.insert("a.bias".into(), Tensor::from_vec(&[2], vec![0.1, 0.2]));
        c.groups.insert("generator".into(), g);
        let mut opt = Adam::new(AdamConfig::default());
        opt.t = 4;
        opt.m.insert("a.bias".into(), Tensor::from_vec(&[2], vec![0.3, 0.4]));
        c.put_adam("adam_g", &opt);
        c
    }

    #[test]
    fn round_trips_bit_exactly() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.groups["generator"]["a.weight"]), bits(&c.groups["generator"]["a.weight"]));
        let mut back = back;
        let opt = back.take_adam("adam_g", Path::new("mem")).unwrap();
        assert_eq!(opt.t, 4);
    }

    #[test]
    fn refuses_other_versions() {
        let mut bytes = sample().to_bytes();
        bytes[8..12].copy_from_slice(&(FORMAT_VERSION + 1).to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap_err();
        assert!(err.to_string().contains("format version"), "{err}");
        let mut bytes = sample().to_bytes();
        bytes.truncate(bytes.len() - 1);
        assert!(Checkpoint::from_bytes(&bytes, Path::new("mem")).is_err());
    }
}
