//! Binary containers for weights (`VITW`) and features/probes (`VITF`), plus
//! deterministic initialization of toy models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic, "VITW" or "VITF"
//! 4       4           version (u32), currently 1
//! 8       8           header_len (u64), byte length of the manifest
//! 16      header_len  manifest, UTF-8 JSON
//! 16+h    ...         payload: tensors back to back
//! ```
//!
//! The manifest is `{"meta": {...}, "tensors": [{"name", "dtype", "shape",
//! "offset", "length"}, ...]}`. Offsets are relative to the payload start,
//! strictly ascending and contiguous, and the payload length must equal the
//! sum of the entry lengths. `dtype` is one of `f32`, `f64`, `u32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{FeatureSet, FitMeta, ProbeModel, Standardizer};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;
use crate::vit::{param_layout, ModelConfig, ModelWeights, ParamRole, TapId};

pub const WEIGHTS_MAGIC: [u8; 4] = *b"VITW";
pub const FEATURES_MAGIC: [u8; 4] = *b"VITF";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// Standard deviation of the truncated normal used by [`init_toy`].
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub enum EntryData {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
    U32 { shape: Vec<usize>, data: Vec<u32> },
}

impl EntryData {
    fn dtype(&self) -> &'static str {
        match self {
            EntryData::F32(_) => "f32",
            EntryData::F64(_) => "f64",
            EntryData::U32 { .. } => "u32",
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            EntryData::F32(t) => t.shape(),
            EntryData::F64(t) => t.shape(),
            EntryData::U32 { shape, .. } => shape,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            EntryData::F32(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            EntryData::F64(t) => t.data().iter().for_each(|v| out.extend(v.to_le_bytes())),
            EntryData::U32 { data, .. } => data.iter().for_each(|v| out.extend(v.to_le_bytes())),
        }
    }

    fn byte_len(&self) -> usize {
        let n: usize = self.shape().iter().product();
        n * match self {
            EntryData::F64(_) => 8,
            _ => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub data: EntryData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub magic: [u8; 4],
    pub meta: serde_json::Value,
    pub entries: Vec<Entry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    meta: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

impl Container {
    pub fn new(magic: [u8; 4], meta: serde_json::Value) -> Self {
        Self {
            magic,
            meta,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, data: EntryData) {
        self.entries.push(Entry {
            name: name.into(),
            data,
        });
    }

    pub fn get(&self, name: &str) -> Option<&EntryData> {
        self.entries
            .iter()
            .find(|e| e.name == name)
            .map(|e| &e.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let tensors = self
            .entries
            .iter()
            .map(|e| {
                let length = e.data.byte_len() as u64;
                let m = ManifestEntry {
                    name: e.name.clone(),
                    dtype: e.data.dtype().to_string(),
                    shape: e.data.shape().to_vec(),
                    offset,
                    length,
                };
                offset += length;
                m
            })
            .collect();
        let manifest = serde_json::to_vec(&Manifest {
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(PREAMBLE + manifest.len() + offset as usize);
        out.extend_from_slice(&self.magic);
        out.extend(VERSION.to_le_bytes());
        out.extend((manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for e in &self.entries {
            e.data.write_le(&mut out);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: [u8; 4], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::corrupt(path, reason);
        if bytes.len() < PREAMBLE {
            return Err(bad(format!(
                "file is {} bytes, shorter than the preamble",
                bytes.len()
            )));
        }
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != expected_magic {
            return Err(bad(format!(
                "magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(&expected_magic)
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let payload_start = PREAMBLE
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad(format!("manifest length {header_len} exceeds file size")))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[PREAMBLE..payload_start])
            .map_err(|e| bad(format!("manifest is not valid JSON: {e}")))?;
        let payload = &bytes[payload_start..];

        let mut expected_offset = 0u64;
        let mut entries = Vec::with_capacity(manifest.tensors.len());
        for m in manifest.tensors {
            if m.offset != expected_offset {
                return Err(bad(format!(
                    "{}: offset {} breaks the contiguous layout (expected {expected_offset})",
                    m.name, m.offset
                )));
            }
            let n: usize = m.shape.iter().product();
            let width = match m.dtype.as_str() {
                "f32" | "u32" => 4,
                "f64" => 8,
                other => return Err(bad(format!("{}: unknown dtype {other}", m.name))),
            };
            if m.length as usize != n * width || m.shape.iter().any(|&s| s == 0) {
                return Err(bad(format!(
                    "{}: length disagrees with shape {:?}",
                    m.name, m.shape
                )));
            }
            let end = (m.offset + m.length) as usize;
            if end > payload.len() {
                return Err(bad(format!("{}: payload truncated", m.name)));
            }
            let raw = &payload[m.offset as usize..end];
            let data = match m.dtype.as_str() {
                "f32" => EntryData::F32(Tensor::new(
                    m.shape,
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                )?),
                "f64" => EntryData::F64(Tensor::new(
                    m.shape,
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect(),
                )?),
                _ => EntryData::U32 {
                    shape: m.shape,
                    data: raw
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                },
            };
            expected_offset += m.length;
            entries.push(Entry { name: m.name, data });
        }
        if expected_offset as usize != payload.len() {
            return Err(bad(format!(
                "payload is {} bytes, manifest describes {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self {
            magic,
            meta: manifest.meta,
            entries,
        })
    }

    /// Writes to a temporary file in the target directory, then renames it into place.
    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn read(path: &Path, expected_magic: [u8; 4]) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::storage(path, e))?;
        Self::from_bytes(&bytes, expected_magic, path)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::storage(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::storage(path, e))?;
    tmp.as_file()
        .sync_all()
        .map_err(|e| Error::storage(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::storage(path, e.error))?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct WeightsMeta {
    config: ModelConfig,
}

pub fn weights_to_container(w: &ModelWeights<f32>, cfg: &ModelConfig) -> Result<Container> {
    w.validate(cfg)?;
    let meta = serde_json::to_value(WeightsMeta {
        config: cfg.clone(),
    })?;
    let mut c = Container::new(WEIGHTS_MAGIC, meta);
    for (name, t) in w.named_tensors(cfg) {
        c.push(name, EntryData::F32(t.clone()));
    }
    Ok(c)
}

pub fn save_weights(
    path: impl AsRef<Path>,
    w: &ModelWeights<f32>,
    cfg: &ModelConfig,
) -> Result<()> {
    weights_to_container(w, cfg)?.write(path.as_ref())
}

/// Loads a `VITW` file and validates every tensor against the embedded config.
pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelWeights<f32>, ModelConfig)> {
    let path = path.as_ref();
    let c = Container::read(path, WEIGHTS_MAGIC)?;
    let meta: WeightsMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::corrupt(path, format!("weights manifest lacks a config: {e}")))?;
    let cfg = meta.config;
    cfg.validate()?;
    let layout = param_layout(&cfg);
    if layout.len() != c.entries.len() {
        return Err(Error::corrupt(
            path,
            format!(
                "{} tensors stored, config needs {}",
                c.entries.len(),
                layout.len()
            ),
        ));
    }
    let mut by_name: BTreeMap<&str, &EntryData> = c
        .entries
        .iter()
        .map(|e| (e.name.as_str(), &e.data))
        .collect();
    let mut failure = None;
    let w = ModelWeights::build(&cfg, |name, shape, _| {
        match by_name.remove(name) {
            Some(EntryData::F32(t)) if t.shape() == shape => return t.clone(),
            Some(EntryData::F32(t)) => {
                failure.get_or_insert(format!("{name}: shape {:?}, expected {shape:?}", t.shape()))
            }
            Some(_) => failure.get_or_insert(format!("{name}: expected f32 data")),
            None => failure.get_or_insert(format!("missing tensor {name}")),
        };
        Tensor::zeros(shape)
    });
    if let Some(reason) = failure {
        return Err(Error::corrupt(path, reason));
    }
    w.validate(&cfg)?;
    Ok((w, cfg))
}

/// Truncated normal at ±2 standard deviations, keyed by `(seed, name)`.
pub fn truncated_normal(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<f32> {
    let mut rng = keyed_rng(seed, &format!("init/{name}"), 0);
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let z: f64 = StandardNormal.sample(&mut rng);
        if z.abs() <= 2.0 {
            data.push((z * std) as f32);
        }
    }
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Deterministic stand-in for pretrained weights: truncated normals for
/// weights and embeddings, zeros for biases and betas, ones for gammas.
pub fn init_toy(cfg: &ModelConfig, seed: u64) -> ModelWeights<f32> {
    ModelWeights::build(cfg, |name, shape, role| match role {
        ParamRole::Weight => truncated_normal(seed, name, shape, INIT_STD),
        ParamRole::Bias | ParamRole::Beta => Tensor::zeros(shape),
        ParamRole::Gamma => Tensor::full(shape, 1.0),
    })
}

fn tap_key(tap: &TapId) -> String {
    format!("{}.{}", tap.block, tap.module)
}

#[derive(Serialize, Deserialize)]
struct FeaturesMeta {
    kind: String,
    num_classes: usize,
    taps: Vec<TapId>,
    #[serde(default)]
    source: serde_json::Value,
}

pub fn save_features(
    path: impl AsRef<Path>,
    set: &FeatureSet,
    source: serde_json::Value,
) -> Result<()> {
    let meta = serde_json::to_value(FeaturesMeta {
        kind: "features".into(),
        num_classes: set.num_classes,
        taps: set.features.keys().copied().collect(),
        source,
    })?;
    let mut c = Container::new(FEATURES_MAGIC, meta);
    c.push(
        "labels",
        EntryData::U32 {
            shape: vec![set.labels.len()],
            data: set.labels.iter().map(|&l| l as u32).collect(),
        },
    );
    for (tap, feats) in &set.features {
        c.push(
            format!("features.{}", tap_key(tap)),
            EntryData::F32(feats.clone()),
        );
    }
    c.write(path.as_ref())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let c = Container::read(path, FEATURES_MAGIC)?;
    let meta: FeaturesMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::corrupt(path, format!("bad feature manifest: {e}")))?;
    if meta.kind != "features" {
        return Err(Error::corrupt(
            path,
            format!("container holds {:?}, not features", meta.kind),
        ));
    }
    let labels = match c.get("labels") {
        Some(EntryData::U32 { data, .. }) => data.iter().map(|&l| l as usize).collect::<Vec<_>>(),
        _ => return Err(Error::corrupt(path, "missing labels")),
    };
    let mut features = BTreeMap::new();
    for tap in meta.taps {
        match c.get(&format!("features.{}", tap_key(&tap))) {
            Some(EntryData::F32(t)) if t.rows() == labels.len() => {
                features.insert(tap, t.clone());
            }
            _ => {
                return Err(Error::corrupt(
                    path,
                    format!("missing or malformed features for {tap}"),
                ))
            }
        }
    }
    FeatureSet::new(features, labels, meta.num_classes)
}

#[derive(Serialize, Deserialize)]
struct ProbeMeta {
    tap: Option<TapId>,
    num_classes: usize,
    fit: FitMeta,
}

#[derive(Serialize, Deserialize)]
struct ProbesMeta {
    kind: String,
    probes: Vec<ProbeMeta>,
}

pub fn save_probes(path: impl AsRef<Path>, probes: &[ProbeModel]) -> Result<()> {
    let meta = serde_json::to_value(ProbesMeta {
        kind: "probes".into(),
        probes: probes
            .iter()
            .map(|p| ProbeMeta {
                tap: p.tap,
                num_classes: p.num_classes(),
                fit: p.meta.clone(),
            })
            .collect(),
    })?;
    let mut c = Container::new(FEATURES_MAGIC, meta);
    for (i, p) in probes.iter().enumerate() {
        let d = p.weight.shape()[0];
        c.push(
            format!("probe.{i}.weight"),
            EntryData::F64(p.weight.clone()),
        );
        c.push(
            format!("probe.{i}.bias"),
            EntryData::F64(Tensor::new(vec![p.bias.len()], p.bias.clone())?),
        );
        c.push(
            format!("probe.{i}.mean"),
            EntryData::F64(Tensor::new(vec![d], p.standardizer.mean.clone())?),
        );
        c.push(
            format!("probe.{i}.std"),
            EntryData::F64(Tensor::new(vec![d], p.standardizer.std.clone())?),
        );
    }
    c.write(path.as_ref())
}

pub fn load_probes(path: impl AsRef<Path>) -> Result<Vec<ProbeModel>> {
    let path = path.as_ref();
    let c = Container::read(path, FEATURES_MAGIC)?;
    let meta: ProbesMeta = serde_json::from_value(c.meta.clone())
        .map_err(|e| Error::corrupt(path, format!("bad probe manifest: {e}")))?;
    if meta.kind != "probes" {
        return Err(Error::corrupt(
            path,
            format!("container holds {:?}, not probes", meta.kind),
        ));
    }
    let get = |name: String| match c.get(&name) {
        Some(EntryData::F64(t)) => Ok(t.clone()),
        _ => Err(Error::corrupt(path, format!("missing {name}"))),
    };
    meta.probes
        .into_iter()
        .enumerate()
        .map(|(i, m)| {
            let weight = get(format!("probe.{i}.weight"))?;
            let bias = get(format!("probe.{i}.bias"))?.into_data();
            let mean = get(format!("probe.{i}.mean"))?.into_data();
            let std = get(format!("probe.{i}.std"))?.into_data();
            if weight.shape() != [mean.len(), m.num_classes]
                || bias.len() != m.num_classes
                || std.len() != mean.len()
            {
                return Err(Error::corrupt(
                    path,
                    format!("probe {i}: inconsistent shapes"),
                ));
            }
            Ok(ProbeModel {
                weight,
                bias,
                standardizer: Standardizer { mean, std },
                tap: m.tap,
                meta: m.fit,
            })
        })
        .collect()
}
