//! Binary parameter container.
//!
//! Layout: the magic `MOLECKPT`, a `u32` format version, a `u64` header
//! length, a JSON header, then every tensor's values as little-endian `f64`
//! in header order. All integers are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use crate::error::{Error, Result};
use crate::layers::{init_params, Architecture, LayerParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MOLECKPT";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: Architecture,
    seed: u64,
    trained: Vec<bool>,
    /// Initialization seed of every layer, by module.
    layer_seeds: Vec<Vec<u64>>,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    module: usize,
    layer: usize,
    name: String,
    shape: Vec<usize>,
    /// Index of the first value in the blob.
    offset: usize,
}

pub fn encode(model: &Model) -> Vec<u8> {
    let mut entries = Vec::new();
    let mut blob = Vec::new();
    let mut offset = 0;
    for (m, layers) in model.params.iter().enumerate() {
        for (l, p) in layers.iter().enumerate() {
            for (name, t) in &p.tensors {
                entries.push(Entry {
                    module: m,
                    layer: l,
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.numel();
                for v in t.data() {
                    blob.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let header = Header {
        arch: model.arch.clone(),
        seed: model.seed,
        trained: model.trained.clone(),
        layer_seeds: model
            .params
            .iter()
            .map(|m| m.iter().map(|p| p.init_seed).collect())
            .collect(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blob.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blob);
    out
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Model> {
    let bad = |msg: String| Error::parse(path, None, msg);
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
    let body = &bytes[20..];
    let hlen = usize::try_from(hlen)
        .ok()
        .filter(|&h| h <= body.len())
        .ok_or_else(|| bad(format!("header length {hlen} exceeds file size")))?;
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("malformed header: {e}")))?;
    let blob = &body[hlen..];
    if blob.len() % 8 != 0 {
        return Err(bad(format!("value blob of {} bytes is not a whole number of f64", blob.len())));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();

    let arch = header.arch;
    if arch.modules.is_empty() || arch.modules.iter().any(|m| m.layers.is_empty()) {
        return Err(bad("architecture has an empty module".into()));
    }
    if header.trained.len() != arch.modules.len() {
        return Err(bad(format!(
            "{} training flags for {} modules",
            header.trained.len(),
            arch.modules.len()
        )));
    }
    let seeds_fit = header.layer_seeds.len() == arch.modules.len()
        && header.layer_seeds.iter().zip(&arch.modules).all(|(s, m)| s.len() == m.layers.len());
    if !seeds_fit {
        return Err(bad("layer seeds do not match the architecture".into()));
    }
    let mut found: BTreeMap<(usize, usize, String), Tensor> = BTreeMap::new();
    let mut expected_offset = 0;
    for e in header.tensors {
        let n: usize = e.shape.iter().product();
        if e.offset != expected_offset || e.offset + n > values.len() {
            return Err(bad(format!(
                "tensor {}/{}/{} at offset {} does not fit the value blob",
                e.module, e.layer, e.name, e.offset
            )));
        }
        expected_offset += n;
        let t = Tensor::new(e.shape, values[e.offset..e.offset + n].to_vec()).map_err(|err| bad(err.to_string()))?;
        if found.insert((e.module, e.layer, e.name.clone()), t).is_some() {
            return Err(bad(format!("duplicate tensor {}/{}/{}", e.module, e.layer, e.name)));
        }
    }
    if expected_offset != values.len() {
        return Err(bad(format!("{} trailing values", values.len() - expected_offset)));
    }

    let mut params = Vec::with_capacity(arch.modules.len());
    for (m, module) in arch.modules.iter().enumerate() {
        let mut layers = Vec::with_capacity(module.layers.len());
        for (l, spec) in module.layers.iter().enumerate() {
            let layout = init_params(spec, 0).map_err(|err| bad(format!("layer {m}/{l}: {err}")))?;
            let mut tensors = BTreeMap::new();
            for (name, template) in layout.tensors {
                let t = found
                    .remove(&(m, l, name.clone()))
                    .ok_or_else(|| bad(format!("missing tensor {m}/{l}/{name}")))?;
                if t.shape() != template.shape() {
                    return Err(bad(format!(
                        "tensor {m}/{l}/{name} has shape {:?}, expected {:?}",
                        t.shape(),
                        template.shape()
                    )));
                }
                tensors.insert(name, t);
            }
            layers.push(LayerParams {
                tensors,
                init_seed: header.layer_seeds[m][l],
            });
        }
        params.push(layers);
    }
    if let Some((m, l, name)) = found.into_keys().next() {
        return Err(bad(format!("unexpected tensor {m}/{l}/{name}")));
    }
    Ok(Model {
        arch,
        params,
        trained: header.trained,
        seed: header.seed,
    })
}

pub fn save(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
