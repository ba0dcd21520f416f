//! Named-tensor archives.
//!
//! The on-disk layout is the safetensors one: an 8-byte little-endian header
//! length, a JSON header mapping names to dtype, shape and byte offsets, then
//! the raw little-endian data. Encoder tensors use the timm ViT names and
//! shapes, so a timm checkpoint loads directly.

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;

const METADATA_KEY: &str = "__metadata__";
const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }
}

#[derive(Serialize, Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Ordered tensors plus string metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub tensors: IndexMap<String, Tensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Archive {
    pub fn to_bytes(&self, dtype: DType) -> Result<Vec<u8>> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            header.insert(
                METADATA_KEY.into(),
                serde_json::to_value(&self.metadata).expect("string map"),
            );
        }
        let mut offset = 0;
        for (name, t) in &self.tensors {
            let len = t.data.len() * dtype.size();
            let entry = HeaderEntry {
                dtype: format!("{dtype:?}"),
                shape: t.shape.clone(),
                data_offsets: [offset, offset + len],
            };
            header.insert(name.clone(), serde_json::to_value(entry).expect("entry"));
            offset += len;
        }
        let mut head = serde_json::to_vec(&header).expect("header");
        while !head.len().is_multiple_of(8) {
            head.push(b' ');
        }
        let mut out = Vec::with_capacity(8 + head.len() + offset);
        out.extend_from_slice(&(head.len() as u64).to_le_bytes());
        out.extend_from_slice(&head);
        for t in self.tensors.values() {
            for &v in &t.data {
                match dtype {
                    DType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    DType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 8 {
            return Err(bad("file too short"));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let body_start = 8usize
            .checked_add(n)
            .ok_or_else(|| bad("bad header length"))?;
        if body_start > bytes.len() {
            return Err(bad("header length exceeds file size"));
        }
        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&bytes[8..body_start])
                .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let body = &bytes[body_start..];
        let mut archive = Archive::default();
        let mut entries: Vec<(String, HeaderEntry)> = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                archive.metadata = serde_json::from_value(value)
                    .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
                continue;
            }
            let entry: HeaderEntry = serde_json::from_value(value)
                .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
            entries.push((name, entry));
        }
        entries.sort_by_key(|(_, e)| e.data_offsets[0]);
        for (name, e) in entries {
            let dtype = match e.dtype.as_str() {
                "F32" => DType::F32,
                "F64" => DType::F64,
                other => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: unsupported dtype {other}"
                    )))
                }
            };
            let [start, end] = e.data_offsets;
            let count: usize = e.shape.iter().product();
            if end < start || end > body.len() || end - start != count * dtype.size() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: bad data offsets"
                )));
            }
            let raw = &body[start..end];
            let data = match dtype {
                DType::F32 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                DType::F64 => raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            };
            archive.tensors.insert(
                name,
                Tensor {
                    shape: e.shape,
                    data,
                },
            );
        }
        Ok(archive)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes(dtype)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

/// Disk shape of an internal `rows x cols` parameter.
pub fn disk_shape(name: &str, rows: usize, cols: usize, cfg: &EncoderConfig) -> Vec<usize> {
    let base = name
        .strip_prefix(OPTIM_M)
        .or_else(|| name.strip_prefix(OPTIM_V))
        .unwrap_or(name);
    match base {
        "cls_token" | "pos_embed" => vec![1, rows, cols],
        "patch_embed.proj.weight" => vec![rows, cfg.channels, cfg.patch_size, cfg.patch_size],
        _ if base.ends_with(".bias") || is_norm_scale(base) => vec![cols],
        _ => vec![rows, cols],
    }
}

fn is_norm_scale(name: &str) -> bool {
    name == "norm.weight" || name.ends_with("norm1.weight") || name.ends_with("norm2.weight")
}

/// Internal layout to disk layout. The patch projection goes from
/// `D x (p*p*C)` in `(dy, dx, c)` order to `[D, C, p, p]`.
fn to_disk(name: &str, m: &Mat, cfg: &EncoderConfig) -> Tensor {
    let shape = disk_shape(name, m.nrows(), m.ncols(), cfg);
    let data = if shape.len() == 4 {
        let (d, c, p) = (shape[0], shape[1], shape[2]);
        let mut out = vec![0.0; m.len()];
        for o in 0..d {
            for ch in 0..c {
                for dy in 0..p {
                    for dx in 0..p {
                        out[((o * c + ch) * p + dy) * p + dx] = m[[o, (dy * p + dx) * c + ch]];
                    }
                }
            }
        }
        out
    } else {
        m.iter().copied().collect()
    };
    Tensor { shape, data }
}

fn from_disk(name: &str, t: &Tensor, rows: usize, cols: usize, cfg: &EncoderConfig) -> Result<Mat> {
    let want = disk_shape(name, rows, cols, cfg);
    if t.shape != want {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {:?}, expected {want:?}",
            t.shape
        )));
    }
    if want.len() == 4 {
        let (c, p) = (want[1], want[2]);
        Ok(Mat::from_shape_fn((rows, cols), |(o, j)| {
            let (pix, ch) = (j / c, j % c);
            let (dy, dx) = (pix / p, pix % p);
            t.data[((o * c + ch) * p + dy) * p + dx]
        }))
    } else {
        Ok(Mat::from_shape_vec((rows, cols), t.data.clone()).expect("checked shape"))
    }
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: ParamStore,
    pub v: ParamStore,
}

/// A model together with optional training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    /// Epochs completed when this was written.
    pub epoch: usize,
    pub extra: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            epoch: 0,
            extra: BTreeMap::new(),
        }
    }

    pub fn to_archive(&self) -> Archive {
        let cfg = self.model.config();
        let mut a = Archive::default();
        for (name, m) in self.model.params().iter() {
            a.tensors
                .insert(name.to_string(), to_disk(name, m, &cfg.encoder));
        }
        if let Some(opt) = &self.optimizer {
            for (prefix, store) in [(OPTIM_M, &opt.m), (OPTIM_V, &opt.v)] {
                for (name, m) in store.iter() {
                    let key = format!("{prefix}{name}");
                    let t = to_disk(&key, m, &cfg.encoder);
                    a.tensors.insert(key, t);
                }
            }
            a.metadata.insert("optim_step".into(), opt.step.to_string());
        }
        a.metadata = a.metadata.into_iter().chain(self.extra.clone()).collect();
        a.metadata
            .insert("format_version".into(), FORMAT_VERSION.to_string());
        a.metadata.insert(
            "model_config".into(),
            serde_json::to_string(cfg).expect("config serializes"),
        );
        a.metadata.insert("epoch".into(), self.epoch.to_string());
        a
    }

    pub fn from_archive(mut a: Archive) -> Result<Self> {
        let version: u32 = meta(&a, "format_version")?
            .parse()
            .map_err(|_| Error::Checkpoint("format_version is not a number".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let config: ModelConfig = serde_json::from_str(meta(&a, "model_config")?)
            .map_err(|e| Error::Checkpoint(format!("model_config: {e}")))?;
        let epoch = meta(&a, "epoch")?
            .parse()
            .map_err(|_| Error::Checkpoint("epoch is not a number".into()))?;
        let shapes = config.parameter_shapes();
        let params = read_params(&a.tensors, "", &shapes, &config.encoder)?;
        let optimizer = match a.metadata.get("optim_step") {
            None => None,
            Some(step) => Some(OptimizerState {
                step: step
                    .parse()
                    .map_err(|_| Error::Checkpoint("optim_step is not a number".into()))?,
                m: read_params(&a.tensors, OPTIM_M, &shapes, &config.encoder)?,
                v: read_params(&a.tensors, OPTIM_V, &shapes, &config.encoder)?,
            }),
        };
        for k in ["format_version", "model_config", "epoch", "optim_step"] {
            a.metadata.remove(k);
        }
        Ok(Checkpoint {
            model: Model::from_params(config, params)?,
            optimizer,
            epoch,
            extra: a.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive().save(path, DType::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_archive(Archive::load(path)?)
    }
}

fn meta<'a>(a: &'a Archive, key: &str) -> Result<&'a str> {
    a.metadata
        .get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing metadata {key}")))
}

fn read_params(
    tensors: &IndexMap<String, Tensor>,
    prefix: &str,
    shapes: &[(String, usize, usize)],
    cfg: &EncoderConfig,
) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (name, rows, cols) in shapes {
        let key = format!("{prefix}{name}");
        let t = tensors
            .get(&key)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
        store.insert(name.clone(), from_disk(&key, t, *rows, *cols, cfg)?);
    }
    Ok(store)
}

/// Replaces the encoder tensors of `params` with those in a pretrained
/// archive. Classifier-head tensors (`head.*`) and unrelated entries are
/// ignored. Returns the names that were loaded.
pub fn load_pretrained(
    archive: &Archive,
    cfg: &EncoderConfig,
    params: &mut ParamStore,
) -> Result<Vec<String>> {
    let mut loaded = Vec::new();
    for (name, rows, cols) in cfg.parameter_shapes() {
        let t = archive
            .tensors
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("pretrained weights lack tensor {name}")))?;
        let m = from_disk(&name, t, rows, cols, cfg)?;
        params.insert(name.clone(), m);
        loaded.push(name);
    }
    Ok(loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        let mut c = ModelConfig::toy();
        c.encoder.embed_dim = 8;
        c.encoder.heads = 2;
        c.encoder.depth = 1;
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Model::random(tiny(), 3).unwrap();
        let mut ck = Checkpoint::new(model.clone());
        ck.epoch = 4;
        ck.extra.insert("seed".into(), "9".into());
        ck.optimizer = Some(OptimizerState {
            step: 17,
            m: model.params().clone(),
            v: model.params().zeros_like(),
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.safetensors");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn timm_shapes_on_disk() {
        let cfg = tiny();
        let a = Checkpoint::new(Model::random(cfg, 1).unwrap()).to_archive();
        assert_eq!(a.tensors["cls_token"].shape, vec![1, 1, 8]);
        assert_eq!(a.tensors["pos_embed"].shape, vec![1, 17, 8]);
        assert_eq!(
            a.tensors["patch_embed.proj.weight"].shape,
            vec![8, 3, 16, 16]
        );
        assert_eq!(a.tensors["blocks.0.attn.qkv.weight"].shape, vec![24, 8]);
        assert_eq!(a.tensors["blocks.0.norm1.bias"].shape, vec![8]);
        assert_eq!(a.tensors["micm.fc2.weight"].shape, vec![2, 4]);
        assert_eq!(a.metadata["format_version"], "1");
    }

    #[test]
    fn patch_projection_permutation() {
        let cfg = tiny().encoder;
        let m = Mat::from_shape_fn((8, 768), |(o, j)| (o * 1000 + j) as f64);
        let t = to_disk("patch_embed.proj.weight", &m, &cfg);
        // [o, c, dy, dx] = internal column (dy*16 + dx)*3 + c
        let (o, c, dy, dx) = (5, 2, 7, 11);
        let flat = ((o * 3 + c) * 16 + dy) * 16 + dx;
        assert_eq!(t.data[flat], (o * 1000 + (dy * 16 + dx) * 3 + c) as f64);
        let back = from_disk("patch_embed.proj.weight", &t, 8, 768, &cfg).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn pretrained_ignores_head_and_names_missing() {
        let cfg = tiny();
        let model = Model::random(cfg, 1).unwrap();
        let mut a = Checkpoint::new(model.clone()).to_archive();
        a.tensors.insert(
            "head.weight".into(),
            Tensor::new(vec![1000, 8], vec![0.0; 8000]).unwrap(),
        );
        let mut params = Model::random(cfg, 2).unwrap().params().clone();
        let loaded = load_pretrained(&a, &cfg.encoder, &mut params).unwrap();
        assert_eq!(loaded.len(), cfg.encoder.parameter_shapes().len());
        assert_eq!(params.get("pos_embed"), model.params().get("pos_embed"));
        assert!(!params.contains("head.weight"));

        a.tensors.shift_remove("blocks.0.mlp.fc1.bias");
        let err = load_pretrained(&a, &cfg.encoder, &mut params).unwrap_err();
        assert!(err.to_string().contains("blocks.0.mlp.fc1.bias"), "{err}");

        let mut a = Checkpoint::new(model).to_archive();
        a.tensors["norm.weight"] = Tensor::new(vec![7], vec![0.0; 7]).unwrap();
        let err = load_pretrained(&a, &cfg.encoder, &mut params).unwrap_err();
        assert!(err.to_string().contains("norm.weight"), "{err}");
    }

    #[test]
    fn f32_archives_load() {
        let mut a = Archive::default();
        a.tensors
            .insert("x".into(), Tensor::new(vec![2], vec![0.5, -1.25]).unwrap());
        let back = Archive::from_bytes(&a.to_bytes(DType::F32).unwrap()).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn rejects_other_versions() {
        let mut a = Checkpoint::new(Model::random(tiny(), 1).unwrap()).to_archive();
        a.metadata.insert("format_version".into(), "99".into());
        assert!(Checkpoint::from_archive(a).is_err());
        assert!(Archive::from_bytes(&[1, 2, 3]).is_err());
    }
}
