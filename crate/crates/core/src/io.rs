//! Binary tensor files and parameter directories.
//!
//! A tensor file is a 24-byte header followed by the values in little-endian
//! order:
//!
//! ```text
//! 0..4    magic "SPGT"
//! 4       dtype code (1 = f32, 2 = f64)
//! 5..8    reserved, zero
//! 8..24   N, C, H, W as u32 little-endian
//! ```
//!
//! A parameter directory holds `manifest.json` plus one `<name>.spgt` per
//! tensor. Pyramids keep one such directory per level next to a
//! `pyramid.json` index.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layer::{AttentionMode, SpyGRParams};
use crate::pyramid::PyramidConfig;
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"SPGT";
pub const HEADER_BYTES: usize = 24;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PYRAMID_FILE: &str = "pyramid.json";

pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut header = [0u8; HEADER_BYTES];
    header[..4].copy_from_slice(MAGIC);
    header[4] = T::DTYPE.code();
    for (i, &e) in t.shape().0.iter().enumerate() {
        let e = u32::try_from(e)
            .map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
        header[8 + 4 * i..12 + 4 * i].copy_from_slice(&e.to_le_bytes());
    }
    out.write_all(&header)?;
    let mut buf = Vec::with_capacity(t.numel() * T::DTYPE.size_of());
    for v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads the header only.
pub fn read_header<R: Read>(input: &mut R) -> Result<(DType, Shape)> {
    let mut header = [0u8; HEADER_BYTES];
    input.read_exact(&mut header)?;
    if &header[..4] != MAGIC {
        return Err(Error::Format("bad magic, not a tensor file".into()));
    }
    let dtype = DType::from_code(header[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", header[4])))?;
    let mut ext = [0usize; 4];
    for (i, e) in ext.iter_mut().enumerate() {
        let bytes: [u8; 4] = header[8 + 4 * i..12 + 4 * i].try_into().expect("4 bytes");
        *e = u32::from_le_bytes(bytes) as usize;
    }
    Ok((dtype, Shape(ext)))
}

/// Reads a tensor stored with element type `T`; a different stored dtype is
/// an error rather than a silent conversion.
pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let (dtype, shape) = read_header(input)?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!(
            "file holds {dtype} values, expected {}",
            T::DTYPE
        )));
    }
    let size = dtype.size_of();
    let mut raw = vec![0u8; shape.numel() * size];
    input.read_exact(&mut raw)?;
    let data = raw.chunks_exact(size).map(T::read_le).collect();
    Tensor::from_vec(shape, data)
}

pub fn save_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    read_tensor(&mut BufReader::new(fs::File::open(path)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub role: String,
    pub shape: [usize; 4],
    pub dtype: DType,
    pub file: String,
}

/// `manifest.json` of a tensor directory. `meta` carries owner-specific
/// settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// A tensor with the name and role recorded in a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub role: String,
    pub tensor: Tensor<T>,
}

impl<T> NamedTensor<T> {
    pub fn new(name: impl Into<String>, role: impl Into<String>, tensor: Tensor<T>) -> Self {
        NamedTensor {
            name: name.into(),
            role: role.into(),
            tensor,
        }
    }
}

fn check_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
        && !name.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Format(format!("tensor name {name:?} is not a safe file stem")))
    }
}

/// Writes `tensors` and their manifest into `dir`, creating it if needed.
pub fn write_tensor_dir<T: Scalar>(
    dir: impl AsRef<Path>,
    kind: &str,
    tensors: &[NamedTensor<T>],
    meta: serde_json::Value,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(tensors.len());
    for t in tensors {
        check_name(&t.name)?;
        let file = format!("{}.spgt", t.name);
        save_tensor(dir.join(&file), &t.tensor)?;
        entries.push(TensorEntry {
            name: t.name.clone(),
            role: t.role.clone(),
            shape: t.tensor.shape().0,
            dtype: T::DTYPE,
            file,
        });
    }
    let manifest = Manifest {
        kind: kind.to_string(),
        tensors: entries,
        meta,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a tensor directory, checking each file against its manifest entry.
pub fn read_tensor_dir<T: Scalar>(
    dir: impl AsRef<Path>,
) -> Result<(Manifest, Vec<NamedTensor<T>>)> {
    let dir = dir.as_ref();
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    let mut out = Vec::with_capacity(manifest.tensors.len());
    for e in &manifest.tensors {
        check_name(&e.name)?;
        let t: Tensor<T> = load_tensor(dir.join(&e.file))?;
        if t.shape().0 != e.shape {
            return Err(Error::Format(format!(
                "{} has shape {} but the manifest says {:?}",
                e.file,
                t.shape(),
                e.shape
            )));
        }
        out.push(NamedTensor::new(&e.name, &e.role, t));
    }
    Ok((manifest, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    attention_mode: AttentionMode,
    include_identity: bool,
    epsilon: f64,
}

fn role_of(name: &str) -> &'static str {
    match name {
        "w_phi" => "embedding",
        "w_rho" => "attention",
        "theta" => "output-transform",
        "static_lambda" => "static-attention",
        _ => "other",
    }
}

pub fn save_params<T: Scalar>(dir: impl AsRef<Path>, params: &SpyGRParams<T>) -> Result<()> {
    params.validate()?;
    let tensors: Vec<_> = params
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor::new(name, role_of(name), t.clone()))
        .collect();
    let meta = LayerMeta {
        attention_mode: params.attention_mode,
        include_identity: params.include_identity,
        epsilon: params.epsilon,
    };
    write_tensor_dir(dir, "spygr-layer", &tensors, serde_json::to_value(meta)?)
}

pub fn load_params<T: Scalar>(dir: impl AsRef<Path>) -> Result<SpyGRParams<T>> {
    let (manifest, tensors) = read_tensor_dir::<T>(dir)?;
    if manifest.kind != "spygr-layer" {
        return Err(Error::Format(format!(
            "expected a spygr-layer manifest, found {:?}",
            manifest.kind
        )));
    }
    let meta: LayerMeta = serde_json::from_value(manifest.meta)?;
    let take = |name: &str| {
        tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| t.tensor.clone())
    };
    let missing = |name: &str| Error::Format(format!("manifest has no {name} tensor"));
    let params = SpyGRParams {
        w_phi: take("w_phi").ok_or_else(|| missing("w_phi"))?,
        w_rho: take("w_rho").ok_or_else(|| missing("w_rho"))?,
        theta: take("theta").ok_or_else(|| missing("theta"))?,
        static_lambda: take("static_lambda"),
        attention_mode: meta.attention_mode,
        include_identity: meta.include_identity,
        epsilon: meta.epsilon,
    };
    params.validate()?;
    Ok(params)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PyramidIndex {
    levels: usize,
    share_weights: bool,
    level_dirs: Vec<String>,
}

fn level_dir(k: usize) -> String {
    format!("level{k}")
}

pub fn save_pyramid<T: Scalar>(dir: impl AsRef<Path>, config: &PyramidConfig<T>) -> Result<()> {
    config.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let level_dirs: Vec<String> = (0..config.params.len()).map(level_dir).collect();
    for (p, sub) in config.params.iter().zip(&level_dirs) {
        save_params(dir.join(sub), p)?;
    }
    let index = PyramidIndex {
        levels: config.levels,
        share_weights: config.share_weights,
        level_dirs,
    };
    fs::write(dir.join(PYRAMID_FILE), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_pyramid<T: Scalar>(dir: impl AsRef<Path>) -> Result<PyramidConfig<T>> {
    let dir = dir.as_ref();
    let index: PyramidIndex = serde_json::from_str(&fs::read_to_string(dir.join(PYRAMID_FILE))?)?;
    let params = index
        .level_dirs
        .iter()
        .map(|sub| {
            if Path::new(sub).components().count() != 1 || sub.starts_with('.') {
                return Err(Error::Format(format!("level directory {sub:?} must be a plain name")));
            }
            load_params(dir.join(sub))
        })
        .collect::<Result<Vec<_>>>()?;
    let config = PyramidConfig {
        levels: index.levels,
        params,
        share_weights: index.share_weights,
    };
    config.validate()?;
    Ok(config)
}

/// Path of a tensor file named `stem` inside `dir`.
pub fn tensor_path(dir: impl AsRef<Path>, stem: &str) -> PathBuf {
    dir.as_ref().join(format!("{stem}.spgt"))
}
