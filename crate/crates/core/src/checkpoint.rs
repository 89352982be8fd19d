//! Versioned archive of named little-endian arrays with a JSON header.
//!
//! Layout: magic `SSWPARCH`, format version (`u32`), header length (`u32`)
//! and UTF-8 JSON header, entry count (`u32`), then per entry: name length
//! (`u32`), name, dtype code (`u8`), rank (`u32`), dims (`u64` each) and the
//! raw data.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use styleswap_autograd::{DType, ParamStore, Scalar, Tensor};

use crate::error::{io_err, Error, Result};
use crate::networks::{GeneratorConfig, Model, ModelConfig};

pub const MAGIC: &[u8; 8] = b"SSWPARCH";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl Array {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested scalar type.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        match self {
            Self::F32(t) => t.cast(),
            Self::F64(t) => t.cast(),
        }
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => Self::F32(t.cast()),
            DType::F64 => Self::F64(t.cast()),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Archive {
    pub header: serde_json::Value,
    pub entries: Vec<(String, Array)>,
}

impl Archive {
    pub fn new(header: &impl Serialize) -> Result<Self> {
        Ok(Self {
            header: serde_json::to_value(header)?,
            entries: Vec::new(),
        })
    }

    pub fn header_as<H: DeserializeOwned>(&self) -> Result<H> {
        Ok(serde_json::from_value(self.header.clone())?)
    }

    pub fn push<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.entries.push((name.into(), Array::from_tensor(t)));
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(Array::to_tensor)
            .ok_or_else(|| Error::Config(format!("archive has no entry `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let header = serde_json::to_vec(&self.header)?;
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, array) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (code, shape) = match array {
                Array::F32(t) => (DType::F32.code(), t.shape()),
                Array::F64(t) => (DType::F64.code(), t.shape()),
            };
            out.push(code);
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match array {
                Array::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                Array::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| "truncated magic")?;
        if &magic != MAGIC {
            return Err("not a styleswap archive".into());
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(format!("unsupported format version {version} (expected {FORMAT_VERSION})"));
        }
        let header_len = read_u32(&mut r)? as usize;
        let header_bytes = take(&mut r, header_len)?;
        let header = serde_json::from_slice(header_bytes).map_err(|e| format!("bad header: {e}"))?;
        let count = read_u32(&mut r)?;
        let mut entries = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = std::str::from_utf8(take(&mut r, name_len)?)
                .map_err(|_| "entry name is not UTF-8")?
                .to_string();
            let code = take(&mut r, 1)?[0];
            let dtype = DType::from_code(code).ok_or_else(|| format!("unknown dtype code {code} in `{name}`"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = u64::from_le_bytes(take(&mut r, 8)?.try_into().expect("8 bytes"));
                shape.push(usize::try_from(d).map_err(|_| "dimension overflow")?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or("element count overflow")?;
            let raw = take(&mut r, numel.checked_mul(dtype.size()).ok_or("size overflow")?)?;
            let array = match dtype {
                DType::F32 => Array::F32(
                    Tensor::new(
                        &shape,
                        raw.chunks_exact(4)
                            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                            .collect(),
                    )
                    .map_err(|e| e.to_string())?,
                ),
                DType::F64 => Array::F64(
                    Tensor::new(
                        &shape,
                        raw.chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect(),
                    )
                    .map_err(|e| e.to_string())?,
                ),
            };
            entries.push((name, array));
        }
        if !r.is_empty() {
            return Err(format!("{} trailing bytes", r.len()));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(&bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
        fs::rename(&tmp, path).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes).map_err(|reason| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        })
    }
}

/// Adds every parameter of `store` as `prefix/name`.
pub fn push_store<T: Scalar>(archive: &mut Archive, prefix: &str, store: &ParamStore<T>) {
    for p in store.params() {
        archive.push(format!("{prefix}/{}", p.name), &p.value);
    }
}

/// Overwrites the parameters of `store` from `prefix/name` entries.
pub fn load_store<T: Scalar>(archive: &Archive, prefix: &str, store: &mut ParamStore<T>) -> Result<()> {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = format!("{prefix}/{}", store.params()[id.index()].name);
        let t = archive.require::<T>(&name)?;
        if t.shape() != store.get(id).shape() {
            return Err(Error::Config(format!(
                "entry `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        *store.get_mut(id) = t;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: String,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    /// Whether the mask branch was trained and should be used at inference.
    pub mask_enabled: bool,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn model_archive<T: Scalar>(model: &Model<T>, kind: &str, mask_enabled: bool, extra: serde_json::Value) -> Result<Archive> {
    let header = ModelHeader {
        kind: kind.to_string(),
        generator: model.config().generator.clone(),
        model: model.config().clone(),
        mask_enabled,
        extra,
    };
    let mut a = Archive::new(&header)?;
    for (prefix, store) in model.params.stores() {
        push_store(&mut a, prefix, store);
    }
    Ok(a)
}

/// Rebuilds a model from an archive written by [`model_archive`].
pub fn model_from_archive<T: Scalar>(archive: &Archive) -> Result<(Model<T>, ModelHeader)> {
    let header: ModelHeader = archive.header_as()?;
    let mut model = Model::<T>::new(header.model.clone(), &mut ChaCha8Rng::seed_from_u64(0))?;
    for (prefix, store) in model.params.stores_mut() {
        load_store(archive, prefix, store)?;
    }
    Ok((model, header))
}

fn read_u32(r: &mut &[u8]) -> std::result::Result<u32, String> {
    Ok(u32::from_le_bytes(take(r, 4)?.try_into().expect("4 bytes")))
}

fn take<'a>(r: &mut &'a [u8], n: usize) -> std::result::Result<&'a [u8], String> {
    if r.len() < n {
        return Err("unexpected end of archive".into());
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}
