//! The `EMIM` checkpoint format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "EMIM"
//! u32 config_len | config_len bytes of key=value lines (the encoder config)
//! u32 tensor_count
//! per tensor: u32 name_len | name | u32 ndim | u32 dims[ndim] | f64 payload
//! ```
//!
//! Payloads are always stored as `f64`; loading validates every tensor's
//! shape against the config before accepting it.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::{ModelParams, TensorMut};
use super::{EncoderConfig, Precision, Scalar};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMIM";

fn config_to_text(config: &EncoderConfig) -> String {
    let (h, w, d) = config.dims;
    let (ph, pw, pd) = config.patch_size;
    format!(
        "model.num_modalities={}\nmodel.dim_h={h}\nmodel.dim_w={w}\nmodel.dim_d={d}\n\
         model.patch_h={ph}\nmodel.patch_w={pw}\nmodel.patch_d={pd}\n\
         model.depth={}\nmodel.embed_dim={}\nmodel.num_heads={}\nmodel.pyramid_levels={}\n\
         model.seed={}\nmodel.precision={}\n",
        config.num_modalities,
        config.depth,
        config.embed_dim,
        config.num_heads,
        config.pyramid_levels,
        config.seed,
        config.precision.name(),
    )
}

fn config_from_text(text: &str) -> Result<EncoderConfig> {
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint config line `{line}`")))?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<&String> {
        map.get(k)
            .ok_or_else(|| Error::Config(format!("checkpoint config missing `{k}`")))
    };
    let int = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Config(format!("checkpoint config `{k}` is not an integer")))
    };
    Ok(EncoderConfig {
        num_modalities: int("model.num_modalities")?,
        dims: (int("model.dim_h")?, int("model.dim_w")?, int("model.dim_d")?),
        patch_size: (int("model.patch_h")?, int("model.patch_w")?, int("model.patch_d")?),
        depth: int("model.depth")?,
        embed_dim: int("model.embed_dim")?,
        num_heads: int("model.num_heads")?,
        pyramid_levels: int("model.pyramid_levels")?,
        seed: get("model.seed")?
            .parse()
            .map_err(|_| Error::Config("checkpoint config `model.seed` is not an integer".into()))?,
        precision: Precision::parse(get("model.precision")?)?,
    })
}

/// Writes `params` (converted to `f64`) plus the config.
pub fn save_checkpoint<S: Scalar>(
    params: &ModelParams<S>,
    config: &EncoderConfig,
    path: &Path,
) -> Result<()> {
    let params = params.to_f64();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    let text = config_to_text(config);
    bytes.extend_from_slice(&(text.len() as u32).to_le_bytes());
    bytes.extend_from_slice(text.as_bytes());
    let named = params.named();
    bytes.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, tensor) in named {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        let shape = tensor.shape();
        bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for dim in &shape {
            bytes.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        for v in tensor.as_slice() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    at: usize,
    path: std::path::PathBuf,
}

impl Reader {
    fn take(&mut self, len: usize) -> Result<&[u8]> {
        if self.at + len > self.bytes.len() {
            return Err(Error::TruncatedPayload {
                path: self.path.clone(),
                expected: (self.at + len) as u64,
                found: self.bytes.len() as u64,
            });
        }
        let slice = &self.bytes[self.at..self.at + len];
        self.at += len;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Reads a checkpoint; every tensor must exist with the exact shape the
/// config implies.
pub fn load_checkpoint(path: &Path) -> Result<(EncoderConfig, ModelParams<f64>)> {
    let mut file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut r = Reader {
        bytes,
        at: 0,
        path: path.to_path_buf(),
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "EMIM",
        });
    }
    let config_len = r.u32()? as usize;
    let text = String::from_utf8(r.take(config_len)?.to_vec())
        .map_err(|_| Error::Config("checkpoint config block is not UTF-8".into()))?;
    let config = config_from_text(&text)?;

    let mut params = ModelParams::<f64>::init(&config)?;
    let mut loaded: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    let tensor_count = r.u32()? as usize;
    for _ in 0..tensor_count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Config("checkpoint tensor name is not UTF-8".into()))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut values = Vec::with_capacity(len);
        for _ in 0..len {
            values.push(r.f64()?);
        }
        loaded.insert(name, (shape, values));
    }

    for (name, mut tensor) in params.named_mut() {
        let (shape, values) = loaded.remove(&name).ok_or_else(|| {
            Error::ShapeMismatch(format!("checkpoint missing tensor `{name}`"))
        })?;
        let expected: Vec<usize> = match &tensor {
            TensorMut::V(a) => vec![a.len()],
            TensorMut::M(a) => a.shape().to_vec(),
        };
        if shape != expected {
            return Err(Error::ShapeMismatch(format!(
                "tensor `{name}` has shape {shape:?}, config implies {expected:?}"
            )));
        }
        tensor.as_mut_slice().copy_from_slice(&values);
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::ShapeMismatch(format!(
            "checkpoint has unexpected tensor `{extra}`"
        )));
    }
    Ok((config, params))
}
