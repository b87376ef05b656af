//! Binary checkpoint: magic, version, JSON model config, JSON metadata, then
//! named little-endian `f32` parameter blocks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EchoFormer, ModelConfig};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::pool::ByteReader;
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"MEF1";
const VERSION: u32 = 1;

/// Side information stored next to the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Pool file trained together with these weights.
    #[serde(default)]
    pub pool_path: Option<PathBuf>,
    /// Training-split normalization statistics per series id.
    #[serde(default)]
    pub normalizers: BTreeMap<String, Normalizer>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: EchoFormer<f32>,
    pub meta: CheckpointMeta,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format("value does not fit in 32 bits"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_blob(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    put_u32(out, bytes.len())?;
    out.extend_from_slice(bytes);
    Ok(())
}

fn get_u32(r: &mut ByteReader<'_>) -> Result<usize> {
    Ok(u32::from_le_bytes(r.array()?) as usize)
}

pub fn to_bytes<T: Scalar>(model: &EchoFormer<T>, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_blob(&mut out, &serde_json::to_vec(model.config())?)?;
    put_blob(&mut out, &serde_json::to_vec(meta)?)?;
    put_u32(&mut out, model.params().len())?;
    for (_, p) in model.params().iter() {
        put_blob(&mut out, p.name.as_bytes())?;
        put_u32(&mut out, p.value.ndim())?;
        for &dim in p.value.shape() {
            put_u32(&mut out, dim)?;
        }
        for v in p.value.data() {
            out.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("not a model checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let len = get_u32(&mut r)?;
    let config: ModelConfig = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
    let len = get_u32(&mut r)?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(format!("checkpoint metadata: {e}")))?;
    let mut model = EchoFormer::<f32>::new(config, 0)
        .map_err(|e| Error::format(format!("checkpoint config is invalid: {e}")))?;
    let count = get_u32(&mut r)?;
    if count != model.params().len() {
        return Err(Error::format(format!(
            "checkpoint holds {count} parameters, the model has {}",
            model.params().len()
        )));
    }
    for _ in 0..count {
        let len = get_u32(&mut r)?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("parameter name is not UTF-8"))?
            .to_string();
        let ndim = get_u32(&mut r)?;
        let shape = (0..ndim).map(|_| get_u32(&mut r)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params()
            .id(&name)
            .ok_or_else(|| Error::format(format!("unknown parameter {name}")))?;
        let param = model.params_mut().get_mut(id);
        if param.value.shape() != shape.as_slice() {
            return Err(Error::format(format!(
                "parameter {name} has shape {shape:?}, expected {:?}",
                param.value.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")))
            .collect();
        param.value = Tensor::new(shape, data)?;
    }
    if r.remaining() != 0 {
        return Err(Error::format("trailing bytes after the last parameter"));
    }
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint<T: Scalar>(
    model: &EchoFormer<T>,
    meta: &CheckpointMeta,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&to_bytes(model, meta)?)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}
